use tlsi_core::gradcheck::{run_gradcheck, GradcheckConfig};
use tlsi_core::graph::{Binary, OpKind, Unary};
use tlsi_core::model::Variant;

#[test]
fn every_variant_passes_gradcheck() {
    for variant in Variant::ALL {
        for seed in 0..3 {
            let report = run_gradcheck(&GradcheckConfig {
                seed,
                variant,
                ..Default::default()
            })
            .unwrap();
            for g in &report.groups {
                assert!(
                    g.passed,
                    "{variant} seed {seed}: group {} rel error {:.3e}",
                    g.group, g.rel_error
                );
                assert!(
                    g.analytic_norm > 1e-8,
                    "{variant}: group {} has no gradient",
                    g.group
                );
            }
        }
    }
}

#[test]
fn injected_sign_flip_is_caught() {
    for fault in [
        OpKind::Unary(Unary::Sigmoid),
        OpKind::Unary(Unary::Tanh),
        OpKind::Binary(Binary::Mul),
        OpKind::Softmax,
        OpKind::Dice,
        OpKind::MatMul,
        OpKind::LstmCell,
    ] {
        let report = run_gradcheck(&GradcheckConfig {
            fault: Some(fault),
            ..Default::default()
        })
        .unwrap();
        assert!(!report.passed(), "{fault:?} went unnoticed");
    }
}
