//! Long-term attention, fusion gate and prediction head.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tlsi_core::graph::DICE_EPS;
use tlsi_core::model::fusion::{final_interest, fuse, head_hidden, head_output, Activation};
use tlsi_core::model::longterm::{
    content_attention, long_term_interest, temporal_attention, LongTermWeights,
};
use tlsi_core::model::shortterm::short_term_interest;
use tlsi_core::model::{ModelConfig, TlsiModel, Variant};
use tlsi_core::{DenseArray, DiceStats, Graph};

const DB: usize = 4;

fn model(seed: u64) -> TlsiModel {
    let mut c = ModelConfig::new(Variant::Tlsi, 5, 3);
    c.item_dim = 2;
    c.category_dim = 2;
    c.hidden_dim = DB;
    c.mlp_hidden = 3;
    TlsiModel::new(c, seed).unwrap()
}

fn set(m: &mut TlsiModel, name: &str, mut f: impl FnMut(usize) -> f64) {
    let id = m.params.id(name).unwrap();
    for (k, v) in m.params.values_mut(id).iter_mut().enumerate() {
        *v = f(k);
    }
}

fn rows(rng: &mut ChaCha8Rng, n: usize, w: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..w).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

/// `(a^c, a^t, p_long)` for the given history.
fn long_term(
    m: &TlsiModel,
    hist: &[Vec<f64>],
    times: &[Vec<f64>],
    target: &[f64],
    target_time: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut g = Graph::new(&m.params);
    let h = g.input(DenseArray::from_rows(hist).unwrap());
    let t = g.input(DenseArray::from_rows(times).unwrap());
    let x = g.input_vector(target.to_vec());
    let z = g.input_vector(target_time.to_vec());
    let lt = long_term_interest(
        &mut g,
        h,
        t,
        x,
        z,
        m.ids.long.as_ref().unwrap(),
        LongTermWeights::Both,
    )
    .unwrap();
    let v = |n| g.value(n).values().to_vec();
    (
        v(lt.content.unwrap()),
        v(lt.temporal.unwrap()),
        v(lt.interest),
    )
}

/// Short-term pooling weights over hidden states `hs`.
fn short_pool(m: &TlsiModel, hs: &[Vec<f64>], target: &[f64]) -> Vec<f64> {
    let mut g = Graph::new(&m.params);
    let nodes: Vec<_> = hs.iter().map(|h| g.input_vector(h.clone())).collect();
    let x = g.input_vector(target.to_vec());
    let w = m.ids.short.as_ref().unwrap().w_pool.unwrap();
    let (a, _) = short_term_interest(&mut g, &nodes, x, w).unwrap();
    g.value(a).values().to_vec()
}

#[test]
fn single_behavior_is_doubled() {
    let m = model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rows(&mut rng, 1, DB);
    let z = rows(&mut rng, 1, 8);
    let (c, t, p) = long_term(&m, &x, &z, &[0.3; DB], &[0.2; 8]);
    assert_eq!((c, t), (vec![1.0], vec![1.0]));
    for j in 0..DB {
        assert!((p[j] - 2.0 * x[0][j]).abs() < 1e-15);
    }
}

#[test]
fn zero_weights_give_uniform_attention() {
    let mut m = model(2);
    set(&mut m, "long.W_c", |_| 0.0);
    set(&mut m, "long.W_t", |_| 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rows(&mut rng, 2, DB);
    let z = rows(&mut rng, 2, 8);
    let (c, t, p) = long_term(&m, &x, &z, &[0.5; DB], &[0.1; 8]);
    assert_eq!(c, vec![0.5, 0.5]);
    assert_eq!(t, vec![0.5, 0.5]);
    for j in 0..DB {
        assert!((p[j] - (x[0][j] + x[1][j])).abs() < 1e-15);
    }
}

#[test]
fn identical_history_or_times_give_uniform_weights() {
    let m = model(3);
    let x = vec![vec![0.2, -0.4, 0.1, 0.7]; 3];
    let z = vec![vec![0.3; 8]; 3];
    let (c, t, _) = long_term(&m, &x, &z, &[0.9, 0.1, -0.3, 0.2], &[0.6; 8]);
    for w in c.iter().chain(&t) {
        assert!((w - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn three_behavior_toy_matches_hand_sum() {
    let m = model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rows(&mut rng, 3, DB);
    let z = rows(&mut rng, 3, 8);
    let xp = [0.4, -0.2, 0.9, 0.1];
    let zp = [0.3, 0.0, 0.5, 0.2, 0.6, 0.4, 0.1, 0.8];
    let bilinear = |name: &str, rows: &[Vec<f64>], q: &[f64]| -> Vec<f64> {
        let w = m.params.value(m.params.id(name).unwrap());
        let scores: Vec<f64> = rows
            .iter()
            .map(|r| {
                let mut s = 0.0;
                for a in 0..r.len() {
                    for b in 0..q.len() {
                        s += r[a] * w.row(a)[b] * q[b];
                    }
                }
                s
            })
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        scores.iter().map(|s| s.exp() / z).collect()
    };
    let ac = bilinear("long.W_c", &x, &xp);
    let at = bilinear("long.W_t", &z, &zp);
    let (c, t, p) = long_term(&m, &x, &z, &xp, &zp);
    for j in 0..3 {
        assert!((c[j] - ac[j]).abs() < 1e-12 && (t[j] - at[j]).abs() < 1e-12);
    }
    for d in 0..DB {
        let want: f64 = (0..3).map(|k| (ac[k] + at[k]) * x[k][d]).sum();
        assert!((p[d] - want).abs() < 1e-12);
    }
}

#[test]
fn positive_time_form_prefers_matching_hour() {
    // only the hour coordinate is informative; W_t = +c·I rewards agreement
    let mut m = model(5);
    let c = 20.0;
    set(&mut m, "long.W_t", |k| if k % 9 == 0 { c } else { 0.0 });
    let hour = |h: f64| {
        let mut v = vec![0.0; 8];
        v[5] = h / 23.0;
        v
    };
    let x = vec![vec![0.1; DB], vec![0.1; DB]];
    let (_, t, _) = long_term(&m, &x, &[hour(9.0), hour(21.0)], &[0.0; DB], &hour(21.0));
    assert!(t[1] > t[0], "{t:?}");
}

#[test]
fn permuting_history_permutes_weights_and_keeps_interest() {
    let m = model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rows(&mut rng, 4, DB);
    let z = rows(&mut rng, 4, 8);
    let (xp, zp) = ([0.2, 0.5, -0.1, 0.3], [0.4; 8]);
    let (c, t, p) = long_term(&m, &x, &z, &xp, &zp);
    let perm = [2, 0, 3, 1];
    let px: Vec<_> = perm.iter().map(|&i| x[i].clone()).collect();
    let pz: Vec<_> = perm.iter().map(|&i| z[i].clone()).collect();
    let (c2, t2, p2) = long_term(&m, &px, &pz, &xp, &zp);
    for (k, &i) in perm.iter().enumerate() {
        assert!((c2[k] - c[i]).abs() < 1e-15 && (t2[k] - t[i]).abs() < 1e-15);
    }
    for d in 0..DB {
        assert!((p2[d] - p[d]).abs() < 1e-12);
    }
}

#[test]
fn each_attention_ignores_the_other_query() {
    let m = model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rows(&mut rng, 3, DB);
    let z = rows(&mut rng, 3, 8);
    let (c1, t1, _) = long_term(&m, &x, &z, &[0.1; DB], &[0.2; 8]);
    let (c2, _, _) = long_term(&m, &x, &z, &[0.1; DB], &[0.9; 8]);
    let (_, t3, _) = long_term(&m, &x, &z, &[-0.7; DB], &[0.2; 8]);
    assert_eq!(c1, c2);
    assert_eq!(t1, t3);
}

#[test]
fn attention_weights_sum_to_one_and_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..1000 {
        let mut m = model(case);
        let scale = rng.gen_range(0.01..5.0);
        set(&mut m, "long.W_c", |_| rng.gen_range(-scale..scale));
        set(&mut m, "long.W_t", |_| rng.gen_range(-scale..scale));
        set(&mut m, "short.W_h", |_| rng.gen_range(-scale..scale));
        let n = rng.gen_range(1..30);
        let x = rows(&mut rng, n, DB);
        let z = rows(&mut rng, n, 8);
        let xp: Vec<f64> = (0..DB).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zp: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (c, t, _) = long_term(&m, &x, &z, &xp, &zp);
        let (sc, st): (f64, f64) = (c.iter().sum(), t.iter().sum());
        assert!((sc - 1.0).abs() <= 1e-9 && (st - 1.0).abs() <= 1e-9);
        assert!((sc + st - 2.0).abs() <= 1e-9);
        let ss: f64 = short_pool(&m, &x, &xp).iter().sum();
        assert!((ss - 1.0).abs() <= 1e-9, "case {case}: {ss}");
    }
}

#[test]
fn disabled_attention_is_an_error() {
    let mut c = ModelConfig::new(Variant::TlsiLC, 5, 3);
    c.item_dim = 2;
    c.category_dim = 2;
    let m = TlsiModel::new(c, 0).unwrap();
    let mut g = Graph::new(&m.params);
    let t = g.input(DenseArray::zeros(&[2, 8]));
    let q = g.input(DenseArray::zeros(&[8]));
    assert!(temporal_attention(&mut g, t, q, m.ids.long.as_ref().unwrap()).is_err());
    let h = g.input(DenseArray::zeros(&[2, DB]));
    let x = g.input(DenseArray::zeros(&[DB]));
    assert!(content_attention(&mut g, h, x, m.ids.long.as_ref().unwrap()).is_ok());
}

proptest! {
    #[test]
    fn softmax_sums_to_one(scores in prop::collection::vec(-700.0f64..700.0, 1..50)) {
        let store = tlsi_core::ParamStore::new();
        let mut g = Graph::new(&store);
        let s = g.input_vector(scores);
        let a = g.softmax(s).unwrap();
        let v = g.value(a).values();
        prop_assert!(v.iter().all(|x| x.is_finite() && *x >= 0.0));
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

fn fused(m: &TlsiModel, long: &[f64], short: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new(&m.params);
    let l = g.input_vector(long.to_vec());
    let s = g.input_vector(short.to_vec());
    let ctx = g.input_vector(vec![0.3; m.config.context_dim()]);
    let (a, f) = fuse(&mut g, l, s, ctx, m.ids.fusion.as_ref().unwrap()).unwrap();
    (g.value(a).values().to_vec(), g.value(f).values().to_vec())
}

#[test]
fn fusion_gate_cases() {
    let mut m = model(9);
    let long = [1.0, -2.0, 0.5, 0.0];
    let short = [3.0, 0.0, -0.5, 1.0];

    set(&mut m, "fusion.W_g", |_| 0.0);
    set(&mut m, "fusion.b_g", |_| 0.0);
    let (a, f) = fused(&m, &long, &short);
    for j in 0..DB {
        assert_eq!(a[j], 0.5);
        assert!((f[j] - (long[j] + short[j]) / 2.0).abs() < 1e-15);
    }

    set(&mut m, "fusion.b_g", |_| 50.0);
    let (a, f) = fused(&m, &long, &short);
    for j in 0..DB {
        assert!(a[j] > 1.0 - 1e-12);
        assert!((f[j] - long[j]).abs() < 1e-9);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    set(&mut m, "fusion.W_g", |_| rng.gen_range(-1.0..1.0));
    let (_, f) = fused(&m, &long, &long);
    for j in 0..DB {
        assert!((f[j] - long[j]).abs() < 1e-15);
    }
}

#[test]
fn final_interest_concatenates_in_order() {
    let store = tlsi_core::ParamStore::new();
    let mut g = Graph::new(&store);
    let l = g.input_vector(vec![1.0, 2.0]);
    let s = g.input_vector(vec![3.0, 4.0]);
    let f = g.input_vector(vec![5.0, 6.0]);
    let p = final_interest(&mut g, l, s, f).unwrap();
    assert_eq!(g.value(p).values(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let p = final_interest(&mut g, l, l, l).unwrap();
    assert_eq!(g.value(p).values(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
}

fn head(m: &TlsiModel, inputs: &[Vec<f64>], activation: Activation) -> Vec<f64> {
    let mut g = Graph::new(&m.params);
    let hidden: Vec<_> = inputs
        .iter()
        .map(|x| {
            let x = g.input_vector(x.clone());
            head_hidden(&mut g, x, &m.ids.head).unwrap()
        })
        .collect();
    let stacked = g.stack_rows(&hidden).unwrap();
    let stats = DiceStats::Fixed {
        mean: vec![0.1, -0.2, 0.3],
        var: vec![0.5, 1.5, 2.0],
    };
    let (_, p) = head_output(&mut g, stacked, &m.ids.head, activation, &stats).unwrap();
    g.value(p).values().to_vec()
}

#[test]
fn zero_head_predicts_one_half() {
    let mut m = model(10);
    for name in ["head.W1", "head.b1", "head.alpha", "head.W2", "head.b2"] {
        set(&mut m, name, |_| 0.0);
    }
    let input = vec![vec![0.7; m.config.head_input_dim()]; 2];
    assert_eq!(head(&m, &input, Activation::Dice), vec![0.5, 0.5]);
}

#[test]
fn head_matches_transcription() {
    let mut m = model(11);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for name in ["head.W1", "head.b1", "head.alpha", "head.W2", "head.b2"] {
        set(&mut m, name, |_| rng.gen_range(-0.5..0.5));
    }
    let d = m.config.head_input_dim();
    let inputs = rows(&mut rng, 3, d);
    let val = |n: &str| m.params.value(m.params.id(n).unwrap()).clone();
    let (w1, b1, al, w2, b2) = (
        val("head.W1"),
        val("head.b1"),
        val("head.alpha"),
        val("head.W2"),
        val("head.b2"),
    );
    let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
    for act in [Activation::Dice, Activation::Prelu] {
        let got = head(&m, &inputs, act);
        for (x, p) in inputs.iter().zip(&got) {
            let mut logit = b2.values()[0];
            for j in 0..3 {
                let h: f64 = b1.values()[j] + (0..d).map(|k| w1.row(j)[k] * x[k]).sum::<f64>();
                let a = al.values()[j];
                let out = match act {
                    Activation::Dice => {
                        let z = (h - mean[j]) / (var[j] + DICE_EPS).sqrt();
                        let pr = 1.0 / (1.0 + (-z).exp());
                        pr * h + (1.0 - pr) * a * h
                    }
                    Activation::Prelu => {
                        if h > 0.0 {
                            h
                        } else {
                            a * h
                        }
                    }
                };
                logit += w2.row(0)[j] * out;
            }
            let want = 1.0 / (1.0 + (-logit).exp());
            assert!((p - want).abs() < 1e-12, "{act:?}: {p} vs {want}");
        }
    }
}
