//! Recurrent short-term module against straight-line transcriptions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tlsi_core::model::shortterm::{short_term_interest, unroll, StepTimes};
use tlsi_core::model::{Gating, ModelConfig, ShortTermNodes, TlsiModel, Variant};
use tlsi_core::{DenseArray, Graph, ParamStore};

const DB: usize = 4;
const DH: usize = 4;
const T: usize = 8;

fn model(rng: &mut ChaCha8Rng, scale: f64) -> TlsiModel {
    let mut c = ModelConfig::new(Variant::Tlsi, 5, 3);
    c.item_dim = 2;
    c.category_dim = 2;
    c.hidden_dim = DH;
    let mut m = TlsiModel::new(c, rng.gen()).unwrap();
    let ids: Vec<_> = m.params.trainable_ids().collect();
    for id in ids {
        for v in m.params.values_mut(id) {
            *v = rng.gen_range(-scale..scale);
        }
    }
    m
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, w: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..w).map(|_| rng.gen_range(lo..hi)).collect())
        .collect()
}

struct Mats<'a>(&'a ParamStore);

impl Mats<'_> {
    fn w(&self, name: &str) -> Vec<Vec<f64>> {
        let v = self.0.value(self.0.id(name).unwrap());
        (0..v.rows()).map(|r| v.row(r).to_vec()).collect()
    }

    fn b(&self, name: &str) -> Vec<f64> {
        self.0.value(self.0.id(name).unwrap()).values().to_vec()
    }
}

fn mv(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn plus(parts: &[&[f64]]) -> Vec<f64> {
    (0..parts[0].len())
        .map(|j| parts.iter().map(|p| p[j]).sum())
        .collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain LSTM, or the time-gated one when `times` is given, from a zero state.
fn reference(
    p: &ParamStore,
    xs: &[Vec<f64>],
    times: Option<(&[Vec<f64>], &[Vec<f64>])>,
) -> Vec<Vec<f64>> {
    let m = Mats(p);
    let mut h = vec![0.0; DH];
    let mut c = vec![0.0; DH];
    let mut out = Vec::new();
    for (k, x) in xs.iter().enumerate() {
        let gate = |w: &str, u: &str, b: &str| plus(&[&mv(&m.w(w), x), &mv(&m.w(u), &h), &m.b(b)]);
        let f: Vec<f64> = gate("short.W_f", "short.U_f", "short.b_f")
            .into_iter()
            .map(sig)
            .collect();
        let i: Vec<f64> = gate("short.W_i", "short.U_i", "short.b_i")
            .into_iter()
            .map(sig)
            .collect();
        let cand: Vec<f64> = gate("short.W_c", "short.U_c", "short.b_c")
            .into_iter()
            .map(f64::tanh)
            .collect();
        let mut o_pre = gate("short.W_o", "short.U_o", "short.b_o");
        let (mut td, mut ts) = (vec![1.0; DH], vec![1.0; DH]);
        if let Some((adj, span)) = times {
            let delta: Vec<f64> =
                plus(&[&mv(&m.w("short.W_delta"), &adj[k]), &m.b("short.b_delta")])
                    .into_iter()
                    .map(f64::tanh)
                    .collect();
            let s: Vec<f64> = plus(&[&mv(&m.w("short.W_span"), &span[k]), &m.b("short.b_span")])
                .into_iter()
                .map(f64::tanh)
                .collect();
            td = plus(&[
                &mv(&m.w("short.W_x_delta"), x),
                &mv(&m.w("short.W_t_delta"), &delta),
                &m.b("short.b_t_delta"),
            ])
            .into_iter()
            .map(sig)
            .collect();
            ts = plus(&[
                &mv(&m.w("short.W_x_span"), x),
                &mv(&m.w("short.W_t_span"), &s),
                &m.b("short.b_t_span"),
            ])
            .into_iter()
            .map(sig)
            .collect();
            o_pre = plus(&[
                &o_pre,
                &mv(&m.w("short.W_delta_o"), &delta),
                &mv(&m.w("short.W_span_o"), &s),
            ]);
        }
        for j in 0..DH {
            c[j] = f[j] * td[j] * c[j] + i[j] * ts[j] * cand[j];
            h[j] = sig(o_pre[j]) * c[j].tanh();
        }
        out.push(h.clone());
    }
    out
}

fn run_graph(
    m: &TlsiModel,
    xs: &[Vec<f64>],
    times: Option<(&[Vec<f64>], &[Vec<f64>])>,
) -> Vec<Vec<f64>> {
    let mut g = Graph::new(&m.params);
    let gating = if times.is_some() {
        Gating::TimeAware
    } else {
        Gating::Vanilla
    };
    let prep = ShortTermNodes::prepare(&mut g, m.ids.short.as_ref().unwrap(), gating).unwrap();
    let x = g.input(DenseArray::from_rows(xs).unwrap());
    let st = times.map(|(a, s)| StepTimes {
        adjacent: g.input(DenseArray::from_rows(a).unwrap()),
        span: g.input(DenseArray::from_rows(s).unwrap()),
    });
    let steps = unroll(&mut g, x, st, &prep).unwrap();
    steps
        .iter()
        .map(|s| g.value(s.h).values().to_vec())
        .collect()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn vanilla_gating_matches_reference_lstm() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let m = model(&mut rng, 0.8);
        let n = rng.gen_range(1..8);
        let xs = random_rows(&mut rng, n, DB, -1.0, 1.0);
        let got = run_graph(&m, &xs, None);
        let want = reference(&m.params, &xs, None);
        assert!(max_diff(&got, &want) <= 1e-12, "{}", max_diff(&got, &want));
    }
}

#[test]
fn time_aware_steps_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let m = model(&mut rng, 0.3);
        let n = rng.gen_range(1..6);
        let xs = random_rows(&mut rng, n, DB, -1.0, 1.0);
        let adj = random_rows(&mut rng, n, T, 0.0, 1.0);
        let span = random_rows(&mut rng, n, T, 0.0, 1.0);
        let got = run_graph(&m, &xs, Some((&adj, &span)));
        let want = reference(&m.params, &xs, Some((&adj, &span)));
        assert!(max_diff(&got, &want) <= 1e-12, "{}", max_diff(&got, &want));
    }
}

#[test]
fn zero_parameters_keep_zero_state_and_half_gates() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut m = model(&mut rng, 0.5);
    let ids: Vec<_> = m.params.trainable_ids().collect();
    for id in ids {
        m.params.values_mut(id).iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g = Graph::new(&m.params);
    let prep =
        ShortTermNodes::prepare(&mut g, m.ids.short.as_ref().unwrap(), Gating::TimeAware).unwrap();
    let xs = random_rows(&mut rng, 3, DB, -1.0, 1.0);
    let x = g.input(DenseArray::from_rows(&xs).unwrap());
    let times = StepTimes {
        adjacent: g.input(DenseArray::from_rows(&random_rows(&mut rng, 3, T, 0.0, 1.0)).unwrap()),
        span: g.input(DenseArray::from_rows(&random_rows(&mut rng, 3, T, 0.0, 1.0)).unwrap()),
    };
    for s in unroll(&mut g, x, Some(times), &prep).unwrap() {
        let cell = g.value(s.cell).values();
        // [h, c, f, i, g, o]
        assert!(cell[..2 * DH].iter().all(|v| v.abs() < 1e-12));
        for (k, v) in cell[2 * DH..].iter().enumerate() {
            let want = if k / DH == 2 { 0.0 } else { 0.5 };
            assert!((v - want).abs() < 1e-12);
        }
    }
}

#[test]
fn single_step_equals_one_step_from_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let m = model(&mut rng, 0.5);
    let xs = random_rows(&mut rng, 3, DB, -1.0, 1.0);
    let adj = random_rows(&mut rng, 3, T, 0.0, 1.0);
    let span = random_rows(&mut rng, 3, T, 0.0, 1.0);
    let full = run_graph(&m, &xs, Some((&adj, &span)));
    let first = run_graph(&m, &xs[..1], Some((&adj[..1], &span[..1])));
    assert_eq!(first.len(), 1);
    assert_eq!(first[0], full[0]);
}

fn pool(m: &TlsiModel, hs: &[Vec<f64>], target: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new(&m.params);
    let nodes: Vec<_> = hs.iter().map(|h| g.input_vector(h.clone())).collect();
    let t = g.input_vector(target.to_vec());
    let w = m.ids.short.unwrap().w_pool.unwrap();
    let (a, p) = short_term_interest(&mut g, &nodes, t, w).unwrap();
    (g.value(a).values().to_vec(), g.value(p).values().to_vec())
}

#[test]
fn pooling_toys() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut m = model(&mut rng, 0.5);
    let hs = random_rows(&mut rng, 3, DH, -1.0, 1.0);
    let target: Vec<f64> = (0..DB).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let (_, p) = pool(&m, &hs[..1], &target);
    assert_eq!(p, hs[0]);

    // hand softmax over h_k · W_h · x_p
    let wh = Mats(&m.params).w("short.W_h");
    let proj = mv(&wh, &target);
    let scores: Vec<f64> = hs
        .iter()
        .map(|h| h.iter().zip(&proj).map(|(a, b)| a * b).sum())
        .collect();
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    let a: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
    let want: Vec<f64> = (0..DH)
        .map(|j| (0..3).map(|k| a[k] * hs[k][j]).sum())
        .collect();
    let (got_a, got_p) = pool(&m, &hs, &target);
    for (x, y) in got_a.iter().zip(&a).chain(got_p.iter().zip(&want)) {
        assert!((x - y).abs() < 1e-12);
    }

    let id = m.params.id("short.W_h").unwrap();
    m.params.values_mut(id).iter_mut().for_each(|v| *v = 0.0);
    let (_, p) = pool(&m, &hs, &target);
    for j in 0..DH {
        let mean = (hs[0][j] + hs[1][j] + hs[2][j]) / 3.0;
        assert!((p[j] - mean).abs() < 1e-12);
    }
}

#[test]
fn equal_time_inputs_with_zero_bias_give_zero_features() {
    // sim(t, t) = 0 and b = 0 leave δ = s = tanh(0) = 0, so the output gate
    // sees no time shift whatever W_δo and W_so are
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut m = model(&mut rng, 0.5);
    for name in ["short.b_delta", "short.b_span"] {
        let id = m.params.id(name).unwrap();
        m.params.values_mut(id).iter_mut().for_each(|v| *v = 0.0);
    }
    let xs = random_rows(&mut rng, 2, DB, -1.0, 1.0);
    let zeros = vec![vec![0.0; T]; 2];
    let base = run_graph(&m, &xs, Some((&zeros, &zeros)));
    for name in ["short.W_delta_o", "short.W_span_o"] {
        let id = m.params.id(name).unwrap();
        m.params.values_mut(id).iter_mut().for_each(|v| *v *= -3.0);
    }
    assert_eq!(run_graph(&m, &xs, Some((&zeros, &zeros))), base);
}
