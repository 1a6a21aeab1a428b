//! Reverse-mode gradients against central finite differences on random
//! composite graphs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tlsi_core::{DenseArray, DiceStats, Gradients, Graph, NodeId, ParamId, ParamStore};

const STEP: f64 = 1e-3;
const RTOL: f64 = 1e-4;

/// Builds a random scalar expression of the parameters; the same `recipe`
/// seed always gives the same graph shape.
fn build(g: &mut Graph<'_>, ids: &[ParamId], recipe: u64) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(recipe);
    let m = g.param(ids[0]); // [3 × 4]
    let v = g.param(ids[1]); // [4]
    let w = g.param(ids[2]); // [3]
    let mut x = g.matmul(m, v).unwrap();
    for _ in 0..rng.gen_range(2..7) {
        x = match rng.gen_range(0..11) {
            0 => g.sigmoid(x),
            1 => g.tanh(x),
            2 => {
                let s = g.affine(x, 0.3, 0.0);
                g.exp(s)
            }
            3 => {
                // kept away from the kink at zero, on either side
                let t = g.tanh(x);
                let shift = if rng.gen_bool(0.5) { 1.5 } else { -1.5 };
                let s = g.affine(t, 1.0, shift);
                g.abs(s)
            }
            4 => g.add(x, w).unwrap(),
            5 => g.sub(w, x).unwrap(),
            6 => g.mul(x, w).unwrap(),
            7 => g.softmax(x).unwrap(),
            8 => {
                let c = g.concat_last(&[x, w]).unwrap();
                let r = g.reshape(c, &[2, 3]).unwrap();
                let t = g.transpose(r).unwrap();
                let p = g.matmul(t, r).unwrap(); // [3 × 3]
                g.matmul(p, w).unwrap()
            }
            9 => {
                let c = g.concat_last(&[x, w, x]).unwrap();
                g.slice(c, 2, 3).unwrap()
            }
            _ => {
                let rows = g.stack_rows(&[x, w]).unwrap();
                let r = g.row(rows, 1).unwrap();
                g.mul(r, x).unwrap()
            }
        };
    }
    let y = g.mul(x, w).unwrap();
    g.sum(y)
}

fn store(rng: &mut ChaCha8Rng) -> (ParamStore, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let mut add = |name: &str, shape: &[usize]| {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        s.add(name, DenseArray::new(shape.to_vec(), values).unwrap(), true)
            .unwrap()
    };
    let ids = vec![add("m", &[3, 4]), add("v", &[4]), add("w", &[3])];
    (s, ids)
}

fn scalar(store: &ParamStore, f: &dyn Fn(&mut Graph<'_>) -> NodeId) -> f64 {
    let mut g = Graph::new(store);
    let out = f(&mut g);
    g.value(out).values()[0]
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` over all parameters.
fn check(store: &ParamStore, f: &dyn Fn(&mut Graph<'_>) -> NodeId) -> f64 {
    let mut grads = Gradients::new(store);
    {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        g.backward(out, &mut grads).unwrap();
    }
    let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
    let mut p = store.clone();
    for id in store.trainable_ids() {
        let len = store.value(id).len();
        let analytic = grads.get(id).map(|g| g.to_vec()).unwrap_or(vec![0.0; len]);
        for k in 0..len {
            let orig = p.values_mut(id)[k];
            p.values_mut(id)[k] = orig + STEP;
            let up = scalar(&p, f);
            p.values_mut(id)[k] = orig - STEP;
            let down = scalar(&p, f);
            p.values_mut(id)[k] = orig;
            let num = (up - down) / (2.0 * STEP);
            diff += (analytic[k] - num).powi(2);
            an += analytic[k] * analytic[k];
            nn += num * num;
        }
    }
    let scale = an.sqrt().max(nn.sqrt());
    if scale < 1e-10 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

#[test]
fn random_graphs_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for recipe in 0..150 {
        let (s, ids) = store(&mut rng);
        let err = check(&s, &|g| build(g, &ids, recipe));
        assert!(err < RTOL, "recipe {recipe}: relative error {err}");
    }
}

#[test]
fn lstm_steps_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let dh = 3;
    for case in 0..20 {
        let mut s = ParamStore::new();
        let mut add = |name: &str, shape: &[usize]| {
            let n = shape.iter().product();
            let values = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            s.add(name, DenseArray::new(shape.to_vec(), values).unwrap(), true)
                .unwrap()
        };
        let gx = add("gx", &[4, 4 * dh]);
        let u = add("u", &[4 * dh, dh]);
        let times = [
            add("td", &[4, dh]),
            add("ts", &[4, dh]),
            add("ot", &[4, dh]),
        ];
        let timed = case % 2 == 0;
        let f = |g: &mut Graph<'_>| {
            let (gxn, un) = (g.param(gx), g.param(u));
            let t = timed.then(|| times.map(|p| g.param(p)));
            let mut prev = None;
            let mut acc = None;
            for k in 0..4 {
                let cell = g.lstm_step(gxn, k, un, prev, t).unwrap();
                // every output block, including the gates, feeds the loss
                let sq = g.mul(cell, cell).unwrap();
                let s = g.sum(sq);
                acc = Some(match acc {
                    None => s,
                    Some(a) => g.add(a, s).unwrap(),
                });
                prev = Some(cell);
            }
            acc.unwrap()
        };
        let err = check(&s, &f);
        assert!(err < RTOL, "case {case}: relative error {err}");
    }
}

#[test]
fn dice_and_logloss_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for case in 0..20 {
        let mut s = ParamStore::new();
        let x = s
            .add(
                "x",
                DenseArray::new(
                    vec![5, 3],
                    (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                )
                .unwrap(),
                true,
            )
            .unwrap();
        let a = s
            .add(
                "a",
                DenseArray::vector((0..3).map(|_| rng.gen_range(-0.5..0.5)).collect()),
                true,
            )
            .unwrap();
        let w = s
            .add(
                "w",
                DenseArray::vector((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                true,
            )
            .unwrap();
        let labels: Vec<f64> = (0..5).map(|k| (k % 2) as f64).collect();
        let batch = case % 2 == 0;
        let f = |g: &mut Graph<'_>| {
            let (xn, an, wn) = (g.param(x), g.param(a), g.param(w));
            let stats = if batch {
                DiceStats::Batch
            } else {
                DiceStats::Fixed {
                    mean: vec![0.1, 0.0, -0.3],
                    var: vec![1.0, 0.5, 2.0],
                }
            };
            let act = if case % 4 == 1 {
                g.prelu(xn, an).unwrap()
            } else {
                g.dice(xn, an, &stats).unwrap()
            };
            let logits = g.matmul(act, wn).unwrap();
            let p = g.sigmoid(logits);
            g.logloss(p, &labels, 1e-7).unwrap()
        };
        let err = check(&s, &f);
        assert!(err < RTOL, "case {case}: relative error {err}");
    }
}

#[test]
fn gather_rows_accumulate() {
    let mut s = ParamStore::new();
    let t = s
        .add(
            "t",
            DenseArray::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            true,
        )
        .unwrap();
    let mut grads = Gradients::new(&s);
    let mut g = Graph::new(&s);
    let a = g.gather(t, 1).unwrap();
    let b = g.gather(t, 1).unwrap();
    let c = g.gather(t, 2).unwrap();
    let ab = g.add(a, b).unwrap();
    let abc = g.mul(ab, c).unwrap();
    let loss = g.sum(abc);
    g.backward(loss, &mut grads).unwrap();
    assert_eq!(grads.get(t).unwrap(), &[0.0, 0.0, 10.0, 12.0, 6.0, 8.0]);
}
