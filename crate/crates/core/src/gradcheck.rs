//! Central finite-difference check of every parameter group of a tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BehaviorEvent, BehaviorSequence};
use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind};
use crate::metrics::LOGLOSS_EPS;
use crate::model::{EncodedExample, Mode, ModelConfig, TlsiModel, Variant};
use crate::params::{Gradients, ParamStore};
use crate::temporal::{DatasetClock, Timestamp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub variant: Variant,
    /// Behavior embedding width `d_b`; also used as the hidden width.
    pub dim: usize,
    /// History length.
    pub seq_len: usize,
    pub batch: usize,
    pub step: f64,
    pub rtol: f64,
    /// Injected backward fault, for exercising the checker itself.
    #[serde(skip)]
    pub fault: Option<OpKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: Variant::Tlsi,
            dim: 4,
            seq_len: 3,
            batch: 8,
            step: 1e-3,
            rtol: 1e-4,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: String,
    pub params: Vec<String>,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }
}

/// Below this norm both gradients count as zero.
const NORM_FLOOR: f64 = 1e-8;

/// Group label of a parameter name.
pub fn group_of(name: &str) -> &'static str {
    match name {
        "emb.item" | "emb.category" => "embeddings",
        "long.W_c" => "W_c (content attention)",
        "long.W_t" => "W_t (temporal attention)",
        "short.W_delta" | "short.b_delta" | "short.W_span" | "short.b_span" => "W_delta/W_s",
        "short.W_x_delta" | "short.W_t_delta" | "short.b_t_delta" | "short.W_x_span"
        | "short.W_t_span" | "short.b_t_span" => "time gates",
        "short.W_delta_o" | "short.W_span_o" => "W_delta_o/W_so",
        "short.W_h" => "W_h",
        "fusion.W_g" | "fusion.b_g" => "W_g",
        n if n.starts_with("short.") => "LSTM",
        _ => "head",
    }
}

fn tiny_examples(
    rng: &mut ChaCha8Rng,
    config: &ModelConfig,
    n: usize,
    batch: usize,
) -> Vec<BehaviorSequence> {
    let day = 86_400;
    (0..batch)
        .map(|b| {
            let mut t = 1_600_000_000 + rng.gen_range(0..30 * day);
            let history = (0..n)
                .map(|_| {
                    t += rng.gen_range(3_600..5 * day);
                    BehaviorEvent {
                        user: b as u32,
                        item: rng.gen_range(1..config.n_items as u32),
                        category: rng.gen_range(1..config.n_categories as u32),
                        timestamp: Timestamp(t),
                    }
                })
                .collect();
            BehaviorSequence {
                user: b as u32,
                history,
                target_item: rng.gen_range(1..config.n_items as u32),
                target_category: rng.gen_range(1..config.n_categories as u32),
                target_time: Timestamp(t + rng.gen_range(3_600..3 * day)),
                label: (b % 2) as f64,
            }
        })
        .collect()
}

fn batch_loss(
    model: &TlsiModel,
    store: &ParamStore,
    examples: &[EncodedExample],
    grads: Option<&mut Gradients>,
    fault: Option<OpKind>,
) -> Result<f64> {
    let refs: Vec<&EncodedExample> = examples.iter().collect();
    let mut g = Graph::new(store);
    if let Some(f) = fault {
        g.inject_fault(f);
    }
    let nodes = model.forward_batch(&mut g, &refs, Mode::Train)?;
    let labels: Vec<f64> = examples.iter().map(|e| e.label).collect();
    let loss = g.logloss(nodes.probabilities, &labels, LOGLOSS_EPS)?;
    if let Some(gr) = grads {
        g.backward(loss, gr)?;
    }
    Ok(g.value(loss).values()[0])
}

/// Compares backpropagated gradients with central differences on a tiny
/// randomly initialized model.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    if config.dim < 2 || config.seq_len == 0 || config.batch < 2 {
        return Err(Error::Config(
            "gradcheck needs dim >= 2, seq_len >= 1 and batch >= 2".into(),
        ));
    }
    let mut mc = ModelConfig::new(config.variant, 6, 4);
    mc.item_dim = config.dim / 2;
    mc.category_dim = config.dim - config.dim / 2;
    mc.hidden_dim = config.dim;
    mc.mlp_hidden = config.dim;
    mc.max_len = config.seq_len;
    mc.max_len_long = config.seq_len;
    let mut model = TlsiModel::new(mc.clone(), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(7);
    // larger weights than the default init so no gradient is negligible
    let ids: Vec<_> = model.params.trainable_ids().collect();
    for id in ids {
        for v in model.params.values_mut(id) {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let seqs = tiny_examples(&mut rng, &mc, config.seq_len, config.batch);
    let clock = DatasetClock::from_timestamps(
        seqs.iter()
            .flat_map(|s| s.history.iter().map(|e| e.timestamp).chain([s.target_time])),
    )
    .expect("non-empty");
    let examples = model.encode_all(&seqs, &clock)?;

    let mut grads = Gradients::new(&model.params);
    batch_loss(
        &model,
        &model.params,
        &examples,
        Some(&mut grads),
        config.fault,
    )?;

    let mut groups: Vec<(String, Vec<String>, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut perturbed = model.params.clone();
    let trainable: Vec<_> = model.params.trainable_ids().collect();
    for id in trainable {
        let name = model.params.get(id).name.clone();
        let len = model.params.value(id).len();
        let analytic = grads
            .get(id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; len]);
        let mut numeric = Vec::with_capacity(len);
        for k in 0..len {
            let orig = perturbed.values_mut(id)[k];
            perturbed.values_mut(id)[k] = orig + config.step;
            let up = batch_loss(&model, &perturbed, &examples, None, None)?;
            perturbed.values_mut(id)[k] = orig - config.step;
            let down = batch_loss(&model, &perturbed, &examples, None, None)?;
            perturbed.values_mut(id)[k] = orig;
            numeric.push((up - down) / (2.0 * config.step));
        }
        let group = group_of(&name).to_string();
        match groups.iter_mut().find(|g| g.0 == group) {
            Some(g) => {
                g.1.push(name);
                g.2.extend(analytic);
                g.3.extend(numeric);
            }
            None => groups.push((group, vec![name], analytic, numeric)),
        }
    }

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let groups = groups
        .into_iter()
        .map(|(group, params, a, n)| {
            let diff: Vec<f64> = a.iter().zip(&n).map(|(x, y)| x - y).collect();
            let scale = norm(&a).max(norm(&n));
            let rel_error = if scale < NORM_FLOOR {
                0.0
            } else {
                norm(&diff) / scale
            };
            GroupResult {
                group,
                params,
                rel_error,
                analytic_norm: norm(&a),
                passed: rel_error < config.rtol,
            }
        })
        .collect();
    Ok(GradcheckReport { groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_cover_time_parameters() {
        assert_eq!(group_of("short.W_t_span"), "time gates");
        assert_eq!(group_of("short.U_f"), "LSTM");
        assert_eq!(group_of("head.alpha"), "head");
    }
}
