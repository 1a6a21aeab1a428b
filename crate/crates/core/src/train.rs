//! Adam, the epoch loop and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::MetricsReport;
use crate::model::{EncodedExample, Mode, TlsiModel};
use crate::params::{Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.value.len()])
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update of every trainable parameter; clears `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Gradients) -> Result<()> {
        let ids: Vec<_> = store.trainable_ids().collect();
        for &id in &ids {
            if grads.get(id).is_none() {
                return Err(Error::MissingGradient(store.get(id).name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in ids {
            let g = grads.get(id).expect("checked");
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let theta = store.values_mut(id);
            for k in 0..theta.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                theta[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        grads.clear();
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            seed: 0,
            adam: AdamConfig::default(),
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.adam.lr >= 0.0) || !self.adam.lr.is_finite() {
            return Err(Error::Config(format!(
                "invalid learning rate {}",
                self.adam.lr
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!(
                    "clip_norm must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Example-weighted mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

fn norms_summary(store: &ParamStore) -> String {
    let mut parts: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| format!("{}={:.3e}", p.name, p.value.l2_norm()))
        .collect();
    parts.truncate(64);
    format!("parameter norms: {}", parts.join(", "))
}

/// Fits `model` on `examples` in place.
pub fn train(
    model: &mut TlsiModel,
    examples: &[EncodedExample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyInput { op: "train" });
    }
    let mut adam = Adam::new(&model.params, config.adam);
    let mut grads = Gradients::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&EncodedExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, update) = {
                let mut g = Graph::new(&model.params);
                let (loss, nodes) = model.batch_loss(&mut g, &batch, Mode::Train)?;
                let value = g.value(loss).values()[0];
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b,
                        detail: norms_summary(&model.params),
                    });
                }
                g.backward(loss, &mut grads)?;
                (value, model.running_update(&g, &nodes))
            };
            if let Some(max) = config.clip_norm {
                grads.clip_global_norm(max);
            }
            adam.step(&mut model.params, &mut grads)?;
            model.apply_running_update(&update);
            total += loss * batch.len() as f64;
        }
        let mean = total / examples.len() as f64;
        log::info!("epoch {} mean training loss {:.6}", epoch + 1, mean);
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        epoch_losses,
        steps: adam.step,
    })
}

/// AUC and log-loss in evaluation mode. With `traced`, the report carries one
/// record per example with gate and attention values.
pub fn evaluate(
    model: &TlsiModel,
    examples: &[EncodedExample],
    batch_size: usize,
    traced: bool,
) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::EmptyInput { op: "evaluate" });
    }
    let labels: Vec<f64> = examples.iter().map(|e| e.label).collect();
    if traced {
        let records = model.predict_traced(examples, batch_size)?;
        let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
        let mut report = MetricsReport::from_scores(&labels, &scores)?;
        report.records = records;
        Ok(report)
    } else {
        let scores = model.predict(examples, batch_size)?;
        MetricsReport::from_scores(&labels, &scores)
    }
}
