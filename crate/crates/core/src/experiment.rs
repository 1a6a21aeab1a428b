//! Train/test example construction and the train-then-evaluate pipeline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_sequences, build_training_sequences, split_by_user_hash, with_negatives,
    BehaviorSequence, Dataset,
};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{ModelConfig, TlsiModel};
use crate::train::{evaluate, train, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Users need this many events before a target.
    pub min_len: usize,
    /// Training targets per user, taken from the events right before the
    /// held-out one.
    pub targets_per_user: usize,
    /// Share of users whose training examples are held out (by user hash)
    /// as a diagnostic validation set.
    pub holdout_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            min_len: 5,
            targets_per_user: 1,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    /// Training positives and their negatives, interleaved.
    pub train: Vec<BehaviorSequence>,
    /// Training-style examples of the held-out users, with negatives.
    pub validation: Vec<BehaviorSequence>,
    /// Each user's final event and one negative.
    pub test: Vec<BehaviorSequence>,
    pub dropped_users: usize,
}

/// Builds leave-last-out test examples and earlier-event training examples,
/// each positive paired with one uniformly sampled negative.
pub fn prepare_splits(
    dataset: &Dataset,
    config: &DataConfig,
    history_len: usize,
    seed: u64,
) -> Result<Splits> {
    if config.targets_per_user == 0 {
        return Err(Error::Config("targets_per_user must be positive".into()));
    }
    if !(0.0..1.0).contains(&config.holdout_fraction) {
        return Err(Error::Config(format!(
            "holdout_fraction must be in [0, 1), got {}",
            config.holdout_fraction
        )));
    }
    let test_pos = build_sequences(&dataset.events, history_len, config.min_len)?;
    let train_pos = build_training_sequences(
        &dataset.events,
        history_len,
        config.min_len,
        config.targets_per_user,
    )?;
    let (kept, held) = split_by_user_hash(train_pos.sequences, config.holdout_fraction);
    if kept.is_empty() {
        return Err(Error::NoSequences(
            "every training user was held out".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let train = with_negatives(&kept, &dataset.vocab, &mut rng)?;
    rng.set_stream(3);
    let test = with_negatives(&test_pos.sequences, &dataset.vocab, &mut rng)?;
    rng.set_stream(4);
    let validation = with_negatives(&held, &dataset.vocab, &mut rng)?;
    Ok(Splits {
        train,
        validation,
        test,
        dropped_users: test_pos.dropped_users,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: TlsiModel,
    pub train: TrainReport,
    /// `None` when nothing was held out.
    pub validation: Option<MetricsReport>,
    pub test: MetricsReport,
}

/// Initializes a model from `seed`, trains it and evaluates on the test
/// split.
pub fn run(
    dataset: &Dataset,
    splits: &Splits,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    traced: bool,
) -> Result<RunOutcome> {
    let mut model = TlsiModel::new(model_config.clone(), train_config.seed)?;
    let train_ex = model.encode_all(&splits.train, &dataset.clock)?;
    let test_ex = model.encode_all(&splits.test, &dataset.clock)?;
    let report = train(&mut model, &train_ex, train_config)?;
    let validation = if splits.validation.is_empty() {
        None
    } else {
        let ex = model.encode_all(&splits.validation, &dataset.clock)?;
        Some(evaluate(&model, &ex, train_config.batch_size, false)?)
    };
    let test = evaluate(&model, &test_ex, train_config.batch_size, traced)?;
    Ok(RunOutcome {
        model,
        train: report,
        validation,
        test,
    })
}
