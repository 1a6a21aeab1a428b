//! The time-aware long- and short-term interest model and its ablations.

pub mod fusion;
pub mod longterm;
pub mod shortterm;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::BehaviorSequence;
use crate::error::{Error, Result};
use crate::graph::{DiceStats, Graph, NodeId};
use crate::metrics::LOGLOSS_EPS;
use crate::params::{ParamId, ParamStore};
use crate::temporal::{sim_features, time_features, DatasetClock, TimeFeatures, TIME_DIMS};
use crate::tensor::DenseArray;

pub use fusion::{Activation, FusionParams, HeadParams};
pub use longterm::{LongTermParams, LongTermWeights};
pub use shortterm::{
    Gating, LstmParams, ShortTermNodes, ShortTermParams, StepTimes, TimeGateParams,
};

/// Momentum of the running statistics used at evaluation time.
pub const RUNNING_MOMENTUM: f64 = 0.99;
/// Added to running variances before standardizing the head input.
pub const STANDARDIZE_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "tlsi")]
    Tlsi,
    /// Calendar components replaced by a constant placeholder.
    #[serde(rename = "tlsi-wo-tp")]
    TlsiWoTp,
    #[serde(rename = "tlsi-l")]
    TlsiL,
    #[serde(rename = "tlsi-l-c")]
    TlsiLC,
    #[serde(rename = "tlsi-l-t")]
    TlsiLT,
    #[serde(rename = "tlsi-s")]
    TlsiS,
    #[serde(rename = "tlsi-f")]
    TlsiF,
    /// Plain LSTM, last hidden state as the user vector.
    #[serde(rename = "lstm")]
    Lstm,
    /// Unweighted mean of history embeddings.
    #[serde(rename = "meanpool")]
    MeanPool,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Tlsi,
        Variant::TlsiWoTp,
        Variant::TlsiL,
        Variant::TlsiLC,
        Variant::TlsiLT,
        Variant::TlsiS,
        Variant::TlsiF,
        Variant::Lstm,
        Variant::MeanPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tlsi => "tlsi",
            Variant::TlsiWoTp => "tlsi-wo-tp",
            Variant::TlsiL => "tlsi-l",
            Variant::TlsiLC => "tlsi-l-c",
            Variant::TlsiLT => "tlsi-l-t",
            Variant::TlsiS => "tlsi-s",
            Variant::TlsiF => "tlsi-f",
            Variant::Lstm => "lstm",
            Variant::MeanPool => "meanpool",
        }
    }

    fn long_weights(self) -> Option<LongTermWeights> {
        match self {
            Variant::Tlsi | Variant::TlsiWoTp | Variant::TlsiL | Variant::TlsiF => {
                Some(LongTermWeights::Both)
            }
            Variant::TlsiLC => Some(LongTermWeights::ContentOnly),
            Variant::TlsiLT => Some(LongTermWeights::TemporalOnly),
            _ => None,
        }
    }

    fn time_aware_short(self) -> bool {
        matches!(
            self,
            Variant::Tlsi | Variant::TlsiWoTp | Variant::TlsiS | Variant::TlsiF
        )
    }

    pub fn has_fusion(self) -> bool {
        matches!(self, Variant::Tlsi | Variant::TlsiWoTp | Variant::TlsiF)
    }

    pub fn has_long_term(self) -> bool {
        self.long_weights().is_some()
    }

    fn masks_time_point(self) -> bool {
        self == Variant::TlsiWoTp
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!(
                    "unknown variant `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Dice,
    Prelu,
}

impl From<ActivationKind> for Activation {
    fn from(a: ActivationKind) -> Self {
        match a {
            ActivationKind::Dice => Activation::Dice,
            ActivationKind::Prelu => Activation::Prelu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub item_dim: usize,
    pub category_dim: usize,
    pub hidden_dim: usize,
    pub mlp_hidden: usize,
    pub activation: ActivationKind,
    /// Standardize the head input with running statistics.
    pub standardize: bool,
    /// History length seen by the recurrent module.
    pub max_len: usize,
    /// History length seen by the long-term attention.
    pub max_len_long: usize,
    /// Embedding table sizes, including the reserved index 0.
    pub n_items: usize,
    pub n_categories: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, n_items: usize, n_categories: usize) -> Self {
        Self {
            variant,
            item_dim: 18,
            category_dim: 18,
            hidden_dim: 36,
            mlp_hidden: 64,
            activation: ActivationKind::Dice,
            standardize: true,
            max_len: 100,
            max_len_long: 100,
            n_items,
            n_categories,
        }
    }

    pub fn behavior_dim(&self) -> usize {
        self.item_dim + self.category_dim
    }

    pub fn context_dim(&self) -> usize {
        self.behavior_dim() + TIME_DIMS + 1
    }

    pub fn final_dim(&self) -> usize {
        let (db, dh) = (self.behavior_dim(), self.hidden_dim);
        match self.variant {
            Variant::Tlsi | Variant::TlsiWoTp => db + 2 * dh,
            Variant::TlsiF | Variant::TlsiS | Variant::Lstm => dh,
            Variant::TlsiL | Variant::TlsiLC | Variant::TlsiLT | Variant::MeanPool => db,
        }
    }

    pub fn head_input_dim(&self) -> usize {
        self.final_dim() + self.behavior_dim()
    }

    pub fn history_window(&self) -> usize {
        if self.variant.has_long_term() {
            self.max_len.max(self.max_len_long)
        } else {
            self.max_len
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("item_dim", self.item_dim),
            ("category_dim", self.category_dim),
            ("hidden_dim", self.hidden_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("max_len", self.max_len),
            ("max_len_long", self.max_len_long),
            ("n_items", self.n_items),
            ("n_categories", self.n_categories),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.variant.has_fusion() && self.hidden_dim != self.behavior_dim() {
            return Err(Error::Config(format!(
                "variant {} fuses interests elementwise and needs hidden_dim == item_dim + category_dim ({} != {})",
                self.variant,
                self.hidden_dim,
                self.behavior_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(f64),
    Orthogonal,
    Glorot,
    Const(f64),
}

struct Decl {
    name: &'static str,
    shape: Vec<usize>,
    init: Init,
    trainable: bool,
}

const W_SCALE: f64 = 0.05;

fn declarations(c: &ModelConfig) -> Vec<Decl> {
    let (db, dh, t) = (c.behavior_dim(), c.hidden_dim, TIME_DIMS);
    let d = |name, shape: &[usize], init| Decl {
        name,
        shape: shape.to_vec(),
        init,
        trainable: true,
    };
    let u = Init::Uniform(W_SCALE);
    let zero = Init::Const(0.0);
    let mut out = vec![
        d("emb.item", &[c.n_items, c.item_dim], u),
        d("emb.category", &[c.n_categories, c.category_dim], u),
    ];
    if let Some(which) = c.variant.long_weights() {
        if which != LongTermWeights::TemporalOnly {
            out.push(d("long.W_c", &[db, db], u));
        }
        if which != LongTermWeights::ContentOnly {
            out.push(d("long.W_t", &[t, t], u));
        }
    }
    if c.variant.time_aware_short() || c.variant == Variant::Lstm {
        for g in ["f", "i", "c", "o"] {
            let (w, uu, b) = match g {
                "f" => ("short.W_f", "short.U_f", "short.b_f"),
                "i" => ("short.W_i", "short.U_i", "short.b_i"),
                "c" => ("short.W_c", "short.U_c", "short.b_c"),
                _ => ("short.W_o", "short.U_o", "short.b_o"),
            };
            out.push(d(w, &[dh, db], u));
            out.push(d(uu, &[dh, dh], Init::Orthogonal));
            out.push(d(b, &[dh], Init::Const(if g == "f" { 1.0 } else { 0.0 })));
        }
    }
    if c.variant.time_aware_short() {
        out.extend([
            d("short.W_delta", &[dh, t], u),
            d("short.b_delta", &[dh], zero),
            d("short.W_span", &[dh, t], u),
            d("short.b_span", &[dh], zero),
            d("short.W_x_delta", &[dh, db], u),
            d("short.W_t_delta", &[dh, dh], u),
            d("short.b_t_delta", &[dh], zero),
            d("short.W_x_span", &[dh, db], u),
            d("short.W_t_span", &[dh, dh], u),
            d("short.b_t_span", &[dh], zero),
            d("short.W_delta_o", &[dh, dh], u),
            d("short.W_span_o", &[dh, dh], u),
            d("short.W_h", &[dh, db], u),
        ]);
    }
    if c.variant.has_fusion() {
        out.push(d("fusion.W_g", &[db, 2 * db + c.context_dim()], u));
        out.push(d("fusion.b_g", &[db], zero));
    }
    let input = c.head_input_dim();
    out.extend([
        d("head.W1", &[c.mlp_hidden, input], Init::Glorot),
        d("head.b1", &[c.mlp_hidden], zero),
        d("head.alpha", &[c.mlp_hidden], zero),
        d("head.W2", &[1, c.mlp_hidden], Init::Glorot),
        d("head.b2", &[1], zero),
    ]);
    let stat = |name, n, v| Decl {
        name,
        shape: vec![n],
        init: Init::Const(v),
        trainable: false,
    };
    out.extend([
        stat("head.input_mean", input, 0.0),
        stat("head.input_var", input, 1.0),
        stat("head.dice_mean", c.mlp_hidden, 0.0),
        stat("head.dice_var", c.mlp_hidden, 1.0),
    ]);
    out
}

/// Orthonormal rows via modified Gram–Schmidt on a Gaussian matrix.
fn orthogonal<R: Rng>(rng: &mut R, n: usize, m: usize) -> Vec<f64> {
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..m)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    for i in 0..n {
        for j in 0..i.min(m) {
            let dot: f64 = a[i].iter().zip(&a[j]).map(|(x, y)| x * y).sum();
            let (head, tail) = a.split_at_mut(i);
            for (x, y) in tail[0].iter_mut().zip(&head[j]) {
                *x -= dot * y;
            }
        }
        let norm = a[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            a[i].iter_mut().for_each(|x| *x /= norm);
        }
    }
    a.concat()
}

fn init_values<R: Rng>(rng: &mut R, shape: &[usize], init: Init) -> Vec<f64> {
    let n: usize = shape.iter().product();
    match init {
        Init::Uniform(a) => (0..n).map(|_| rng.gen_range(-a..a)).collect(),
        Init::Const(v) => vec![v; n],
        Init::Orthogonal => orthogonal(rng, shape[0], shape[1]),
        Init::Glorot => {
            let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-a..a)).collect()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelParams {
    pub item_emb: ParamId,
    pub category_emb: ParamId,
    pub long: Option<LongTermParams>,
    pub short: Option<ShortTermParams>,
    pub fusion: Option<FusionParams>,
    pub head: HeadParams,
    pub input_mean: ParamId,
    pub input_var: ParamId,
    pub dice_mean: ParamId,
    pub dice_var: ParamId,
}

impl ModelParams {
    fn resolve(store: &ParamStore, c: &ModelConfig) -> Result<Self> {
        let id = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
        };
        let long = match c.variant.long_weights() {
            Some(which) => Some(LongTermParams {
                w_content: match which {
                    LongTermWeights::TemporalOnly => None,
                    _ => Some(id("long.W_c")?),
                },
                w_time: match which {
                    LongTermWeights::ContentOnly => None,
                    _ => Some(id("long.W_t")?),
                },
            }),
            None => None,
        };
        let short = if c.variant.time_aware_short() || c.variant == Variant::Lstm {
            let lstm = LstmParams {
                w_f: id("short.W_f")?,
                w_i: id("short.W_i")?,
                w_c: id("short.W_c")?,
                w_o: id("short.W_o")?,
                u_f: id("short.U_f")?,
                u_i: id("short.U_i")?,
                u_c: id("short.U_c")?,
                u_o: id("short.U_o")?,
                b_f: id("short.b_f")?,
                b_i: id("short.b_i")?,
                b_c: id("short.b_c")?,
                b_o: id("short.b_o")?,
            };
            let (time, w_pool) = if c.variant.time_aware_short() {
                (
                    Some(TimeGateParams {
                        w_delta: id("short.W_delta")?,
                        b_delta: id("short.b_delta")?,
                        w_span: id("short.W_span")?,
                        b_span: id("short.b_span")?,
                        w_x_delta: id("short.W_x_delta")?,
                        w_t_delta: id("short.W_t_delta")?,
                        b_t_delta: id("short.b_t_delta")?,
                        w_x_span: id("short.W_x_span")?,
                        w_t_span: id("short.W_t_span")?,
                        b_t_span: id("short.b_t_span")?,
                        w_delta_o: id("short.W_delta_o")?,
                        w_span_o: id("short.W_span_o")?,
                    }),
                    Some(id("short.W_h")?),
                )
            } else {
                (None, None)
            };
            Some(ShortTermParams { lstm, time, w_pool })
        } else {
            None
        };
        let fusion = if c.variant.has_fusion() {
            Some(FusionParams {
                w_gate: id("fusion.W_g")?,
                b_gate: id("fusion.b_g")?,
            })
        } else {
            None
        };
        Ok(Self {
            item_emb: id("emb.item")?,
            category_emb: id("emb.category")?,
            long,
            short,
            fusion,
            head: HeadParams {
                w1: id("head.W1")?,
                b1: id("head.b1")?,
                alpha: id("head.alpha")?,
                w2: id("head.W2")?,
                b2: id("head.b2")?,
            },
            input_mean: id("head.input_mean")?,
            input_var: id("head.input_var")?,
            dice_mean: id("head.dice_mean")?,
            dice_var: id("head.dice_var")?,
        })
    }
}

/// A sequence turned into model-ready ids and time feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub items: Vec<u32>,
    pub categories: Vec<u32>,
    /// Normalized `[t − t_s, κ(t)]` of every history event.
    pub times: Vec<[f64; TIME_DIMS]>,
    /// First index of the recurrent window within the history.
    pub short_start: usize,
    /// First index of the long-term window within the history.
    pub long_start: usize,
    /// `sim(t_{k−1}, t_k)` over the recurrent window (first entry zero).
    pub adjacent: Vec<[f64; TIME_DIMS]>,
    /// `sim(t_k, t_p)` over the recurrent window.
    pub span: Vec<[f64; TIME_DIMS]>,
    pub target_item: u32,
    pub target_category: u32,
    pub target_time: [f64; TIME_DIMS],
    /// `(t_p − t_last) / span`.
    pub recency: f64,
    pub recency_seconds: u64,
    pub label: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in the activation; running statistics get updated.
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct ExampleNodes {
    pub head_input: NodeId,
    pub hidden: NodeId,
    pub alpha: Option<NodeId>,
    pub content: Option<NodeId>,
    pub temporal: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct BatchNodes {
    pub examples: Vec<ExampleNodes>,
    pub hidden: NodeId,
    pub activated: NodeId,
    pub probabilities: NodeId,
}

/// Batch statistics collected during a training forward pass.
#[derive(Debug, Clone, Default)]
pub struct RunningUpdate {
    pub input: Option<(Vec<f64>, Vec<f64>)>,
    pub dice: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct TlsiModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub ids: ModelParams,
}

fn mean_var(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let w = rows[0].len();
    let mut mean = vec![0.0; w];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; w];
    for r in rows {
        for j in 0..w {
            let d = r[j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

impl TlsiModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for d in declarations(&config) {
            let values = init_values(&mut rng, &d.shape, d.init);
            store.add(d.name, DenseArray::new(d.shape, values)?, d.trainable)?;
        }
        let ids = ModelParams::resolve(&store, &config)?;
        Ok(Self {
            config,
            params: store,
            ids,
        })
    }

    /// Rebuilds a model around loaded parameters, checking names and shapes
    /// against the configuration.
    pub fn from_params(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let decls = declarations(&config);
        if decls.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters for variant {}, found {}",
                decls.len(),
                config.variant,
                store.len()
            )));
        }
        for d in &decls {
            let id = store
                .id(d.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", d.name)))?;
            let p = store.get(id);
            if p.value.shape() != d.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, configuration expects {:?}",
                    d.name,
                    p.value.shape(),
                    d.shape
                )));
            }
        }
        let ids = ModelParams::resolve(&store, &config)?;
        Ok(Self {
            config,
            params: store,
            ids,
        })
    }

    pub fn encode(&self, seq: &BehaviorSequence, clock: &DatasetClock) -> Result<EncodedExample> {
        if seq.history.is_empty() {
            return Err(Error::EmptyInput { op: "encode" });
        }
        let c = &self.config;
        let window = c.history_window();
        let hist = &seq.history[seq.history.len().saturating_sub(window)..];
        let mask = |f: TimeFeatures| {
            if c.variant.masks_time_point() {
                f.without_time_point()
            } else {
                f
            }
        };
        let feats = hist
            .iter()
            .map(|e| time_features(e.timestamp, clock).map(mask))
            .collect::<Result<Vec<_>>>()?;
        let target = mask(time_features(seq.target_time, clock)?);
        let n = hist.len();
        let short_start = n.saturating_sub(c.max_len);
        let long_start = n.saturating_sub(c.max_len_long);
        let mut adjacent = Vec::with_capacity(n - short_start);
        let mut span = Vec::with_capacity(n - short_start);
        for k in short_start..n {
            let prev = if k == short_start { k } else { k - 1 };
            adjacent.push(sim_features(&feats[prev], &feats[k]));
            span.push(sim_features(&feats[k], &target));
        }
        let last = hist[n - 1].timestamp;
        Ok(EncodedExample {
            items: hist.iter().map(|e| e.item).collect(),
            categories: hist.iter().map(|e| e.category).collect(),
            times: feats.iter().map(|f| f.normalized).collect(),
            short_start,
            long_start,
            adjacent,
            span,
            target_item: seq.target_item,
            target_category: seq.target_category,
            target_time: target.normalized,
            recency: clock.scaled_gap(last, seq.target_time),
            recency_seconds: seq.target_time.0.saturating_sub(last.0),
            label: seq.label,
        })
    }

    pub fn encode_all(
        &self,
        seqs: &[BehaviorSequence],
        clock: &DatasetClock,
    ) -> Result<Vec<EncodedExample>> {
        seqs.iter().map(|s| self.encode(s, clock)).collect()
    }

    fn embed(&self, g: &mut Graph<'_>, item: u32, category: u32) -> Result<NodeId> {
        let i = g.gather(self.ids.item_emb, item as usize)?;
        let c = g.gather(self.ids.category_emb, category as usize)?;
        g.concat_last(&[i, c])
    }

    /// Builds everything up to the head's first affine layer for one example.
    /// Parameter-derived nodes shared by all examples of a graph.
    pub fn prepare(&self, g: &mut Graph<'_>) -> Result<Option<ShortTermNodes>> {
        self.ids
            .short
            .as_ref()
            .map(|sp| {
                let gating = if self.config.variant.time_aware_short() {
                    Gating::TimeAware
                } else {
                    Gating::Vanilla
                };
                ShortTermNodes::prepare(g, sp, gating)
            })
            .transpose()
    }

    pub fn example_nodes(
        &self,
        g: &mut Graph<'_>,
        ex: &EncodedExample,
        prepared: Option<&ShortTermNodes>,
    ) -> Result<ExampleNodes> {
        let c = &self.config;
        let v = c.variant;
        let n = ex.items.len();
        let first = ex
            .short_start
            .min(if v.has_long_term() { ex.long_start } else { n });
        let mut xs = Vec::with_capacity(n);
        for k in 0..n {
            if k < first {
                // placeholder, never read
                xs.push(None);
            } else {
                xs.push(Some(self.embed(g, ex.items[k], ex.categories[k])?));
            }
        }
        let target = self.embed(g, ex.target_item, ex.target_category)?;
        let target_time = g.input_vector(ex.target_time.to_vec());
        let window =
            |from: usize| -> Vec<NodeId> { xs[from..].iter().map(|x| x.unwrap()).collect() };

        let mut content = None;
        let mut temporal = None;
        let long = match v.long_weights() {
            Some(which) => {
                let rows = window(ex.long_start);
                let history = g.stack_rows(&rows)?;
                let times = g.input(DenseArray::from_rows(
                    &ex.times[ex.long_start..]
                        .iter()
                        .map(|t| t.to_vec())
                        .collect::<Vec<_>>(),
                )?);
                let lt = longterm::long_term_interest(
                    g,
                    history,
                    times,
                    target,
                    target_time,
                    self.ids.long.as_ref().expect("declared"),
                    which,
                )?;
                content = lt.content;
                temporal = lt.temporal;
                Some(lt.interest)
            }
            None => None,
        };

        let short = match (&self.ids.short, prepared) {
            (Some(sp), Some(prep)) => {
                let history = g.stack_rows(&window(ex.short_start))?;
                let times = match prep.gating() {
                    Gating::Vanilla => None,
                    Gating::TimeAware => Some(StepTimes {
                        adjacent: g.input(DenseArray::from_rows(
                            &ex.adjacent.iter().map(|a| a.to_vec()).collect::<Vec<_>>(),
                        )?),
                        span: g.input(DenseArray::from_rows(
                            &ex.span.iter().map(|a| a.to_vec()).collect::<Vec<_>>(),
                        )?),
                    }),
                };
                let steps = shortterm::unroll(g, history, times, prep)?;
                match sp.w_pool {
                    // plain LSTM baseline: last hidden state
                    None => Some(steps.last().expect("non-empty").h),
                    Some(w_pool) => {
                        let hs: Vec<NodeId> = steps.iter().map(|s| s.h).collect();
                        let (_, pooled) = shortterm::short_term_interest(g, &hs, target, w_pool)?;
                        Some(pooled)
                    }
                }
            }
            _ => None,
        };

        let mut alpha = None;
        let fused = match (&self.ids.fusion, long, short) {
            (Some(fp), Some(l), Some(s)) => {
                let mut ctx = ex.target_time.to_vec();
                ctx.push(ex.recency);
                let ctx_tail = g.input_vector(ctx);
                let context = g.concat_last(&[target, ctx_tail])?;
                let (a, f) = fusion::fuse(g, l, s, context, fp)?;
                alpha = Some(a);
                Some(f)
            }
            _ => None,
        };

        let final_interest = match v {
            Variant::Tlsi | Variant::TlsiWoTp => fusion::final_interest(
                g,
                long.expect("long"),
                short.expect("short"),
                fused.expect("fused"),
            )?,
            Variant::TlsiF => fused.expect("fused"),
            Variant::TlsiL | Variant::TlsiLC | Variant::TlsiLT => long.expect("long"),
            Variant::TlsiS | Variant::Lstm => short.expect("short"),
            Variant::MeanPool => {
                let rows = window(ex.short_start);
                let history = g.stack_rows(&rows)?;
                let w = g.input_vector(vec![1.0 / rows.len() as f64; rows.len()]);
                g.matmul(w, history)?
            }
        };
        let head_input = g.concat_last(&[final_interest, target])?;
        let normalized = if c.standardize {
            let mean = self.params.value(self.ids.input_mean).values().to_vec();
            let inv_std: Vec<f64> = self
                .params
                .value(self.ids.input_var)
                .values()
                .iter()
                .map(|v| 1.0 / (v + STANDARDIZE_EPS).sqrt())
                .collect();
            let mean = g.input_vector(mean);
            let inv_std = g.input_vector(inv_std);
            let centered = g.sub(head_input, mean)?;
            g.mul(centered, inv_std)?
        } else {
            head_input
        };
        let hidden = fusion::head_hidden(g, normalized, &self.ids.head)?;
        Ok(ExampleNodes {
            head_input,
            hidden,
            alpha,
            content,
            temporal,
        })
    }

    pub fn forward_batch(
        &self,
        g: &mut Graph<'_>,
        batch: &[&EncodedExample],
        mode: Mode,
    ) -> Result<BatchNodes> {
        if batch.is_empty() {
            return Err(Error::EmptyInput {
                op: "forward_batch",
            });
        }
        let prepared = self.prepare(g)?;
        let examples = batch
            .iter()
            .map(|ex| self.example_nodes(g, ex, prepared.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<NodeId> = examples.iter().map(|e| e.hidden).collect();
        let hidden = g.stack_rows(&rows)?;
        let stats = match mode {
            Mode::Train => DiceStats::Batch,
            Mode::Eval => DiceStats::Fixed {
                mean: self.params.value(self.ids.dice_mean).values().to_vec(),
                var: self.params.value(self.ids.dice_var).values().to_vec(),
            },
        };
        let (activated, probabilities) = fusion::head_output(
            g,
            hidden,
            &self.ids.head,
            self.config.activation.into(),
            &stats,
        )?;
        Ok(BatchNodes {
            examples,
            hidden,
            activated,
            probabilities,
        })
    }

    /// Mean log-loss of a batch.
    pub fn batch_loss(
        &self,
        g: &mut Graph<'_>,
        batch: &[&EncodedExample],
        mode: Mode,
    ) -> Result<(NodeId, BatchNodes)> {
        let nodes = self.forward_batch(g, batch, mode)?;
        let labels: Vec<f64> = batch.iter().map(|e| e.label).collect();
        let loss = g.logloss(nodes.probabilities, &labels, LOGLOSS_EPS)?;
        Ok((loss, nodes))
    }

    /// Batch statistics needed to refresh the running estimates.
    pub fn running_update(&self, g: &Graph<'_>, nodes: &BatchNodes) -> RunningUpdate {
        let input = if self.config.standardize {
            let rows: Vec<&[f64]> = nodes
                .examples
                .iter()
                .map(|e| g.value(e.head_input).values())
                .collect();
            Some(mean_var(&rows))
        } else {
            None
        };
        let dice = g.dice_batch_stats(nodes.activated);
        RunningUpdate { input, dice }
    }

    pub fn apply_running_update(&mut self, update: &RunningUpdate) {
        let blend = |store: &mut ParamStore, id: ParamId, batch: &[f64]| {
            for (r, b) in store.values_mut(id).iter_mut().zip(batch) {
                *r = RUNNING_MOMENTUM * *r + (1.0 - RUNNING_MOMENTUM) * b;
            }
        };
        if let Some((m, v)) = &update.input {
            blend(&mut self.params, self.ids.input_mean, m);
            blend(&mut self.params, self.ids.input_var, v);
        }
        if let Some((m, v)) = &update.dice {
            blend(&mut self.params, self.ids.dice_mean, m);
            blend(&mut self.params, self.ids.dice_var, v);
        }
    }

    /// Evaluation-mode click probabilities.
    pub fn predict(&self, examples: &[EncodedExample], batch_size: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(batch_size.max(1)) {
            let refs: Vec<&EncodedExample> = chunk.iter().collect();
            let mut g = Graph::new(&self.params);
            let nodes = self.forward_batch(&mut g, &refs, Mode::Eval)?;
            out.extend_from_slice(g.value(nodes.probabilities).values());
        }
        Ok(out)
    }

    /// Evaluation-mode probabilities with per-example gate and attention
    /// traces.
    pub fn predict_traced(
        &self,
        examples: &[EncodedExample],
        batch_size: usize,
    ) -> Result<Vec<crate::metrics::ExampleRecord>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(batch_size.max(1)) {
            let refs: Vec<&EncodedExample> = chunk.iter().collect();
            let mut g = Graph::new(&self.params);
            let nodes = self.forward_batch(&mut g, &refs, Mode::Eval)?;
            let probs = g.value(nodes.probabilities).values().to_vec();
            for (k, (ex, en)) in chunk.iter().zip(&nodes.examples).enumerate() {
                let values =
                    |n: Option<NodeId>| n.map(|n| g.value(n).values().to_vec()).unwrap_or_default();
                let alpha_mean = en.alpha.map(|a| {
                    let v = g.value(a).values();
                    v.iter().sum::<f64>() / v.len() as f64
                });
                out.push(crate::metrics::ExampleRecord {
                    example_id: out.len(),
                    label: ex.label,
                    score: probs[k],
                    alpha_mean,
                    recency_seconds: ex.recency_seconds,
                    content_weights: values(en.content),
                    temporal_weights: values(en.temporal),
                });
            }
        }
        Ok(out)
    }
}
