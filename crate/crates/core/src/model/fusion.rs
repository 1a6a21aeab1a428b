//! Gated fusion of long- and short-term interests and the prediction head.

use crate::error::Result;
use crate::graph::{DiceStats, Graph, NodeId};
use crate::params::ParamId;

#[derive(Debug, Clone, Copy)]
pub struct FusionParams {
    /// `[d × (2d + d_ctx)]`.
    pub w_gate: ParamId,
    pub b_gate: ParamId,
}

/// `α = σ(W_g [p_long, p_short, ctx] + b_g)`,
/// `p_fused = α ⊙ p_long + (1 − α) ⊙ p_short`. Returns `(α, p_fused)`.
pub fn fuse(
    g: &mut Graph<'_>,
    long: NodeId,
    short: NodeId,
    context: NodeId,
    params: &FusionParams,
) -> Result<(NodeId, NodeId)> {
    let gate_in = g.concat_last(&[long, short, context])?;
    let w = g.param(params.w_gate);
    let b = g.param(params.b_gate);
    let pre = g.matmul(w, gate_in)?;
    let pre = g.add(pre, b)?;
    let alpha = g.sigmoid(pre);
    let from_long = g.mul(alpha, long)?;
    let one_minus = g.affine(alpha, -1.0, 1.0);
    let from_short = g.mul(one_minus, short)?;
    let fused = g.add(from_long, from_short)?;
    Ok((alpha, fused))
}

/// `[p_long, p_short, p_fused]` in that order.
pub fn final_interest(
    g: &mut Graph<'_>,
    long: NodeId,
    short: NodeId,
    fused: NodeId,
) -> Result<NodeId> {
    g.concat_last(&[long, short, fused])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Dice,
    Prelu,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub alpha: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// First affine layer for one example: `W1 · input + b1`.
pub fn head_hidden(g: &mut Graph<'_>, input: NodeId, params: &HeadParams) -> Result<NodeId> {
    let w = g.param(params.w1);
    let b = g.param(params.b1);
    let pre = g.matmul(w, input)?;
    g.add(pre, b)
}

/// Activation and output layer over the stacked `[batch × h₁]` hidden
/// pre-activations; returns `(activated, probabilities [batch])`.
pub fn head_output(
    g: &mut Graph<'_>,
    hidden: NodeId,
    params: &HeadParams,
    activation: Activation,
    stats: &DiceStats,
) -> Result<(NodeId, NodeId)> {
    let alpha = g.param(params.alpha);
    let act = match activation {
        Activation::Dice => g.dice(hidden, alpha, stats)?,
        Activation::Prelu => g.prelu(hidden, alpha)?,
    };
    let w2 = g.param(params.w2);
    let b2 = g.param(params.b2);
    let w2t = g.transpose(w2)?;
    let logits = g.matmul(act, w2t)?;
    let logits = g.add_bias(logits, b2)?;
    let batch = g.shape(logits)[0];
    let logits = g.reshape(logits, &[batch])?;
    Ok((act, g.sigmoid(logits)))
}
