//! Long-term interest: content attention against the target item, temporal
//! attention against the prediction time, and their additive pooling.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamId;

#[derive(Debug, Clone, Copy)]
pub struct LongTermParams {
    /// `[d_b × d_b]` bilinear form between history and target embeddings.
    pub w_content: Option<ParamId>,
    /// `[8 × 8]` bilinear form between history and prediction time features.
    pub w_time: Option<ParamId>,
}

/// Which attention weights pool the history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LongTermWeights {
    Both,
    ContentOnly,
    TemporalOnly,
}

#[derive(Debug, Clone, Copy)]
pub struct LongTermNodes {
    pub content: Option<NodeId>,
    pub temporal: Option<NodeId>,
    pub interest: NodeId,
}

fn bilinear_softmax(
    g: &mut Graph<'_>,
    rows: NodeId,
    weight: ParamId,
    query: NodeId,
) -> Result<NodeId> {
    if g.shape(rows).len() != 2 {
        return Err(Error::EmptyInput { op: "attention" });
    }
    let w = g.param(weight);
    let projected = g.matmul(w, query)?;
    let scores = g.matmul(rows, projected)?;
    g.softmax(scores)
}

/// `a_k = softmax_k(x_k · W_c · x_p)` over the rows of `history` `[n × d_b]`.
pub fn content_attention(
    g: &mut Graph<'_>,
    history: NodeId,
    target: NodeId,
    params: &LongTermParams,
) -> Result<NodeId> {
    let w = params
        .w_content
        .ok_or(Error::Config("content attention is disabled".into()))?;
    bilinear_softmax(g, history, w, target)
}

/// `a_k = softmax_k(z_k · W_t · z_p)` over the rows of `times` `[n × 8]`.
pub fn temporal_attention(
    g: &mut Graph<'_>,
    times: NodeId,
    target_time: NodeId,
    params: &LongTermParams,
) -> Result<NodeId> {
    let w = params
        .w_time
        .ok_or(Error::Config("temporal attention is disabled".into()))?;
    bilinear_softmax(g, times, w, target_time)
}

/// `p_long = Σ_j (a_j^c + a_j^t) x_j`; the combined weights sum to 2.
pub fn long_term_interest(
    g: &mut Graph<'_>,
    history: NodeId,
    times: NodeId,
    target: NodeId,
    target_time: NodeId,
    params: &LongTermParams,
    which: LongTermWeights,
) -> Result<LongTermNodes> {
    let content = match which {
        LongTermWeights::TemporalOnly => None,
        _ => Some(content_attention(g, history, target, params)?),
    };
    let temporal = match which {
        LongTermWeights::ContentOnly => None,
        _ => Some(temporal_attention(g, times, target_time, params)?),
    };
    let weights = match (content, temporal) {
        (Some(c), Some(t)) => g.add(c, t)?,
        (Some(c), None) => c,
        (None, Some(t)) => t,
        (None, None) => unreachable!("at least one attention is active"),
    };
    let interest = g.matmul(weights, history)?;
    Ok(LongTermNodes {
        content,
        temporal,
        interest,
    })
}
