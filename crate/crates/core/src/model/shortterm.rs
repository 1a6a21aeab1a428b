//! Short-term interest: an LSTM whose cell update is gated by two temporal
//! gates (adjacent-time and time-span), pooled by attention over all hidden
//! states.
//!
//! Per step, with `δ = tanh(W_δ·sim(t_{k−1}, t_k) + b_δ)` and
//! `s = tanh(W_s·sim(t_k, t_p) + b_s)`:
//!
//! ```text
//! f   = σ(W_f x + U_f h + b_f)
//! i   = σ(W_i x + U_i h + b_i)
//! T_δ = σ(W_xδ x + W_tδ δ + b_tδ)
//! T_s = σ(W_xs x + W_ts s + b_ts)
//! c'  = f ⊙ T_δ ⊙ c + i ⊙ T_s ⊙ tanh(W_c x + U_c h + b_c)
//! o   = σ(W_o x + U_o h + W_δo δ + W_so s + b_o)
//! h'  = o ⊙ tanh(c')
//! ```
//!
//! Everything except `U·h` is independent of the recurrence, so it is
//! computed for the whole sequence up front as matrix products.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamId;

#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_f: ParamId,
    pub w_i: ParamId,
    pub w_c: ParamId,
    pub w_o: ParamId,
    pub u_f: ParamId,
    pub u_i: ParamId,
    pub u_c: ParamId,
    pub u_o: ParamId,
    pub b_f: ParamId,
    pub b_i: ParamId,
    pub b_c: ParamId,
    pub b_o: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct TimeGateParams {
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub w_span: ParamId,
    pub b_span: ParamId,
    pub w_x_delta: ParamId,
    pub w_t_delta: ParamId,
    pub b_t_delta: ParamId,
    pub w_x_span: ParamId,
    pub w_t_span: ParamId,
    pub b_t_span: ParamId,
    pub w_delta_o: ParamId,
    pub w_span_o: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct ShortTermParams {
    pub lstm: LstmParams,
    pub time: Option<TimeGateParams>,
    /// `[d_h × d_b]` pooling form `h_k · W_h · x_p`.
    pub w_pool: Option<ParamId>,
}

/// `Vanilla` drops the temporal gates (`T_δ = T_s = 1`) and the `δ`/`s`
/// terms of the output gate, leaving a plain LSTM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gating {
    TimeAware,
    Vanilla,
}

#[derive(Debug, Clone, Copy)]
struct TimeNodes {
    w_delta_t: NodeId,
    b_delta: NodeId,
    w_span_t: NodeId,
    b_span: NodeId,
    w_x_delta_t: NodeId,
    w_t_delta_t: NodeId,
    b_t_delta: NodeId,
    w_x_span_t: NodeId,
    w_t_span_t: NodeId,
    b_t_span: NodeId,
    w_delta_o_t: NodeId,
    w_span_o_t: NodeId,
}

/// Parameter-derived nodes shared by every sequence in one graph.
#[derive(Debug, Clone, Copy)]
pub struct ShortTermNodes {
    /// `[W_f; W_i; W_c; W_o]ᵀ`, `[d_b × 4d_h]`.
    w_x: NodeId,
    b_x: NodeId,
    /// `[U_f; U_i; U_c; U_o]`, `[4d_h × d_h]`.
    u: NodeId,
    hidden: usize,
    time: Option<TimeNodes>,
}

impl ShortTermNodes {
    pub fn prepare(g: &mut Graph<'_>, params: &ShortTermParams, gating: Gating) -> Result<Self> {
        let l = &params.lstm;
        let mut rows = |ids: [ParamId; 4]| -> Result<NodeId> {
            let parts: Vec<NodeId> = ids.iter().map(|&p| g.param(p)).collect();
            g.concat(&parts, 0)
        };
        let w = rows([l.w_f, l.w_i, l.w_c, l.w_o])?;
        let u = rows([l.u_f, l.u_i, l.u_c, l.u_o])?;
        let w_x = g.transpose(w)?;
        let biases: Vec<NodeId> = [l.b_f, l.b_i, l.b_c, l.b_o]
            .iter()
            .map(|&p| g.param(p))
            .collect();
        let b_x = g.concat_last(&biases)?;
        let hidden = g.shape(u)[1];
        let time = match gating {
            Gating::Vanilla => None,
            Gating::TimeAware => {
                let t = params.time.as_ref().ok_or(Error::Config(
                    "time-aware gating needs temporal gate parameters".into(),
                ))?;
                let mut tr = |p: ParamId| -> Result<NodeId> {
                    let n = g.param(p);
                    g.transpose(n)
                };
                let nodes = TimeNodes {
                    w_delta_t: tr(t.w_delta)?,
                    w_span_t: tr(t.w_span)?,
                    w_x_delta_t: tr(t.w_x_delta)?,
                    w_t_delta_t: tr(t.w_t_delta)?,
                    w_x_span_t: tr(t.w_x_span)?,
                    w_t_span_t: tr(t.w_t_span)?,
                    w_delta_o_t: tr(t.w_delta_o)?,
                    w_span_o_t: tr(t.w_span_o)?,
                    b_delta: g.param(t.b_delta),
                    b_span: g.param(t.b_span),
                    b_t_delta: g.param(t.b_t_delta),
                    b_t_span: g.param(t.b_t_span),
                };
                Some(nodes)
            }
        };
        Ok(Self {
            w_x,
            b_x,
            u,
            hidden,
            time,
        })
    }

    pub fn gating(&self) -> Gating {
        if self.time.is_some() {
            Gating::TimeAware
        } else {
            Gating::Vanilla
        }
    }
}

/// Nodes of one step. `cell` is `[h, c, f, i, g, o]` (see
/// [`Graph::lstm_step`]), so gate activations can be read back from it.
#[derive(Debug, Clone, Copy)]
pub struct StepNodes {
    pub h: NodeId,
    pub cell: NodeId,
}

/// Per-sequence temporal inputs, one row per step: `sim(t_{k−1}, t_k)` and
/// `sim(t_k, t_p)`, each `[n × 8]`.
#[derive(Debug, Clone, Copy)]
pub struct StepTimes {
    pub adjacent: NodeId,
    pub span: NodeId,
}

fn affine_rows(
    g: &mut Graph<'_>,
    terms: &[(NodeId, NodeId)],
    bias: Option<NodeId>,
) -> Result<NodeId> {
    let mut acc = None;
    for &(x, w) in terms {
        let xw = g.matmul(x, w)?;
        acc = Some(match acc {
            None => xw,
            Some(a) => g.add(a, xw)?,
        });
    }
    let acc = acc.expect("at least one term");
    match bias {
        Some(b) => g.add_bias(acc, b),
        None => Ok(acc),
    }
}

/// Runs the recurrence from a zero state over the rows of `xs` `[n × d_b]`,
/// returning every step.
pub fn unroll(
    g: &mut Graph<'_>,
    xs: NodeId,
    times: Option<StepTimes>,
    prep: &ShortTermNodes,
) -> Result<Vec<StepNodes>> {
    let n = match *g.shape(xs) {
        [n, _] if n > 0 => n,
        _ => return Err(Error::EmptyInput { op: "unroll" }),
    };
    let dh = prep.hidden;
    let gx = affine_rows(g, &[(xs, prep.w_x)], Some(prep.b_x))?;

    // [n × d_h] matrices of T_δ, T_s and the time part of the output gate
    let timed = match (prep.time, times) {
        (None, _) => None,
        (Some(_), None) => return Err(Error::Config("time-aware unroll needs time inputs".into())),
        (Some(t), Some(st)) => {
            if g.shape(st.adjacent)[0] != n || g.shape(st.span)[0] != n {
                return Err(Error::ShapeMismatch {
                    op: "unroll",
                    left: g.shape(xs).to_vec(),
                    right: g.shape(st.adjacent).to_vec(),
                });
            }
            let delta_pre = affine_rows(g, &[(st.adjacent, t.w_delta_t)], Some(t.b_delta))?;
            let delta = g.tanh(delta_pre);
            let span_pre = affine_rows(g, &[(st.span, t.w_span_t)], Some(t.b_span))?;
            let span = g.tanh(span_pre);
            let td_pre = affine_rows(
                g,
                &[(xs, t.w_x_delta_t), (delta, t.w_t_delta_t)],
                Some(t.b_t_delta),
            )?;
            let t_delta = g.sigmoid(td_pre);
            let ts_pre = affine_rows(
                g,
                &[(xs, t.w_x_span_t), (span, t.w_t_span_t)],
                Some(t.b_t_span),
            )?;
            let t_span = g.sigmoid(ts_pre);
            let out_time = affine_rows(g, &[(delta, t.w_delta_o_t), (span, t.w_span_o_t)], None)?;
            Some((t_delta, t_span, out_time))
        }
    };

    let time = timed.map(|(td, ts, ot)| [td, ts, ot]);
    let mut prev = None;
    let mut steps = Vec::with_capacity(n);
    for k in 0..n {
        let cell = g.lstm_step(gx, k, prep.u, prev, time)?;
        let h = g.slice(cell, 0, dh)?;
        prev = Some(cell);
        steps.push(StepNodes { h, cell });
    }
    Ok(steps)
}

/// Attention pooling `a_k = softmax_k(h_k · W_h · x_p)`, `p_short = Σ a_k h_k`.
/// Returns `(weights, p_short)`.
pub fn short_term_interest(
    g: &mut Graph<'_>,
    hidden: &[NodeId],
    target: NodeId,
    w_pool: ParamId,
) -> Result<(NodeId, NodeId)> {
    if hidden.is_empty() {
        return Err(Error::EmptyInput {
            op: "short_term_interest",
        });
    }
    let states = g.stack_rows(hidden)?;
    let w = g.param(w_pool);
    let projected = g.matmul(w, target)?;
    let scores = g.matmul(states, projected)?;
    let weights = g.softmax(scores)?;
    let pooled = g.matmul(weights, states)?;
    Ok((weights, pooled))
}
