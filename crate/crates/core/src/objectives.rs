//! Losses and gradient-combination rules.

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterStack, BranchView};
use crate::encoder::{text_backward, text_forward, DenseGrads};
use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Vector};

/// Transition proxies at or below this norm are skipped.
pub const EPS_DELTA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_end: f64,
    pub l_fwd: f64,
    pub l_rev: f64,
    pub l_trans: f64,
    pub skipped_degenerate: usize,
}

#[derive(Debug, Clone)]
pub struct EndpointLoss {
    pub loss: f64,
    pub g_queries: Vec<Vector>,
    pub g_targets: Vec<Vector>,
    pub g_log_tau: f64,
}

fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Symmetric InfoNCE over a batch of matched (query, target) pairs with
/// logits `τ · qᵢ·tⱼ`, averaged over the batch. `τ = exp(log_tau)` clamped
/// to `[1, 100]`; the `log_tau` gradient is zero while the clamp is active.
pub fn endpoint_loss(queries: &[Vector], targets: &[Vector], log_tau: f64) -> Result<EndpointLoss> {
    let n = queries.len();
    if n == 0 || targets.len() != n {
        return Err(Error::DimMismatch { expected: n.max(1), got: targets.len() });
    }
    let raw_tau = log_tau.exp();
    let tau = raw_tau.clamp(1.0, 100.0);
    let clamped = !(1.0..=100.0).contains(&raw_tau);

    let sims: Vec<Vec<f64>> = queries.iter().map(|q| targets.iter().map(|t| dot(q, t)).collect()).collect();
    let row_lp: Vec<Vec<f64>> = sims.iter().map(|r| log_softmax_row(&r.iter().map(|s| tau * s).collect::<Vec<_>>())).collect();
    let col_lp: Vec<Vec<f64>> = (0..n)
        .map(|j| log_softmax_row(&(0..n).map(|i| tau * sims[i][j]).collect::<Vec<_>>()))
        .collect();

    let mut loss = 0.0;
    for i in 0..n {
        loss -= row_lp[i][i] + col_lp[i][i];
    }
    loss /= 2.0 * n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!("endpoint loss {loss}")));
    }

    // dL/dS_ij = τ/(2n) · [(P_row_ij − δ_ij) + (P_col_ij − δ_ij)]
    let coef = 1.0 / (2.0 * n as f64);
    let mut g_sim = vec![vec![0.0; n]; n];
    let mut g_tau = 0.0;
    for i in 0..n {
        for j in 0..n {
            let kron = if i == j { 1.0 } else { 0.0 };
            let d = coef * ((row_lp[i][j].exp() - kron) + (col_lp[j][i].exp() - kron));
            g_tau += d * sims[i][j];
            g_sim[i][j] = d * tau;
        }
    }
    let d = queries[0].len();
    let mut g_queries = vec![vec![0.0; d]; n];
    let mut g_targets = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..n {
            let g = g_sim[i][j];
            for k in 0..d {
                g_queries[i][k] += g * targets[j][k];
                g_targets[j][k] += g * queries[i][k];
            }
        }
    }
    let g_log_tau = if clamped { 0.0 } else { g_tau * tau };
    Ok(EndpointLoss { loss, g_queries, g_targets, g_log_tau })
}

/// `(1 − ω) · caption_emb + ω · image_prompt_emb`, not renormalized.
pub fn source_anchor(caption_emb: &[f64], image_prompt_emb: &[f64], omega: f64) -> Result<Vector> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::ConfigInvalid(format!("omega {omega} outside [0, 1]")));
    }
    if caption_emb.len() != image_prompt_emb.len() {
        return Err(Error::DimMismatch { expected: caption_emb.len(), got: image_prompt_emb.len() });
    }
    Ok(caption_emb.iter().zip(image_prompt_emb).map(|(c, i)| (1.0 - omega) * c + omega * i).collect())
}

/// `δ = target_emb − anchor`. Callers treat the result as a constant.
pub fn transition_delta(target_emb: &[f64], anchor: &[f64]) -> Result<Vector> {
    if !anchor.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLoss("non-finite source anchor".into()));
    }
    let delta: Vector = target_emb.iter().zip(anchor).map(|(t, a)| t - a).collect();
    let n = norm(&delta);
    if n <= EPS_DELTA {
        return Err(Error::DegenerateDelta { norm: n });
    }
    Ok(delta)
}

/// `1 − cos(f, d)` and its gradient w.r.t. `f`.
fn cosine_loss(f: &[f64], d: &[f64]) -> (f64, Vector) {
    let (nf, nd) = (norm(f), norm(d));
    let c = dot(f, d) / (nf * nd);
    let g = f.iter().zip(d).map(|(fi, di)| -(di / (nf * nd) - c * fi / (nf * nf))).collect();
    (1.0 - c, g)
}

#[derive(Debug, Clone)]
pub struct TransitionTerms {
    pub l_fwd: f64,
    pub l_rev: f64,
    pub g_fwd: Vector,
    pub g_rev: Vector,
}

/// `L_fwd = 1 − cos(f_fwd, δ)`, `L_rev = 1 − cos(f_rev, −δ)`.
pub fn transition_terms(f_fwd: &[f64], f_rev: &[f64], delta: &[f64]) -> Result<TransitionTerms> {
    let n = norm(delta);
    if n <= EPS_DELTA {
        return Err(Error::DegenerateDelta { norm: n });
    }
    let neg: Vector = delta.iter().map(|v| -v).collect();
    let (l_fwd, g_fwd) = cosine_loss(f_fwd, delta);
    let (l_rev, g_rev) = cosine_loss(f_rev, &neg);
    Ok(TransitionTerms { l_fwd, l_rev, g_fwd, g_rev })
}

/// Encodes both instructions through `view`, evaluates the two transition
/// terms against the detached `delta`, and accumulates `weight ×` their
/// gradients into `grads`. Returns `(l_fwd, l_rev)`.
pub fn transition_loss(
    stack: &AdapterStack,
    view: &BranchView,
    fwd_ids: &[usize],
    rev_ids: &[usize],
    delta: &[f64],
    weight: f64,
    grads: &mut DenseGrads,
) -> Result<(f64, f64)> {
    let tf = text_forward(stack, view, fwd_ids, None)?;
    let tr = text_forward(stack, view, rev_ids, None)?;
    let terms = transition_terms(&tf.out, &tr.out, delta)?;
    let gf: Vector = terms.g_fwd.iter().map(|g| g * weight).collect();
    let gr: Vector = terms.g_rev.iter().map(|g| g * weight).collect();
    text_backward(stack, view, &tf, &gf, grads);
    text_backward(stack, view, &tr, &gr, grads);
    Ok((terms.l_fwd, terms.l_rev))
}

pub fn joint_loss(l_end: f64, l_trans: f64, lambda_trans: f64) -> f64 {
    l_end + lambda_trans * l_trans
}

/// Projected pair: when the gradients conflict (negative dot product), each
/// loses its component along the *original* other gradient.
pub fn pcgrad_project(g_end: &[f64], g_trans: &[f64]) -> (Vector, Vector) {
    let d = dot(g_end, g_trans);
    if d >= 0.0 {
        return (g_end.to_vec(), g_trans.to_vec());
    }
    let (ne, nt) = (dot(g_end, g_end), dot(g_trans, g_trans));
    let end_p = g_end.iter().zip(g_trans).map(|(e, t)| e - d / nt * t).collect();
    let trans_p = g_trans.iter().zip(g_end).map(|(t, e)| t - d / ne * e).collect();
    (end_p, trans_p)
}

pub fn pcgrad_combine(g_end: &[f64], g_trans: &[f64]) -> Result<Vector> {
    if g_end.len() != g_trans.len() {
        return Err(Error::DimMismatch { expected: g_end.len(), got: g_trans.len() });
    }
    let (a, b) = pcgrad_project(g_end, g_trans);
    Ok(a.iter().zip(&b).map(|(x, y)| x + y).collect())
}
