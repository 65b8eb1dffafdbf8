//! Toy text tower, visual projector and mapping network, each with a traced
//! forward pass and a closed-form backward pass.
//!
//! Text pipeline for token ids `t_1..t_n`:
//!
//! ```text
//! x_i  = tanh(E[t_i] + P[i])          (E[t_i] replaced by the pseudo vector at the slot)
//! h_0  = mean_i x_i
//! h_l  = h_{l-1} + tanh(W_l h_{l-1})  l = 1..L
//! out  = normalize(W_out h_L)
//! ```
//!
//! The per-token `tanh` binds each token to its position, so instructions
//! that use the same words in a different order (`from red to blue` versus
//! `from blue to red`) pool to different vectors.

use crate::adapters::{AdapterStack, BranchId, BranchView, LoraLayer};
use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, norm, Matrix, Vector, EPS_NORM};

pub const SOURCE_PROMPT: [&str; 4] = ["a", "photo", "of", "*"];

/// `a photo of * and <instruction>`.
pub fn compose_prompt(instruction: &[String]) -> Vec<String> {
    let mut out: Vec<String> = SOURCE_PROMPT.iter().map(|s| s.to_string()).collect();
    out.push("and".into());
    out.extend(instruction.iter().cloned());
    out
}

/// `a photo of *`.
pub fn source_prompt() -> Vec<String> {
    SOURCE_PROMPT.iter().map(|s| s.to_string()).collect()
}

/// Gradients with respect to the effective (base + adapter) weights and the
/// unadapted tensors. Converted into per-parameter gradients with
/// [`DenseGrads::accumulate_into`].
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub text: Vec<Matrix>,
    pub visual: Matrix,
    pub token: Matrix,
    pub position: Matrix,
    pub mapping: [Matrix; 3],
    pub log_tau: f64,
}

impl DenseGrads {
    pub fn zeros(stack: &AdapterStack) -> Self {
        let d = stack.config.d_model;
        Self {
            text: stack.text.iter().map(|l| Matrix::zeros(l.base.rows(), l.base.cols())).collect(),
            visual: Matrix::zeros(d, stack.config.d_visual_in),
            token: Matrix::zeros(stack.embed.token.rows(), d),
            position: Matrix::zeros(stack.embed.position.rows(), d),
            mapping: [Matrix::zeros(d, d), Matrix::zeros(d, d), Matrix::zeros(d, d)],
            log_tau: 0.0,
        }
    }

    pub fn add_scaled(&mut self, scale: f64, other: &DenseGrads) {
        for (a, b) in self.text.iter_mut().zip(&other.text) {
            a.add_scaled(scale, b);
        }
        self.visual.add_scaled(scale, &other.visual);
        self.token.add_scaled(scale, &other.token);
        self.position.add_scaled(scale, &other.position);
        for (a, b) in self.mapping.iter_mut().zip(&other.mapping) {
            a.add_scaled(scale, b);
        }
        self.log_tau += scale * other.log_tau;
    }

    /// Chain rule through `W_eff = W + s·B·A`: adds `G` to the base, `s·G·Aᵀ`
    /// to the basis and `s·Bᵀ·G` to the coefficients of `branch`. The visual
    /// layer always uses the endpoint coefficients.
    pub fn accumulate_into(&self, stack: &AdapterStack, branch: BranchId, out: &mut AdapterStack) {
        for ((g, layer), dst) in self.text.iter().zip(&stack.text).zip(out.text.iter_mut()) {
            let LoraLayer { base, basis, a_end, a_trans, .. } = dst;
            let coeff_out = match branch {
                BranchId::End => a_end,
                BranchId::Trans => a_trans,
            };
            lora_chain(g, layer.scale, &layer.basis, layer.coeff(branch), base, basis, coeff_out);
        }
        let v = &stack.visual;
        let dst = &mut out.visual;
        lora_chain(&self.visual, v.scale, &v.basis, &v.a_end, &mut dst.base, &mut dst.basis, &mut dst.a_end);
        out.embed.token.add_scaled(1.0, &self.token);
        out.embed.position.add_scaled(1.0, &self.position);
        for (a, b) in out.mapping.layers.iter_mut().zip(&self.mapping) {
            a.add_scaled(1.0, b);
        }
        out.log_tau += self.log_tau;
    }
}

fn lora_chain(g: &Matrix, scale: f64, basis: &Matrix, coeff: &Matrix, base_out: &mut Matrix, basis_out: &mut Matrix, coeff_out: &mut Matrix) {
    base_out.add_scaled(1.0, g);
    // dB = s G Aᵀ   (d_out × r)
    let (d_out, d_in) = g.shape();
    let r = basis.cols();
    for i in 0..d_out {
        let gi = g.row(i);
        let brow = basis_out.row_mut(i);
        for k in 0..r {
            brow[k] += scale * dot(gi, coeff.row(k));
        }
    }
    // dA = s Bᵀ G   (r × d_in)
    for i in 0..d_out {
        let gi = g.row(i);
        for k in 0..r {
            let b = scale * basis.get(i, k);
            if b != 0.0 {
                axpy(coeff_out.row_mut(k), b, gi);
            }
        }
    }
    debug_assert_eq!(coeff_out.cols(), d_in);
}

#[derive(Debug, Clone)]
pub struct TextTrace {
    ids: Vec<usize>,
    pseudo_pos: Option<usize>,
    bound: Vec<Vector>,
    hidden: Vec<Vector>,
    act: Vec<Vector>,
    z_norm: f64,
    pub out: Vector,
}

pub fn text_forward(stack: &AdapterStack, view: &BranchView, ids: &[usize], pseudo: Option<&[f64]>) -> Result<TextTrace> {
    let cfg = &stack.config;
    if ids.len() > cfg.max_len {
        return Err(Error::SequenceTooLong { len: ids.len(), max_len: cfg.max_len });
    }
    if ids.is_empty() {
        return Err(Error::DimMismatch { expected: 1, got: 0 });
    }
    const PSEUDO_ID: usize = 1;
    let pseudo_pos = ids.iter().position(|&t| t == PSEUDO_ID);
    if pseudo_pos.is_some() && pseudo.is_none() {
        return Err(Error::MissingPseudo);
    }
    if let Some(p) = pseudo {
        if p.len() != cfg.d_model {
            return Err(Error::DimMismatch { expected: cfg.d_model, got: p.len() });
        }
    }
    let d = cfg.d_model;
    let inv_n = 1.0 / ids.len() as f64;
    let mut h0 = vec![0.0; d];
    let mut bound = Vec::with_capacity(ids.len());
    for (i, &t) in ids.iter().enumerate() {
        let x: Vector = match &view.bindings {
            Some(table) if Some(i) != pseudo_pos => table.get(i, t).to_vec(),
            _ => {
                let e = if Some(i) == pseudo_pos { pseudo.unwrap() } else { stack.embed.token.row(t) };
                let pos = stack.embed.position.row(i);
                e.iter().zip(pos).map(|(a, b)| (a + b).tanh()).collect()
            }
        };
        axpy(&mut h0, inv_n, &x);
        bound.push(x);
    }
    let n_blocks = cfg.n_blocks;
    let mut hidden = Vec::with_capacity(n_blocks + 1);
    let mut act = Vec::with_capacity(n_blocks);
    hidden.push(h0);
    for l in 0..n_blocks {
        let h = hidden.last().unwrap();
        let a: Vector = view.text[l].matvec(h).into_iter().map(f64::tanh).collect();
        let next: Vector = h.iter().zip(&a).map(|(x, y)| x + y).collect();
        act.push(a);
        hidden.push(next);
    }
    let z = view.text[n_blocks].matvec(hidden.last().unwrap());
    let z_norm = norm(&z);
    if z_norm <= EPS_NORM || !z_norm.is_finite() {
        return Err(Error::DegenerateNorm { norm: z_norm });
    }
    let out = z.iter().map(|v| v / z_norm).collect();
    Ok(TextTrace { ids: ids.to_vec(), pseudo_pos, bound, hidden, act, z_norm, out })
}

/// Gradient of `y = z / |z|` pulled back to `z`.
fn normalize_backward(y: &[f64], z_norm: f64, gy: &[f64]) -> Vector {
    let yg = dot(y, gy);
    y.iter().zip(gy).map(|(yi, gi)| (gi - yi * yg) / z_norm).collect()
}

/// Accumulates gradients of a scalar loss whose gradient w.r.t. the output
/// is `g_out`. Returns the gradient w.r.t. the pseudo vector, if present.
pub fn text_backward(stack: &AdapterStack, view: &BranchView, trace: &TextTrace, g_out: &[f64], grads: &mut DenseGrads) -> Option<Vector> {
    let n_blocks = stack.config.n_blocks;
    let gz = normalize_backward(&trace.out, trace.z_norm, g_out);
    grads.text[n_blocks].add_outer(1.0, &gz, &trace.hidden[n_blocks]);
    let mut gh = view.text[n_blocks].matvec_t(&gz);
    for l in (0..n_blocks).rev() {
        let ga: Vector = gh.iter().zip(&trace.act[l]).map(|(g, a)| g * (1.0 - a * a)).collect();
        grads.text[l].add_outer(1.0, &ga, &trace.hidden[l]);
        let back = view.text[l].matvec_t(&ga);
        axpy(&mut gh, 1.0, &back);
    }
    let inv_n = 1.0 / trace.ids.len() as f64;
    let mut g_pseudo = None;
    for (i, (&t, x)) in trace.ids.iter().zip(&trace.bound).enumerate() {
        let gpre: Vector = gh.iter().zip(x).map(|(g, xv)| g * inv_n * (1.0 - xv * xv)).collect();
        axpy(grads.position.row_mut(i), 1.0, &gpre);
        if Some(i) == trace.pseudo_pos {
            g_pseudo = Some(gpre);
        } else {
            axpy(grads.token.row_mut(t), 1.0, &gpre);
        }
    }
    g_pseudo
}

#[derive(Debug, Clone)]
pub struct VisualTrace {
    x: Vector,
    norm: f64,
    pub out: Vector,
}

pub fn visual_forward(stack: &AdapterStack, view: &BranchView, feature: &[f64]) -> Result<VisualTrace> {
    if feature.len() != stack.config.d_visual_in {
        return Err(Error::DimMismatch { expected: stack.config.d_visual_in, got: feature.len() });
    }
    let raw = view.visual.matvec(feature);
    let n = norm(&raw);
    if n <= EPS_NORM || !n.is_finite() {
        return Err(Error::DegenerateNorm { norm: n });
    }
    Ok(VisualTrace { x: feature.to_vec(), norm: n, out: raw.iter().map(|v| v / n).collect() })
}

pub fn visual_backward(trace: &VisualTrace, g_out: &[f64], grads: &mut DenseGrads) {
    let graw = normalize_backward(&trace.out, trace.norm, g_out);
    grads.visual.add_outer(1.0, &graw, &trace.x);
}

#[derive(Debug, Clone)]
pub struct MappingTrace {
    u: Vector,
    a1: Vector,
    a2: Vector,
    pub out: Vector,
}

pub fn mapping_forward(stack: &AdapterStack, u: &[f64]) -> MappingTrace {
    let [m1, m2, m3] = &stack.mapping.layers;
    let a1: Vector = m1.matvec(u).into_iter().map(f64::tanh).collect();
    let a2: Vector = m2.matvec(&a1).into_iter().map(f64::tanh).collect();
    let out = m3.matvec(&a2);
    MappingTrace { u: u.to_vec(), a1, a2, out }
}

/// Returns the gradient w.r.t. the mapping input.
pub fn mapping_backward(stack: &AdapterStack, trace: &MappingTrace, g_out: &[f64], grads: &mut DenseGrads) -> Vector {
    let [m1, m2, m3] = &stack.mapping.layers;
    grads.mapping[2].add_outer(1.0, g_out, &trace.a2);
    let ga2 = m3.matvec_t(g_out);
    let gp2: Vector = ga2.iter().zip(&trace.a2).map(|(g, a)| g * (1.0 - a * a)).collect();
    grads.mapping[1].add_outer(1.0, &gp2, &trace.a1);
    let ga1 = m2.matvec_t(&gp2);
    let gp1: Vector = ga1.iter().zip(&trace.a1).map(|(g, a)| g * (1.0 - a * a)).collect();
    grads.mapping[0].add_outer(1.0, &gp1, &trace.u);
    m1.matvec_t(&gp1)
}

/// Visual feature → pseudo-token vector, with both traces kept for backward.
#[derive(Debug, Clone)]
pub struct PseudoTrace {
    pub visual: VisualTrace,
    pub mapping: MappingTrace,
}

impl PseudoTrace {
    pub fn pseudo(&self) -> &[f64] {
        &self.mapping.out
    }
}

pub fn pseudo_forward(stack: &AdapterStack, view: &BranchView, feature: &[f64]) -> Result<PseudoTrace> {
    let visual = visual_forward(stack, view, feature)?;
    let mapping = mapping_forward(stack, &visual.out);
    Ok(PseudoTrace { visual, mapping })
}

pub fn pseudo_backward(stack: &AdapterStack, trace: &PseudoTrace, g_pseudo: &[f64], grads: &mut DenseGrads) {
    let gu = mapping_backward(stack, &trace.mapping, g_pseudo, grads);
    visual_backward(&trace.visual, &gu, grads);
}

// Convenience entry points that build the branch view on the fly.

pub fn encode_text(stack: &AdapterStack, ids: &[usize], pseudo: Option<&[f64]>, branch: BranchId) -> Result<Vector> {
    Ok(text_forward(stack, &stack.view(branch), ids, pseudo)?.out)
}

pub fn encode_visual(stack: &AdapterStack, feature: &[f64]) -> Result<Vector> {
    Ok(visual_forward(stack, &stack.view(BranchId::End), feature)?.out)
}

/// Pseudo-token vector `f_φ(E_V(feature))`; not normalized.
pub fn map_visual(stack: &AdapterStack, feature: &[f64]) -> Result<Vector> {
    Ok(pseudo_forward(stack, &stack.view(BranchId::End), feature)?.mapping.out)
}
