//! Shared-basis dual-branch low-rank parameter store.
//!
//! Every adapted linear map holds a frozen base `W`, one basis `B` and two
//! coefficient matrices. The endpoint and transition views differ only in
//! which coefficient matrix multiplies the (single, shared) basis:
//! `W_eff = W + s · B · A_branch`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{matmul, Matrix};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCIR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub max_len: usize,
    pub d_visual_in: usize,
    pub vocab_size: usize,
    pub rank: usize,
    pub lora_alpha: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d_model: 64, n_blocks: 4, max_len: 24, d_visual_in: 38, vocab_size: 57, rank: 8, lora_alpha: 16.0 }
    }
}

impl EncoderConfig {
    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.d_model < 8 {
            return bad("d_model must be at least 8");
        }
        if self.n_blocks < 1 {
            return bad("n_blocks must be at least 1");
        }
        if self.max_len < 12 {
            return bad("max_len must cover the longest prompt template (12 tokens)");
        }
        if self.rank < 1 {
            return bad("rank must be at least 1");
        }
        if !(self.lora_alpha > 0.0) {
            return bad("lora_alpha must be positive");
        }
        if self.d_visual_in == 0 || self.vocab_size < 2 {
            return bad("d_visual_in and vocab_size must be set from the schema");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchId {
    End,
    Trans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PassId {
    EndpointPass,
    TransitionPass,
    /// Ablation: one shared coefficient set (stored in `a_end`) trained on
    /// the joint objective together with the endpoint set.
    JointPass,
}

/// Which parts of the retrieval pathway the endpoint pass may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainableScope {
    /// LoRA on the text tower only.
    Text,
    /// LoRA on the text tower plus the full mapping network.
    TextMapping,
    /// LoRA on both towers plus the full mapping network.
    #[default]
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    TokenEmbed,
    PosEmbed,
    TextBase,
    TextBasis,
    TextAEnd,
    TextATrans,
    VisualBase,
    VisualBasis,
    VisualAEnd,
    VisualATrans,
    Mapping,
    LogTau,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub base: Matrix,
    pub basis: Matrix,
    pub a_end: Matrix,
    pub a_trans: Matrix,
    pub scale: f64,
}

impl LoraLayer {
    pub fn new(base: Matrix, rank: usize, scale: f64, rng: &mut Rng) -> Self {
        let (d_out, d_in) = base.shape();
        let basis = Matrix::gaussian(d_out, rank, (1.0 / rank as f64).sqrt(), rng);
        Self { base, basis, a_end: Matrix::zeros(rank, d_in), a_trans: Matrix::zeros(rank, d_in), scale }
    }

    pub fn coeff(&self, branch: BranchId) -> &Matrix {
        match branch {
            BranchId::End => &self.a_end,
            BranchId::Trans => &self.a_trans,
        }
    }

    pub fn coeff_mut(&mut self, branch: BranchId) -> &mut Matrix {
        match branch {
            BranchId::End => &mut self.a_end,
            BranchId::Trans => &mut self.a_trans,
        }
    }

    /// `s · B · A_branch`.
    pub fn delta(&self, branch: BranchId) -> Matrix {
        matmul(&self.basis, self.coeff(branch)).expect("basis/coefficient shapes agree").scaled(self.scale)
    }

    pub fn effective_weight(&self, branch: BranchId) -> Matrix {
        let mut w = self.base.clone();
        w.add_scaled(1.0, &self.delta(branch));
        w
    }
}

pub fn effective_weight(layer: &LoraLayer, branch: BranchId) -> Matrix {
    layer.effective_weight(branch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingNetwork {
    pub layers: [Matrix; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub token: Matrix,
    pub position: Matrix,
}

/// Every trainable tensor of the toy retrieval model.
///
/// `text` holds the `n_blocks` residual blocks followed by the output
/// projection; all of them carry adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterStack {
    pub config: EncoderConfig,
    pub embed: Embeddings,
    pub text: Vec<LoraLayer>,
    pub visual: LoraLayer,
    pub mapping: MappingNetwork,
    pub log_tau: f64,
}

/// Initial temperature `1 / 0.07`.
pub fn initial_log_tau() -> f64 {
    (1.0f64 / 0.07).ln()
}

/// Effective matrices for one branch, precomputed once per optimizer step.
#[derive(Debug, Clone)]
pub struct BranchView {
    pub branch: BranchId,
    pub text: Vec<Matrix>,
    pub visual: Matrix,
    /// Precomputed token bindings; must come from the same embeddings.
    pub bindings: Option<Arc<BindingTable>>,
}

impl BranchView {
    pub fn with_bindings(mut self, table: Arc<BindingTable>) -> Self {
        self.bindings = Some(table);
        self
    }
}

/// `tanh(E[t] + P[i])` for every position `i` and token `t`. Valid for as
/// long as the embeddings it was built from stay unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct BindingTable {
    vocab: usize,
    d: usize,
    data: Vec<f64>,
}

impl BindingTable {
    pub fn new(embed: &Embeddings) -> Self {
        let (vocab, d) = embed.token.shape();
        let max_len = embed.position.rows();
        let mut data = Vec::with_capacity(max_len * vocab * d);
        for i in 0..max_len {
            let pos = embed.position.row(i);
            for t in 0..vocab {
                data.extend(embed.token.row(t).iter().zip(pos).map(|(a, b)| (a + b).tanh()));
            }
        }
        Self { vocab, d, data }
    }

    pub fn get(&self, position: usize, token: usize) -> &[f64] {
        let start = (position * self.vocab + token) * self.d;
        &self.data[start..start + self.d]
    }
}

pub struct ParamRef<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl AdapterStack {
    /// Random base towers plus fresh adapters (`B ~ N(0, 1/r)`, `A = 0`).
    pub fn init(config: &EncoderConfig, rng: &Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut base_rng = rng.fork("base");
        let token = Matrix::gaussian(config.vocab_size, d, 0.5, &mut base_rng);
        let position = Matrix::gaussian(config.max_len, d, 0.5, &mut base_rng);
        let mut bases: Vec<Matrix> =
            (0..config.n_blocks).map(|_| Matrix::gaussian(d, d, 0.5 / (d as f64).sqrt(), &mut base_rng)).collect();
        bases.push(Matrix::gaussian(d, d, 1.0 / (d as f64).sqrt(), &mut base_rng));
        let visual_base = Matrix::gaussian(d, config.d_visual_in, 1.0 / (config.d_visual_in as f64).sqrt(), &mut base_rng);
        let mapping = MappingNetwork {
            layers: [
                Matrix::gaussian(d, d, 1.0 / (d as f64).sqrt(), &mut base_rng),
                Matrix::gaussian(d, d, 1.0 / (d as f64).sqrt(), &mut base_rng),
                Matrix::gaussian(d, d, 1.0 / (d as f64).sqrt(), &mut base_rng),
            ],
        };
        let placeholder = |base: Matrix| LoraLayer {
            base,
            basis: Matrix::zeros(0, 0),
            a_end: Matrix::zeros(0, 0),
            a_trans: Matrix::zeros(0, 0),
            scale: 1.0,
        };
        let mut stack = Self {
            config: config.clone(),
            embed: Embeddings { token, position },
            text: bases.into_iter().map(placeholder).collect(),
            visual: placeholder(visual_base),
            mapping,
            log_tau: initial_log_tau(),
        };
        init_adapters(&mut stack, rng);
        Ok(stack)
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp().clamp(1.0, 100.0)
    }

    /// Whether the temperature clamp is active (gradient w.r.t. `log_tau`
    /// vanishes there).
    pub fn tau_clamped(&self) -> bool {
        let t = self.log_tau.exp();
        !(1.0..=100.0).contains(&t)
    }

    pub fn view(&self, branch: BranchId) -> BranchView {
        BranchView {
            branch,
            text: self.text.iter().map(|l| l.effective_weight(branch)).collect(),
            // The visual pathway belongs to the retrieval branch only.
            visual: self.visual.effective_weight(BranchId::End),
            bindings: None,
        }
    }

    /// Same shapes, all zeros. Used for gradients and optimizer moments.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_param_mut(|_, data| data.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    pub fn params(&self) -> Vec<ParamRef<'_>> {
        fn mat<'a>(out: &mut Vec<ParamRef<'a>>, name: String, group: ParamGroup, m: &'a Matrix) {
            out.push(ParamRef { name, group, shape: vec![m.rows(), m.cols()], data: m.data() });
        }
        let mut out = Vec::new();
        mat(&mut out, "embed.token".into(), ParamGroup::TokenEmbed, &self.embed.token);
        mat(&mut out, "embed.position".into(), ParamGroup::PosEmbed, &self.embed.position);
        for (i, l) in self.text.iter().enumerate() {
            mat(&mut out, format!("text.{i}.base"), ParamGroup::TextBase, &l.base);
            mat(&mut out, format!("text.{i}.basis"), ParamGroup::TextBasis, &l.basis);
            mat(&mut out, format!("text.{i}.a_end"), ParamGroup::TextAEnd, &l.a_end);
            mat(&mut out, format!("text.{i}.a_trans"), ParamGroup::TextATrans, &l.a_trans);
        }
        mat(&mut out, "visual.base".into(), ParamGroup::VisualBase, &self.visual.base);
        mat(&mut out, "visual.basis".into(), ParamGroup::VisualBasis, &self.visual.basis);
        mat(&mut out, "visual.a_end".into(), ParamGroup::VisualAEnd, &self.visual.a_end);
        mat(&mut out, "visual.a_trans".into(), ParamGroup::VisualATrans, &self.visual.a_trans);
        for (k, m) in self.mapping.layers.iter().enumerate() {
            mat(&mut out, format!("mapping.{k}"), ParamGroup::Mapping, m);
        }
        out.push(ParamRef {
            name: "log_tau".into(),
            group: ParamGroup::LogTau,
            shape: vec![1],
            data: std::slice::from_ref(&self.log_tau),
        });
        out
    }

    /// Mutable slices in the same order as [`AdapterStack::params`].
    pub fn params_mut(&mut self) -> Vec<(ParamGroup, &mut [f64])> {
        let mut out: Vec<(ParamGroup, &mut [f64])> = Vec::new();
        out.push((ParamGroup::TokenEmbed, self.embed.token.data_mut()));
        out.push((ParamGroup::PosEmbed, self.embed.position.data_mut()));
        for l in self.text.iter_mut() {
            out.push((ParamGroup::TextBase, l.base.data_mut()));
            out.push((ParamGroup::TextBasis, l.basis.data_mut()));
            out.push((ParamGroup::TextAEnd, l.a_end.data_mut()));
            out.push((ParamGroup::TextATrans, l.a_trans.data_mut()));
        }
        out.push((ParamGroup::VisualBase, self.visual.base.data_mut()));
        out.push((ParamGroup::VisualBasis, self.visual.basis.data_mut()));
        out.push((ParamGroup::VisualAEnd, self.visual.a_end.data_mut()));
        out.push((ParamGroup::VisualATrans, self.visual.a_trans.data_mut()));
        for m in self.mapping.layers.iter_mut() {
            out.push((ParamGroup::Mapping, m.data_mut()));
        }
        out.push((ParamGroup::LogTau, std::slice::from_mut(&mut self.log_tau)));
        out
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(ParamGroup, &mut [f64])) {
        for (g, d) in self.params_mut() {
            f(g, d);
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// Concatenation of every tensor in `groups`, in canonical order.
    pub fn flatten(&self, groups: &HashSet<ParamGroup>) -> Vec<f64> {
        self.params().iter().filter(|p| groups.contains(&p.group)).flat_map(|p| p.data.iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other` over every tensor.
    pub fn add_scaled(&mut self, scale: f64, other: &AdapterStack) {
        let src: Vec<Vec<f64>> = other.params().iter().map(|p| p.data.to_vec()).collect();
        for ((_, d), s) in self.params_mut().into_iter().zip(src) {
            for (x, y) in d.iter_mut().zip(s) {
                *x += scale * y;
            }
        }
    }

    pub fn zero_coefficients(&mut self) {
        for l in self.text.iter_mut().chain(std::iter::once(&mut self.visual)) {
            l.a_end.fill(0.0);
            l.a_trans.fill(0.0);
        }
    }
}

/// Resets every adapter: `B ~ N(0, 1/r)`, `A_end = A_trans = 0`, so both
/// branches start exactly at the frozen base.
pub fn init_adapters(stack: &mut AdapterStack, rng: &Rng) {
    let rank = stack.config.rank;
    let scale = stack.config.lora_scale();
    let mut lora_rng = rng.fork("lora");
    for l in stack.text.iter_mut() {
        let base = std::mem::replace(&mut l.base, Matrix::zeros(0, 0));
        *l = LoraLayer::new(base, rank, scale, &mut lora_rng);
    }
    let base = std::mem::replace(&mut stack.visual.base, Matrix::zeros(0, 0));
    stack.visual = LoraLayer::new(base, rank, scale, &mut lora_rng);
}

/// Parameter groups updated during surrogate pretraining of the base towers.
pub fn pretrain_mask() -> HashSet<ParamGroup> {
    use ParamGroup::*;
    [TokenEmbed, PosEmbed, TextBase, VisualBase, Mapping].into_iter().collect()
}

pub fn trainable_mask(pass: PassId) -> HashSet<ParamGroup> {
    trainable_mask_scoped(pass, TrainableScope::Full)
}

pub fn trainable_mask_scoped(pass: PassId, scope: TrainableScope) -> HashSet<ParamGroup> {
    use ParamGroup::*;
    match pass {
        PassId::TransitionPass => [TextATrans].into_iter().collect(),
        PassId::EndpointPass | PassId::JointPass => {
            let mut set: HashSet<ParamGroup> = [TextAEnd, TextBasis, LogTau].into_iter().collect();
            if matches!(scope, TrainableScope::TextMapping | TrainableScope::Full) {
                set.insert(Mapping);
            }
            if scope == TrainableScope::Full {
                set.insert(VisualBasis);
                set.insert(VisualAEnd);
            }
            set
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: EncoderConfig,
    pub seed: u64,
    #[serde(default)]
    pub config_hash: String,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serializes the stack. Layout: `"DCIR"`, u32 version, u32 tensor count,
/// then per tensor u32 name length, UTF-8 name, u32 ndim, u32 dims, raw
/// little-endian f64 values; followed by a u32-length-prefixed JSON
/// metadata block (config echo, provenance seed, config hash).
pub fn checkpoint_bytes(stack: &AdapterStack, meta: &CheckpointMeta) -> Vec<u8> {
    let params = stack.params();
    let mut buf = Vec::with_capacity(16 + stack.param_count() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_u32(&mut buf, params.len() as u32);
    for p in &params {
        put_u32(&mut buf, p.name.len() as u32);
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, p.shape.len() as u32);
        for &d in &p.shape {
            put_u32(&mut buf, d as u32);
        }
        for v in p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta_json = serde_json::to_vec(meta).expect("checkpoint metadata serializes");
    put_u32(&mut buf, meta_json.len() as u32);
    buf.extend_from_slice(&meta_json);
    buf
}

pub fn save_checkpoint(stack: &AdapterStack, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(stack, meta))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptTensor(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(AdapterStack, CheckpointMeta)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptTensor("bad magic bytes".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = c.u32()? as usize;
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::CorruptTensor("tensor name is not UTF-8".into()))?;
        let ndim = c.u32()? as usize;
        let dims: Vec<usize> = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = dims.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::CorruptTensor("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        tensors.push((name, dims, data));
    }
    let meta_len = c.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(meta_len)?)
        .map_err(|e| Error::CorruptTensor(format!("metadata: {e}")))?;
    meta.config.validate().map_err(|e| Error::CorruptTensor(e.to_string()))?;

    let mut stack = skeleton(&meta.config);
    let expected: Vec<(String, Vec<usize>)> = stack.params().into_iter().map(|p| (p.name, p.shape)).collect();
    if expected.len() != tensors.len() {
        return Err(Error::CorruptTensor(format!("expected {} tensors, found {}", expected.len(), tensors.len())));
    }
    for ((ename, eshape), (name, shape, _)) in expected.iter().zip(&tensors) {
        if ename != name || eshape != shape {
            return Err(Error::CorruptTensor(format!("tensor {name} {shape:?} does not match expected {ename} {eshape:?}")));
        }
    }
    for ((_, dst), (_, _, src)) in stack.params_mut().into_iter().zip(tensors) {
        dst.copy_from_slice(&src);
    }
    Ok((stack, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(AdapterStack, CheckpointMeta)> {
    checkpoint_from_bytes(&fs::read(path)?)
}

fn skeleton(config: &EncoderConfig) -> AdapterStack {
    let d = config.d_model;
    let r = config.rank;
    let layer = |d_out: usize, d_in: usize| LoraLayer {
        base: Matrix::zeros(d_out, d_in),
        basis: Matrix::zeros(d_out, r),
        a_end: Matrix::zeros(r, d_in),
        a_trans: Matrix::zeros(r, d_in),
        scale: config.lora_scale(),
    };
    AdapterStack {
        config: config.clone(),
        embed: Embeddings { token: Matrix::zeros(config.vocab_size, d), position: Matrix::zeros(config.max_len, d) },
        text: (0..=config.n_blocks).map(|_| layer(d, d)).collect(),
        visual: layer(d, config.d_visual_in),
        mapping: MappingNetwork { layers: [Matrix::zeros(d, d), Matrix::zeros(d, d), Matrix::zeros(d, d)] },
        log_tau: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig { d_model: 8, n_blocks: 2, max_len: 12, d_visual_in: 6, vocab_size: 10, rank: 2, lora_alpha: 4.0 }
    }

    #[test]
    fn fresh_adapters_start_at_base() {
        let stack = AdapterStack::init(&small(), &Rng::new(1)).unwrap();
        for l in &stack.text {
            assert_eq!(l.a_end, l.a_trans);
            assert!(l.a_end.data().iter().all(|&v| v == 0.0));
            assert_eq!(l.effective_weight(BranchId::End), l.base);
            assert_eq!(l.effective_weight(BranchId::Trans), l.base);
        }
        let again = AdapterStack::init(&small(), &Rng::new(1)).unwrap();
        assert_eq!(stack.text[0].basis, again.text[0].basis);
    }

    #[test]
    fn effective_weight_examples() {
        let mut rng = Rng::new(2);
        let d = 3;
        let mut layer = LoraLayer::new(Matrix::gaussian(d, d, 1.0, &mut rng), d, 1.0, &mut rng);
        layer.basis = Matrix::identity(d);
        layer.a_end = Matrix::gaussian(d, d, 1.0, &mut rng);
        let mut expected = layer.base.clone();
        expected.add_scaled(1.0, &layer.a_end);
        assert!(effective_weight(&layer, BranchId::End).max_abs_diff(&expected) < 1e-15);

        let d1 = layer.delta(BranchId::End);
        layer.scale *= 2.0;
        let d2 = layer.delta(BranchId::End);
        assert!(d2.max_abs_diff(&d1.scaled(2.0)) < 1e-14);
    }

    #[test]
    fn masks_follow_update_ownership() {
        use ParamGroup::*;
        let t = trainable_mask(PassId::TransitionPass);
        assert_eq!(t, [TextATrans].into_iter().collect());
        assert!(!t.contains(&TextBasis));
        assert!(!t.contains(&Mapping) && !t.contains(&VisualAEnd) && !t.contains(&VisualBasis));
        let e = trainable_mask(PassId::EndpointPass);
        for g in [TextAEnd, TextBasis, VisualBasis, VisualAEnd, Mapping, LogTau] {
            assert!(e.contains(&g), "{g:?}");
        }
        assert!(!e.contains(&TextATrans) && !e.contains(&TextBase));
        let text_only = trainable_mask_scoped(PassId::EndpointPass, TrainableScope::Text);
        assert!(!text_only.contains(&Mapping) && !text_only.contains(&VisualAEnd));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut stack = AdapterStack::init(&small(), &Rng::new(3)).unwrap();
        let mut rng = Rng::new(4);
        for l in stack.text.iter_mut() {
            l.a_end = Matrix::gaussian(l.a_end.rows(), l.a_end.cols(), 1.0, &mut rng);
            l.a_trans = Matrix::gaussian(l.a_end.rows(), l.a_end.cols(), 1.0, &mut rng);
        }
        stack.log_tau = -0.0;
        let meta = CheckpointMeta { config: small(), seed: 99, config_hash: "abc".into() };
        let bytes = checkpoint_bytes(&stack, &meta);
        let (back, meta_back) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(meta_back, meta);
        for (a, b) in stack.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name, b.name);
            let ab: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(checkpoint_bytes(&back, &meta_back), bytes);
    }

    #[test]
    fn checkpoint_errors() {
        let stack = AdapterStack::init(&small(), &Rng::new(3)).unwrap();
        let meta = CheckpointMeta { config: small(), seed: 1, config_hash: String::new() };
        let bytes = checkpoint_bytes(&stack, &meta);
        assert!(matches!(checkpoint_from_bytes(&bytes[..bytes.len() / 2]), Err(Error::CorruptTensor(_))));
        let mut bumped = bytes.clone();
        bumped[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(checkpoint_from_bytes(&bumped), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn every_parameter_appears_once() {
        let stack = AdapterStack::init(&small(), &Rng::new(3)).unwrap();
        let names: Vec<String> = stack.params().into_iter().map(|p| p.name).collect();
        let unique: HashSet<&String> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert_eq!(names.len(), 2 + 4 * 3 + 4 + 3 + 1);
    }
}
