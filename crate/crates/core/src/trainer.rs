//! Surrogate pretraining, the two-pass decoupled trainer, the joint ablation
//! modes and AdamW.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapters::{
    pretrain_mask, trainable_mask_scoped, AdapterStack, BindingTable, BranchId, BranchView, ParamGroup, PassId,
    TrainableScope,
};
use crate::encoder::{
    compose_prompt, pseudo_backward, pseudo_forward, source_prompt, text_backward, text_forward, visual_backward,
    visual_forward, DenseGrads,
};
use crate::error::{Error, Result};
use crate::objectives::{endpoint_loss, pcgrad_combine, source_anchor, transition_delta, transition_loss, LossBreakdown};
use crate::rng::Rng;
use crate::synth::{gen_items, render_caption, visual_feature, AttributeSchema, EditTuple, Vocab, World};
use crate::tensor::{dot, Vector};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Decoupled,
    JointShared,
    #[serde(rename = "joint_pcgrad")]
    JointPCGrad,
    EndpointOnly,
    TransitionOnly,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::TransitionOnly,
        TrainMode::EndpointOnly,
        TrainMode::JointShared,
        TrainMode::JointPCGrad,
        TrainMode::Decoupled,
    ];

    /// Identifier used in config files and artifact names.
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Decoupled => "decoupled",
            TrainMode::JointShared => "joint_shared",
            TrainMode::JointPCGrad => "joint_pcgrad",
            TrainMode::EndpointOnly => "endpoint_only",
            TrainMode::TransitionOnly => "transition_only",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TrainMode::TransitionOnly => "Transition only",
            TrainMode::EndpointOnly => "Endpoint only",
            TrainMode::JointShared => "Joint",
            TrainMode::JointPCGrad => "Joint+PCGrad",
            TrainMode::Decoupled => "Decoupled+LRDM",
        }
    }

    pub fn is_joint(self) -> bool {
        matches!(self, TrainMode::JointShared | TrainMode::JointPCGrad)
    }
}

/// When the transition anchors of a decoupled step are computed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorTiming {
    /// After the endpoint update of the same mini-batch.
    #[default]
    AfterEndpoint,
    /// From the weights at the start of the step.
    BeforeEndpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(skip)]
    pub mode: TrainMode,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub lambda_trans: f64,
    pub omega: f64,
    pub scope: TrainableScope,
    pub anchor_timing: AnchorTiming,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Decoupled,
            steps: 1000,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 50,
            lambda_trans: 1.0,
            omega: 0.25,
            scope: TrainableScope::Full,
            anchor_timing: AnchorTiming::AfterEndpoint,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.batch_size < 2 {
            return bad(format!("train.batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("train.learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("train.weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.lambda_trans.is_finite() && self.lambda_trans >= 0.0) {
            return bad(format!("train.lambda_trans must be non-negative, got {}", self.lambda_trans));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return bad(format!("train.omega must lie in [0, 1], got {}", self.omega));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub heldout_items: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 500, batch_size: 64, learning_rate: 3e-3, warmup_steps: 25, heldout_items: 200 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::ConfigInvalid(format!("pretrain.batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::ConfigInvalid(format!("pretrain.learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Linear warmup to `peak`, then cosine decay to zero at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    0.5 * peak * (1.0 + (PI * progress).cos())
}

// ---------------------------------------------------------------------------
// AdamW

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One AdamW update on a flat slice. `t` is the 1-based step count.
pub fn adamw_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, weight_decay: f64) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * weight_decay * params[i];
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Moments for every tensor of a stack; only masked groups are touched.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: AdapterStack,
    v: AdapterStack,
    step: u64,
}

impl OptimizerState {
    pub fn new(stack: &AdapterStack) -> Self {
        Self { m: stack.zeros_like(), v: stack.zeros_like(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, stack: &mut AdapterStack, grads: &AdapterStack, mask: &HashSet<ParamGroup>, lr: f64, weight_decay: f64) {
        self.step += 1;
        let t = self.step;
        let g_all = grads.params();
        let params = stack.params_mut();
        let ms = self.m.params_mut();
        let vs = self.v.params_mut();
        for ((((group, p), g), (_, m)), (_, v)) in params.into_iter().zip(&g_all).zip(ms).zip(vs) {
            if mask.contains(&group) {
                adamw_update(p, g.data, m, v, t, lr, weight_decay);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Data

/// Token ids of every sequence a training tuple contributes.
#[derive(Debug, Clone)]
pub struct EncodedTuple {
    pub ref_item: usize,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub query: Vec<usize>,
    pub forward: Vec<usize>,
    pub reverse: Vec<usize>,
}

pub fn encode_tuple(vocab: &Vocab, t: &EditTuple) -> Result<EncodedTuple> {
    Ok(EncodedTuple {
        ref_item: t.ref_item_id,
        source: vocab.encode(&t.source_caption)?,
        target: vocab.encode(&t.modified_caption)?,
        query: vocab.encode(&compose_prompt(&t.instruction))?,
        forward: vocab.encode(&t.instruction)?,
        reverse: vocab.encode(&t.reverse_instruction)?,
    })
}

/// Mini-batch drawn for one optimizer step; both passes of a decoupled step
/// consume the same instance.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tuples: Vec<EncodedTuple>,
    pub ref_features: Vec<Vector>,
}

/// Tuples and items the trainer samples from.
pub struct TrainData<'a> {
    pub world: &'a World,
    pub encoded: Vec<EncodedTuple>,
    pub prompt_ids: Vec<usize>,
}

impl<'a> TrainData<'a> {
    pub fn new(world: &'a World) -> Result<Self> {
        let encoded = world.train_tuples.iter().map(|t| encode_tuple(&world.vocab, t)).collect::<Result<Vec<_>>>()?;
        let prompt_ids = world.vocab.encode(&source_prompt())?;
        Ok(Self { world, encoded, prompt_ids })
    }

    /// `batch_size` distinct tuples with freshly noised reference features.
    pub fn sample(&self, batch_size: usize, rng: &mut Rng) -> Batch {
        let n = self.encoded.len();
        let k = batch_size.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + rng.below(n - i);
            idx.swap(i, j);
        }
        let tuples: Vec<EncodedTuple> = idx[..k].iter().map(|&i| self.encoded[i].clone()).collect();
        let ref_features = tuples
            .iter()
            .map(|t| visual_feature(&self.world.schema, self.world.item(t.ref_item), self.world.noise_sigma, rng))
            .collect();
        Batch { tuples, ref_features }
    }

    /// One fixed batch of the first `batch_size` tuples, for smoke tests.
    pub fn fixed_batch(&self, batch_size: usize, rng: &mut Rng) -> Batch {
        let tuples: Vec<EncodedTuple> = self.encoded.iter().take(batch_size).cloned().collect();
        let ref_features = tuples
            .iter()
            .map(|t| visual_feature(&self.world.schema, self.world.item(t.ref_item), self.world.noise_sigma, rng))
            .collect();
        Batch { tuples, ref_features }
    }
}

// ---------------------------------------------------------------------------
// Gradients of the two objectives

/// Endpoint loss of a batch through `view` and its dense gradient.
pub fn endpoint_grads(stack: &AdapterStack, view: &BranchView, batch: &Batch) -> Result<(f64, DenseGrads)> {
    let mut pseudo = Vec::with_capacity(batch.tuples.len());
    let mut queries = Vec::with_capacity(batch.tuples.len());
    let mut targets = Vec::with_capacity(batch.tuples.len());
    for (t, f) in batch.tuples.iter().zip(&batch.ref_features) {
        let p = pseudo_forward(stack, view, f)?;
        queries.push(text_forward(stack, view, &t.query, Some(p.pseudo()))?);
        targets.push(text_forward(stack, view, &t.target, None)?);
        pseudo.push(p);
    }
    let q: Vec<Vector> = queries.iter().map(|t| t.out.clone()).collect();
    let tg: Vec<Vector> = targets.iter().map(|t| t.out.clone()).collect();
    let loss = endpoint_loss(&q, &tg, stack.log_tau)?;
    let mut grads = DenseGrads::zeros(stack);
    for i in 0..q.len() {
        if let Some(gp) = text_backward(stack, view, &queries[i], &loss.g_queries[i], &mut grads) {
            pseudo_backward(stack, &pseudo[i], &gp, &mut grads);
        }
        text_backward(stack, view, &targets[i], &loss.g_targets[i], &mut grads);
    }
    grads.log_tau = loss.g_log_tau;
    Ok((loss.loss, grads))
}

/// Detached transition proxies per tuple; `None` marks a degenerate tuple.
pub fn transition_deltas(
    stack: &AdapterStack,
    view: &BranchView,
    prompt_ids: &[usize],
    batch: &Batch,
    omega: f64,
) -> Result<Vec<Option<Vector>>> {
    let mut out = Vec::with_capacity(batch.tuples.len());
    for (t, f) in batch.tuples.iter().zip(&batch.ref_features) {
        let p = pseudo_forward(stack, view, f)?;
        let caption = text_forward(stack, view, &t.source, None)?.out;
        let prompt = text_forward(stack, view, prompt_ids, Some(p.pseudo()))?.out;
        let anchor = source_anchor(&caption, &prompt, omega)?;
        let target = text_forward(stack, view, &t.target, None)?.out;
        match transition_delta(&target, &anchor) {
            Ok(d) => out.push(Some(d)),
            Err(Error::DegenerateDelta { .. }) => out.push(None),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TransitionGrads {
    pub l_fwd: f64,
    pub l_rev: f64,
    pub skipped: usize,
    pub grads: DenseGrads,
}

/// Mean transition loss over the non-degenerate tuples and its gradient.
/// Errors with `DegenerateBatch` when every tuple is degenerate.
pub fn transition_grads(stack: &AdapterStack, view: &BranchView, batch: &Batch, deltas: &[Option<Vector>]) -> Result<TransitionGrads> {
    let valid = deltas.iter().filter(|d| d.is_some()).count();
    if valid == 0 {
        return Err(Error::DegenerateBatch);
    }
    let w = 1.0 / valid as f64;
    let mut grads = DenseGrads::zeros(stack);
    let (mut l_fwd, mut l_rev) = (0.0, 0.0);
    for (t, d) in batch.tuples.iter().zip(deltas) {
        if let Some(d) = d {
            let (f, r) = transition_loss(stack, view, &t.forward, &t.reverse, d, w, &mut grads)?;
            l_fwd += w * f;
            l_rev += w * r;
        }
    }
    if !(l_fwd.is_finite() && l_rev.is_finite()) {
        return Err(Error::NonFiniteLoss(format!("transition loss fwd={l_fwd} rev={l_rev}")));
    }
    Ok(TransitionGrads { l_fwd, l_rev, skipped: deltas.len() - valid, grads })
}

fn into_param_grads(stack: &AdapterStack, dense: &DenseGrads, branch: BranchId) -> AdapterStack {
    let mut g = stack.zeros_like();
    dense.accumulate_into(stack, branch, &mut g);
    g
}

/// PCGrad per adapted text layer on the flattened `(B, A)` gradient; all
/// other tensors receive the plain sum.
fn pcgrad_layers(g_end: &AdapterStack, g_trans: &AdapterStack) -> Result<AdapterStack> {
    let mut out = g_end.clone();
    out.add_scaled(1.0, g_trans);
    for ((dst, e), t) in out.text.iter_mut().zip(&g_end.text).zip(&g_trans.text) {
        let flat_e: Vector = e.basis.data().iter().chain(e.a_end.data()).copied().collect();
        let flat_t: Vector = t.basis.data().iter().chain(t.a_end.data()).copied().collect();
        let combined = pcgrad_combine(&flat_e, &flat_t)?;
        let nb = dst.basis.data().len();
        dst.basis.data_mut().copy_from_slice(&combined[..nb]);
        dst.a_end.data_mut().copy_from_slice(&combined[nb..]);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training steps

/// Step-scoped state shared by both passes.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub data: &'a TrainData<'a>,
    pub endpoint_opt: OptimizerState,
    pub transition_opt: OptimizerState,
    endpoint_mask: HashSet<ParamGroup>,
    transition_mask: HashSet<ParamGroup>,
    bindings: Arc<BindingTable>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a TrainData<'a>, stack: &AdapterStack) -> Result<Self> {
        config.validate()?;
        let pass = if config.mode.is_joint() { PassId::JointPass } else { PassId::EndpointPass };
        Ok(Self {
            endpoint_mask: trainable_mask_scoped(pass, config.scope),
            transition_mask: trainable_mask_scoped(PassId::TransitionPass, config.scope),
            endpoint_opt: OptimizerState::new(stack),
            transition_opt: OptimizerState::new(stack),
            bindings: Arc::new(BindingTable::new(&stack.embed)),
            config,
            data,
        })
    }

    /// Embeddings are outside every fine-tuning mask, so the binding table
    /// built at construction stays valid for the whole run.
    fn view(&self, stack: &AdapterStack, branch: BranchId) -> BranchView {
        stack.view(branch).with_bindings(self.bindings.clone())
    }

    pub fn train_step_endpoint(&mut self, stack: &mut AdapterStack, batch: &Batch, lr: f64) -> Result<LossBreakdown> {
        let view = self.view(stack, BranchId::End);
        let (l_end, dense) = endpoint_grads(stack, &view, batch)?;
        let g = into_param_grads(stack, &dense, BranchId::End);
        self.endpoint_opt.apply(stack, &g, &self.endpoint_mask, lr, self.config.weight_decay);
        Ok(LossBreakdown { l_end, ..Default::default() })
    }

    /// Updates `A_trans` only. `deltas` may carry anchors computed earlier in
    /// the step; otherwise they are computed from the current weights.
    pub fn train_step_transition(
        &mut self,
        stack: &mut AdapterStack,
        batch: &Batch,
        lr: f64,
        deltas: Option<Vec<Option<Vector>>>,
    ) -> Result<LossBreakdown> {
        let view = self.view(stack, BranchId::Trans);
        let deltas = match deltas {
            Some(d) => d,
            None => transition_deltas(stack, &view, &self.data.prompt_ids, batch, self.config.omega)?,
        };
        match transition_grads(stack, &view, batch, &deltas) {
            Ok(tg) => {
                let g = into_param_grads(stack, &tg.grads, BranchId::Trans);
                self.transition_opt.apply(stack, &g, &self.transition_mask, lr, self.config.weight_decay);
                Ok(LossBreakdown {
                    l_fwd: tg.l_fwd,
                    l_rev: tg.l_rev,
                    l_trans: tg.l_fwd + tg.l_rev,
                    skipped_degenerate: tg.skipped,
                    ..Default::default()
                })
            }
            Err(Error::DegenerateBatch) => Ok(LossBreakdown { skipped_degenerate: deltas.len(), ..Default::default() }),
            Err(e) => Err(e),
        }
    }

    /// Single shared coefficient set trained on `L_end + λ·L_trans`.
    pub fn train_step_joint(&mut self, stack: &mut AdapterStack, batch: &Batch, lr: f64) -> Result<LossBreakdown> {
        let view = self.view(stack, BranchId::End);
        let (l_end, dense_end) = endpoint_grads(stack, &view, batch)?;
        let deltas = transition_deltas(stack, &view, &self.data.prompt_ids, batch, self.config.omega)?;
        let g_end = into_param_grads(stack, &dense_end, BranchId::End);
        let mut out = LossBreakdown { l_end, ..Default::default() };
        let g = match transition_grads(stack, &view, batch, &deltas) {
            Ok(tg) => {
                out.l_fwd = tg.l_fwd;
                out.l_rev = tg.l_rev;
                out.l_trans = tg.l_fwd + tg.l_rev;
                out.skipped_degenerate = tg.skipped;
                let mut g_trans = into_param_grads(stack, &tg.grads, BranchId::End);
                g_trans.for_each_param_mut(|_, d| d.iter_mut().for_each(|v| *v *= self.config.lambda_trans));
                if self.config.mode == TrainMode::JointPCGrad {
                    pcgrad_layers(&g_end, &g_trans)?
                } else {
                    let mut g = g_end;
                    g.add_scaled(1.0, &g_trans);
                    g
                }
            }
            Err(Error::DegenerateBatch) => {
                out.skipped_degenerate = deltas.len();
                g_end
            }
            Err(e) => return Err(e),
        };
        self.endpoint_opt.apply(stack, &g, &self.endpoint_mask, lr, self.config.weight_decay);
        Ok(out)
    }

    /// One full step of the configured mode on `batch`.
    pub fn step(&mut self, stack: &mut AdapterStack, batch: &Batch, lr: f64) -> Result<(LossBreakdown, bool, bool)> {
        let cfg = &self.config;
        let out = match cfg.mode {
            TrainMode::EndpointOnly => (self.train_step_endpoint(stack, batch, lr)?, true, false),
            TrainMode::TransitionOnly => (self.train_step_transition(stack, batch, lr, None)?, false, true),
            TrainMode::JointShared | TrainMode::JointPCGrad => (self.train_step_joint(stack, batch, lr)?, true, true),
            TrainMode::Decoupled => {
                let early = match cfg.anchor_timing {
                    AnchorTiming::BeforeEndpoint => {
                        let view = self.view(stack, BranchId::Trans);
                        Some(transition_deltas(stack, &view, &self.data.prompt_ids, batch, cfg.omega)?)
                    }
                    AnchorTiming::AfterEndpoint => None,
                };
                let e = self.train_step_endpoint(stack, batch, lr)?;
                let t = self.train_step_transition(stack, batch, lr, early)?;
                (LossBreakdown { l_end: e.l_end, ..t }, true, true)
            }
        };
        if !stack.is_finite() {
            return Err(Error::NonFiniteLoss("parameters became non-finite after the update".into()));
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Training loop and log

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub l_end: Option<f64>,
    pub l_fwd: Option<f64>,
    pub l_rev: Option<f64>,
    pub lr: f64,
    pub tau: f64,
    pub degenerate_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "step,l_end,l_fwd,l_rev,lr,tau,degenerate_count";

    pub fn to_csv(&self, config_hash: &str) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut s = format!("# config_hash={config_hash}\n{}\n", Self::HEADER);
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step,
                opt(r.l_end),
                opt(r.l_fwd),
                opt(r.l_rev),
                r.lr,
                r.tau,
                r.degenerate_count
            ));
        }
        s
    }

    pub fn total_degenerate(&self) -> usize {
        self.rows.iter().map(|r| r.degenerate_count).sum()
    }
}

pub struct TrainOutcome {
    pub stack: AdapterStack,
    pub log: TrainLog,
}

/// Runs `config.steps` steps from a pretrained stack. Batches come from the
/// `train` stream of `config.seed`, one forked stream per step.
pub fn run_training(config: &TrainConfig, world: &World, mut stack: AdapterStack) -> Result<TrainOutcome> {
    let data = TrainData::new(world)?;
    let mut trainer = Trainer::new(config.clone(), &data, &stack)?;
    let rng = Rng::new(config.seed).fork("train");
    let mut log = TrainLog::default();
    for step in 0..config.steps {
        let batch = data.sample(config.batch_size, &mut rng.fork_index(step as u64));
        let lr = lr_at(step, config.steps, config.warmup_steps, config.learning_rate);
        let (b, ran_end, ran_trans) = trainer.step(&mut stack, &batch, lr)?;
        log.rows.push(LogRow {
            step,
            l_end: ran_end.then_some(b.l_end),
            l_fwd: ran_trans.then_some(b.l_fwd),
            l_rev: ran_trans.then_some(b.l_rev),
            lr,
            tau: stack.tau(),
            degenerate_count: b.skipped_degenerate,
        });
    }
    Ok(TrainOutcome { stack, log })
}

// ---------------------------------------------------------------------------
// Surrogate pretraining

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub final_loss: f64,
    pub heldout_r_at_1: f64,
}

/// Contrastive pretraining loss on a batch of items: caption ↔ visual plus
/// `a photo of *` ↔ visual. Gradients go to the base towers and mapping.
pub fn pretrain_grads(
    stack: &AdapterStack,
    captions: &[Vec<usize>],
    features: &[Vector],
    prompt_ids: &[usize],
) -> Result<(f64, DenseGrads)> {
    let view = stack.view(BranchId::End);
    let mut vis = Vec::with_capacity(features.len());
    let mut pseudo = Vec::with_capacity(features.len());
    let mut cap = Vec::with_capacity(features.len());
    let mut prm = Vec::with_capacity(features.len());
    for (c, f) in captions.iter().zip(features) {
        vis.push(visual_forward(stack, &view, f)?);
        let p = pseudo_forward(stack, &view, f)?;
        cap.push(text_forward(stack, &view, c, None)?);
        prm.push(text_forward(stack, &view, prompt_ids, Some(p.pseudo()))?);
        pseudo.push(p);
    }
    let v: Vec<Vector> = vis.iter().map(|t| t.out.clone()).collect();
    let c: Vec<Vector> = cap.iter().map(|t| t.out.clone()).collect();
    let p: Vec<Vector> = prm.iter().map(|t| t.out.clone()).collect();
    let la = endpoint_loss(&c, &v, stack.log_tau)?;
    let lb = endpoint_loss(&p, &v, stack.log_tau)?;
    let mut grads = DenseGrads::zeros(stack);
    for i in 0..v.len() {
        text_backward(stack, &view, &cap[i], &la.g_queries[i], &mut grads);
        if let Some(gp) = text_backward(stack, &view, &prm[i], &lb.g_queries[i], &mut grads) {
            pseudo_backward(stack, &pseudo[i], &gp, &mut grads);
        }
        let gv: Vector = la.g_targets[i].iter().zip(&lb.g_targets[i]).map(|(a, b)| a + b).collect();
        visual_backward(&vis[i], &gv, &mut grads);
    }
    grads.log_tau = la.g_log_tau + lb.g_log_tau;
    Ok((la.loss + lb.loss, grads))
}

/// Caption → own-feature R@1 over `n` fresh items.
pub fn caption_recall(stack: &AdapterStack, schema: &AttributeSchema, vocab: &Vocab, n: usize, noise_sigma: f64, rng: &mut Rng) -> Result<f64> {
    let items = gen_items(schema, n, rng)?;
    let view = stack.view(BranchId::End);
    let mut gallery = Vec::with_capacity(n);
    for it in &items {
        gallery.push(visual_forward(stack, &view, &visual_feature(schema, it, noise_sigma, rng))?.out);
    }
    let mut hits = 0;
    for (i, it) in items.iter().enumerate() {
        let q = text_forward(stack, &view, &vocab.encode(&render_caption(schema, it))?, None)?.out;
        let own = dot(&q, &gallery[i]);
        if gallery.iter().enumerate().all(|(j, g)| j == i || dot(&q, g) < own) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Trains the base towers, embeddings and mapping network, then zeroes
/// every adapter coefficient so both branches start at the pretrained base.
pub fn pretrain_base(stack: &mut AdapterStack, world: &World, cfg: &PretrainConfig, rng: &Rng) -> Result<PretrainReport> {
    cfg.validate()?;
    let mask = pretrain_mask();
    let prompt_ids = world.vocab.encode(&source_prompt())?;
    let mut opt = OptimizerState::new(stack);
    let stream = rng.fork("pretrain");
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let mut r = stream.fork_index(step as u64);
        let items = gen_items(&world.schema, cfg.batch_size, &mut r)?;
        let captions = items
            .iter()
            .map(|it| world.vocab.encode(&render_caption(&world.schema, it)))
            .collect::<Result<Vec<_>>>()?;
        let features: Vec<Vector> = items.iter().map(|it| visual_feature(&world.schema, it, world.noise_sigma, &mut r)).collect();
        let (loss, dense) = pretrain_grads(stack, &captions, &features, &prompt_ids)?;
        let g = into_param_grads(stack, &dense, BranchId::End);
        let lr = lr_at(step, cfg.steps, cfg.warmup_steps, cfg.learning_rate);
        opt.apply(stack, &g, &mask, lr, 0.0);
        if !stack.is_finite() {
            return Err(Error::NonFiniteLoss(format!("pretraining diverged at step {step}")));
        }
        last = loss;
    }
    stack.zero_coefficients();
    let heldout_r_at_1 = if cfg.heldout_items > 1 {
        caption_recall(stack, &world.schema, &world.vocab, cfg.heldout_items, world.noise_sigma, &mut rng.fork("heldout"))?
    } else {
        f64::NAN
    };
    Ok(PretrainReport { final_loss: last, heldout_r_at_1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::EncoderConfig;
    use crate::synth::WorldConfig;

    fn small_world() -> World {
        let cfg = WorldConfig {
            train_tuples: 200,
            val_queries: 20,
            test_queries: 20,
            gallery_size: 200,
            ..Default::default()
        };
        World::generate(&cfg, &Rng::new(7)).unwrap()
    }

    fn small_stack(world: &World) -> AdapterStack {
        let cfg = EncoderConfig { d_model: 16, n_blocks: 2, vocab_size: world.vocab.len(), ..Default::default() };
        AdapterStack::init(&cfg, &Rng::new(3)).unwrap()
    }

    fn with_trained_end(stack: &mut AdapterStack) {
        let mut r = Rng::new(99);
        for l in &mut stack.text {
            l.a_end.data_mut().iter_mut().for_each(|v| *v = 0.05 * r.normal());
        }
    }

    #[test]
    fn adamw_examples() {
        let mut p = vec![1.0, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, 0.0);
        assert_eq!(p, vec![1.0, -2.0]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 2, 0.1, 0.5);
        assert_eq!(p, vec![1.0 * (1.0 - 0.05), -2.0 * (1.0 - 0.05)]);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        // 1-D recursion: with g constant, m̂ = g and v̂ = g² exactly, so the step is lr·|g|/(|g|+ε).
        let (mut p, mut m, mut v) = ([0.0], [0.0], [0.0]);
        let mut prev = 0.0;
        for t in 1..=500 {
            adamw_update(&mut p, &[3.0], &mut m, &mut v, t, 0.01, 0.0);
            let delta = prev - p[0];
            assert!((delta - 0.01 * 3.0 / (3.0 + ADAM_EPS)).abs() < 1e-12);
            prev = p[0];
        }
    }

    #[test]
    fn lr_schedule_shape() {
        assert!((lr_at(0, 100, 10, 1.0) - 0.1).abs() < 1e-15);
        assert_eq!(lr_at(9, 100, 10, 1.0), 1.0);
        assert_eq!(lr_at(10, 100, 10, 1.0), 1.0);
        assert!(lr_at(99, 100, 10, 1.0) < 1e-3);
        for s in 10..99 {
            assert!(lr_at(s + 1, 100, 10, 1.0) <= lr_at(s, 100, 10, 1.0));
        }
    }

    #[test]
    fn endpoint_step_ownership() {
        let world = small_world();
        let data = TrainData::new(&world).unwrap();
        let mut stack = small_stack(&world);
        let before = stack.clone();
        let cfg = TrainConfig { mode: TrainMode::EndpointOnly, batch_size: 8, ..Default::default() };
        let mut tr = Trainer::new(cfg, &data, &stack).unwrap();
        let batch = data.sample(8, &mut Rng::new(1));
        tr.train_step_endpoint(&mut stack, &batch, 1e-2).unwrap();
        for (a, b) in stack.text.iter().zip(&before.text) {
            assert_ne!(a.a_end, b.a_end);
            assert_eq!(a.a_trans, b.a_trans);
            assert_eq!(a.base, b.base);
        }
        assert_ne!(stack.log_tau, before.log_tau);
        assert_eq!(stack.embed, before.embed);
    }

    #[test]
    fn transition_step_ownership() {
        let world = small_world();
        let data = TrainData::new(&world).unwrap();
        let mut stack = small_stack(&world);
        with_trained_end(&mut stack);
        let before = stack.clone();
        let cfg = TrainConfig { mode: TrainMode::TransitionOnly, batch_size: 8, ..Default::default() };
        let mut tr = Trainer::new(cfg, &data, &stack).unwrap();
        let batch = data.sample(8, &mut Rng::new(1));
        tr.train_step_transition(&mut stack, &batch, 1e-2, None).unwrap();
        for (a, b) in stack.text.iter().zip(&before.text) {
            assert_ne!(a.a_trans, b.a_trans);
            assert_eq!(a.a_end, b.a_end);
            assert_eq!(a.basis.data(), b.basis.data());
        }
        assert_eq!(stack.visual, before.visual);
        assert_eq!(stack.mapping, before.mapping);
        assert_eq!(stack.log_tau.to_bits(), before.log_tau.to_bits());
    }

    #[test]
    fn overfit_fixed_batch() {
        let world = small_world();
        let data = TrainData::new(&world).unwrap();
        let mut stack = small_stack(&world);
        let batch = data.fixed_batch(8, &mut Rng::new(2));
        let cfg = TrainConfig { mode: TrainMode::Decoupled, batch_size: 8, ..Default::default() };
        let mut tr = Trainer::new(cfg, &data, &stack).unwrap();
        let mut ends = Vec::new();
        let mut trans = Vec::new();
        for _ in 0..50 {
            let (b, _, _) = tr.step(&mut stack, &batch, 5e-3).unwrap();
            ends.push(b.l_end);
            trans.push(b.l_trans);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&ends[40..]) < mean(&ends[..10]));
        assert!(mean(&trans[40..]) < mean(&trans[..10]));
    }

    #[test]
    fn joint_with_zero_lambda_matches_endpoint_only() {
        let world = small_world();
        let stack = small_stack(&world);
        let base = TrainConfig { steps: 5, batch_size: 8, ..Default::default() };
        let e = run_training(&TrainConfig { mode: TrainMode::EndpointOnly, ..base.clone() }, &world, stack.clone()).unwrap();
        let j = run_training(&TrainConfig { mode: TrainMode::JointShared, lambda_trans: 0.0, ..base }, &world, stack).unwrap();
        assert_eq!(e.stack, j.stack);
    }

    #[test]
    fn decoupled_endpoint_path_matches_endpoint_only() {
        let world = small_world();
        let stack = small_stack(&world);
        let base = TrainConfig { steps: 5, batch_size: 8, ..Default::default() };
        let e = run_training(&TrainConfig { mode: TrainMode::EndpointOnly, ..base.clone() }, &world, stack.clone()).unwrap();
        let d = run_training(&TrainConfig { mode: TrainMode::Decoupled, ..base }, &world, stack).unwrap();
        for (a, b) in e.stack.text.iter().zip(&d.stack.text) {
            assert_eq!(a.a_end, b.a_end);
            assert_eq!(a.basis, b.basis);
        }
        assert_eq!(e.stack.visual, d.stack.visual);
        assert_eq!(e.stack.mapping, d.stack.mapping);
        assert_eq!(e.stack.log_tau.to_bits(), d.stack.log_tau.to_bits());
        assert!(e.stack.text.iter().all(|l| l.a_trans.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn transition_only_keeps_endpoint_side() {
        let world = small_world();
        let mut stack = small_stack(&world);
        with_trained_end(&mut stack);
        let cfg = TrainConfig { mode: TrainMode::TransitionOnly, steps: 3, batch_size: 8, ..Default::default() };
        let out = run_training(&cfg, &world, stack.clone()).unwrap();
        for (a, b) in out.stack.text.iter().zip(&stack.text) {
            assert_eq!(a.a_end, b.a_end);
            assert_eq!(a.basis, b.basis);
        }
        assert_eq!(out.stack.visual, stack.visual);
        assert_eq!(out.stack.mapping, stack.mapping);
    }

    #[test]
    fn training_is_deterministic() {
        let world = small_world();
        let stack = small_stack(&world);
        for mode in TrainMode::ALL {
            let cfg = TrainConfig { mode, steps: 3, batch_size: 8, seed: 11, ..Default::default() };
            let a = run_training(&cfg, &world, stack.clone()).unwrap();
            let b = run_training(&cfg, &world, stack.clone()).unwrap();
            assert_eq!(a.stack, b.stack);
            assert_eq!(a.log.to_csv("x"), b.log.to_csv("x"));
        }
    }

    #[test]
    fn pcgrad_mode_differs_from_plain_joint() {
        let world = small_world();
        let mut stack = small_stack(&world);
        with_trained_end(&mut stack);
        let base = TrainConfig { steps: 4, batch_size: 8, ..Default::default() };
        let a = run_training(&TrainConfig { mode: TrainMode::JointShared, ..base.clone() }, &world, stack.clone()).unwrap();
        let b = run_training(&TrainConfig { mode: TrainMode::JointPCGrad, ..base }, &world, stack).unwrap();
        assert_ne!(a.stack, b.stack);
        assert!(a.stack.text.iter().all(|l| l.a_trans.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn invalid_config_rejected() {
        let world = small_world();
        let stack = small_stack(&world);
        let cfg = TrainConfig { batch_size: 1, ..Default::default() };
        assert!(matches!(run_training(&cfg, &world, stack), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn log_csv_layout() {
        let world = small_world();
        let cfg = TrainConfig { mode: TrainMode::EndpointOnly, steps: 2, batch_size: 4, ..Default::default() };
        let out = run_training(&cfg, &world, small_stack(&world)).unwrap();
        let csv = out.log.to_csv("abc");
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# config_hash=abc");
        assert_eq!(lines[1], TrainLog::HEADER);
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[2].split(',').count(), 7);
        assert_eq!(lines[2].split(',').nth(2), Some(""));
    }

    #[test]
    fn pretraining_leaves_coefficients_zero_and_is_deterministic() {
        let world = small_world();
        let cfg = PretrainConfig { steps: 3, batch_size: 8, heldout_items: 10, ..Default::default() };
        let mut a = small_stack(&world);
        let mut b = a.clone();
        let before = a.clone();
        let ra = pretrain_base(&mut a, &world, &cfg, &Rng::new(4)).unwrap();
        pretrain_base(&mut b, &world, &cfg, &Rng::new(4)).unwrap();
        assert_eq!(a, b);
        assert!(ra.final_loss.is_finite());
        for (l, l0) in a.text.iter().zip(&before.text) {
            assert!(l.a_end.data().iter().chain(l.a_trans.data()).all(|&v| v == 0.0));
            assert_eq!(l.basis, l0.basis);
            assert_ne!(l.base, l0.base);
        }
        assert_eq!(a.log_tau, before.log_tau);
    }
}
