//! Coefficient merge of the two branches and weight-space merge baselines.

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterStack, BranchId};
use crate::error::{Error, Result};
use crate::eval::{build_gallery_index, evaluate_with_index, MetricsReport};
use crate::rng::Rng;
use crate::synth::{RetrievalBenchmark, Vocab};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    Lrdm,
    TaskArithmetic,
    Ties,
    Dare,
    DareTies,
}

impl MergeRule {
    pub const ALL: [MergeRule; 5] = [MergeRule::Lrdm, MergeRule::TaskArithmetic, MergeRule::Ties, MergeRule::Dare, MergeRule::DareTies];

    pub fn name(self) -> &'static str {
        match self {
            MergeRule::Lrdm => "lrdm",
            MergeRule::TaskArithmetic => "task_arithmetic",
            MergeRule::Ties => "ties",
            MergeRule::Dare => "dare",
            MergeRule::DareTies => "dare_ties",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeSpec {
    pub rule: MergeRule,
    pub alpha: f64,
    pub ties_density: f64,
    pub dare_drop_p: f64,
    pub seed: u64,
}

impl Default for MergeSpec {
    fn default() -> Self {
        Self { rule: MergeRule::Lrdm, alpha: 0.5, ties_density: 0.2, dare_drop_p: 0.9, seed: 0 }
    }
}

impl MergeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::ConfigInvalid(format!("merge alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.ties_density > 0.0 && self.ties_density <= 1.0) {
            return Err(Error::ConfigInvalid(format!("ties density {} outside (0, 1]", self.ties_density)));
        }
        if !(0.0..1.0).contains(&self.dare_drop_p) {
            return Err(Error::ConfigInvalid(format!("dare drop rate {} outside [0, 1)", self.dare_drop_p)));
        }
        Ok(())
    }
}

/// Dense `ΔW = s·B·A` per text layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub layers: Vec<Matrix>,
}

pub fn task_vector(stack: &AdapterStack, branch: BranchId) -> TaskVector {
    TaskVector { layers: stack.text.iter().map(|l| l.delta(branch)).collect() }
}

/// `A_merge = (1−α)·A_end + α·A_trans` on every text layer. The merged
/// coefficients replace `A_end`; `A_trans` is discarded.
pub fn lrdm_merge(stack: &AdapterStack, alpha: f64) -> AdapterStack {
    let mut out = stack.clone();
    for l in out.text.iter_mut() {
        let mut a = l.a_end.scaled(1.0 - alpha);
        a.add_scaled(alpha, &l.a_trans);
        l.a_end = a;
        l.a_trans.fill(0.0);
    }
    out.visual.a_trans.fill(0.0);
    out
}

fn check_shapes(tvs: &[TaskVector]) -> Result<()> {
    let Some(first) = tvs.first() else {
        return Err(Error::DimMismatch { expected: 1, got: 0 });
    };
    for tv in tvs {
        if tv.layers.len() != first.layers.len() {
            return Err(Error::DimMismatch { expected: first.layers.len(), got: tv.layers.len() });
        }
        for (a, b) in tv.layers.iter().zip(&first.layers) {
            if a.shape() != b.shape() {
                return Err(Error::DimMismatch { expected: b.data().len(), got: a.data().len() });
            }
        }
    }
    Ok(())
}

fn per_layer(tvs: &[TaskVector], mut f: impl FnMut(usize, &[&[f64]]) -> Vec<f64>) -> Result<TaskVector> {
    check_shapes(tvs)?;
    let mut layers = Vec::with_capacity(tvs[0].layers.len());
    for l in 0..tvs[0].layers.len() {
        let flats: Vec<&[f64]> = tvs.iter().map(|tv| tv.layers[l].data()).collect();
        let (r, c) = tvs[0].layers[l].shape();
        layers.push(Matrix::from_vec(r, c, f(l, &flats))?);
    }
    Ok(TaskVector { layers })
}

pub fn task_arithmetic(tvs: &[TaskVector], weights: &[f64]) -> Result<TaskVector> {
    if weights.len() != tvs.len() {
        return Err(Error::DimMismatch { expected: tvs.len(), got: weights.len() });
    }
    per_layer(tvs, |_, flats| {
        let mut out = vec![0.0; flats[0].len()];
        for (v, w) in flats.iter().zip(weights) {
            for (o, x) in out.iter_mut().zip(v.iter()) {
                *o += w * x;
            }
        }
        out
    })
}

/// Keeps the `⌈density·n⌉` largest-magnitude entries; equal magnitudes
/// keep the lower index.
pub fn trim(v: &[f64], density: f64) -> Vec<f64> {
    let n = v.len();
    let keep = ((density * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    for &i in &order[..keep] {
        out[i] = v[i];
    }
    out
}

/// Trim, elect the sign of larger weighted mass per coordinate (zero when the
/// masses balance), then average the surviving entries that agree with it.
pub fn ties_merge_flat(vs: &[&[f64]], density: f64, weights: &[f64]) -> Vec<f64> {
    let trimmed: Vec<Vec<f64>> = vs.iter().map(|v| trim(v, density)).collect();
    let n = vs.first().map_or(0, |v| v.len());
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let mass: f64 = trimmed.iter().zip(weights).map(|(t, w)| w * t[i]).sum();
        if mass == 0.0 {
            continue;
        }
        let (mut num, mut den) = (0.0, 0.0);
        for (t, w) in trimmed.iter().zip(weights) {
            if t[i] != 0.0 && t[i].signum() == mass.signum() {
                num += w * t[i];
                den += w;
            }
        }
        if den > 0.0 {
            *o = num / den;
        }
    }
    out
}

pub fn ties_merge(tvs: &[TaskVector], density: f64, weights: &[f64]) -> Result<TaskVector> {
    if weights.len() != tvs.len() {
        return Err(Error::DimMismatch { expected: tvs.len(), got: weights.len() });
    }
    per_layer(tvs, |_, flats| ties_merge_flat(flats, density, weights))
}

/// Zeroes each entry with probability `drop_p` and rescales survivors by
/// `1/(1−drop_p)`.
pub fn dare_flat(v: &[f64], drop_p: f64, rng: &mut Rng) -> Vec<f64> {
    let keep_scale = 1.0 / (1.0 - drop_p);
    v.iter().map(|&x| if rng.bernoulli(drop_p) { 0.0 } else { x * keep_scale }).collect()
}

pub fn dare(tv: &TaskVector, drop_p: f64, rng: &mut Rng) -> TaskVector {
    TaskVector {
        layers: tv
            .layers
            .iter()
            .map(|m| Matrix::from_vec(m.rows(), m.cols(), dare_flat(m.data(), drop_p, rng)).expect("shape preserved"))
            .collect(),
    }
}

pub fn dare_ties(tvs: &[TaskVector], drop_p: f64, density: f64, weights: &[f64], rng: &Rng) -> Result<TaskVector> {
    let dropped: Vec<TaskVector> = tvs.iter().enumerate().map(|(i, tv)| dare(tv, drop_p, &mut rng.fork_index(i as u64))).collect();
    ties_merge(&dropped, density, weights)
}

/// Folds a merged text-layer `ΔW` into the base weights and clears every
/// text coefficient; the visual adapter, mapping and temperature stay on
/// the endpoint pathway.
pub fn fold_into_stack(stack: &AdapterStack, merged: &TaskVector) -> Result<AdapterStack> {
    if merged.layers.len() != stack.text.len() {
        return Err(Error::DimMismatch { expected: stack.text.len(), got: merged.layers.len() });
    }
    let mut out = stack.clone();
    for (l, d) in out.text.iter_mut().zip(&merged.layers) {
        l.base.add_scaled(1.0, d);
        l.a_end.fill(0.0);
        l.a_trans.fill(0.0);
    }
    out.visual.a_trans.fill(0.0);
    Ok(out)
}

/// Applies `spec` to the two branches of `stack`. Two-operand baselines use
/// weights `(1−α, α)` on the endpoint and transition task vectors.
pub fn merge(stack: &AdapterStack, spec: &MergeSpec) -> Result<AdapterStack> {
    spec.validate()?;
    if spec.rule == MergeRule::Lrdm {
        return Ok(lrdm_merge(stack, spec.alpha));
    }
    let tvs = [task_vector(stack, BranchId::End), task_vector(stack, BranchId::Trans)];
    let weights = [1.0 - spec.alpha, spec.alpha];
    let rng = Rng::new(spec.seed).fork("dare");
    let merged = match spec.rule {
        MergeRule::TaskArithmetic => task_arithmetic(&tvs, &weights)?,
        MergeRule::Ties => ties_merge(&tvs, spec.ties_density, &weights)?,
        MergeRule::Dare => {
            let dropped: Vec<TaskVector> =
                tvs.iter().enumerate().map(|(i, tv)| dare(tv, spec.dare_drop_p, &mut rng.fork_index(i as u64))).collect();
            task_arithmetic(&dropped, &weights)?
        }
        MergeRule::DareTies => dare_ties(&tvs, spec.dare_drop_p, spec.ties_density, &weights, &rng)?,
        MergeRule::Lrdm => unreachable!(),
    };
    fold_into_stack(stack, &merged)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub metrics: MetricsReport,
}

/// Evaluates `lrdm_merge(α)` for every α in `grid`. The visual pathway is
/// shared by all merges, so the gallery is encoded once.
pub fn alpha_sweep(stack: &AdapterStack, grid: &[f64], benchmark: &RetrievalBenchmark, vocab: &Vocab) -> Result<Vec<SweepRow>> {
    let index = build_gallery_index(benchmark, &lrdm_merge(stack, 0.0))?;
    grid.iter()
        .map(|&alpha| {
            let merged = lrdm_merge(stack, alpha);
            let (metrics, _) = evaluate_with_index(&merged, benchmark, vocab, &index)?;
            Ok(SweepRow { alpha, metrics })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow], config_hash: &str) -> String {
    let mut s = format!("# config_hash={config_hash}\nalpha,r_at_1,r_at_5,map_at_10\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.alpha, r.metrics.r_at_1, r.metrics.r_at_5, r.metrics.map_at_10));
    }
    s
}

/// α with the highest R@1; ties keep the smallest α.
pub fn select_alpha(rows: &[SweepRow]) -> Option<f64> {
    let mut best: Option<&SweepRow> = None;
    for r in rows {
        match best {
            Some(b) if r.metrics.r_at_1 < b.metrics.r_at_1 || (r.metrics.r_at_1 == b.metrics.r_at_1 && r.alpha >= b.alpha) => {}
            _ => best = Some(r),
        }
    }
    best.map(|r| r.alpha)
}

/// `{0, 0.1, …, 1.0}`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::EncoderConfig;

    fn trained_stack(seed: u64) -> AdapterStack {
        let cfg = EncoderConfig { d_model: 12, n_blocks: 2, vocab_size: 30, rank: 3, ..Default::default() };
        let mut s = AdapterStack::init(&cfg, &Rng::new(seed)).unwrap();
        let mut r = Rng::new(seed ^ 0xabc);
        for l in s.text.iter_mut() {
            l.a_end.data_mut().iter_mut().for_each(|v| *v = r.normal());
            l.a_trans.data_mut().iter_mut().for_each(|v| *v = r.normal());
        }
        s
    }

    #[test]
    fn lrdm_examples() {
        let mut s = trained_stack(1);
        s.text.truncate(1);
        s.text[0].a_end = Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 2.0]]).unwrap();
        s.text[0].a_trans = Matrix::from_rows(&[&[0.0, 4.0], &[4.0, 0.0]]).unwrap();
        let m = lrdm_merge(&s, 0.5);
        assert_eq!(m.text[0].a_end, Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]).unwrap());
        assert_eq!(lrdm_merge(&s, 0.0).text[0].a_end, s.text[0].a_end);
        assert_eq!(lrdm_merge(&s, 1.0).text[0].a_end, s.text[0].a_trans);
    }

    #[test]
    fn lrdm_keeps_endpoint_side() {
        let s = trained_stack(2);
        let m = lrdm_merge(&s, 0.3);
        assert_eq!(m.visual, s.visual);
        assert_eq!(m.mapping, s.mapping);
        assert_eq!(m.log_tau, s.log_tau);
        assert!(m.text.iter().all(|l| l.a_trans.data().iter().all(|&v| v == 0.0)));
        for (a, b) in m.text.iter().zip(&s.text) {
            assert_eq!(a.basis, b.basis);
            assert_eq!(a.base, b.base);
        }
    }

    #[test]
    fn task_arithmetic_examples() {
        let s = trained_stack(3);
        let te = task_vector(&s, BranchId::End);
        assert_eq!(task_arithmetic(&[te.clone()], &[1.0]).unwrap(), te);
        let zero = TaskVector { layers: te.layers.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect() };
        let merged = fold_into_stack(&s, &task_arithmetic(&[zero.clone(), zero], &[0.5, 0.5]).unwrap()).unwrap();
        for (a, b) in merged.text.iter().zip(&s.text) {
            assert_eq!(a.base, b.base);
        }
        let bad = TaskVector { layers: vec![Matrix::zeros(1, 1)] };
        assert!(matches!(task_arithmetic(&[te, bad], &[0.5, 0.5]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn shared_basis_identity_at_half() {
        let s = trained_stack(4);
        let tvs = [task_vector(&s, BranchId::End), task_vector(&s, BranchId::Trans)];
        let ta = task_arithmetic(&tvs, &[0.5, 0.5]).unwrap();
        let lr = task_vector(&lrdm_merge(&s, 0.5), BranchId::End);
        for (a, b) in ta.layers.iter().zip(&lr.layers) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn ties_hand_trace() {
        let v1 = [2.0, -3.0, 0.1];
        let v2 = [1.5, 1.0, -0.2];
        assert_eq!(trim(&v1, 2.0 / 3.0), vec![2.0, -3.0, 0.0]);
        assert_eq!(trim(&v2, 2.0 / 3.0), vec![1.5, 1.0, 0.0]);
        assert_eq!(ties_merge_flat(&[&v1, &v2], 2.0 / 3.0, &[0.5, 0.5]), vec![1.75, -3.0, 0.0]);
    }

    #[test]
    fn ties_trivial_cases() {
        let v = [0.3, -1.2, 0.0, 4.0];
        assert_eq!(ties_merge_flat(&[&v, &v], 1.0, &[0.5, 0.5]), v.to_vec());
        let z = [0.0; 4];
        assert_eq!(ties_merge_flat(&[&v, &z], 0.5, &[0.5, 0.5]), trim(&v, 0.5));
        // Equal magnitudes at the density boundary keep the lower index.
        assert_eq!(trim(&[1.0, -1.0, 1.0], 1.0 / 3.0), vec![1.0, 0.0, 0.0]);
        // Balanced mass elects no sign.
        assert_eq!(ties_merge_flat(&[&[1.0], &[-1.0]], 1.0, &[0.5, 0.5]), vec![0.0]);
    }

    #[test]
    fn dare_examples() {
        let mut kept = 0;
        let mut dropped = 0;
        for seed in 0..64 {
            match dare_flat(&[4.0], 0.5, &mut Rng::new(seed))[0] {
                x if x == 8.0 => kept += 1,
                x if x == 0.0 => dropped += 1,
                x => panic!("unexpected {x}"),
            }
        }
        assert!(kept > 0 && dropped > 0);
        let v = [1.0, -2.0, 3.5];
        assert_eq!(dare_flat(&v, 0.0, &mut Rng::new(1)), v.to_vec());
    }

    #[test]
    fn dare_ties_examples() {
        let s = trained_stack(5);
        let te = task_vector(&s, BranchId::End);
        let tt = task_vector(&s, BranchId::Trans);
        let rng = Rng::new(9);
        let tvs = [te.clone(), tt];
        assert_eq!(dare_ties(&tvs, 0.0, 0.2, &[0.5, 0.5], &rng).unwrap(), ties_merge(&tvs, 0.2, &[0.5, 0.5]).unwrap());
        let same = [te.clone(), te.clone()];
        let r = dare_ties(&same, 0.0, 1.0, &[0.5, 0.5], &rng).unwrap();
        for (a, b) in r.layers.iter().zip(&te.layers) {
            assert!(a.max_abs_diff(b) < 1e-15);
        }
        assert_eq!(dare_ties(&tvs, 0.5, 0.2, &[0.5, 0.5], &rng).unwrap(), dare_ties(&tvs, 0.5, 0.2, &[0.5, 0.5], &rng).unwrap());
    }

    #[test]
    fn merge_dispatch_and_validation() {
        let s = trained_stack(6);
        for rule in MergeRule::ALL {
            let m = merge(&s, &MergeSpec { rule, ..Default::default() }).unwrap();
            assert_eq!(m.visual, s.visual);
            assert!(m.is_finite());
        }
        assert!(merge(&s, &MergeSpec { alpha: 1.5, ..Default::default() }).is_err());
        assert!(merge(&s, &MergeSpec { dare_drop_p: 1.0, ..Default::default() }).is_err());
        assert!(merge(&s, &MergeSpec { ties_density: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn select_alpha_prefers_smallest_on_ties() {
        let row = |alpha, r| SweepRow {
            alpha,
            metrics: MetricsReport {
                r_at_1: r,
                r_at_5: 0.0,
                r_at_10: 0.0,
                rs_at_1: 0.0,
                rs_at_2: 0.0,
                rs_at_3: 0.0,
                map_at_5: 0.0,
                map_at_10: 0.0,
                map_at_25: 0.0,
                map_at_50: 0.0,
                shortcut_gap: 0.0,
                queries: 1,
            },
        };
        assert_eq!(select_alpha(&[row(0.0, 0.5), row(0.3, 0.7), row(0.6, 0.7)]), Some(0.3));
        assert_eq!(select_alpha(&[]), None);
        assert_eq!(default_alpha_grid().len(), 11);
    }
}
