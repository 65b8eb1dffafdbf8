//! Layer-wise gradient-interference probe between the endpoint and
//! transition objectives.

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterStack, BranchId};
use crate::error::{Error, Result};
use crate::objectives::pcgrad_project;
use crate::rng::Rng;
use crate::tensor::{cosine_sim, Vector};
use crate::trainer::{endpoint_grads, transition_deltas, transition_grads, Batch, TrainData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Endpoint,
    Transition,
}

/// Which coefficient set the probe differentiates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    /// Both objectives w.r.t. the single shared set (`A_end`).
    #[default]
    Shared,
    /// Endpoint w.r.t. `A_end`, transition w.r.t. `A_trans`.
    Branches,
}

/// Per-layer coefficient gradients summed over a number of batches.
#[derive(Debug, Clone, PartialEq)]
pub struct GradGroup {
    pub objective: Objective,
    pub layers: Vec<Vector>,
    pub batches: usize,
}

impl GradGroup {
    pub fn zeros(objective: Objective, layer_sizes: &[usize]) -> Self {
        Self { objective, layers: layer_sizes.iter().map(|&n| vec![0.0; n]).collect(), batches: 0 }
    }

    pub fn add(&mut self, per_layer: &[Vector]) {
        for (acc, g) in self.layers.iter_mut().zip(per_layer) {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        self.batches += 1;
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            objective: self.objective,
            layers: self.layers.iter().map(|l| l.iter().map(|v| v * c).collect()).collect(),
            batches: self.batches,
        }
    }
}

/// Gradient of one objective on one batch w.r.t. the coefficients of every
/// text layer, flattened per layer. Parameters are not modified.
pub fn batch_layer_grads(
    stack: &AdapterStack,
    data: &TrainData,
    batch: &Batch,
    objective: Objective,
    target: ProbeTarget,
    omega: f64,
) -> Result<Vec<Vector>> {
    let branch = match (objective, target) {
        (Objective::Transition, ProbeTarget::Branches) => BranchId::Trans,
        _ => BranchId::End,
    };
    let view = stack.view(branch);
    let dense = match objective {
        Objective::Endpoint => endpoint_grads(stack, &view, batch)?.1,
        Objective::Transition => {
            let deltas = transition_deltas(stack, &view, &data.prompt_ids, batch, omega)?;
            transition_grads(stack, &view, batch, &deltas)?.grads
        }
    };
    let mut g = stack.zeros_like();
    dense.accumulate_into(stack, branch, &mut g);
    Ok(g.text.iter().map(|l| l.coeff(branch).data().to_vec()).collect())
}

/// Full and split-half aggregates of both objectives over the same `m`
/// batches (first half / second half by batch index).
#[derive(Debug, Clone)]
pub struct ProbeGroups {
    pub end: GradGroup,
    pub trans: GradGroup,
    pub end_halves: [GradGroup; 2],
    pub trans_halves: [GradGroup; 2],
}

pub fn collect_grads(
    stack: &AdapterStack,
    data: &TrainData,
    m: usize,
    batch_size: usize,
    target: ProbeTarget,
    omega: f64,
    rng: &Rng,
) -> Result<ProbeGroups> {
    if m < 2 || m % 2 != 0 {
        return Err(Error::ConfigInvalid(format!("probe batch count must be even and at least 2, got {m}")));
    }
    let sizes: Vec<usize> = stack.text.iter().map(|l| l.a_end.data().len()).collect();
    let z = |o| GradGroup::zeros(o, &sizes);
    let mut g = ProbeGroups {
        end: z(Objective::Endpoint),
        trans: z(Objective::Transition),
        end_halves: [z(Objective::Endpoint), z(Objective::Endpoint)],
        trans_halves: [z(Objective::Transition), z(Objective::Transition)],
    };
    for i in 0..m {
        let batch = data.sample(batch_size, &mut rng.fork_index(i as u64));
        let ge = batch_layer_grads(stack, data, &batch, Objective::Endpoint, target, omega)?;
        let gt = batch_layer_grads(stack, data, &batch, Objective::Transition, target, omega)?;
        let half = usize::from(i >= m / 2);
        g.end.add(&ge);
        g.trans.add(&gt);
        g.end_halves[half].add(&ge);
        g.trans_halves[half].add(&gt);
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub s_cross: f64,
    pub s_base: f64,
    pub gi: f64,
    /// Cosine of the PCGrad-projected pair.
    pub s_cross_pcgrad: f64,
}

/// Per-layer agreement scores; `None` marks a layer with a zero aggregate.
pub fn interference_scores(
    g_end: &GradGroup,
    g_trans: &GradGroup,
    end_halves: &[GradGroup; 2],
    trans_halves: &[GradGroup; 2],
) -> Result<Vec<Option<LayerScore>>> {
    let n = g_end.layers.len();
    for g in [g_trans, &end_halves[0], &end_halves[1], &trans_halves[0], &trans_halves[1]] {
        if g.layers.len() != n {
            return Err(Error::DimMismatch { expected: n, got: g.layers.len() });
        }
    }
    let mut out = Vec::with_capacity(n);
    for l in 0..n {
        let score = (|| -> Result<LayerScore> {
            let s_cross = cosine_sim(&g_end.layers[l], &g_trans.layers[l])?;
            let s_end = cosine_sim(&end_halves[0].layers[l], &end_halves[1].layers[l])?;
            let s_trans = cosine_sim(&trans_halves[0].layers[l], &trans_halves[1].layers[l])?;
            let s_base = 0.5 * (s_end + s_trans);
            let (pe, pt) = pcgrad_project(&g_end.layers[l], &g_trans.layers[l]);
            let s_cross_pcgrad = cosine_sim(&pe, &pt).unwrap_or(0.0);
            Ok(LayerScore { s_cross, s_base, gi: s_base - s_cross, s_cross_pcgrad })
        })();
        match score {
            Ok(s) => out.push(Some(s)),
            Err(Error::DegenerateNorm { .. }) => out.push(None),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub s_cross_mean: f64,
    pub s_base_mean: f64,
    pub gi_mean: f64,
    pub gi_std: f64,
    pub gi_pcgrad_mean: f64,
    /// Seeds at which the layer was defined.
    pub defined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradProbeReport {
    pub per_seed: Vec<Vec<Option<LayerScore>>>,
    pub layers: Vec<LayerSummary>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, std)
}

/// Aggregates per-seed scores into mean and sample standard deviation.
pub fn summarize(per_seed: Vec<Vec<Option<LayerScore>>>) -> GradProbeReport {
    let n_layers = per_seed.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let defined: Vec<LayerScore> = per_seed.iter().filter_map(|s| s.get(l).copied().flatten()).collect();
        if defined.is_empty() {
            layers.push(LayerSummary {
                layer: l,
                s_cross_mean: f64::NAN,
                s_base_mean: f64::NAN,
                gi_mean: f64::NAN,
                gi_std: f64::NAN,
                gi_pcgrad_mean: f64::NAN,
                defined: 0,
            });
            continue;
        }
        let gi: Vec<f64> = defined.iter().map(|s| s.gi).collect();
        let (gi_mean, gi_std) = mean_std(&gi);
        let avg = |f: fn(&LayerScore) -> f64| defined.iter().map(f).sum::<f64>() / defined.len() as f64;
        layers.push(LayerSummary {
            layer: l,
            s_cross_mean: avg(|s| s.s_cross),
            s_base_mean: avg(|s| s.s_base),
            gi_mean,
            gi_std,
            gi_pcgrad_mean: avg(|s| s.s_base - s.s_cross_pcgrad),
            defined: defined.len(),
        });
    }
    GradProbeReport { per_seed, layers }
}

/// One checkpoint to probe, with the tuples it was trained on and the
/// stream its probe batches are drawn from.
pub struct ProbeRun<'a> {
    pub stack: &'a AdapterStack,
    pub data: &'a TrainData<'a>,
    pub rng: Rng,
}

/// Probes each run and summarizes across them.
pub fn probe_report(
    runs: &[ProbeRun],
    m: usize,
    batch_size: usize,
    target: ProbeTarget,
    omega: f64,
) -> Result<GradProbeReport> {
    if runs.len() < 2 {
        return Err(Error::ConfigInvalid(format!("probe needs at least 2 seeds, got {}", runs.len())));
    }
    let mut per_seed = Vec::with_capacity(runs.len());
    for run in runs {
        let g = collect_grads(run.stack, run.data, m, batch_size, target, omega, &run.rng)?;
        per_seed.push(interference_scores(&g.end, &g.trans, &g.end_halves, &g.trans_halves)?);
    }
    Ok(summarize(per_seed))
}

impl GradProbeReport {
    pub const CSV_HEADER: &'static str = "layer,s_cross_mean,s_base_mean,gi_mean,gi_std,gi_pcgrad_mean";

    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut s = format!("# config_hash={config_hash}\n{}\n", Self::CSV_HEADER);
        for l in &self.layers {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                l.layer, l.s_cross_mean, l.s_base_mean, l.gi_mean, l.gi_std, l.gi_pcgrad_mean
            ));
        }
        s
    }

    /// Layers whose mean GI exceeds their own standard deviation.
    pub fn conflict_layers(&self) -> Vec<usize> {
        self.layers.iter().filter(|l| l.defined > 1 && l.gi_mean > l.gi_std).map(|l| l.layer).collect()
    }

    /// Mean of the per-layer GI means over defined layers.
    pub fn mean_gi(&self) -> f64 {
        let v: Vec<f64> = self.layers.iter().filter(|l| l.defined > 0).map(|l| l.gi_mean).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::EncoderConfig;
    use crate::synth::{World, WorldConfig};

    fn group(o: Objective, layers: Vec<Vector>) -> GradGroup {
        GradGroup { objective: o, layers, batches: 1 }
    }

    fn score(end: Vec<Vector>, trans: Vec<Vector>) -> Vec<Option<LayerScore>> {
        let ge = group(Objective::Endpoint, end);
        let gt = group(Objective::Transition, trans);
        interference_scores(&ge, &gt, &[ge.clone(), ge.clone()], &[gt.clone(), gt.clone()]).unwrap()
    }

    #[test]
    fn identical_aggregates_give_zero() {
        let v = vec![vec![0.3, -1.0, 2.0]];
        let s = score(v.clone(), v)[0].unwrap();
        assert!((s.s_cross - 1.0).abs() < 1e-15 && (s.s_base - 1.0).abs() < 1e-15);
        assert!(s.gi.abs() < 1e-9);
    }

    #[test]
    fn opposite_aggregates_give_two() {
        let v = vec![0.3, -1.0, 2.0];
        let neg: Vector = v.iter().map(|x| -x).collect();
        let s = score(vec![v], vec![neg])[0].unwrap();
        assert!((s.s_cross + 1.0).abs() < 1e-15);
        assert!((s.gi - 2.0).abs() < 1e-9);
    }

    #[test]
    fn quadratic_fixture() {
        // f1 = (x-1)², f2 = (x+1)² at x = 0 (second coordinate inert): ∇f1 = -2, ∇f2 = 2.
        let grad = |c: f64, x: f64| vec![2.0 * (x - c), 0.0];
        let s = score(vec![grad(1.0, 0.0)], vec![grad(-1.0, 0.0)])[0].unwrap();
        assert!((s.gi - 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_layer_is_undefined() {
        let s = score(vec![vec![1.0, 0.0], vec![0.0, 0.0]], vec![vec![1.0, 1.0], vec![1.0, 0.0]]);
        assert!(s[0].is_some() && s[1].is_none());
        let r = summarize(vec![s.clone(), s]);
        assert_eq!(r.layers[1].defined, 0);
        assert_eq!(r.layers[0].defined, 2);
    }

    #[test]
    fn scores_invariant_to_positive_rescaling() {
        let mut rng = Rng::new(3);
        let mut v = || -> Vec<Vector> { vec![(0..6).map(|_| rng.normal()).collect()] };
        let (e, t, e0, e1, t0, t1) = (v(), v(), v(), v(), v(), v());
        let mk = |o, l: &Vec<Vector>, c: f64| group(o, l.clone()).scaled(c);
        let base = interference_scores(
            &mk(Objective::Endpoint, &e, 1.0),
            &mk(Objective::Transition, &t, 1.0),
            &[mk(Objective::Endpoint, &e0, 1.0), mk(Objective::Endpoint, &e1, 1.0)],
            &[mk(Objective::Transition, &t0, 1.0), mk(Objective::Transition, &t1, 1.0)],
        )
        .unwrap()[0]
            .unwrap();
        let scaled = interference_scores(
            &mk(Objective::Endpoint, &e, 3.0),
            &mk(Objective::Transition, &t, 0.2),
            &[mk(Objective::Endpoint, &e0, 7.0), mk(Objective::Endpoint, &e1, 0.5)],
            &[mk(Objective::Transition, &t0, 2.0), mk(Objective::Transition, &t1, 9.0)],
        )
        .unwrap()[0]
            .unwrap();
        assert!((base.gi - scaled.gi).abs() < 1e-12);
        assert!((base.s_cross - scaled.s_cross).abs() < 1e-12);
        assert!((-2.0..=2.0).contains(&base.gi));
    }

    #[test]
    fn std_uses_sample_denominator() {
        let mk = |gi: f64| vec![Some(LayerScore { s_cross: 0.0, s_base: gi, gi, s_cross_pcgrad: 0.0 })];
        let r = summarize((1..=5).map(|i| mk(i as f64)).collect());
        assert_eq!(r.layers[0].gi_mean, 3.0);
        assert!((r.layers[0].gi_std - 2.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.per_seed.len(), 5);
    }

    fn probe_fixture() -> (World, AdapterStack) {
        let wc = WorldConfig { train_tuples: 100, val_queries: 10, test_queries: 10, gallery_size: 100, ..Default::default() };
        let world = World::generate(&wc, &Rng::new(2)).unwrap();
        let cfg = EncoderConfig { d_model: 12, n_blocks: 2, vocab_size: world.vocab.len(), ..Default::default() };
        let mut stack = AdapterStack::init(&cfg, &Rng::new(5)).unwrap();
        let mut r = Rng::new(6);
        for l in &mut stack.text {
            l.a_end.data_mut().iter_mut().for_each(|v| *v = 0.1 * r.normal());
        }
        (world, stack)
    }

    #[test]
    fn collection_is_read_only_and_deterministic() {
        let (world, stack) = probe_fixture();
        let data = TrainData::new(&world).unwrap();
        let before = stack.clone();
        let a = collect_grads(&stack, &data, 4, 6, ProbeTarget::Shared, 0.25, &Rng::new(1)).unwrap();
        let b = collect_grads(&stack, &data, 4, 6, ProbeTarget::Shared, 0.25, &Rng::new(1)).unwrap();
        assert_eq!(stack, before);
        assert_eq!(a.end, b.end);
        assert_eq!(a.trans, b.trans);
        assert_eq!(a.end.batches, 4);
        assert_eq!(a.end_halves[0].batches, 2);
        assert!(collect_grads(&stack, &data, 3, 6, ProbeTarget::Shared, 0.25, &Rng::new(1)).is_err());
    }

    #[test]
    fn repeated_batch_sums_linearly() {
        let (world, stack) = probe_fixture();
        let data = TrainData::new(&world).unwrap();
        let batch = data.fixed_batch(6, &mut Rng::new(3));
        let g = batch_layer_grads(&stack, &data, &batch, Objective::Endpoint, ProbeTarget::Shared, 0.25).unwrap();
        let sizes: Vec<usize> = g.iter().map(|v| v.len()).collect();
        let mut two = GradGroup::zeros(Objective::Endpoint, &sizes);
        let mut four = GradGroup::zeros(Objective::Endpoint, &sizes);
        for _ in 0..2 {
            two.add(&g);
        }
        for _ in 0..4 {
            four.add(&g);
        }
        assert_eq!(two.scaled(2.0).layers, four.layers);
    }

    #[test]
    fn report_is_deterministic() {
        let (world, stack) = probe_fixture();
        let data = TrainData::new(&world).unwrap();
        let runs: Vec<ProbeRun> = (0..3).map(|i| ProbeRun { stack: &stack, data: &data, rng: Rng::new(i) }).collect();
        let a = probe_report(&runs, 4, 6, ProbeTarget::Shared, 0.25).unwrap();
        let b = probe_report(&runs, 4, 6, ProbeTarget::Shared, 0.25).unwrap();
        assert_eq!(a.to_csv("h"), b.to_csv("h"));
        assert_eq!(a.layers.len(), stack.text.len());
        assert!(a.layers.iter().all(|l| l.gi_std >= 0.0 && (-2.0..=2.0).contains(&l.gi_mean)));
        assert!(probe_report(&runs[..1], 4, 6, ProbeTarget::Shared, 0.25).is_err());
    }
}
