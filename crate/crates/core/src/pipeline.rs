//! Experiment stages over a run directory, the multi-seed ablation, and the
//! consolidated run report.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.toml                       canonical configuration
//! world/train_tuples.jsonl          training tuples
//! world/{val,test}.json             retrieval benchmarks
//! checkpoints/pretrained.ckpt       surrogate base model
//! checkpoints/<mode>.ckpt           one per training mode
//! logs/pretrain.json, logs/train_<mode>.csv
//! probe/gi.csv                      gradient interference per layer
//! merged/alpha_val.csv, merged/selection.json, merged/<rule>.ckpt
//! eval/metrics.{json,csv}
//! sweep/alpha_test.csv, sweep/lambda.csv, sweep/omega.csv
//! ablate/per_seed.csv, ablate/table.csv
//! summary.json                      written by `report`
//! ```

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::adapters::{checkpoint_from_bytes, load_checkpoint, save_checkpoint, AdapterStack, CheckpointMeta};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::merge::{alpha_sweep, lrdm_merge, merge, select_alpha, sweep_csv, MergeRule};
use crate::probe::{probe_report, GradProbeReport, ProbeRun};
use crate::rng::Rng;
use crate::synth::{write_tuples_tagged, RetrievalBenchmark, World};
use crate::trainer::{pretrain_base, run_training, PretrainReport, TrainConfig, TrainData, TrainMode};

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "CIRLAB_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "runs/default";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Gen,
    Pretrain,
    Train,
    Probe,
    Merge,
    Eval,
    Sweep,
    Ablate,
}

impl Stage {
    /// Stages of a full pipeline run, in order. The ablation retrains every
    /// mode over several seeds and is run separately.
    pub const PIPELINE: [Stage; 7] =
        [Stage::Gen, Stage::Pretrain, Stage::Train, Stage::Probe, Stage::Merge, Stage::Eval, Stage::Sweep];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Pretrain => "pretrain",
            Stage::Train => "train",
            Stage::Probe => "probe",
            Stage::Merge => "merge",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
            Stage::Ablate => "ablate",
        }
    }
}

/// Output directory: the environment override, then the config, then
/// [`DEFAULT_OUTPUT_DIR`].
pub fn resolve_output_dir(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR)),
    }
}

pub fn checkpoint_path(mode: TrainMode) -> String {
    format!("checkpoints/{}.ckpt", mode.name())
}

pub fn train_log_path(mode: TrainMode) -> String {
    format!("logs/train_{}.csv", mode.name())
}

pub fn merged_path(rule: MergeRule) -> String {
    format!("merged/{}.ckpt", rule.name())
}

fn has_mode(cfg: &ExperimentConfig, mode: TrainMode) -> bool {
    cfg.modes.contains(&mode)
}

/// Whether `stage` has anything to do under `cfg`.
pub fn stage_applies(cfg: &ExperimentConfig, stage: Stage) -> bool {
    match stage {
        Stage::Probe => has_mode(cfg, TrainMode::JointShared),
        Stage::Merge => has_mode(cfg, TrainMode::Decoupled),
        _ => true,
    }
}

/// Artifacts a complete pipeline run leaves behind, relative to the run
/// directory.
pub fn expected_artifacts(cfg: &ExperimentConfig) -> Vec<String> {
    let mut out: Vec<String> = ["world/train_tuples.jsonl", "world/val.json", "world/test.json", "checkpoints/pretrained.ckpt", "logs/pretrain.json"]
        .map(String::from)
        .to_vec();
    for &mode in &cfg.modes {
        out.push(checkpoint_path(mode));
        out.push(train_log_path(mode));
    }
    if stage_applies(cfg, Stage::Probe) {
        out.push("probe/gi.csv".into());
    }
    if stage_applies(cfg, Stage::Merge) {
        out.extend(["merged/alpha_val.csv", "merged/selection.json", "merged/lrdm.ckpt"].map(String::from));
        out.extend(cfg.merge.rules.iter().map(|&r| merged_path(r)));
        out.push("sweep/alpha_test.csv".into());
    }
    out.extend(["eval/metrics.json", "eval/metrics.csv"].map(String::from));
    if !cfg.sweep.lambda_grid.is_empty() {
        out.push("sweep/lambda.csv".into());
    }
    if !cfg.sweep.omega_grid.is_empty() {
        out.push("sweep/omega.csv".into());
    }
    out
}

/// Artifacts that are hashed when present but not required.
pub const OPTIONAL_ARTIFACTS: [&str; 2] = ["ablate/per_seed.csv", "ablate/table.csv"];

/// Model evaluated for a training mode: the transition coefficients for
/// transition-only training, the endpoint coefficients otherwise.
pub fn deployed_model(mode: TrainMode, stack: &AdapterStack) -> AdapterStack {
    match mode {
        TrainMode::TransitionOnly => lrdm_merge(stack, 1.0),
        _ => lrdm_merge(stack, 0.0),
    }
}

/// Generated world and pretrained base for one master seed.
pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(World, AdapterStack, PretrainReport)> {
    let world = World::generate(&cfg.world, &Rng::new(seed).fork("world"))?;
    let mut stack = AdapterStack::init(&cfg.encoder_config(), &Rng::new(seed).fork("init"))?;
    let report = pretrain_base(&mut stack, &world, &cfg.pretrain, &Rng::new(seed))?;
    Ok((world, stack, report))
}

pub fn train_mode(cfg: &ExperimentConfig, world: &World, base: &AdapterStack, mode: TrainMode, seed: u64) -> Result<crate::trainer::TrainOutcome> {
    let tc = TrainConfig { mode, seed, ..cfg.train.clone() };
    run_training(&tc, world, base.clone())
}

/// Picks α on the validation split and returns it with the merged model.
pub fn select_lrdm(cfg: &ExperimentConfig, stack: &AdapterStack, val: &RetrievalBenchmark, world: &World) -> Result<(f64, AdapterStack, Vec<crate::merge::SweepRow>)> {
    let rows = alpha_sweep(stack, &cfg.merge.alpha_grid, val, &world.vocab)?;
    let alpha = select_alpha(&rows).expect("alpha grid is nonempty");
    Ok((alpha, lrdm_merge(stack, alpha), rows))
}

#[derive(Debug, Clone)]
pub struct ModeResult {
    pub mode: TrainMode,
    /// Merge coefficient of the evaluated model.
    pub alpha: f64,
    pub metrics: MetricsReport,
    /// Trained stack before merging.
    pub stack: AdapterStack,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub world: World,
    pub results: Vec<ModeResult>,
}

impl SeedRun {
    pub fn result(&self, mode: TrainMode) -> Option<&ModeResult> {
        self.results.iter().find(|r| r.mode == mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: TrainMode,
    pub label: &'static str,
    pub r_at_1_mean: f64,
    pub r_at_1_std: f64,
    pub rs_at_1_mean: f64,
    pub map_at_10_mean: f64,
    pub shortcut_gap_mean: f64,
    pub shortcut_gap_std: f64,
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub runs: Vec<SeedRun>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, std)
}

impl Ablation {
    pub fn table(&self) -> Vec<AblationRow> {
        TrainMode::ALL
            .iter()
            .filter_map(|&mode| {
                let rs: Vec<&ModeResult> = self.runs.iter().filter_map(|r| r.result(mode)).collect();
                if rs.is_empty() {
                    return None;
                }
                let col = |f: fn(&MetricsReport) -> f64| mean_std(&rs.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
                let (r1, r1_std) = col(|m| m.r_at_1);
                let (gap, gap_std) = col(|m| m.shortcut_gap);
                Some(AblationRow {
                    mode,
                    label: mode.label(),
                    r_at_1_mean: r1,
                    r_at_1_std: r1_std,
                    rs_at_1_mean: col(|m| m.rs_at_1).0,
                    map_at_10_mean: col(|m| m.map_at_10).0,
                    shortcut_gap_mean: gap,
                    shortcut_gap_std: gap_std,
                })
            })
            .collect()
    }

    pub fn row(&self, mode: TrainMode) -> Option<AblationRow> {
        self.table().into_iter().find(|r| r.mode == mode)
    }

    pub fn per_seed_csv(&self, config_hash: &str) -> String {
        let mut s = format!("# config_hash={config_hash}\nseed,mode,alpha,r_at_1,r_at_5,rs_at_1,map_at_10,shortcut_gap\n");
        for run in &self.runs {
            for r in &run.results {
                let m = &r.metrics;
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    run.seed,
                    r.mode.name(),
                    r.alpha,
                    m.r_at_1,
                    m.r_at_5,
                    m.rs_at_1,
                    m.map_at_10,
                    m.shortcut_gap
                ));
            }
        }
        s
    }

    pub fn table_csv(&self, config_hash: &str) -> String {
        let mut s = format!(
            "# config_hash={config_hash}\nmode,label,r_at_1_mean,r_at_1_std,rs_at_1_mean,map_at_10_mean,shortcut_gap_mean,shortcut_gap_std\n"
        );
        for r in self.table() {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.mode.name(),
                r.label,
                r.r_at_1_mean,
                r.r_at_1_std,
                r.rs_at_1_mean,
                r.map_at_10_mean,
                r.shortcut_gap_mean,
                r.shortcut_gap_std
            ));
        }
        s
    }
}

/// Trains every mode in `modes` for each seed and evaluates on that seed's
/// test split. Decoupled training is evaluated after merging at the α that
/// scores best on the validation split.
pub fn run_ablation(cfg: &ExperimentConfig, seeds: &[u64], modes: &[TrainMode], mut progress: impl FnMut(&str)) -> Result<Ablation> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (world, base, _) = prepare_seed(cfg, seed)?;
        let mut results = Vec::with_capacity(modes.len());
        for &mode in modes {
            let out = train_mode(cfg, &world, &base, mode, seed)?;
            let (alpha, model) = match mode {
                TrainMode::Decoupled => {
                    let (a, m, _) = select_lrdm(cfg, &out.stack, &world.val, &world)?;
                    (a, m)
                }
                TrainMode::TransitionOnly => (1.0, deployed_model(mode, &out.stack)),
                _ => (0.0, deployed_model(mode, &out.stack)),
            };
            let (metrics, _) = evaluate(&model, &world.test, &world.vocab)?;
            progress(&format!("seed {seed} {}: R@1 {:.3} shortcut gap {:.3}", mode.label(), metrics.r_at_1, metrics.shortcut_gap));
            results.push(ModeResult { mode, alpha, metrics, stack: out.stack });
        }
        runs.push(SeedRun { seed, world, results });
    }
    Ok(Ablation { runs })
}

/// Probes JointShared checkpoints, one per seed run, each against its own
/// training tuples, with batches from the `probe.seed_i` streams.
pub fn probe_checkpoints(cfg: &ExperimentConfig, stacks: &[(&AdapterStack, &World)]) -> Result<GradProbeReport> {
    let data: Vec<TrainData> = stacks.iter().map(|(_, w)| TrainData::new(w)).collect::<Result<_>>()?;
    let probe_rng = Rng::new(cfg.seed).fork("probe");
    let runs: Vec<ProbeRun> = stacks
        .iter()
        .zip(&data)
        .enumerate()
        .map(|(i, ((stack, _), data))| ProbeRun { stack, data, rng: probe_rng.fork(&format!("seed_{i}")) })
        .collect();
    probe_report(&runs, cfg.probe.batches, cfg.probe.batch_size, cfg.probe.target, cfg.train.omega)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct EvalEntry {
    model: String,
    label: String,
    alpha: f64,
    metrics: MetricsReport,
}

/// A configured experiment bound to a run directory.
pub struct Pipeline {
    cfg: ExperimentConfig,
    dir: PathBuf,
    hash: String,
    world: OnceCell<World>,
    progress: bool,
}

impl Pipeline {
    /// Validates the config, creates the run directory and writes the
    /// canonical `config.toml` into it.
    pub fn new(cfg: ExperimentConfig, dir: PathBuf) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(&dir)
            .map_err(|e| Error::ConfigInvalid(format!("cannot create output directory {}: {e}", dir.display())))?;
        let hash = cfg.hash();
        fs::write(dir.join("config.toml"), cfg.canonical())?;
        Ok(Self { cfg, dir, hash, world: OnceCell::new(), progress: false })
    }

    /// Print progress lines to standard error.
    pub fn with_progress(mut self, on: bool) -> Self {
        self.progress = on;
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn note(&self, msg: &str) {
        if self.progress {
            eprintln!("{msg}");
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, contents)?;
        Ok(())
    }

    fn write_json(&self, rel: &str, value: &serde_json::Value) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(rel, bytes)
    }

    fn meta(&self, seed: u64) -> CheckpointMeta {
        CheckpointMeta { config: self.cfg.encoder_config(), seed, config_hash: self.hash.clone() }
    }

    fn save(&self, rel: &str, stack: &AdapterStack) -> Result<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        save_checkpoint(stack, &self.meta(self.cfg.seed), &p)
    }

    /// Loads a checkpoint written by an earlier stage of this config.
    fn load(&self, rel: &str) -> Result<AdapterStack> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::MissingArtifact(PathBuf::from(rel)));
        }
        let (stack, meta) = load_checkpoint(&p)?;
        if meta.config_hash != self.hash {
            return Err(Error::MixedConfig { path: PathBuf::from(rel), expected: self.hash.clone(), found: meta.config_hash });
        }
        Ok(stack)
    }

    fn world(&self) -> Result<&World> {
        if let Some(w) = self.world.get() {
            return Ok(w);
        }
        let w = World::generate(&self.cfg.world, &Rng::new(self.cfg.seed).fork("world"))?;
        Ok(self.world.get_or_init(|| w))
    }

    fn test_split(&self) -> Result<RetrievalBenchmark> {
        let test = &self.world()?.test;
        Ok(match self.cfg.eval.max_queries {
            0 => test.clone(),
            n => test.subset(n),
        })
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        if !stage_applies(&self.cfg, stage) {
            self.note(&format!("[{}] skipped: required training mode not configured", stage.name()));
            return Ok(());
        }
        self.note(&format!("[{}] start", stage.name()));
        match stage {
            Stage::Gen => self.gen(),
            Stage::Pretrain => self.pretrain(),
            Stage::Train => self.train(),
            Stage::Probe => self.probe(),
            Stage::Merge => self.merge(),
            Stage::Eval => self.eval(),
            Stage::Sweep => self.sweep(),
            Stage::Ablate => self.ablate(),
        }
    }

    pub fn run_all(&self) -> Result<()> {
        Stage::PIPELINE.iter().try_for_each(|&s| self.run(s))
    }

    pub fn gen(&self) -> Result<()> {
        let world = self.world()?;
        let mut tuples = Vec::new();
        write_tuples_tagged(&world.train_tuples, Some(&self.hash), &mut tuples)?;
        self.write("world/train_tuples.jsonl", tuples)?;
        for (rel, bench) in [("world/val.json", &world.val), ("world/test.json", &world.test)] {
            let tagged = RetrievalBenchmark { config_hash: Some(self.hash.clone()), ..bench.clone() };
            self.write(rel, serde_json::to_vec(&tagged)?)?;
        }
        Ok(())
    }

    pub fn pretrain(&self) -> Result<()> {
        let world = self.world()?;
        let mut stack = AdapterStack::init(&self.cfg.encoder_config(), &Rng::new(self.cfg.seed).fork("init"))?;
        let report = pretrain_base(&mut stack, world, &self.cfg.pretrain, &Rng::new(self.cfg.seed))?;
        self.note(&format!("pretrain: final loss {:.4}, held-out caption R@1 {:.3}", report.final_loss, report.heldout_r_at_1));
        self.save("checkpoints/pretrained.ckpt", &stack)?;
        self.write_json(
            "logs/pretrain.json",
            &json!({ "config_hash": self.hash, "final_loss": report.final_loss, "heldout_r_at_1": report.heldout_r_at_1 }),
        )
    }

    pub fn train(&self) -> Result<()> {
        let world = self.world()?;
        let base = self.load("checkpoints/pretrained.ckpt")?;
        for &mode in &self.cfg.modes {
            let out = train_mode(&self.cfg, world, &base, mode, self.cfg.seed)?;
            if let Some(last) = out.log.rows.last() {
                self.note(&format!("train {}: {} steps, final tau {:.2}", mode.label(), out.log.rows.len(), last.tau));
            }
            self.save(&checkpoint_path(mode), &out.stack)?;
            self.write(&train_log_path(mode), out.log.to_csv(&self.hash))?;
        }
        Ok(())
    }

    /// Probes the JointShared checkpoint plus `probe.seeds − 1` replicas
    /// trained from the same base with seeds `seed + i`.
    pub fn probe(&self) -> Result<()> {
        let world = self.world()?;
        let first = self.load(&checkpoint_path(TrainMode::JointShared))?;
        let base = self.load("checkpoints/pretrained.ckpt")?;
        let mut stacks = vec![first];
        for i in 1..self.cfg.probe.seeds as u64 {
            stacks.push(train_mode(&self.cfg, world, &base, TrainMode::JointShared, self.cfg.seed + i)?.stack);
        }
        let pairs: Vec<(&AdapterStack, &World)> = stacks.iter().map(|s| (s, world)).collect();
        let report = probe_checkpoints(&self.cfg, &pairs)?;
        self.note(&format!("probe: mean GI {:.4}, conflict layers {:?}", report.mean_gi(), report.conflict_layers()));
        self.write("probe/gi.csv", report.to_csv(&self.hash))
    }

    pub fn merge(&self) -> Result<()> {
        let world = self.world()?;
        let stack = self.load(&checkpoint_path(TrainMode::Decoupled))?;
        let (alpha, merged, rows) = select_lrdm(&self.cfg, &stack, &world.val, world)?;
        let best = rows.iter().find(|r| r.alpha == alpha).expect("selected alpha is on the grid");
        self.note(&format!("merge: alpha* = {alpha} (validation R@1 {:.3})", best.metrics.r_at_1));
        self.write("merged/alpha_val.csv", sweep_csv(&rows, &self.hash))?;
        self.write_json(
            "merged/selection.json",
            &json!({ "config_hash": self.hash, "alpha_star": alpha, "val_r_at_1": best.metrics.r_at_1 }),
        )?;
        self.save("merged/lrdm.ckpt", &merged)?;
        for &rule in &self.cfg.merge.rules {
            let m = merge(&stack, &self.cfg.merge.spec(rule, self.cfg.merge.alpha, self.cfg.seed))?;
            self.save(&merged_path(rule), &m)?;
        }
        Ok(())
    }

    fn alpha_star(&self) -> Result<f64> {
        let rel = "merged/selection.json";
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::MissingArtifact(PathBuf::from(rel)));
        }
        let v: serde_json::Value = serde_json::from_slice(&fs::read(p)?)?;
        v["alpha_star"].as_f64().ok_or_else(|| Error::CorruptTensor(format!("{rel} has no alpha_star")))
    }

    pub fn eval(&self) -> Result<()> {
        let world = self.world()?;
        let test = self.test_split()?;
        let mut entries = Vec::new();
        let mut push = |model: String, label: String, alpha: f64, stack: &AdapterStack| -> Result<()> {
            let (metrics, _) = evaluate(stack, &test, &world.vocab)?;
            self.note(&format!("eval {label}: R@1 {:.3} mAP@10 {:.3} shortcut gap {:.3}", metrics.r_at_1, metrics.map_at_10, metrics.shortcut_gap));
            entries.push(EvalEntry { model, label, alpha, metrics });
            Ok(())
        };
        push("pretrained".into(), "Pretrained base".into(), 0.0, &self.load("checkpoints/pretrained.ckpt")?)?;
        for mode in TrainMode::ALL.into_iter().filter(|m| has_mode(&self.cfg, *m)) {
            if mode == TrainMode::Decoupled {
                let alpha = self.alpha_star()?;
                push("decoupled_lrdm".into(), mode.label().into(), alpha, &self.load("merged/lrdm.ckpt")?)?;
                for &rule in &self.cfg.merge.rules {
                    let label = format!("Decoupled+{}", rule.name());
                    push(rule.name().into(), label, self.cfg.merge.alpha, &self.load(&merged_path(rule))?)?;
                }
            } else {
                let stack = self.load(&checkpoint_path(mode))?;
                let alpha = if mode == TrainMode::TransitionOnly { 1.0 } else { 0.0 };
                push(mode.name().into(), mode.label().into(), alpha, &deployed_model(mode, &stack))?;
            }
        }
        self.write_json("eval/metrics.json", &json!({ "config_hash": self.hash, "models": entries }))?;
        let mut csv = format!("# config_hash={}\nmodel,alpha,{}\n", self.hash, MetricsReport::CSV_HEADER);
        for e in &entries {
            csv.push_str(&format!("{},{},{}\n", e.model, e.alpha, e.metrics.csv_row()));
        }
        self.write("eval/metrics.csv", csv)
    }

    pub fn sweep(&self) -> Result<()> {
        let world = self.world()?;
        let test = self.test_split()?;
        if has_mode(&self.cfg, TrainMode::Decoupled) {
            let stack = self.load(&checkpoint_path(TrainMode::Decoupled))?;
            let rows = alpha_sweep(&stack, &self.cfg.merge.alpha_grid, &test, &world.vocab)?;
            self.write("sweep/alpha_test.csv", sweep_csv(&rows, &self.hash))?;
        }
        if self.cfg.sweep.lambda_grid.is_empty() && self.cfg.sweep.omega_grid.is_empty() {
            return Ok(());
        }
        let base = self.load("checkpoints/pretrained.ckpt")?;
        if !self.cfg.sweep.lambda_grid.is_empty() {
            let mut csv = format!("# config_hash={}\nlambda,r_at_1,r_at_5,map_at_10,shortcut_gap\n", self.hash);
            for &lambda in &self.cfg.sweep.lambda_grid {
                let tc = TrainConfig { mode: TrainMode::JointShared, seed: self.cfg.seed, lambda_trans: lambda, ..self.cfg.train.clone() };
                let out = run_training(&tc, world, base.clone())?;
                let (m, _) = evaluate(&out.stack, &test, &world.vocab)?;
                self.note(&format!("sweep lambda {lambda}: R@1 {:.3}", m.r_at_1));
                csv.push_str(&format!("{lambda},{},{},{},{}\n", m.r_at_1, m.r_at_5, m.map_at_10, m.shortcut_gap));
            }
            self.write("sweep/lambda.csv", csv)?;
        }
        if !self.cfg.sweep.omega_grid.is_empty() {
            let mut csv = format!("# config_hash={}\nomega,alpha_star,r_at_1,r_at_5,map_at_10,shortcut_gap\n", self.hash);
            for &omega in &self.cfg.sweep.omega_grid {
                let tc = TrainConfig { mode: TrainMode::Decoupled, seed: self.cfg.seed, omega, ..self.cfg.train.clone() };
                let out = run_training(&tc, world, base.clone())?;
                let (alpha, merged, _) = select_lrdm(&self.cfg, &out.stack, &world.val, world)?;
                let (m, _) = evaluate(&merged, &test, &world.vocab)?;
                self.note(&format!("sweep omega {omega}: alpha* {alpha}, R@1 {:.3}", m.r_at_1));
                csv.push_str(&format!("{omega},{alpha},{},{},{},{}\n", m.r_at_1, m.r_at_5, m.map_at_10, m.shortcut_gap));
            }
            self.write("sweep/omega.csv", csv)?;
        }
        Ok(())
    }

    /// All five training modes over `ablate.seeds` master seeds starting at
    /// the configured one.
    pub fn ablate(&self) -> Result<()> {
        let seeds: Vec<u64> = (0..self.cfg.ablate.seeds as u64).map(|i| self.cfg.seed + i).collect();
        let ablation = run_ablation(&self.cfg, &seeds, &TrainMode::ALL, |m| self.note(m))?;
        self.write("ablate/per_seed.csv", ablation.per_seed_csv(&self.hash))?;
        self.write("ablate/table.csv", ablation.table_csv(&self.hash))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Config hash recorded inside an artifact, by file type.
fn embedded_hash(rel: &str, bytes: &[u8]) -> Result<Option<String>> {
    let corrupt = |why: &str| Error::CorruptTensor(format!("{rel}: {why}"));
    if rel.ends_with(".ckpt") {
        return Ok(Some(checkpoint_from_bytes(bytes)?.1.config_hash));
    }
    let text = std::str::from_utf8(bytes).map_err(|_| corrupt("not UTF-8"))?;
    if rel.ends_with(".csv") {
        return Ok(text.lines().next().and_then(|l| l.strip_prefix("# config_hash=")).map(str::to_string));
    }
    if rel.ends_with(".json") {
        let v: serde_json::Value = serde_json::from_str(text)?;
        return Ok(v["config_hash"].as_str().map(str::to_string));
    }
    if rel.ends_with(".jsonl") {
        let mut found: Option<String> = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)?;
            let h = v["config_hash"].as_str().map(str::to_string);
            match (&found, h) {
                (_, None) => return Ok(None),
                (None, Some(h)) => found = Some(h),
                (Some(f), Some(h)) if *f != h => return Ok(Some(h)),
                _ => {}
            }
        }
        return Ok(found);
    }
    Err(corrupt("unrecognized artifact type"))
}

/// Verifies a run directory and writes `summary.json`: the config hash, a
/// SHA-256 per artifact, the selected α and the headline test metrics.
pub fn report(dir: &Path) -> Result<serde_json::Value> {
    let cfg_path = dir.join("config.toml");
    if !cfg_path.exists() {
        return Err(Error::MissingArtifact(PathBuf::from("config.toml")));
    }
    let cfg = ExperimentConfig::parse(&fs::read_to_string(&cfg_path)?, &[])?;
    let hash = cfg.hash();
    let mut rels = expected_artifacts(&cfg);
    rels.extend(OPTIONAL_ARTIFACTS.iter().filter(|r| dir.join(r).exists()).map(|r| r.to_string()));

    let mut artifacts = BTreeMap::new();
    for rel in &rels {
        let p = dir.join(rel);
        if !p.exists() {
            return Err(Error::MissingArtifact(PathBuf::from(rel)));
        }
        let bytes = fs::read(&p)?;
        match embedded_hash(rel, &bytes)? {
            Some(h) if h == hash => {}
            other => {
                return Err(Error::MixedConfig {
                    path: PathBuf::from(rel),
                    expected: hash,
                    found: other.unwrap_or_else(|| "none".into()),
                })
            }
        }
        artifacts.insert(rel.clone(), sha256_hex(&bytes));
    }

    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("eval/metrics.json"))?)?;
    let mut headline = serde_json::Map::new();
    for m in metrics["models"].as_array().into_iter().flatten() {
        let r = &m["metrics"];
        headline.insert(
            m["model"].as_str().unwrap_or_default().to_string(),
            json!({ "r_at_1": r["r_at_1"], "map_at_10": r["map_at_10"], "shortcut_gap": r["shortcut_gap"] }),
        );
    }
    let alpha_star = if stage_applies(&cfg, Stage::Merge) {
        let sel: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("merged/selection.json"))?)?;
        sel["alpha_star"].clone()
    } else {
        serde_json::Value::Null
    };
    let summary = json!({
        "config_hash": hash,
        "config_sha256": sha256_hex(&fs::read(&cfg_path)?),
        "artifacts": artifacts,
        "alpha_star": alpha_star,
        "headline": headline,
    });
    let mut bytes = serde_json::to_vec_pretty(&summary)?;
    bytes.push(b'\n');
    fs::write(dir.join("summary.json"), bytes)?;
    Ok(summary)
}
