use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use cirlab_core::config::ExperimentConfig;
use cirlab_core::pipeline::{report, resolve_output_dir, Pipeline, Stage};
use cirlab_core::Error;

/// Dual-branch adapter experiments on a synthetic composed-retrieval world.
#[derive(Debug, Parser)]
#[command(name = "cirlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one pipeline stage, or all of them in order.
    Run {
        stage: StageArg,
        #[command(flatten)]
        config: ConfigArgs,
        /// Suppress progress output.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Verify a run directory and write its summary.json.
    Report { dir: PathBuf },
    /// Print the resolved configuration and its hash.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Debug, clap::Args)]
struct ConfigArgs {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a setting by dotted path, e.g. `--set train.steps=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> cirlab_core::Result<ExperimentConfig> {
        match &self.config {
            Some(path) => ExperimentConfig::load(path, &self.overrides),
            None => ExperimentConfig::parse("", &self.overrides),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Gen,
    Pretrain,
    Train,
    Probe,
    Merge,
    Eval,
    Sweep,
    Ablate,
    All,
}

impl StageArg {
    fn stages(self) -> Vec<Stage> {
        match self {
            StageArg::Gen => vec![Stage::Gen],
            StageArg::Pretrain => vec![Stage::Pretrain],
            StageArg::Train => vec![Stage::Train],
            StageArg::Probe => vec![Stage::Probe],
            StageArg::Merge => vec![Stage::Merge],
            StageArg::Eval => vec![Stage::Eval],
            StageArg::Sweep => vec![Stage::Sweep],
            StageArg::Ablate => vec![Stage::Ablate],
            StageArg::All => Stage::PIPELINE.to_vec(),
        }
    }
}

fn run(cli: Cli) -> cirlab_core::Result<()> {
    match cli.command {
        Command::Run { stage, config, quiet } => {
            let cfg = config.load()?;
            let dir = resolve_output_dir(&cfg);
            let pipeline = Pipeline::new(cfg, dir)?.with_progress(!quiet);
            for s in stage.stages() {
                let t = Instant::now();
                pipeline.run(s)?;
                if !quiet {
                    eprintln!("[{}] done in {:.1}s", s.name(), t.elapsed().as_secs_f64());
                }
            }
            if !quiet {
                eprintln!("outputs in {}", pipeline.dir().display());
            }
        }
        Command::Report { dir } => {
            let summary = report(&dir)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Config { config } => {
            let cfg = config.load()?;
            println!("# config_hash={}\n{}", cfg.hash(), cfg.canonical());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::ConfigInvalid(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
