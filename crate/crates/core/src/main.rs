use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use log::error;
use rtfgraph::error::Error;
use rtfgraph::harness::{run, RunConfig, Stage};
use rtfgraph::objective::Objective;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Simulate,
    Estimate,
    Train,
    Eval,
    Report,
    All,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Simulate => Stage::Simulate,
            StageArg::Estimate => Stage::Estimate,
            StageArg::Train => Stage::Train,
            StageArg::Eval => Stage::Eval,
            StageArg::Report => Stage::Report,
            StageArg::All => Stage::All,
        }
    }
}

/// Simulate the desk scene, estimate RTFs, train the graph network and
/// evaluate the resulting MVDR beamformers.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    stage: StageArg,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict the run to one reverberation time (seconds).
    #[arg(long)]
    t60: Option<f64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Training loss: sbf, sisdr1, sisdr2, stoi or feature_mse.
    #[arg(long)]
    loss: Option<String>,
    /// Evaluate this peer checkpoint instead of the trained one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn execute(cli: &Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.t60 {
        cfg.t60s = vec![t];
    }
    if let Some(l) = &cli.loss {
        cfg.train.loss = Objective::parse(l)?;
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    run(&cfg, cli.stage.into(), &cli.out_dir, cli.checkpoint.as_deref())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            if e.is_user_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
