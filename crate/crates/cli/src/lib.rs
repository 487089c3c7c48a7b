//! Command-line driver for the staged object-level learning pipeline.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod viz;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use orl_core::embedding::StoreKind;
use orl_core::synthetic::{write_dataset, SceneParams};
use orl_core::trainer::Mode;

pub use config::PipelineConfig;
pub use error::{CliError, Result};
pub use pipeline::{Pipeline, Stage};

#[derive(Debug, Parser)]
#[command(name = "orl", version, about = "Object-level representation learning pipeline")]
pub struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0: one per logical CPU); overrides the configuration.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Training mode; overrides the configuration.
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Byol,
    Orl,
    Multicrop,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Byol => Mode::Byol,
            ModeArg::Orl => Mode::Orl,
            ModeArg::Multicrop => Mode::Multicrop,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Image,
    Roi,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic scenes with a ground-truth box sidecar.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Region proposals for every manifest image.
    Propose,
    /// Whole-image or per-proposal embeddings.
    Embed {
        #[arg(long, value_enum)]
        kind: KindArg,
    },
    /// Nearest-neighbor images.
    Knn,
    /// Corresponding region pairs between neighbor images.
    Pairs,
    /// Train the dual network.
    Train,
    /// Montages of the most similar region pairs.
    Viz {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Every stage in order.
    RunAll,
}

fn pipeline(cli: &Cli) -> Result<Pipeline> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("this command needs --config".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    init_workers(cfg.workers);
    Pipeline::new(cfg, cli.mode.map(Mode::from))
}

fn init_workers(n: usize) {
    // The global pool can only be configured once per process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynthetic { out, count, size } => {
            let seed = match (&cli.seed, &cli.config) {
                (Some(s), _) => *s,
                (None, Some(path)) => PipelineConfig::load(path)?.seed,
                (None, None) => 0,
            };
            init_workers(cli.workers.unwrap_or(0));
            let params = SceneParams {
                size: *size,
                ..SceneParams::default()
            };
            params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let files = write_dataset(out, *count, seed, &params)?;
            log::info!("wrote {} and {}", files.manifest.display(), files.ground_truth.display());
            Ok(())
        }
        Command::Propose => pipeline(cli)?.propose(),
        Command::Embed { kind } => pipeline(cli)?.embed(match kind {
            KindArg::Image => StoreKind::Image,
            KindArg::Roi => StoreKind::Roi,
        }),
        Command::Knn => pipeline(cli)?.knn(),
        Command::Pairs => pipeline(cli)?.pairs(),
        Command::Train => {
            let p = pipeline(cli)?;
            p.train(p.mode)
        }
        Command::Viz { count } => {
            let p = pipeline(cli)?;
            let files = p.viz(count.unwrap_or(p.cfg.viz.count))?;
            log::info!("wrote {} montages", files.len());
            Ok(())
        }
        Command::RunAll => pipeline(cli)?.run_all(),
    }
}
