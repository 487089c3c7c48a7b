//! Pipeline configuration file (TOML). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use orl_core::embedding::FeatureSpace;
use orl_core::geometry::{FilterParams, JitterParams};
use orl_core::retrieval::{DEFAULT_K, DEFAULT_N};
use orl_core::segmentation::SegParams;
use orl_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub manifest: PathBuf,
    pub work_dir: PathBuf,
    /// Externally supplied proposals used instead of running the proposal
    /// generator (for example ground-truth boxes).
    #[serde(default)]
    pub proposals: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub k: usize,
    pub n: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            n: DEFAULT_N,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Fixed random projection of color histograms.
    #[default]
    Reference,
    /// A trained network loaded from `path`.
    Checkpoint,
    /// The network produced by image-level training in this work directory.
    Stage1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Embedding dimension; required to match the network for trained
    /// encoders when given.
    pub dim: Option<usize>,
    pub input_size: usize,
    pub path: Option<PathBuf>,
    pub space: FeatureSpace,
}

pub const REFERENCE_DIM: usize = 64;

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Reference,
            dim: None,
            input_size: 32,
            path: None,
            space: FeatureSpace::Projector,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VizConfig {
    pub count: usize,
}

impl Default for VizConfig {
    fn default() -> Self {
        Self { count: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses one per logical CPU.
    #[serde(default)]
    pub workers: usize,
    pub paths: Paths,
    #[serde(default)]
    pub segmentation: SegParams,
    #[serde(default)]
    pub filter: FilterParams,
    #[serde(default)]
    pub jitter: JitterParams,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub viz: VizConfig,
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

impl PipelineConfig {
    /// Parses `text`, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| usage(format!("config: {e}")))?;
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        abs(&mut cfg.paths.manifest);
        abs(&mut cfg.paths.work_dir);
        if let Some(p) = cfg.paths.proposals.as_mut() {
            abs(p);
        }
        if let Some(p) = cfg.encoder.path.as_mut() {
            abs(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.segmentation.validate().map_err(usage)?;
        self.filter.validate().map_err(usage)?;
        self.jitter.validate().map_err(usage)?;
        self.train_config().validate().map_err(usage)?;
        if self.retrieval.k == 0 {
            return Err(usage("retrieval.k must be at least 1"));
        }
        if !(self.retrieval.n > 0.0 && self.retrieval.n <= 1.0) {
            return Err(usage("retrieval.n must lie in (0, 1]"));
        }
        if self.encoder.input_size < 8 {
            return Err(usage("encoder.input_size must be at least 8"));
        }
        match self.encoder.kind {
            EncoderKind::Checkpoint if self.encoder.path.is_none() => {
                Err(usage("encoder.kind = \"checkpoint\" needs encoder.path"))
            }
            EncoderKind::Reference | EncoderKind::Stage1 if self.encoder.path.is_some() => {
                Err(usage("encoder.path is only used with kind = \"checkpoint\""))
            }
            _ => Ok(()),
        }
    }

    /// Training configuration with the root seed and box jitter filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            jitter: self.jitter,
            ..self.train.clone()
        }
    }
}
