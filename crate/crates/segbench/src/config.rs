//! Benchmark configuration file.
//!
//! The matrix is the cross product `experiments × architectures × encoders ×
//! inits`, enumerated in that nesting order. Relative paths resolve against the
//! directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use segbench_core::dataio::{generate_synthetic, Dataset, ExperimentKind, SyntheticSpec};
use segbench_core::models::{Architecture, EncoderKind, ModelConfig, WeightInit, DEFAULT_WIDTH_SCALE};
use segbench_core::training::TrainConfig;

use crate::error::{self, Error, Result};
use crate::manifest::load_dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    /// Path to a dataset manifest.
    Manifest(PathBuf),
    /// Generated in memory.
    Synthetic(SyntheticSpec),
}

impl DatasetSource {
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match self {
            DatasetSource::Manifest(p) => load_dataset(&base.join(p)),
            DatasetSource::Synthetic(spec) => Ok(generate_synthetic(spec)?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Where warm-start cells get encoder weights: `<checkpoint_dir>/<encoder>.ckpt`,
/// or, failing that, encoders pretrained at the start of the run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmstartConfig {
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
}

fn default_width() -> f64 {
    DEFAULT_WIDTH_SCALE
}

fn default_inits() -> Vec<String> {
    vec!["None".into()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub experiments: Vec<String>,
    pub architectures: Vec<String>,
    pub encoders: Vec<String>,
    #[serde(default = "default_inits")]
    pub inits: Vec<String>,
    #[serde(default = "default_width")]
    pub width_scale: f64,
    /// Keyed by experiment slug, or `default` for all experiments.
    pub datasets: BTreeMap<String, DatasetSource>,
    #[serde(default)]
    pub warmstart: WarmstartConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    Random,
    Warmstart,
}

impl std::str::FromStr for InitKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "random" => Ok(InitKind::Random),
            "warmstart" | "warm-start" => Ok(InitKind::Warmstart),
            _ => Err(format!("unknown init {s:?} (expected \"None\" or \"warmstart\")")),
        }
    }
}

/// Placeholder path recorded in warm-start configs; the runner resolves the real file.
pub fn warmstart_name(kind: EncoderKind) -> String {
    format!("{}.ckpt", kind.name())
}

impl BenchmarkConfig {
    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|source| Error::Json { path: path.into(), source })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&error::read(path)?, path)
    }

    fn parse_list<T>(&self, what: &str, items: &[String], f: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>> {
        if items.is_empty() {
            return Err(Error::Usage(format!("config lists no {what}")));
        }
        items.iter().map(|s| f(s).map_err(|e| Error::Usage(format!("{what}: {e}")))).collect()
    }

    pub fn experiments(&self) -> Result<Vec<ExperimentKind>> {
        self.parse_list("experiments", &self.experiments, |s| s.parse().map_err(|e: segbench_core::Error| e.to_string()))
    }

    /// The benchmark cells in matrix order.
    pub fn matrix(&self) -> Result<Vec<ModelConfig>> {
        let exps = self.experiments()?;
        let archs: Vec<Architecture> =
            self.parse_list("architectures", &self.architectures, |s| s.parse().map_err(|e: segbench_core::Error| e.to_string()))?;
        let encs: Vec<EncoderKind> =
            self.parse_list("encoders", &self.encoders, |s| s.parse().map_err(|e: segbench_core::Error| e.to_string()))?;
        let inits: Vec<InitKind> = self.parse_list("inits", &self.inits, str::parse)?;
        let seed = self.train.seed;
        let mut out = Vec::with_capacity(exps.len() * archs.len() * encs.len() * inits.len());
        for &e in &exps {
            for &a in &archs {
                for &k in &encs {
                    for &i in &inits {
                        let init = match i {
                            InitKind::Random => WeightInit::Random { seed },
                            InitKind::Warmstart => WeightInit::Warmstart { checkpoint: warmstart_name(k), seed },
                        };
                        let cfg = ModelConfig::new(e, a, k, self.width_scale, init);
                        cfg.validate()?;
                        out.push(cfg);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn dataset_for(&self, exp: ExperimentKind) -> Result<&DatasetSource> {
        self.datasets
            .get(exp.slug())
            .or_else(|| self.datasets.get("default"))
            .ok_or_else(|| Error::Usage(format!("no dataset configured for {} (and no \"default\")", exp.slug())))
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let matrix = self.matrix()?;
        for key in self.datasets.keys() {
            if key != "default" && key.parse::<ExperimentKind>().is_err() {
                return Err(Error::Usage(format!("datasets: unknown key {key:?}")));
            }
        }
        for e in self.experiments()? {
            self.dataset_for(e)?;
        }
        let needs_warm = matrix.iter().any(|c| matches!(c.weight_init, WeightInit::Warmstart { .. }));
        if needs_warm && self.warmstart.checkpoint_dir.is_none() && self.warmstart.pretrain.is_none() {
            return Err(Error::Usage("warm-start cells need warmstart.checkpoint_dir or warmstart.pretrain".into()));
        }
        if let Some(p) = &self.warmstart.pretrain {
            p.train.validate()?;
        }
        Ok(())
    }
}
