use alloc::format;
use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::ExperimentKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Architecture {
    Unet,
    Linknet,
    #[serde(rename = "FPN")]
    Fpn,
    #[serde(rename = "PSPNet")]
    Pspnet,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [Architecture::Unet, Architecture::Linknet, Architecture::Fpn, Architecture::Pspnet];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Unet => "Unet",
            Architecture::Linknet => "Linknet",
            Architecture::Fpn => "FPN",
            Architecture::Pspnet => "PSPNet",
        }
    }

    pub fn encoder_depth(self) -> usize {
        match self {
            Architecture::Pspnet => 3,
            _ => 5,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown architecture {s:?}")))
    }
}

/// Structural encoder family; each captures the defining block of a published encoder line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EncoderKind {
    #[serde(rename = "vgg-like")]
    PlainConvStack,
    #[serde(rename = "resnet-like")]
    Residual,
    #[serde(rename = "densenet-like")]
    DenselyConnected,
    #[serde(rename = "mobilenet-like")]
    DepthwiseSeparable,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 4] = [
        EncoderKind::PlainConvStack,
        EncoderKind::Residual,
        EncoderKind::DenselyConnected,
        EncoderKind::DepthwiseSeparable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::PlainConvStack => "vgg-like",
            EncoderKind::Residual => "resnet-like",
            EncoderKind::DenselyConnected => "densenet-like",
            EncoderKind::DepthwiseSeparable => "mobilenet-like",
        }
    }

    /// Stage output widths at `width_scale = 1`.
    pub fn base_channels(self) -> [usize; 5] {
        match self {
            EncoderKind::PlainConvStack => [64, 128, 256, 512, 512],
            EncoderKind::Residual => [64, 64, 128, 256, 512],
            EncoderKind::DenselyConnected => [64, 128, 256, 512, 1024],
            EncoderKind::DepthwiseSeparable => [32, 64, 128, 256, 512],
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EncoderKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown encoder {s:?}")))
    }
}

/// Dense-block growth rate at `width_scale = 1`.
pub const DENSE_GROWTH: usize = 32;
pub const DENSE_LAYERS: usize = 2;

/// Desk-scale default: an eighth of the published channel widths.
pub const DEFAULT_WIDTH_SCALE: f64 = 0.125;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderFamily {
    pub kind: EncoderKind,
    pub depth: usize,
    pub width_scale: f64,
}

impl EncoderFamily {
    pub fn channels(&self) -> alloc::vec::Vec<usize> {
        self.kind.base_channels()[..self.depth.min(5)].iter().map(|&c| scaled(c, self.width_scale)).collect()
    }
}

/// `max(1, round(c * s))`.
pub fn scaled(c: usize, s: f64) -> usize {
    (libm::round(c as f64 * s) as usize).max(1)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WeightInit {
    Random { seed: u64 },
    /// Encoder weights from a checkpoint; everything it does not cover is
    /// randomly initialized from `seed`.
    Warmstart { checkpoint: String, seed: u64 },
}

impl WeightInit {
    /// Column label used in metrics tables and result keys.
    pub fn label(&self) -> &'static str {
        match self {
            WeightInit::Random { .. } => "None",
            WeightInit::Warmstart { .. } => "warmstart",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            WeightInit::Random { seed } | WeightInit::Warmstart { seed, .. } => *seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergePolicy {
    Add,
    Cat,
}

/// Per-architecture hyperparameters, at full published width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture")]
pub enum ArchHyper {
    Unet { decoder_channels: [usize; 5], decoder_batch_norm: bool },
    Linknet { decoder_batch_norm: bool, prefinal_channels: usize },
    #[serde(rename = "FPN")]
    Fpn { pyramid_channels: usize, segmentation_channels: usize, merge: MergePolicy, dropout: f64 },
    #[serde(rename = "PSPNet")]
    Pspnet { output_channels: usize, dropout: f64, batch_norm: bool, bins: [usize; 4] },
}

impl ArchHyper {
    /// The published hyperparameter block for `arch`.
    pub fn published(arch: Architecture) -> Self {
        match arch {
            Architecture::Unet => ArchHyper::Unet { decoder_channels: [256, 128, 64, 32, 16], decoder_batch_norm: true },
            Architecture::Linknet => ArchHyper::Linknet { decoder_batch_norm: true, prefinal_channels: 32 },
            Architecture::Fpn => ArchHyper::Fpn {
                pyramid_channels: 256,
                segmentation_channels: 128,
                merge: MergePolicy::Add,
                dropout: 0.2,
            },
            Architecture::Pspnet => {
                ArchHyper::Pspnet { output_channels: 512, dropout: 0.2, batch_norm: true, bins: [1, 2, 3, 6] }
            }
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            ArchHyper::Unet { .. } => Architecture::Unet,
            ArchHyper::Linknet { .. } => Architecture::Linknet,
            ArchHyper::Fpn { .. } => Architecture::Fpn,
            ArchHyper::Pspnet { .. } => Architecture::Pspnet,
        }
    }
}

/// One cell of the benchmark matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub experiment: ExperimentKind,
    pub architecture: Architecture,
    pub encoder: EncoderFamily,
    pub weight_init: WeightInit,
    pub hyper: ArchHyper,
}

impl ModelConfig {
    /// Published hyperparameters and the architecture's encoder depth.
    pub fn new(
        experiment: ExperimentKind,
        architecture: Architecture,
        encoder: EncoderKind,
        width_scale: f64,
        weight_init: WeightInit,
    ) -> Self {
        Self {
            experiment,
            architecture,
            encoder: EncoderFamily { kind: encoder, depth: architecture.encoder_depth(), width_scale },
            weight_init,
            hyper: ArchHyper::published(architecture),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.architecture.encoder_depth();
        if self.encoder.depth != want {
            return Err(Error::Config(format!(
                "{} requires encoder depth {want}, got {}",
                self.architecture, self.encoder.depth
            )));
        }
        if !(self.encoder.width_scale > 0.0) || !self.encoder.width_scale.is_finite() {
            return Err(Error::Config(format!("width_scale must be positive, got {}", self.encoder.width_scale)));
        }
        if self.hyper.architecture() != self.architecture {
            return Err(Error::Config(format!(
                "hyperparameters for {} given to {}",
                self.hyper.architecture(),
                self.architecture
            )));
        }
        match &self.hyper {
            ArchHyper::Fpn { dropout, merge, .. } => {
                check_dropout(*dropout)?;
                if *merge != MergePolicy::Add {
                    return Err(Error::Config("only additive FPN merging is implemented".into()));
                }
            }
            ArchHyper::Pspnet { dropout, bins, .. } => {
                check_dropout(*dropout)?;
                if bins.contains(&0) {
                    return Err(Error::Config("pyramid bins must be >= 1".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Stable human-readable identifier, also used as a directory name.
    pub fn cell_id(&self) -> String {
        format!(
            "{}__{}__{}__{}",
            self.experiment.slug(),
            self.architecture.name(),
            self.encoder.kind.name(),
            self.weight_init.label()
        )
    }
}

fn check_dropout(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout {rate} outside [0, 1)")));
    }
    Ok(())
}
