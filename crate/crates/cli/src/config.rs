//! Optional TOML config file. Every section is optional; command-line flags
//! override whatever the file sets.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

use obbseg::boxdet::{BoxConfig, PixelPoints};
use obbseg::dataio::SynthConfig;
use obbseg::eval::{ApMode, EvalConfig};
use obbseg::micronet::NetworkConfig;
use obbseg::raster::DenoiseConfig;
use obbseg::refine::NmsConfig;
use obbseg::trainer::{DetectConfig, TrainConfig};

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub synth: SynthConfig,
    pub network: NetworkSection,
    pub train: TrainConfig,
    pub detect: DetectSection,
    pub eval: EvalSection,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Full,
    Micro,
    Tiny,
}

impl Preset {
    pub fn network(self, classes: usize) -> NetworkConfig {
        match self {
            Preset::Full => NetworkConfig::full(classes),
            Preset::Micro => NetworkConfig::micro(classes),
            Preset::Tiny => NetworkConfig::tiny(classes),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub preset: Preset,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            preset: Preset::Micro,
            seed: 7,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    /// Per-scale IoU thresholds, finest scale first.
    pub thetas: [f64; 5],
    pub cross_scale: bool,
    pub theta_global: f64,
    /// Tile overlap in pixels; the dataset manifest's value when unset.
    pub overlap: Option<usize>,
    pub denoise_kernel: usize,
    pub min_region: usize,
    pub points: PixelPoints,
}

impl Default for DetectSection {
    fn default() -> Self {
        let d = DetectConfig::default();
        Self {
            thetas: d.nms.thetas,
            cross_scale: d.nms.cross_scale,
            theta_global: d.nms.theta_global,
            overlap: None,
            denoise_kernel: d.boxes.denoise.kernel,
            min_region: d.boxes.denoise.min_region,
            points: d.boxes.points,
        }
    }
}

impl DetectSection {
    pub fn to_config(&self, default_overlap: usize) -> DetectConfig {
        DetectConfig {
            nms: NmsConfig {
                thetas: self.thetas,
                cross_scale: self.cross_scale,
                theta_global: self.theta_global,
            },
            boxes: BoxConfig {
                denoise: DenoiseConfig {
                    kernel: self.denoise_kernel,
                    min_region: self.min_region,
                },
                points: self.points,
            },
            overlap: self.overlap.unwrap_or(default_overlap),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub iou: f64,
    pub mode: ApMode,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalConfig::default();
        Self {
            iou: d.iou_thresh,
            mode: d.mode,
        }
    }
}
