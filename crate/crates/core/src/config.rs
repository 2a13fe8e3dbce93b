//! Run configuration: one JSON document covering every stage. Unknown keys
//! are rejected and every default is materialised when the resolved config
//! is written back out.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::VkittiOptions;
use crate::error::{Error, Result};
use crate::fusion::KfConfig;
use crate::geometry::Intrinsics;
use crate::localizer::{AeConfig, RegConfig};
use crate::sbev::{ClassPolicy, GridSpec, MAX_ACCUMULATED_FRAMES};
use crate::stereo::{BlockMatchParams, DepthParams, SmoothParams};
use crate::synthworld::{palette, WeatherSpec, WorldSpec};
use crate::topomap::AugmentSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SbevConfig {
    pub grid: GridSpec,
    /// Classes never rasterised: dynamic objects, sky, and the bare ground
    /// band, whose footprint is just the camera frustum.
    pub excluded_classes: Vec<u8>,
    /// Same-label depth median filter radius in pixels; 0 disables it.
    pub depth_median_radius: usize,
    /// Depths beyond this many metres are dropped before unprojection; 0 keeps all.
    pub max_depth_m: f64,
    /// Frames accumulated into each S-BEV, newest last.
    pub accumulate_frames: usize,
    pub pixel_stride: usize,
}

impl Default for SbevConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            excluded_classes: [&palette::EXCLUDED[..], &palette::GROUND_BAND[..]].concat(),
            depth_median_radius: 2,
            max_depth_m: 0.0,
            accumulate_frames: 1,
            pixel_stride: 1,
        }
    }
}

impl SbevConfig {
    pub fn policy(&self) -> ClassPolicy {
        ClassPolicy::all_except(&self.excluded_classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    pub trans_threshold_m: f64,
    pub ang_threshold_deg: f64,
    /// Route length left out at both ends when placing nodes, so the first
    /// and last nodes get full-size cells.
    pub trim_m: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self { trans_threshold_m: 20.0, ang_threshold_deg: 30.0, trim_m: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Ablation {
    /// Node-average targets with augmentation.
    Base,
    /// Reconstruct the sample itself instead of its node average.
    Avg,
    /// No augmentation of the autoencoder training set.
    Aug,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Base => "BASE",
            Ablation::Avg => "AVG",
            Ablation::Aug => "AUG",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub ablations: Vec<Ablation>,
    /// Applied to the test split only.
    pub weather: Vec<WeatherSpec>,
    /// Lateral offsets (m) of re-driven test traversals.
    pub lane_offsets: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { ablations: vec![Ablation::Base], weather: vec![WeatherSpec::clean()], lane_offsets: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StereoConfig {
    pub block: BlockMatchParams,
    pub depth: DepthParams,
    pub smooth: SmoothParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Mixed into every stage's seed.
    pub seed: u64,
    pub world: WorldSpec,
    pub camera: Intrinsics,
    pub sbev: SbevConfig,
    pub map: MapConfig,
    pub split_ratio: f64,
    /// Undersample the training split to equal per-node counts.
    pub balance: bool,
    pub ae: AeConfig,
    pub ae_augment: AugmentSpec,
    pub reg: RegConfig,
    pub reg_augment: AugmentSpec,
    /// Embeddings kept per node in the index; all training samples when absent.
    pub index_per_node: Option<usize>,
    pub experiment: ExperimentConfig,
    pub kf: KfConfig,
    pub stereo: StereoConfig,
    pub vkitti: VkittiOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldSpec::default(),
            camera: Intrinsics::default(),
            sbev: SbevConfig::default(),
            map: MapConfig::default(),
            split_ratio: 0.8,
            balance: true,
            ae: AeConfig::default(),
            ae_augment: AugmentSpec { per_sample: Some(2), ..AugmentSpec::default() },
            reg: RegConfig::default(),
            reg_augment: AugmentSpec {
                rotations_deg: vec![-3.0, 3.0],
                shifts: vec![
                    (-8, 0),
                    (-4, 0),
                    (4, 0),
                    (8, 0),
                    (0, -16),
                    (0, -12),
                    (0, -8),
                    (0, -4),
                    (0, 4),
                    (0, 8),
                    (0, 12),
                    (0, 16),
                ],
                per_sample: None,
            },
            index_per_node: None,
            experiment: ExperimentConfig::default(),
            kf: KfConfig::default(),
            stereo: StereoConfig::default(),
            vkitti: VkittiOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.camera.validate()?;
        self.sbev.grid.validate()?;
        if self.sbev.accumulate_frames == 0 || self.sbev.accumulate_frames > MAX_ACCUMULATED_FRAMES {
            return Err(Error::Config(format!("sbev.accumulate_frames must be 1..={MAX_ACCUMULATED_FRAMES}")));
        }
        if !(self.sbev.max_depth_m >= 0.0) {
            return Err(Error::Config("sbev.max_depth_m must be >= 0".into()));
        }
        if self.sbev.pixel_stride == 0 {
            return Err(Error::Config("sbev.pixel_stride must be >= 1".into()));
        }
        if !(self.map.trans_threshold_m > 0.0 && self.map.ang_threshold_deg > 0.0 && self.map.trim_m >= 0.0) {
            return Err(Error::Config("map thresholds must be positive".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config("split_ratio must lie in (0, 1)".into()));
        }
        if self.index_per_node == Some(0) {
            return Err(Error::Config("index_per_node must be >= 1".into()));
        }
        self.ae.train.validate()?;
        self.reg.train.validate()?;
        for w in &self.experiment.weather {
            w.validate()?;
        }
        Ok(())
    }
}
