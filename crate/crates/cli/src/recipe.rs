//! The desk-scale recipe: data, schedule, architecture, training runs,
//! sampler and guidance settings, read from one TOML file.
//!
//! Every field has a default, so a partial file overrides only what it
//! names. The resolved recipe is dumped whole into each run manifest.

use std::path::Path;

use anyhow::{Context, Result};
use gddm::diffnum::DType;
use gddm::diffusion::{ScheduleKind, ScheduleSpec, TrainConfig};
use gddm::networks::UNetConfig;
use gddm::synthlab::SceneConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_n: usize,
    pub train_seed: u64,
    /// Separate training set for the segmenter that scores inpainting.
    pub judge_seed: u64,
    /// Scenes used to pick the gradient scales.
    pub calibration_n: usize,
    pub calibration_seed: u64,
    pub heldout_n: usize,
    pub heldout_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_n: 2000,
            train_seed: 1,
            judge_seed: 2,
            calibration_n: 200,
            calibration_seed: 777,
            heldout_n: 400,
            heldout_seed: 999,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    /// Noise level `L`; `None` means `0.4 T`.
    pub noise_level: Option<usize>,
    /// Timesteps skipped per encoder/decoder step.
    pub stride: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            noise_level: None,
            stride: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    /// `c` for adaptive regression guidance.
    pub regression_scale: f64,
    /// `c` for fixed-sign regression guidance.
    pub fixed_sign_scale: f64,
    pub segmentation_scale: f64,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection {
            regression_scale: 1e4,
            fixed_sign_scale: 3e3,
            segmentation_scale: 70.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub round_trip_n: usize,
    pub regression_n: usize,
    /// Input ratio window for the regression sweep.
    pub mid_range: (f64, f64),
    pub targets: Vec<f64>,
    pub segmentation_n: usize,
    pub mask_seed: u64,
    pub shuffle_seed: u64,
    /// Items per sampler batch.
    pub batch: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            round_trip_n: 50,
            regression_n: 20,
            mid_range: (0.06, 0.14),
            targets: vec![0.0, 0.05, 0.1, 0.2],
            segmentation_n: 20,
            mask_seed: 5,
            shuffle_seed: 11,
            batch: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Recipe {
    pub scene: SceneConfig,
    pub data: DataSection,
    pub schedule: ScheduleSpec,
    pub network: UNetConfig,
    pub epsilon: TrainConfig,
    pub regression: TrainConfig,
    pub segmentation: TrainConfig,
    /// The held-out segmenter that scores inpainting.
    pub judge: TrainConfig,
    pub sampler: SamplerSection,
    pub guidance: GuidanceSection,
    pub evaluation: EvaluationSection,
}

fn run(iterations: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 10,
        iterations,
        precision: DType::F32,
        seed,
        probe_size: 50,
        probe_every: 500,
        ..TrainConfig::default()
    }
}

impl Default for Recipe {
    fn default() -> Self {
        Recipe {
            scene: SceneConfig::default(),
            data: DataSection::default(),
            schedule: ScheduleSpec {
                kind: ScheduleKind::Cosine,
                steps: 1000,
            },
            network: UNetConfig {
                base_channels: 16,
                channel_mult: vec![1, 2, 2],
                attention: vec![false; 3],
                ..UNetConfig::desk(32)
            },
            epsilon: run(6000, 10),
            regression: run(12000, 20),
            segmentation: run(3000, 30),
            judge: run(3000, 40),
            sampler: SamplerSection::default(),
            guidance: GuidanceSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

/// Which training run of the recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Epsilon,
    Regression,
    Segmentation,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Epsilon => "epsilon",
            Kind::Regression => "regression",
            Kind::Segmentation => "segmentation",
        }
    }
}

impl Recipe {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let r: Recipe =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        r.validate()?;
        Ok(r)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Recipe::default()), Recipe::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.network.validate()?;
        let mut net = self.network.clone();
        net.image_size = self.scene.size;
        net.validate()
            .context("network does not fit the scene size")?;
        for cfg in [
            &self.epsilon,
            &self.regression,
            &self.segmentation,
            &self.judge,
        ] {
            cfg.validate()?;
        }
        if self.sampler.stride == 0 {
            anyhow::bail!("sampler stride must be at least 1");
        }
        Ok(())
    }

    /// Full dump, as written to `configs/desk.toml`.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Short content hash, used to key cached training runs.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("recipe serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn train_config(&self, kind: Kind) -> &TrainConfig {
        match kind {
            Kind::Epsilon => &self.epsilon,
            Kind::Regression => &self.regression,
            Kind::Segmentation => &self.segmentation,
        }
    }

    /// Noise level `L` for a schedule of `steps`.
    pub fn noise_level(&self, steps: usize) -> usize {
        self.sampler
            .noise_level
            .unwrap_or(((0.4 * steps as f64).round() as usize).max(1))
    }

    /// Upper end of the label range a regression target should lie in.
    pub fn label_range(&self) -> (f64, f64) {
        (0.0, self.scene.ratio_range.1)
    }
}
