//! Experiment configuration files.
//!
//! Configs are TOML: `[section]` headers and `key = value` lines, or the
//! equivalent dotted keys (`train.n_d = 10`). Unknown keys are rejected.
//!
//! ```toml
//! seed = 3
//! output_dir = "runs/ring-nd10"
//!
//! [dataset]
//! kind = "ring"
//! modes = 8
//!
//! [train]
//! n_d = 10            # or "adaptive"
//! total_d_steps = 30000
//! noise_multiplier = 1.0
//! ```

use std::path::{Path, PathBuf};

use dpgan_core::dp::AdamParams;
use dpgan_core::engine::{AdaptiveConfig, Architecture, PrivacyMode, StepFrequency, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "DPGAN_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Seeds for sweeps and repeated runs; empty means just `seed`.
    pub repeat_seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub train: TrainSection,
    pub architecture: ArchitectureSection,
    pub adaptive: AdaptiveSection,
    pub eval: EvalSection,
    /// Written into run snapshots for provenance; ignored when loading.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived: Option<Derived>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Ring,
    Grid,
    Csv,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Ring: number of modes.
    pub modes: usize,
    /// Ring: radius. Grid: half-width of the 5x5 lattice.
    pub radius: f64,
    pub std: f64,
    /// Synthetic datasets: number of points before the split.
    pub n: usize,
    /// Keep labels and train conditional networks.
    pub labelled: bool,
    /// CSV file, or the IDX image file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// IDX label file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<PathBuf>,
    /// Min-max rescale ingested features to [-1, 1]. Defaults to on for IDX
    /// and off for CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescale: Option<bool>,
    /// Fraction of records used for training; the rest is held out.
    pub train_fraction: f64,
    /// Radius around each mode center that counts as a capture.
    pub capture_radius: f64,
    /// Seed for data generation and the split; defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Ring,
            modes: 8,
            radius: 0.8,
            std: 0.02,
            n: 75_000,
            labelled: true,
            path: None,
            labels_path: None,
            rescale: None,
            train_fraction: 0.8,
            capture_radius: 0.1,
            data_seed: None,
        }
    }
}

/// Either a fixed count or the string `"adaptive"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NdSetting {
    Fixed(u32),
    Marker(AdaptiveMarker),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptiveMarker {
    Adaptive,
}

impl NdSetting {
    pub const ADAPTIVE: NdSetting = NdSetting::Marker(AdaptiveMarker::Adaptive);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub n_d: NdSetting,
    pub total_d_steps: u64,
    pub expected_batch: usize,
    pub private: bool,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
    pub eval_every: u64,
    pub latent_dim: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// EMA decay for the logged fake accuracy in fixed mode.
    pub ema_beta: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let a = AdamParams::default();
        TrainSection {
            n_d: NdSetting::Fixed(1),
            total_d_steps: 30_000,
            expected_batch: 128,
            private: true,
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            delta: 1e-5,
            eval_every: 1000,
            latent_dim: 8,
            learning_rate: a.alpha,
            beta1: a.beta1,
            beta2: a.beta2,
            ema_beta: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureSection {
    pub g_hidden_width: usize,
    pub g_hidden_layers: usize,
    pub d_hidden_width: usize,
    pub d_hidden_layers: usize,
    pub label_embed_dim: usize,
}

impl Default for ArchitectureSection {
    fn default() -> Self {
        let a = Architecture::default();
        ArchitectureSection {
            g_hidden_width: a.g_hidden_width,
            g_hidden_layers: a.g_hidden_layers,
            d_hidden_width: a.d_hidden_width,
            d_hidden_layers: a.d_hidden_layers,
            label_embed_dim: a.label_embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveSection {
    pub beta: f64,
    pub floor: f64,
    /// Defaults to 1, 2, 5, 10, 20, 50, ...
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<Vec<u32>>,
}

impl Default for AdaptiveSection {
    fn default() -> Self {
        let a = AdaptiveConfig::default();
        AdaptiveSection { beta: a.beta, floor: a.floor, ladder: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Generated samples per evaluation.
    pub samples: usize,
    /// Real and fake rows per probe.
    pub probe_size: usize,
    /// Probe before every generator step while `k` is below this; 0 disables.
    pub probe_g_steps: u64,
    /// Run the downstream classifier at every evaluation instead of only at the end.
    pub downstream_every_eval: bool,
    pub downstream_samples: usize,
    pub downstream_epochs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            samples: 5000,
            probe_size: dpgan_core::eval::DEFAULT_PROBE_SIZE,
            probe_g_steps: 500,
            downstream_every_eval: false,
            downstream_samples: 10_000,
            downstream_epochs: 20,
        }
    }
}

/// Quantities computed from the loaded data, recorded for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    pub train_size: usize,
    pub held_out_size: usize,
    pub sampling_rate: f64,
    pub rdp_orders: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: default_output_dir(),
            repeat_seeds: Vec::new(),
            dataset: DatasetConfig::default(),
            train: TrainSection::default(),
            architecture: ArchitectureSection::default(),
            adaptive: AdaptiveSection::default(),
            eval: EvalSection::default(),
            derived: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.derived = None;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the `DPGAN_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::config(format!("{SEED_ENV}={v} is not an integer")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Ring if d.modes < 2 => return Err(Error::config("ring needs at least 2 modes")),
            DatasetKind::Ring | DatasetKind::Grid if d.n < 2 || d.std < 0.0 || !(d.radius > 0.0) => {
                return Err(Error::config("synthetic datasets need n >= 2, std >= 0 and a positive radius"));
            }
            DatasetKind::Csv if d.path.is_none() => return Err(Error::config("csv dataset needs dataset.path")),
            DatasetKind::Idx if d.path.is_none() || d.labels_path.is_none() => {
                return Err(Error::config("idx dataset needs dataset.path and dataset.labels_path"));
            }
            _ => {}
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::config("dataset.train_fraction must lie in (0, 1)"));
        }
        if !(d.capture_radius > 0.0) {
            return Err(Error::config("dataset.capture_radius must be positive"));
        }
        if self.eval.samples < 3 || self.eval.probe_size == 0 {
            return Err(Error::config("eval.samples must be at least 3 and eval.probe_size positive"));
        }
        if let NdSetting::Fixed(0) = self.train.n_d {
            return Err(Error::config("train.n_d must be positive or \"adaptive\""));
        }
        Ok(())
    }

    /// Engine config for data of the given width and class count.
    pub fn train_config(&self, data_dim: usize, num_classes: usize) -> Result<TrainConfig> {
        let t = &self.train;
        let a = &self.architecture;
        let arch = Architecture {
            g_hidden_width: a.g_hidden_width,
            g_hidden_layers: a.g_hidden_layers,
            d_hidden_width: a.d_hidden_width,
            d_hidden_layers: a.d_hidden_layers,
            label_embed_dim: a.label_embed_dim,
        };
        let (generator, discriminator) = arch.networks(data_dim, num_classes, t.latent_dim);
        let adam = AdamParams { alpha: t.learning_rate, beta1: t.beta1, beta2: t.beta2, ..AdamParams::default() };
        let step_frequency = match t.n_d {
            NdSetting::Fixed(n) => StepFrequency::Fixed(n),
            NdSetting::Marker(_) => StepFrequency::Adaptive(AdaptiveConfig {
                beta: self.adaptive.beta,
                floor: self.adaptive.floor,
                ladder: self.adaptive.ladder.clone().unwrap_or_else(dpgan_core::engine::default_ladder),
            }),
        };
        let privacy = if t.private {
            PrivacyMode::Private { clip_norm: t.clip_norm, noise_multiplier: t.noise_multiplier, delta: t.delta }
        } else {
            PrivacyMode::NonPrivate
        };
        let cfg = TrainConfig {
            step_frequency,
            total_d_steps: t.total_d_steps,
            expected_batch: t.expected_batch,
            privacy,
            seed: self.seed,
            eval_every: t.eval_every,
            latent_dim: t.latent_dim,
            generator,
            discriminator,
            g_adam: adam,
            d_adam: adam,
            ema_beta: t.ema_beta,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.repeat_seeds.is_empty() {
            vec![self.seed]
        } else {
            self.repeat_seeds.clone()
        }
    }
}
