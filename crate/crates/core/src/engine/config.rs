use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dp::AdamParams;
use crate::error::{Error, Result};
use crate::nn::{Activation, NetworkSpec, OutputActivation};

use super::schedule::default_ladder;

/// How many discriminator steps precede each generator step.
#[derive(Debug, Clone, PartialEq)]
pub enum StepFrequency {
    Fixed(u32),
    Adaptive(AdaptiveConfig),
}

/// Parameters of the adaptive controller.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveConfig {
    pub beta: f64,
    pub floor: f64,
    pub ladder: Vec<u32>,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig { beta: 0.99, floor: 0.6, ladder: default_ladder() }
    }
}

/// Whether the discriminator is trained with DPSGD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrivacyMode {
    Private { clip_norm: f64, noise_multiplier: f64, delta: f64 },
    /// No clipping and no noise; Poisson sampling is kept.
    NonPrivate,
}

impl PrivacyMode {
    pub fn is_private(&self) -> bool {
        matches!(self, PrivacyMode::Private { .. })
    }
}

/// Everything the training loop needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub step_frequency: StepFrequency,
    /// Total discriminator steps `T`.
    pub total_d_steps: u64,
    /// Expected real batch size `B`; also the fake batch size.
    pub expected_batch: usize,
    pub privacy: PrivacyMode,
    pub seed: u64,
    /// Logging cadence, in discriminator steps.
    pub eval_every: u64,
    pub latent_dim: usize,
    pub generator: NetworkSpec,
    pub discriminator: NetworkSpec,
    pub g_adam: AdamParams,
    pub d_adam: AdamParams,
    /// EMA decay of the logged fake-batch accuracy in fixed mode.
    pub ema_beta: f64,
}

/// Dense stand-ins for the DCGAN pair.
///
/// The default discriminator is narrower than the generator. At desk scale a
/// wide dense discriminator shrugs off the DPSGD noise, which hides the effect
/// of the step frequency entirely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Architecture {
    pub g_hidden_width: usize,
    pub g_hidden_layers: usize,
    pub d_hidden_width: usize,
    pub d_hidden_layers: usize,
    pub label_embed_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture { g_hidden_width: 64, g_hidden_layers: 2, d_hidden_width: 32, d_hidden_layers: 3, label_embed_dim: 8 }
    }
}

impl Architecture {
    /// Same width and depth for both networks.
    pub fn uniform(hidden_width: usize, hidden_layers: usize, label_embed_dim: usize) -> Self {
        Architecture {
            g_hidden_width: hidden_width,
            g_hidden_layers: hidden_layers,
            d_hidden_width: hidden_width,
            d_hidden_layers: hidden_layers,
            label_embed_dim,
        }
    }

    /// Generator: relu hidden layers, tanh head. Discriminator: leaky relu
    /// (slope 0.2), sigmoid head. Both embed labels when `num_classes > 0`.
    pub fn networks(&self, data_dim: usize, num_classes: usize, latent_dim: usize) -> (NetworkSpec, NetworkSpec) {
        let e = if num_classes > 0 { self.label_embed_dim } else { 0 };
        let mut g_sizes = vec![latent_dim + e];
        g_sizes.extend(vec![self.g_hidden_width; self.g_hidden_layers]);
        g_sizes.push(data_dim);
        let mut d_sizes = vec![data_dim + e];
        d_sizes.extend(vec![self.d_hidden_width; self.d_hidden_layers]);
        d_sizes.push(1);
        (
            NetworkSpec {
                layer_sizes: g_sizes,
                activation: Activation::Relu,
                num_classes,
                label_embed_dim: e,
                output_activation: OutputActivation::Tanh,
            },
            NetworkSpec {
                layer_sizes: d_sizes,
                activation: Activation::LeakyRelu(0.2),
                num_classes,
                label_embed_dim: e,
                output_activation: OutputActivation::Sigmoid,
            },
        )
    }
}

impl TrainConfig {
    /// Desk-scale defaults: `B = 128`, `C = 1`, `sigma = 1`, `delta = 1e-5`, `n_D = 1`.
    pub fn desk_default(data_dim: usize, num_classes: usize) -> Self {
        let latent_dim = 8;
        let (generator, discriminator) = Architecture::default().networks(data_dim, num_classes, latent_dim);
        TrainConfig {
            step_frequency: StepFrequency::Fixed(1),
            total_d_steps: 30_000,
            expected_batch: 128,
            privacy: PrivacyMode::Private { clip_norm: 1.0, noise_multiplier: 1.0, delta: 1e-5 },
            seed: 0,
            eval_every: 1000,
            latent_dim,
            generator,
            discriminator,
            g_adam: AdamParams::default(),
            d_adam: AdamParams::default(),
            ema_beta: 0.99,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        match &self.step_frequency {
            StepFrequency::Fixed(0) => return Err(Error::config("n_D must be positive")),
            StepFrequency::Fixed(_) => {}
            StepFrequency::Adaptive(a) => {
                super::schedule::ScheduleState::new(a.beta, a.floor, a.ladder.clone())?;
            }
        }
        if self.total_d_steps == 0 {
            return Err(Error::config("total discriminator steps must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be positive"));
        }
        if self.expected_batch == 0 {
            return Err(Error::config("expected batch must be positive"));
        }
        if !(self.ema_beta > 0.0 && self.ema_beta < 1.0) {
            return Err(Error::config("ema_beta must lie in (0, 1)"));
        }
        if let PrivacyMode::Private { clip_norm, noise_multiplier, delta } = self.privacy {
            if !(clip_norm > 0.0 && clip_norm.is_finite()) {
                return Err(Error::config(format!("clip norm {clip_norm} must be positive and finite")));
            }
            if !(noise_multiplier > 0.0 && noise_multiplier.is_finite()) {
                return Err(Error::config(format!("noise multiplier {noise_multiplier} must be positive")));
            }
            if !(delta > 0.0 && delta < 1.0) {
                return Err(Error::config(format!("delta {delta} outside (0, 1)")));
            }
        }
        let (g, d) = (&self.generator, &self.discriminator);
        if g.data_dim() != self.latent_dim {
            return Err(Error::config(format!("generator reads {} latent dims, config says {}", g.data_dim(), self.latent_dim)));
        }
        if g.output_dim() != d.data_dim() {
            return Err(Error::config(format!(
                "generator emits {} columns but discriminator reads {}",
                g.output_dim(),
                d.data_dim()
            )));
        }
        if g.num_classes != d.num_classes {
            return Err(Error::config("generator and discriminator disagree on the number of classes"));
        }
        if d.output_dim() != 1 || d.output_activation != OutputActivation::Sigmoid {
            return Err(Error::config("discriminator needs a single sigmoid output"));
        }
        Ok(())
    }
}
