//! The DP-GAN training loop.
//!
//! Each discriminator step samples a Poisson real batch and `B` fakes,
//! clips every per-example gradient, adds Gaussian noise to the sum and
//! divides by `2B`. After every `n_D` discriminator steps the generator takes
//! one non-saturating step through the current discriminator. Only
//! discriminator steps touch real data, so only they are charged to the
//! accountant.

mod config;
mod schedule;
mod trainer;

pub use config::{AdaptiveConfig, Architecture, PrivacyMode, StepFrequency, TrainConfig};
pub use schedule::{adaptive_update, default_ladder, grace_period, Ema, ScheduleState};
pub use trainer::{
    derive_seed, fake_accuracy, generate, sample_noise, train, Checkpoint, DiscriminatorReport, GeneratorReport,
    LogRow, Observer, Trainer,
};
