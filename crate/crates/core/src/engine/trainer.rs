use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::accountant::RdpCurve;
use crate::data::Dataset;
use crate::dp::{self, AdamState, PrivacySpec};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{self, Batch, LossKind, ModelState, NetworkSpec};

use super::config::{PrivacyMode, StepFrequency, TrainConfig};
use super::schedule::{Ema, ScheduleState};

/// Complete training state; restoring it resumes a run bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub discriminator: ModelState,
    pub generator: ModelState,
    pub d_opt: AdamState,
    pub g_opt: AdamState,
    /// Present in adaptive mode.
    pub schedule: Option<ScheduleState>,
    pub rng: ChaCha8Rng,
    /// Discriminator steps taken.
    pub t: u64,
    /// Generator steps taken.
    pub k: u64,
    /// Private discriminator steps charged to the accountant in this segment.
    pub accountant_steps: u64,
    pub d_steps_since_g: u64,
    /// EMA of fake-batch accuracy, logged in every mode.
    pub fake_acc_ema: Ema,
    pub last_g_loss: f64,
    pub last_d_loss: f64,
}

/// What one discriminator step did.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorReport {
    pub realized_batch: usize,
    /// Mean and max of the unclipped per-example norms over real and fake rows.
    pub mean_grad_norm: f64,
    pub max_grad_norm: f64,
    pub loss: f64,
}

/// What one generator step did.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorReport {
    /// Fraction of the fresh fake batch with `D < 0.5`, measured before the update.
    pub fake_accuracy: f64,
    pub loss: f64,
    /// Frequency in force for the next interval.
    pub n_d: u32,
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub t: u64,
    pub k: u64,
    /// Privacy spent so far; `+inf` when training non-privately.
    pub epsilon: f64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub fake_acc_ema: f64,
    pub n_d_current: u32,
}

/// Hooks invoked by [`Trainer::run`]. Observers see state but cannot change it.
pub trait Observer {
    /// Called immediately before each generator step.
    fn before_generator_step(&mut self, _state: &Checkpoint) -> Result<()> {
        Ok(())
    }

    /// Called for every log row, after it is appended.
    fn on_log(&mut self, _row: &LogRow, _state: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

/// The DP-GAN training loop over a borrowed dataset.
pub struct Trainer<'d> {
    config: TrainConfig,
    data: &'d Dataset,
    mechanism: PrivacySpec,
    curve: Option<RdpCurve>,
    state: Checkpoint,
}

/// Mixes a run seed into independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<'d> Trainer<'d> {
    /// Fresh networks and optimizers derived from `config.seed`.
    pub fn new(config: TrainConfig, data: &'d Dataset) -> Result<Self> {
        config.validate()?;
        let d = nn::init_network(config.discriminator.clone(), derive_seed(config.seed, 1))?;
        let g = nn::init_network(config.generator.clone(), derive_seed(config.seed, 2))?;
        let state = Checkpoint {
            d_opt: AdamState::new(d.param_count(), config.d_adam),
            g_opt: AdamState::new(g.param_count(), config.g_adam),
            discriminator: d,
            generator: g,
            schedule: new_schedule(&config)?,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 3)),
            t: 0,
            k: 0,
            accountant_steps: 0,
            d_steps_since_g: 0,
            fake_acc_ema: Ema::new(ema_beta(&config)),
            last_g_loss: f64::NAN,
            last_d_loss: f64::NAN,
        };
        Self::with_state(config, data, state)
    }

    /// Continues from a checkpoint.
    ///
    /// With `fresh_segment = false` the run continues exactly as if it had
    /// never stopped (the config must be the original one). With
    /// `fresh_segment = true` the config may change `n_D` and privacy: the
    /// accountant restarts at zero, the generator cadence restarts, and the
    /// adaptive controller is created or dropped to match the new config.
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig, data: &'d Dataset, fresh_segment: bool) -> Result<Self> {
        config.validate()?;
        let mut state = checkpoint;
        if state.discriminator.spec() != &config.discriminator || state.generator.spec() != &config.generator {
            return Err(Error::config("checkpoint architecture differs from the config"));
        }
        if fresh_segment {
            state.accountant_steps = 0;
            state.d_steps_since_g = 0;
            state.schedule = match (&config.step_frequency, state.schedule.take()) {
                (StepFrequency::Adaptive(_), Some(s)) => Some(s),
                (StepFrequency::Adaptive(_), None) => new_schedule(&config)?,
                (StepFrequency::Fixed(_), _) => None,
            };
        } else if state.schedule.is_some() != matches!(config.step_frequency, StepFrequency::Adaptive(_)) {
            return Err(Error::config("checkpoint schedule mode differs from the config"));
        }
        if state.t > config.total_d_steps {
            return Err(Error::config(format!(
                "checkpoint is at step {} beyond the configured total {}",
                state.t, config.total_d_steps
            )));
        }
        Self::with_state(config, data, state)
    }

    fn with_state(config: TrainConfig, data: &'d Dataset, state: Checkpoint) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::config("training data is empty"));
        }
        if data.dim() != config.discriminator.data_dim() {
            return Err(Error::config(format!(
                "data has {} features, discriminator reads {}",
                data.dim(),
                config.discriminator.data_dim()
            )));
        }
        if data.num_classes != config.discriminator.num_classes {
            return Err(Error::config(format!(
                "data has {} classes, networks expect {}",
                data.num_classes, config.discriminator.num_classes
            )));
        }
        let (mechanism, curve) = match config.privacy {
            PrivacyMode::Private { clip_norm, noise_multiplier, delta } => {
                let m = PrivacySpec::private(clip_norm, noise_multiplier, config.expected_batch, delta, data.len())?;
                let c = RdpCurve::with_default_orders(m.sampling_rate, noise_multiplier)?;
                (m, Some(c))
            }
            PrivacyMode::NonPrivate => (PrivacySpec::non_private(config.expected_batch, data.len())?, None),
        };
        Ok(Trainer { config, data, mechanism, curve, state })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_state(self) -> Checkpoint {
        self.state
    }

    pub fn mechanism(&self) -> &PrivacySpec {
        &self.mechanism
    }

    /// Privacy spent by the discriminator steps of this segment.
    pub fn epsilon(&self) -> Result<f64> {
        match (&self.curve, self.config.privacy) {
            (Some(c), PrivacyMode::Private { delta, .. }) => Ok(c.epsilon(self.state.accountant_steps, delta)?.epsilon),
            _ => Ok(f64::INFINITY),
        }
    }

    /// Discriminator steps per generator step for the current interval.
    pub fn current_n_d(&self) -> u32 {
        match (&self.config.step_frequency, &self.state.schedule) {
            (StepFrequency::Fixed(n), _) => *n,
            (StepFrequency::Adaptive(_), Some(s)) => s.current(),
            (StepFrequency::Adaptive(_), None) => unreachable!("adaptive trainer always has a schedule"),
        }
    }

    /// `B` latent rows plus uniformly drawn labels for conditional models.
    fn sample_noise(&mut self) -> Batch {
        sample_noise(&self.config.generator, self.config.expected_batch, &mut self.state.rng)
    }

    /// One DPSGD update of the discriminator on a Poisson real batch and `B` fakes.
    pub fn discriminator_step(&mut self) -> Result<DiscriminatorReport> {
        let step = self.state.t;
        self.discriminator_step_inner().map_err(|e| e.at_step(step))
    }

    fn discriminator_step_inner(&mut self) -> Result<DiscriminatorReport> {
        let idx = dp::poisson_sample(self.data.len(), self.mechanism.sampling_rate, &mut self.state.rng);
        let real = self.data.batch(&idx);
        let noise = self.sample_noise();
        let fake_x = nn::forward(&self.state.generator, &noise)?;
        let fake = Batch { inputs: fake_x, labels: noise.labels };

        let clip = self.mechanism.clip_norm;
        let d = &self.state.discriminator;
        let r = nn::clipped_grad_sum(d, &real, LossKind::Real, clip)?;
        let f = nn::clipped_grad_sum(d, &fake, LossKind::Fake, clip)?;
        let mut sum = r.sum;
        sum.iter_mut().zip(&f.sum).for_each(|(a, b)| *a += b);
        let grad = dp::noise_and_scale(sum, &self.mechanism, &mut self.state.rng)?;
        self.state.d_opt.step(self.state.discriminator.params_mut(), &grad)?;

        self.state.t += 1;
        self.state.d_steps_since_g += 1;
        if self.config.privacy.is_private() {
            self.state.accountant_steps += 1;
        }
        let rows = r.norms.len() + f.norms.len();
        let loss = (r.loss_sum + f.loss_sum) / rows as f64;
        self.state.last_d_loss = loss;
        let norms = r.norms.iter().chain(&f.norms);
        Ok(DiscriminatorReport {
            realized_batch: idx.len(),
            mean_grad_norm: norms.clone().sum::<f64>() / rows as f64,
            max_grad_norm: norms.cloned().fold(0.0, f64::max),
            loss,
        })
    }

    /// One non-saturating generator update. Consumes no privacy budget.
    pub fn generator_step(&mut self) -> Result<GeneratorReport> {
        let step = self.state.t;
        self.generator_step_inner().map_err(|e| e.at_step(step))
    }

    fn generator_step_inner(&mut self) -> Result<GeneratorReport> {
        let noise = self.sample_noise();
        let gg = nn::backward_mean(&self.state.generator, &self.state.discriminator, &noise)?;
        let fake_accuracy = fake_accuracy(&gg.disc_outputs);
        self.state.g_opt.step(self.state.generator.params_mut(), &gg.grad)?;
        self.state.k += 1;
        self.state.d_steps_since_g = 0;
        self.state.last_g_loss = gg.mean_loss;
        self.state.fake_acc_ema.update(fake_accuracy);
        if let Some(s) = self.state.schedule.as_mut() {
            s.update(fake_accuracy)?;
        }
        Ok(GeneratorReport { fake_accuracy, loss: gg.mean_loss, n_d: self.current_n_d() })
    }

    fn log_row(&self) -> Result<LogRow> {
        Ok(LogRow {
            t: self.state.t,
            k: self.state.k,
            epsilon: self.epsilon()?,
            d_loss: self.state.last_d_loss,
            g_loss: self.state.last_g_loss,
            fake_acc_ema: self.state.fake_acc_ema.value.unwrap_or(f64::NAN),
            n_d_current: self.current_n_d(),
        })
    }

    /// Trains until `t == total_d_steps`, logging every `eval_every` steps
    /// and at the end. Generator steps follow every `n_D`-th discriminator step.
    pub fn run<O: Observer + ?Sized>(&mut self, observer: &mut O) -> Result<Vec<LogRow>> {
        self.run_until(self.config.total_d_steps, observer)
    }

    /// Like [`run`](Self::run) but stops at `t == stop_at` (clamped to the total).
    pub fn run_until<O: Observer + ?Sized>(&mut self, stop_at: u64, observer: &mut O) -> Result<Vec<LogRow>> {
        let stop_at = stop_at.min(self.config.total_d_steps);
        let mut log = Vec::new();
        while self.state.t < stop_at {
            self.discriminator_step()?;
            if self.state.d_steps_since_g >= self.current_n_d() as u64 {
                observer.before_generator_step(&self.state)?;
                self.generator_step()?;
            }
            let t = self.state.t;
            if t % self.config.eval_every == 0 || t == self.config.total_d_steps {
                let row = self.log_row()?;
                log.push(row);
                observer.on_log(&row, &self.state)?;
            }
        }
        Ok(log)
    }
}

fn ema_beta(config: &TrainConfig) -> f64 {
    match &config.step_frequency {
        StepFrequency::Adaptive(a) => a.beta,
        StepFrequency::Fixed(_) => config.ema_beta,
    }
}

fn new_schedule(config: &TrainConfig) -> Result<Option<ScheduleState>> {
    match &config.step_frequency {
        StepFrequency::Adaptive(a) => Ok(Some(ScheduleState::new(a.beta, a.floor, a.ladder.clone())?)),
        StepFrequency::Fixed(_) => Ok(None),
    }
}

/// Standard normal latent rows for `generator`, with uniform labels when it is conditional.
pub fn sample_noise<R: Rng + ?Sized>(generator: &NetworkSpec, n: usize, rng: &mut R) -> Batch {
    let latent = generator.data_dim();
    let z: Vec<f64> = (0..n * latent).map(|_| rng.sample(StandardNormal)).collect();
    let k = generator.num_classes;
    let labels = (k > 0).then(|| (0..n).map(|_| rng.random_range(0..k)).collect());
    Batch { inputs: Matrix::from_vec(n, latent, z).expect("sized"), labels }
}

/// Fraction of outputs strictly below one half.
pub fn fake_accuracy(disc_outputs: &[f64]) -> f64 {
    if disc_outputs.is_empty() {
        return 0.0;
    }
    disc_outputs.iter().filter(|&&p| p < 0.5).count() as f64 / disc_outputs.len() as f64
}

/// Runs a full training from scratch and returns the final generator and log.
pub fn train(data: &Dataset, config: TrainConfig) -> Result<(ModelState, Vec<LogRow>)> {
    let mut trainer = Trainer::new(config, data)?;
    let log = trainer.run(&mut ())?;
    Ok((trainer.into_state().generator, log))
}

/// Generates `n` samples (with their labels) from a generator.
pub fn generate<R: Rng + ?Sized>(generator: &ModelState, n: usize, rng: &mut R) -> Result<Batch> {
    let noise = sample_noise(generator.spec(), n, rng);
    let x = nn::forward(generator, &noise)?;
    Ok(Batch { inputs: x, labels: noise.labels })
}
