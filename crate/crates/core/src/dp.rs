//! DPSGD mechanics: Poisson subsampling, per-example clipping, Gaussian
//! noising of the clipped sum, and the Adam optimizer.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::PerExampleGradMatrix;

/// Clipping and noise parameters of one DPSGD discriminator step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacySpec {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    /// Expected real batch size `B`; the update divides by `2B`.
    pub expected_batch: usize,
    pub delta: f64,
    /// Poisson sampling rate `q = B / n`.
    pub sampling_rate: f64,
    /// Non-private mode: `sigma = 0`, no clipping.
    pub non_private: bool,
}

impl PrivacySpec {
    /// Private mechanism over a dataset of `dataset_size` records; `q` is derived.
    pub fn private(clip_norm: f64, noise_multiplier: f64, expected_batch: usize, delta: f64, dataset_size: usize) -> Result<Self> {
        let s = PrivacySpec {
            clip_norm,
            noise_multiplier,
            expected_batch,
            delta,
            sampling_rate: sampling_rate(expected_batch, dataset_size)?,
            non_private: false,
        };
        s.validate()?;
        Ok(s)
    }

    /// Non-private baseline: Poisson sampling is kept, clipping and noise are not.
    pub fn non_private(expected_batch: usize, dataset_size: usize) -> Result<Self> {
        let s = PrivacySpec {
            clip_norm: f64::INFINITY,
            noise_multiplier: 0.0,
            expected_batch,
            delta: 1e-5,
            sampling_rate: sampling_rate(expected_batch, dataset_size)?,
            non_private: true,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.expected_batch == 0 {
            return Err(Error::config("expected batch size must be positive"));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(Error::config(format!("sampling rate {} outside (0, 1]", self.sampling_rate)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config(format!("delta {} outside (0, 1)", self.delta)));
        }
        if self.non_private {
            return Ok(());
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::config(format!("clip norm {} must be positive and finite", self.clip_norm)));
        }
        if !(self.noise_multiplier > 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::config(format!(
                "noise multiplier {} must be positive outside non-private mode",
                self.noise_multiplier
            )));
        }
        Ok(())
    }
}

fn sampling_rate(expected_batch: usize, dataset_size: usize) -> Result<f64> {
    if dataset_size == 0 {
        return Err(Error::config("dataset is empty"));
    }
    if expected_batch > dataset_size {
        return Err(Error::config(format!("expected batch {expected_batch} exceeds dataset size {dataset_size}")));
    }
    Ok(expected_batch as f64 / dataset_size as f64)
}

/// Indices of a Poisson subsample: each of `0..dataset_size` is kept
/// independently with probability `q`. The result is sorted and may be empty.
///
/// Gaps between kept indices are drawn from the geometric distribution, which
/// gives the same law as one Bernoulli draw per record at a cost proportional
/// to the sample size.
pub fn poisson_sample<R: Rng + ?Sized>(dataset_size: usize, q: f64, rng: &mut R) -> Vec<usize> {
    debug_assert!(q > 0.0 && q <= 1.0);
    if q >= 1.0 {
        return (0..dataset_size).collect();
    }
    let log_keep = libm::log1p(-q);
    let mut out = Vec::with_capacity((dataset_size as f64 * q * 1.5) as usize + 4);
    let mut i: usize = 0;
    loop {
        // U in (0, 1]: floor(ln U / ln(1-q)) ~ Geometric(q) failures before a success.
        let u: f64 = 1.0 - rng.random::<f64>();
        let skip = libm::floor(libm::log(u) / log_keep);
        if skip >= (dataset_size - i) as f64 {
            break;
        }
        i += skip as usize;
        out.push(i);
        i += 1;
        if i >= dataset_size {
            break;
        }
    }
    out
}

/// `min(1, C / norm)`; exactly `1.0` when the norm is already within bounds.
#[inline]
pub fn clip_factor(norm: f64, clip: f64) -> f64 {
    if norm <= clip {
        1.0
    } else {
        clip / norm
    }
}

/// Scales every row to norm at most `clip`. Rows already inside the ball are
/// left bitwise unchanged.
pub fn clip_per_example(g: &PerExampleGradMatrix, clip: f64) -> Result<PerExampleGradMatrix> {
    if clip.is_nan() || clip <= 0.0 {
        return Err(Error::config(format!("clip norm {clip} must be positive")));
    }
    let mut grads = g.grads.clone();
    let mut norms = Vec::with_capacity(g.len());
    for i in 0..g.len() {
        let row = grads.row_mut(i);
        let n = crate::linalg::norm(row);
        if !n.is_finite() || row.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(Some(i), "non-finite gradient row"));
        }
        let f = clip_factor(n, clip);
        if f != 1.0 {
            row.iter_mut().for_each(|v| *v *= f);
            // rounding can leave the norm an ulp above C, which would break idempotence
            let mut m = crate::linalg::norm(row);
            while m > clip {
                row.iter_mut().for_each(|v| *v *= 1.0 - f64::EPSILON);
                m = crate::linalg::norm(row);
            }
            norms.push(m);
        } else {
            norms.push(n);
        }
    }
    Ok(PerExampleGradMatrix { grads, norms })
}

/// Adds `N(0, (C sigma)^2)` noise to every coordinate of `sum`, then divides by `2B`.
///
/// In non-private mode no noise is drawn and the rng is untouched.
pub fn noise_and_scale<R: Rng + ?Sized>(mut sum: Vec<f64>, spec: &PrivacySpec, rng: &mut R) -> Result<Vec<f64>> {
    spec.validate()?;
    let scale = 1.0 / (2.0 * spec.expected_batch as f64);
    if spec.non_private {
        sum.iter_mut().for_each(|v| *v *= scale);
        return Ok(sum);
    }
    let std = spec.clip_norm * spec.noise_multiplier;
    for v in sum.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = (*v + std * z) * scale;
    }
    Ok(sum)
}

/// `(sum_i clipped_i + z) / (2B)` with `z ~ N(0, C^2 sigma^2 I)`.
///
/// Rows must already be clipped to `C`. The divisor uses the expected batch
/// size `B`, not the realized row count. An empty matrix (zero rows, `P`
/// columns) yields pure noise.
pub fn aggregate_and_noise<R: Rng + ?Sized>(
    clipped: &PerExampleGradMatrix,
    spec: &PrivacySpec,
    rng: &mut R,
) -> Result<Vec<f64>> {
    spec.validate()?;
    if !spec.non_private {
        // Recomputed rather than trusting the stored norms.
        let tol = spec.clip_norm * (1.0 + 1e-12);
        if let Some(i) = clipped.grads.iter_rows().position(|r| crate::linalg::norm(r) > tol) {
            return Err(Error::numeric(Some(i), format!("row norm exceeds clip norm {}", spec.clip_norm)));
        }
    }
    noise_and_scale(clipped.sum_rows(), spec, rng)
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl Default for AdamParams {
    /// The DCGAN recipe: `alpha = 2e-4, beta1 = 0.5, beta2 = 0.999`.
    fn default() -> Self {
        AdamParams { alpha: 2e-4, beta1: 0.5, beta2: 0.999, eps_hat: 1e-8 }
    }
}

/// Moment estimates of an Adam optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub params: AdamParams,
}

impl AdamState {
    pub fn new(param_count: usize, params: AdamParams) -> Self {
        AdamState { step_count: 0, first_moment: vec![0.0; param_count], second_moment: vec![0.0; param_count], params }
    }

    /// One bias-corrected Adam update of `weights` in place.
    ///
    /// `w -= alpha * m_hat / (sqrt(v_hat) + eps_hat)`.
    pub fn step(&mut self, weights: &mut [f64], grad: &[f64]) -> Result<()> {
        if weights.len() != grad.len() || grad.len() != self.first_moment.len() {
            return Err(Error::shape(format!(
                "adam: {} weights, {} gradient entries, {} moments",
                weights.len(),
                grad.len(),
                self.first_moment.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::numeric(None, format!("non-finite gradient coordinate {i}")));
        }
        let AdamParams { alpha, beta1, beta2, eps_hat } = self.params;
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - libm::pow(beta1, t);
        let bc2 = 1.0 - libm::pow(beta2, t);
        let step_size = alpha / bc1;
        let inv_sqrt_bc2 = 1.0 / libm::sqrt(bc2);
        for (((w, &g), m), v) in weights.iter_mut().zip(grad).zip(&mut self.first_moment).zip(&mut self.second_moment) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *w -= step_size * *m / (libm::sqrt(*v) * inv_sqrt_bc2 + eps_hat);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(state: &AdamState, params: &[f64], grad: &[f64]) -> Result<(AdamState, Vec<f64>)> {
    let mut s = state.clone();
    let mut p = params.to_vec();
    s.step(&mut p, grad)?;
    Ok((s, p))
}

/// Builds a per-example matrix from plain rows; handy for tests and tools.
pub fn per_example_from_rows(rows: &[Vec<f64>], cols: usize) -> Result<PerExampleGradMatrix> {
    Ok(PerExampleGradMatrix::from_grads(Matrix::from_rows(rows, cols)?))
}
