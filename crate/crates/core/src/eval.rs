//! Sample-quality metrics: Fréchet distance between fitted Gaussians, mode
//! coverage, the held-out discriminator accuracy probe, and downstream
//! classifier accuracy.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dp::{AdamParams, AdamState};
use crate::engine::{fake_accuracy, generate};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{self, Activation, Batch, ModelState, NetworkSpec, OutputActivation};

/// Diagonal loading added to covariances before eigendecomposition.
pub const COV_REGULARIZATION: f64 = 1e-10;

/// Mean and covariance of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    /// `dim x dim`, symmetric.
    pub cov: Matrix,
    pub n_samples: usize,
}

impl GaussianSummary {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of `samples`, optionally after a
/// feature map applied row by row.
pub fn fit_gaussian(samples: &Matrix, feature_map: Option<&dyn Fn(&[f64]) -> Vec<f64>>) -> Result<GaussianSummary> {
    let mapped;
    let x = match feature_map {
        Some(f) => {
            let rows: Vec<Vec<f64>> = samples.iter_rows().map(f).collect();
            let cols = rows.first().map_or(0, Vec::len);
            mapped = Matrix::from_rows(&rows, cols)?;
            &mapped
        }
        None => samples,
    };
    let (n, d) = (x.rows(), x.cols());
    if n < d + 1 || n < 2 {
        return Err(Error::Eval(format!("need at least {} samples for a {d}-dimensional fit, got {n}", (d + 1).max(2))));
    }
    let mut mean = vec![0.0; d];
    for r in x.iter_rows() {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for r in x.iter_rows() {
        centered.iter_mut().zip(r.iter().zip(&mean)).for_each(|(c, (v, m))| *c = v - m);
        for i in 0..d {
            for j in i..d {
                let v = cov.get(i, j) + centered[i] * centered[j];
                cov.set(i, j, v);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) / (n - 1) as f64;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    if mean.iter().chain(cov.as_slice()).any(|v| !v.is_finite()) {
        return Err(Error::numeric(None, "non-finite sample statistics"));
    }
    Ok(GaussianSummary { mean, cov, n_samples: n })
}

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn check_psd(m: &Matrix, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let d = m.rows();
    for i in 0..d {
        for j in 0..i {
            let (a, b) = (m.get(i, j), m.get(j, i));
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                return Err(Error::Eval(format!("{what} covariance is not symmetric")));
            }
        }
    }
    let mut dm = to_dmatrix(m);
    for i in 0..d {
        dm[(i, i)] += COV_REGULARIZATION;
    }
    let eig = SymmetricEigen::new(dm);
    if let Some(l) = eig.eigenvalues.iter().find(|&&l| l < -1e-10) {
        return Err(Error::Eval(format!("{what} covariance has negative eigenvalue {l}")));
    }
    Ok(eig)
}

/// Squared Fréchet distance between two Gaussians,
/// `|mu_a - mu_b|^2 + tr(S_a) + tr(S_b) - 2 tr((S_a^1/2 S_b S_a^1/2)^1/2)`.
///
/// The trace term uses the symmetric form so that only symmetric
/// eigendecompositions are needed. Small negative results from rounding are
/// clamped to zero.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.cov.rows() != d || b.cov.rows() != d {
        return Err(Error::shape(format!("comparing {d}-dimensional and {}-dimensional Gaussians", b.dim())));
    }
    let ea = check_psd(&a.cov, "first")?;
    check_psd(&b.cov, "second")?;
    let sqrt_vals = ea.eigenvalues.map(|l| libm::sqrt(l.max(0.0)));
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * ea.eigenvectors.transpose();
    let mut sb = to_dmatrix(&b.cov);
    for i in 0..d {
        sb[(i, i)] += COV_REGULARIZATION;
    }
    let mut inner = &sqrt_a * sb * &sqrt_a;
    // symmetrize against rounding before the second decomposition
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|&l| libm::sqrt(l.max(0.0))).sum();
    let tr_a: f64 = (0..d).map(|i| a.cov.get(i, i) + COV_REGULARIZATION).sum();
    let tr_b: f64 = (0..d).map(|i| b.cov.get(i, i) + COV_REGULARIZATION).sum();
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let d2 = mean_term + tr_a + tr_b - 2.0 * cross;
    if d2 < -1e-8 {
        return Err(Error::numeric(None, format!("Fréchet distance came out negative ({d2})")));
    }
    Ok(d2.max(0.0))
}

/// Mode centers and the radius within which a sample counts as captured.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSpec {
    pub centers: Vec<Vec<f64>>,
    pub capture_radius: f64,
}

impl ModeSpec {
    pub fn new(centers: Vec<Vec<f64>>, capture_radius: f64) -> Result<Self> {
        if !(capture_radius > 0.0) {
            return Err(Error::config("capture radius must be positive"));
        }
        if centers.is_empty() {
            return Err(Error::config("need at least one mode center"));
        }
        for i in 0..centers.len() {
            for j in 0..i {
                if centers[i] == centers[j] {
                    return Err(Error::config(format!("mode centers {j} and {i} coincide")));
                }
            }
        }
        Ok(ModeSpec { centers, capture_radius })
    }
}

/// Mode coverage of a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    /// Modes holding at least one captured sample and at least
    /// `high_quality / (5 * num_modes)` of them.
    pub covered: usize,
    /// Fraction of samples within the capture radius of some center.
    pub high_quality_fraction: f64,
    pub per_mode_counts: Vec<usize>,
}

/// Assigns each sample to its nearest center and counts captures.
pub fn mode_coverage(samples: &Matrix, modes: &ModeSpec) -> Coverage {
    let k = modes.centers.len();
    let mut counts = vec![0usize; k];
    let r2 = modes.capture_radius * modes.capture_radius;
    for x in samples.iter_rows() {
        let (best, d2) = modes
            .centers
            .iter()
            .enumerate()
            .map(|(c, ctr)| (c, ctr.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
            .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
        if d2 <= r2 {
            counts[best] += 1;
        }
    }
    let hq: usize = counts.iter().sum();
    let threshold = hq as f64 / (5.0 * k as f64);
    let covered = counts.iter().filter(|&&c| c > 0 && c as f64 >= threshold).count();
    let n = samples.rows();
    Coverage {
        covered,
        high_quality_fraction: if n == 0 { 0.0 } else { hq as f64 / n as f64 },
        per_mode_counts: counts,
    }
}

/// Default probe size for each of the real and fake halves.
pub const DEFAULT_PROBE_SIZE: usize = 512;

/// Balanced accuracy of `d` on held-out real rows (`D >= 0.5`) and fresh
/// fakes (`D < 0.5`).
///
/// Reads real data outside any privacy mechanism; results are diagnostic
/// and must not be released as part of a private run.
pub fn disc_accuracy_probe<R: Rng + ?Sized>(
    d: &ModelState,
    held_out_real: &Batch,
    g: &ModelState,
    probe_size: usize,
    rng: &mut R,
) -> Result<f64> {
    if held_out_real.is_empty() || probe_size == 0 {
        return Err(Error::Eval("probe needs real rows and a positive size".into()));
    }
    let n_real = probe_size.min(held_out_real.len());
    let idx = rand::seq::index::sample(rng, held_out_real.len(), n_real).into_vec();
    let real = Batch {
        inputs: held_out_real.inputs.select_rows(&idx),
        labels: held_out_real.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
    };
    let real_out = nn::forward(d, &real)?;
    let real_acc = real_out.as_slice().iter().filter(|&&p| p >= 0.5).count() as f64 / n_real as f64;
    let fake = generate(g, probe_size, rng)?;
    let fake_out = nn::forward(d, &fake)?;
    Ok(0.5 * real_acc + 0.5 * fake_accuracy(fake_out.as_slice()))
}

/// Settings of the downstream classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden_width: 64,
            hidden_layers: 2,
            epochs: 20,
            batch_size: 128,
            adam: AdamParams { alpha: 1e-3, beta1: 0.9, beta2: 0.999, eps_hat: 1e-8 },
        }
    }
}

/// Trains a fresh dense classifier on `generated` only and reports its
/// accuracy on `real_test`. Labels are required on both.
pub fn downstream_accuracy(
    generated: &Batch,
    real_test: &Batch,
    num_classes: usize,
    classifier_seed: u64,
    cfg: &ClassifierConfig,
) -> Result<f64> {
    let train_y = generated.labels.as_ref().ok_or_else(|| Error::Eval("generated data needs labels".into()))?;
    let test_y = real_test.labels.as_ref().ok_or_else(|| Error::Eval("test data needs labels".into()))?;
    if generated.is_empty() || real_test.is_empty() || num_classes < 2 {
        return Err(Error::Eval("downstream accuracy needs non-empty labelled data and >= 2 classes".into()));
    }
    let dim = generated.inputs.cols();
    if real_test.inputs.cols() != dim {
        return Err(Error::shape("generated and test features differ in width"));
    }
    let missing = (0..num_classes).filter(|c| !train_y.contains(c)).count();
    if missing > 0 {
        log::warn!("{missing} classes have no generated examples");
    }
    let mut sizes = vec![dim];
    sizes.extend(core::iter::repeat_n(cfg.hidden_width, cfg.hidden_layers));
    sizes.push(num_classes);
    let spec = NetworkSpec {
        layer_sizes: sizes,
        activation: Activation::Relu,
        num_classes: 0,
        label_embed_dim: 0,
        output_activation: OutputActivation::Identity,
    };
    let mut model = nn::init_network(spec, classifier_seed)?;
    let mut opt = AdamState::new(model.param_count(), cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(classifier_seed ^ 0x5EED);
    let mut order: Vec<usize> = (0..generated.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let x = Batch::unlabelled(generated.inputs.select_rows(chunk));
            let y: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let (_, grad) = nn::softmax_xent_grad(&model, &x, &y)?;
            opt.step(model.params_mut(), &grad)?;
        }
    }
    let logits = nn::forward(&model, &Batch::unlabelled(real_test.inputs.clone()))?;
    let correct = logits
        .iter_rows()
        .zip(test_y)
        .filter(|(row, &y)| {
            let argmax = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a }).0;
            argmax == y
        })
        .count();
    Ok(correct as f64 / real_test.len() as f64)
}
