//! Grid sweeps over `n_D`, the noise multiplier, or the batch size.
//!
//! A sweep spec is a small TOML file:
//!
//! ```toml
//! axis = "batch"             # "n_d", "sigma" or "batch"
//! values = [128, 512, 2048]
//! budget_mode = "fixed_epsilon"
//! target_epsilon = 10.0
//! sigma_grid = [0.8, 1.0]    # batch axis: noise levels tuned at the base batch size
//! ```
//!
//! On the batch axis each base noise level `s` becomes `sqrt(B / B0) * s`
//! for batch `B` and base batch `B0`. When the target is `epsilon <= 1`
//! every candidate is multiplied by 5.

use std::io::Write;
use std::path::PathBuf;

use dpgan_core::accountant::max_steps;
use serde::Deserialize;

use crate::config::{ExperimentConfig, NdSetting};
use crate::datasets;
use crate::error::{Error, Result};
use crate::harness::{self, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    #[serde(rename = "n_d")]
    Nd,
    Sigma,
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
pub enum BudgetMode {
    #[default]
    #[serde(rename = "fixed_T")]
    FixedT,
    #[serde(rename = "fixed_epsilon")]
    FixedEpsilon,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    #[serde(default)]
    pub budget_mode: BudgetMode,
    #[serde(default)]
    pub target_epsilon: Option<f64>,
    #[serde(default)]
    pub sigma_grid: Option<Vec<f64>>,
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// One configuration of a sweep, before seeds are applied.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub n_d: NdSetting,
    pub batch: usize,
    pub sigma: f64,
    pub d_steps: u64,
}

fn as_count(v: f64, what: &str) -> Result<u64> {
    if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as u64)
    } else {
        Err(Error::config(format!("{what} value {v} must be a positive integer")))
    }
}

/// Candidate noise levels for batch `b` from noise levels tuned at `base_batch`.
pub fn sqrt_rule_sigmas(base_sigmas: &[f64], base_batch: usize, b: usize, target_epsilon: Option<f64>) -> Vec<f64> {
    let scale = (b as f64 / base_batch as f64).sqrt();
    let low_eps = if target_epsilon.is_some_and(|e| e <= 1.0) { 5.0 } else { 1.0 };
    base_sigmas.iter().map(|s| s * scale * low_eps).collect()
}

/// Expands a spec into concrete points. `train_size` fixes `q = B / n`.
pub fn plan(spec: &SweepSpec, base: &ExperimentConfig, train_size: usize) -> Result<Vec<SweepPoint>> {
    if spec.values.is_empty() {
        return Err(Error::config("sweep has no values"));
    }
    let t = &base.train;
    let fixed_eps = match spec.budget_mode {
        BudgetMode::FixedT => None,
        BudgetMode::FixedEpsilon => {
            if !t.private {
                return Err(Error::config("fixed_epsilon sweeps need a private base config"));
            }
            Some(spec.target_epsilon.ok_or_else(|| Error::config("fixed_epsilon needs target_epsilon"))?)
        }
    };
    let mut raw = Vec::new();
    for &v in &spec.values {
        match spec.axis {
            SweepAxis::Nd => raw.push((v, NdSetting::Fixed(as_count(v, "n_d")? as u32), t.expected_batch, t.noise_multiplier)),
            SweepAxis::Sigma => {
                if !(v > 0.0) {
                    return Err(Error::config(format!("sigma value {v} must be positive")));
                }
                raw.push((v, t.n_d, t.expected_batch, v));
            }
            SweepAxis::Batch => {
                let b = as_count(v, "batch")? as usize;
                let grid = spec.sigma_grid.clone().unwrap_or_else(|| vec![t.noise_multiplier]);
                for s in sqrt_rule_sigmas(&grid, t.expected_batch, b, spec.target_epsilon) {
                    raw.push((v, t.n_d, b, s));
                }
            }
        }
    }
    raw.into_iter()
        .map(|(value, n_d, batch, sigma)| {
            let d_steps = match fixed_eps {
                None => t.total_d_steps,
                Some(eps) => max_steps(batch as f64 / train_size as f64, sigma, t.delta, eps)?,
            };
            Ok(SweepPoint { value, n_d, batch, sigma, d_steps })
        })
        .collect()
}

pub const SWEEP_HEADER: &str =
    "axis,value,n_d,batch,sigma,seed,d_steps,epsilon,final_frechet,best_frechet,final_covered,best_covered,final_downstream,status";

/// Runs every point for every seed and writes `sweep.csv` under the base
/// output directory. Failed runs are recorded and the sweep continues.
pub fn sweep(spec: &SweepSpec, base: &ExperimentConfig) -> Result<PathBuf> {
    base.validate()?;
    let root = base.output_dir.clone();
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let out_path = root.join("sweep.csv");
    let mut out = std::fs::File::create(&out_path).map_err(|e| Error::io(&out_path, e))?;
    writeln!(out, "{SWEEP_HEADER}").map_err(|e| Error::io(&out_path, e))?;
    let axis = match spec.axis {
        SweepAxis::Nd => "n_d",
        SweepAxis::Sigma => "sigma",
        SweepAxis::Batch => "batch",
    };
    for seed in base.seeds() {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let data = datasets::load(&cfg.dataset, seed)?;
        let points = plan(spec, &cfg, data.train.len())?;
        for p in points {
            let mut c = cfg.clone();
            c.train.n_d = p.n_d;
            c.train.expected_batch = p.batch;
            c.train.noise_multiplier = p.sigma;
            c.train.total_d_steps = p.d_steps;
            c.output_dir = root.join(format!("{axis}-{}-sigma{}-seed{seed}", p.value, p.sigma));
            let n_d = match p.n_d {
                NdSetting::Fixed(n) => n.to_string(),
                NdSetting::Marker(_) => "adaptive".into(),
            };
            let prefix = format!("{axis},{},{n_d},{},{},{seed},{}", p.value, p.batch, p.sigma, p.d_steps);
            let line = match harness::run_on(&c, &data, Segment::default()) {
                Ok(r) => {
                    let last = r.evals.last();
                    let best_fd = r.evals.iter().map(|e| e.frechet).fold(f64::INFINITY, f64::min);
                    let best_cov = r.evals.iter().filter_map(|e| e.covered_modes).max();
                    format!(
                        "{prefix},{},{},{},{},{},{},ok",
                        r.epsilon,
                        last.map_or(String::new(), |e| e.frechet.to_string()),
                        best_fd,
                        last.and_then(|e| e.covered_modes).map_or(String::new(), |c| c.to_string()),
                        best_cov.map_or(String::new(), |c| c.to_string()),
                        last.and_then(|e| e.downstream_acc).map_or(String::new(), |a| a.to_string()),
                    )
                }
                Err(e) => {
                    log::error!("sweep point {prefix} failed: {e}");
                    format!("{prefix},,,,,,,failed: {}", e.to_string().replace([',', '\n'], ";"))
                }
            };
            writeln!(out, "{line}").and_then(|_| out.flush()).map_err(|e| Error::io(&out_path, e))?;
        }
    }
    Ok(out_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_rule_reaches_two_at_four_times_the_batch() {
        assert_eq!(sqrt_rule_sigmas(&[1.0], 128, 512, Some(10.0)), vec![2.0]);
        assert_eq!(sqrt_rule_sigmas(&[1.0], 128, 512, Some(1.0)), vec![10.0]);
    }

    #[test]
    fn empty_values_are_rejected() {
        let spec = SweepSpec::from_toml("axis = \"n_d\"\nvalues = []\n").unwrap();
        assert!(plan(&spec, &ExperimentConfig::default(), 60_000).is_err());
    }

    #[test]
    fn fixed_epsilon_recomputes_the_horizon() {
        let spec = SweepSpec::from_toml(
            "axis = \"sigma\"\nvalues = [0.8, 1.6]\nbudget_mode = \"fixed_epsilon\"\ntarget_epsilon = 2.0\n",
        )
        .unwrap();
        let pts = plan(&spec, &ExperimentConfig::default(), 60_000).unwrap();
        assert_eq!(pts.len(), 2);
        assert!(pts[0].d_steps < pts[1].d_steps);
    }

    #[test]
    fn non_integer_step_counts_are_rejected() {
        let spec = SweepSpec::from_toml("axis = \"n_d\"\nvalues = [1.5]\n").unwrap();
        assert!(plan(&spec, &ExperimentConfig::default(), 60_000).is_err());
    }
}
