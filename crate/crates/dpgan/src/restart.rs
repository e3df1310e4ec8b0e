//! Restart experiments: train a non-private base model, checkpoint it at
//! several generator steps, then resume each checkpoint under different
//! `n_D` and privacy settings.
//!
//! Variants are read from TOML:
//!
//! ```toml
//! resume_g_steps = 1000   # generator steps per resumed segment
//! log_every_g = 50        # evaluation cadence inside a segment
//!
//! [[variant]]
//! name = "private-nd1"
//! n_d = 1
//! private = true
//!
//! [[variant]]
//! name = "private-nd50"
//! n_d = 50
//! private = true
//! noise_multiplier = 1.0  # optional, defaults to the base config
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use dpgan_core::engine::{Checkpoint, Trainer};
use serde::Deserialize;

use crate::checkpoint;
use crate::config::{ExperimentConfig, NdSetting};
use crate::datasets::{self, LoadedData};
use crate::error::{Error, Result};
use crate::harness::Evaluator;

pub const RESTART_HEADER: &str = "checkpoint,variant,seed,g_step,t,epsilon,probe_acc,frechet,downstream_acc";
pub const RESTART_SUMMARY_HEADER: &str = "checkpoint,variant,seed,mean_probe_acc,final_frechet,final_epsilon";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub n_d: u32,
    pub private: bool,
    #[serde(default)]
    pub noise_multiplier: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantFile {
    #[serde(default = "default_resume")]
    pub resume_g_steps: u64,
    #[serde(default = "default_log_every")]
    pub log_every_g: u64,
    #[serde(rename = "variant")]
    pub variants: Vec<Variant>,
}

fn default_resume() -> u64 {
    1000
}

fn default_log_every() -> u64 {
    50
}

impl VariantFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        let v: VariantFile = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        if v.variants.is_empty() {
            return Err(Error::config("no [[variant]] entries"));
        }
        if v.resume_g_steps == 0 || v.log_every_g == 0 {
            return Err(Error::config("resume_g_steps and log_every_g must be positive"));
        }
        for x in &v.variants {
            if x.n_d == 0 {
                return Err(Error::config(format!("variant {}: n_d must be positive", x.name)));
            }
            if x.name.is_empty() || x.name.contains([',', '/', '\n']) {
                return Err(Error::config(format!("variant name {:?} is not usable in a path or CSV", x.name)));
            }
        }
        Ok(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// One row of the tidy output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestartRow {
    pub checkpoint: u64,
    pub seed: u64,
    /// Generator steps since the restart.
    pub g_step: u64,
    pub t: u64,
    pub epsilon: f64,
    pub probe_acc: f64,
    pub frechet: f64,
    pub downstream_acc: Option<f64>,
}

/// Mean probe accuracy over every generator step of a resumed segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSummary {
    pub checkpoint: u64,
    pub variant: String,
    pub seed: u64,
    pub mean_probe_acc: f64,
    pub final_frechet: f64,
    pub final_epsilon: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RestartOutcome {
    pub rows: Vec<(String, RestartRow)>,
    pub summaries: Vec<SegmentSummary>,
    pub csv: PathBuf,
    pub summary_csv: PathBuf,
}

fn base_n_d(cfg: &ExperimentConfig) -> Result<u64> {
    if cfg.train.private {
        return Err(Error::config("the restart base config must be non-private"));
    }
    match cfg.train.n_d {
        NdSetting::Fixed(n) => Ok(n as u64),
        NdSetting::Marker(_) => Err(Error::config("the restart base config needs a fixed n_d")),
    }
}

/// Trains the base model and returns the state at each listed generator step.
pub fn base_checkpoints(cfg: &ExperimentConfig, data: &LoadedData, steps: &[u64]) -> Result<Vec<Checkpoint>> {
    let n_d = base_n_d(cfg)?;
    let mut steps = steps.to_vec();
    steps.sort_unstable();
    steps.dedup();
    let last = *steps.last().ok_or_else(|| Error::config("no checkpoint steps"))?;
    if steps[0] == 0 {
        return Err(Error::config("checkpoint steps must be positive"));
    }
    let mut c = cfg.clone();
    c.train.total_d_steps = last * n_d;
    let tc = c.train_config(data.train.dim(), data.train.num_classes)?;
    let mut trainer = Trainer::new(tc, &data.train)?;
    let mut out = Vec::with_capacity(steps.len());
    for &k in &steps {
        while trainer.state().k < k {
            trainer.discriminator_step()?;
            if trainer.state().d_steps_since_g >= n_d {
                trainer.generator_step()?;
            }
        }
        out.push(trainer.state().clone());
    }
    Ok(out)
}

fn variant_config(base: &ExperimentConfig, v: &Variant, start_t: u64, resume_g: u64) -> ExperimentConfig {
    let mut c = base.clone();
    c.train.n_d = NdSetting::Fixed(v.n_d);
    c.train.private = v.private;
    if let Some(s) = v.noise_multiplier {
        c.train.noise_multiplier = s;
    }
    c.train.total_d_steps = start_t + resume_g * v.n_d as u64;
    c
}

/// Resumes `ck` under variant `v` for `resume_g` generator steps, evaluating
/// at the restart and after every `log_every` generator steps.
#[allow(clippy::too_many_arguments)]
pub fn resume_segment(
    base: &ExperimentConfig,
    data: &LoadedData,
    eval: &Evaluator,
    ck: Checkpoint,
    v: &Variant,
    resume_g: u64,
    log_every: u64,
) -> Result<(Vec<RestartRow>, SegmentSummary)> {
    let (k0, t0) = (ck.k, ck.t);
    let c = variant_config(base, v, t0, resume_g);
    let tc = c.train_config(data.train.dim(), data.train.num_classes)?;
    let mut trainer = Trainer::resume(ck, tc, &data.train, true)?;
    let row = |tr: &Trainer, j: u64| -> Result<RestartRow> {
        let s = tr.state();
        let e = eval.evaluate(&s.generator, &s.discriminator, s.t, base.eval.downstream_every_eval)?;
        Ok(RestartRow {
            checkpoint: k0,
            seed: base.seed,
            g_step: j,
            t: s.t,
            epsilon: tr.epsilon()?,
            probe_acc: e.probe_acc,
            frechet: e.frechet,
            downstream_acc: e.downstream_acc,
        })
    };
    let mut rows = vec![row(&trainer, 0)?];
    let mut probe_sum = 0.0;
    let mut j = 0;
    while j < resume_g {
        trainer.discriminator_step()?;
        if trainer.state().d_steps_since_g >= v.n_d as u64 {
            probe_sum += eval.probe(trainer.state())?;
            trainer.generator_step()?;
            j += 1;
            if j % log_every == 0 || j == resume_g {
                rows.push(row(&trainer, j)?);
            }
        }
    }
    let last = rows.last().copied().expect("at least the restart row");
    let summary = SegmentSummary {
        checkpoint: k0,
        variant: v.name.clone(),
        seed: base.seed,
        mean_probe_acc: probe_sum / resume_g as f64,
        final_frechet: last.frechet,
        final_epsilon: last.epsilon,
    };
    Ok((rows, summary))
}

/// Runs the full experiment for every seed, writing `restart.csv` and
/// `restart_summary.csv` plus one checkpoint file per base step.
pub fn restart_experiment(base: &ExperimentConfig, steps: &[u64], variants: &VariantFile) -> Result<RestartOutcome> {
    base.validate()?;
    base_n_d(base)?;
    let root = base.output_dir.clone();
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut out = RestartOutcome {
        csv: root.join("restart.csv"),
        summary_csv: root.join("restart_summary.csv"),
        ..RestartOutcome::default()
    };
    for seed in base.seeds() {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let data = datasets::load(&cfg.dataset, seed)?;
        let eval = Evaluator::new(&cfg, &data)?;
        for ck in base_checkpoints(&cfg, &data, steps)? {
            checkpoint::save(&ck, &root.join(format!("base-seed{seed}-k{}.bin", ck.k)))?;
            for v in &variants.variants {
                log::info!("seed {seed}: resuming k={} as {}", ck.k, v.name);
                let (rows, summary) =
                    resume_segment(&cfg, &data, &eval, ck.clone(), v, variants.resume_g_steps, variants.log_every_g)?;
                out.rows.extend(rows.into_iter().map(|r| (v.name.clone(), r)));
                out.summaries.push(summary);
            }
        }
    }
    write_csvs(&out)?;
    Ok(out)
}

fn write_csvs(out: &RestartOutcome) -> Result<()> {
    let mut s = String::from(RESTART_HEADER);
    s.push('\n');
    for (name, r) in &out.rows {
        let ds = r.downstream_acc.map_or(String::new(), |a| a.to_string());
        s += &format!(
            "{},{name},{},{},{},{},{},{},{ds}\n",
            r.checkpoint, r.seed, r.g_step, r.t, r.epsilon, r.probe_acc, r.frechet
        );
    }
    checkpoint::write_atomic(&out.csv, s.as_bytes())?;
    let mut f = Vec::new();
    writeln!(f, "{RESTART_SUMMARY_HEADER}").expect("write to Vec");
    for m in &out.summaries {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            m.checkpoint, m.variant, m.seed, m.mean_probe_acc, m.final_frechet, m.final_epsilon
        )
        .expect("write to Vec");
    }
    checkpoint::write_atomic(&out.summary_csv, &f)
}
