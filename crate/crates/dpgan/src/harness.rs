//! Single training runs with evaluation and on-disk outputs.
//!
//! A run directory holds:
//!
//! - `config.toml`: the resolved config, plus a `[derived]` table with the
//!   split sizes, the sampling rate and the accountant's order grid
//! - `train_log.csv`: `t,k,epsilon,d_loss,g_loss,fake_acc_ema,n_d_current`
//! - `eval_report.csv`: `t,frechet,covered_modes,hq_fraction,probe_acc,downstream_acc`
//! - `probe.csv`: `k,t,probe_acc`, before each early generator step
//! - `checkpoint.bin`: the final training state
//! - `summary.txt`: the final privacy guarantee
//!
//! Probe accuracies read held-out real data outside the privacy mechanism.
//! They are diagnostics and must not be published with a private model.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dpgan_core::accountant::default_orders;
use dpgan_core::engine::{derive_seed, generate, Checkpoint, LogRow, Observer, Trainer};
use dpgan_core::eval::{
    disc_accuracy_probe, downstream_accuracy, fit_gaussian, frechet_distance, mode_coverage, ClassifierConfig,
    GaussianSummary,
};
use dpgan_core::nn::{Batch, ModelState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{Derived, ExperimentConfig};
use crate::datasets::{self, LoadedData};
use crate::error::{Error, Result};

pub const TRAIN_LOG_HEADER: &str = "t,k,epsilon,d_loss,g_loss,fake_acc_ema,n_d_current";
pub const EVAL_HEADER: &str = "t,frechet,covered_modes,hq_fraction,probe_acc,downstream_acc";
pub const PROBE_HEADER: &str = "k,t,probe_acc";

// rng streams for evaluation, disjoint from the training streams 1..=3
const EVAL_STREAM: u64 = 1 << 40;
const PROBE_STREAM: u64 = 2 << 40;
const EVAL_PROBE_STREAM: u64 = 3 << 40;
const DOWNSTREAM_STREAM: u64 = 4 << 40;

/// One evaluation of the generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub t: u64,
    pub frechet: f64,
    pub covered_modes: Option<usize>,
    pub hq_fraction: Option<f64>,
    pub probe_acc: f64,
    pub downstream_acc: Option<f64>,
}

/// One probe taken right before a generator step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRow {
    pub k: u64,
    pub t: u64,
    pub probe_acc: f64,
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn train_log_line(r: &LogRow) -> String {
    format!("{},{},{},{},{},{},{}", r.t, r.k, r.epsilon, r.d_loss, r.g_loss, r.fake_acc_ema, r.n_d_current)
}

pub fn eval_line(r: &EvalRow) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.t,
        r.frechet,
        opt(r.covered_modes),
        opt(r.hq_fraction),
        r.probe_acc,
        opt(r.downstream_acc)
    )
}

/// Everything needed to score a generator against held-out data.
pub struct Evaluator<'a> {
    pub data: &'a LoadedData,
    pub real: GaussianSummary,
    pub held_out: Batch,
    pub seed: u64,
    pub samples: usize,
    pub probe_size: usize,
    pub classifier: ClassifierConfig,
    pub downstream_samples: usize,
}

impl<'a> Evaluator<'a> {
    pub fn new(cfg: &ExperimentConfig, data: &'a LoadedData) -> Result<Self> {
        Ok(Evaluator {
            data,
            real: fit_gaussian(&data.held_out.features, None)?,
            held_out: data.held_out.all(),
            seed: cfg.seed,
            samples: cfg.eval.samples,
            probe_size: cfg.eval.probe_size,
            classifier: ClassifierConfig { epochs: cfg.eval.downstream_epochs, ..ClassifierConfig::default() },
            downstream_samples: cfg.eval.downstream_samples,
        })
    }

    /// Fréchet distance and mode coverage of fresh samples, the probe, and
    /// optionally downstream accuracy. Randomness is derived from `(seed, t)`.
    pub fn evaluate(&self, g: &ModelState, d: &ModelState, t: u64, downstream: bool) -> Result<EvalRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, EVAL_STREAM + t));
        let x = generate(g, self.samples, &mut rng)?;
        let frechet = frechet_distance(&fit_gaussian(&x.inputs, None)?, &self.real)?;
        let cov = self.data.modes.as_ref().map(|m| mode_coverage(&x.inputs, m));
        let mut prng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, EVAL_PROBE_STREAM + t));
        let probe_acc = disc_accuracy_probe(d, &self.held_out, g, self.probe_size, &mut prng)?;
        let downstream_acc = if downstream { self.downstream(g, t)? } else { None };
        Ok(EvalRow {
            t,
            frechet,
            covered_modes: cov.as_ref().map(|c| c.covered),
            hq_fraction: cov.as_ref().map(|c| c.high_quality_fraction),
            probe_acc,
            downstream_acc,
        })
    }

    /// `None` for unlabelled data.
    pub fn downstream(&self, g: &ModelState, t: u64) -> Result<Option<f64>> {
        let k = self.data.train.num_classes;
        if k < 2 || self.held_out.labels.is_none() {
            return Ok(None);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, DOWNSTREAM_STREAM + t));
        let gen = generate(g, self.downstream_samples, &mut rng)?;
        let seed = derive_seed(self.seed, DOWNSTREAM_STREAM);
        Ok(Some(downstream_accuracy(&gen, &self.held_out, k, seed, &self.classifier)?))
    }

    pub fn probe(&self, state: &Checkpoint) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, PROBE_STREAM + state.k));
        Ok(disc_accuracy_probe(&state.discriminator, &self.held_out, &state.generator, self.probe_size, &mut rng)?)
    }
}

struct CsvOut {
    w: BufWriter<File>,
    path: PathBuf,
}

impl CsvOut {
    fn open(path: PathBuf, header: &str, append: bool) -> Result<Self> {
        let f = if append {
            OpenOptions::new().append(true).open(&path)
        } else {
            File::create(&path)
        }
        .map_err(|e| Error::io(&path, e))?;
        let mut out = CsvOut { w: BufWriter::new(f), path };
        if !append {
            out.line(header)?;
        }
        Ok(out)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.w, "{s}").and_then(|_| self.w.flush()).map_err(|e| Error::io(&self.path, e))
    }
}

struct RunObserver<'e, 'a> {
    eval: &'e Evaluator<'a>,
    total: u64,
    probe_until: u64,
    downstream_every_eval: bool,
    train_log: CsvOut,
    eval_log: CsvOut,
    probe_log: CsvOut,
    evals: Vec<EvalRow>,
    probes: Vec<ProbeRow>,
}

impl RunObserver<'_, '_> {
    fn wrap(e: Error) -> dpgan_core::Error {
        match e {
            Error::Core(c) => c,
            other => dpgan_core::Error::Eval(other.to_string()),
        }
    }
}

impl Observer for RunObserver<'_, '_> {
    fn before_generator_step(&mut self, state: &Checkpoint) -> dpgan_core::Result<()> {
        if state.k < self.probe_until {
            let acc = self.eval.probe(state).map_err(Self::wrap)?;
            let row = ProbeRow { k: state.k, t: state.t, probe_acc: acc };
            self.probe_log.line(&format!("{},{},{}", row.k, row.t, row.probe_acc)).map_err(Self::wrap)?;
            self.probes.push(row);
        }
        Ok(())
    }

    fn on_log(&mut self, row: &LogRow, state: &Checkpoint) -> dpgan_core::Result<()> {
        self.train_log.line(&train_log_line(row)).map_err(Self::wrap)?;
        let downstream = self.downstream_every_eval || row.t == self.total;
        let e = self.eval.evaluate(&state.generator, &state.discriminator, row.t, downstream).map_err(Self::wrap)?;
        self.eval_log.line(&eval_line(&e)).map_err(Self::wrap)?;
        self.evals.push(e);
        Ok(())
    }
}

/// What a run produced, in memory.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub log: Vec<LogRow>,
    pub evals: Vec<EvalRow>,
    pub probes: Vec<ProbeRow>,
    /// Accountant epsilon at the end of the segment; `+inf` when non-private.
    pub epsilon: f64,
    pub state: Checkpoint,
}

/// Where a run starts and stops.
#[derive(Debug, Clone, Default)]
pub struct Segment {
    /// Continue an interrupted run from this state (same config).
    pub resume: Option<Checkpoint>,
    /// Stop once `t` reaches this value; the run can be resumed later.
    pub stop_at: Option<u64>,
    /// Treat `resume` as the start of a new experiment: the config may change
    /// `n_D` and privacy, accounting restarts, and outputs go to a fresh directory.
    pub fresh: bool,
}

/// Resolved config with provenance fields filled in.
pub fn snapshot(cfg: &ExperimentConfig, data: &LoadedData) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.derived = Some(Derived {
        train_size: data.train.len(),
        held_out_size: data.held_out.len(),
        sampling_rate: cfg.train.expected_batch as f64 / data.train.len() as f64,
        rdp_orders: if cfg.train.private { default_orders() } else { Vec::new() },
    });
    c
}

/// Runs the configured experiment into `cfg.output_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_segment(cfg, Segment::default())
}

/// Like [`run`], optionally resuming from a checkpoint and stopping early.
/// Resumed segments append to the existing CSVs.
pub fn run_segment(cfg: &ExperimentConfig, segment: Segment) -> Result<RunOutcome> {
    let data = datasets::load(&cfg.dataset, cfg.seed)?;
    run_on(cfg, &data, segment)
}

/// Runs on data that is already loaded.
pub fn run_on(cfg: &ExperimentConfig, data: &LoadedData, segment: Segment) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let tc = cfg.train_config(data.train.dim(), data.train.num_classes)?;
    let total = tc.total_d_steps;
    let append = segment.resume.is_some() && !segment.fresh;
    let probe_from = if segment.fresh { segment.resume.as_ref().map_or(0, |c| c.k) } else { 0 };
    let mut trainer = match segment.resume {
        Some(ck) => Trainer::resume(ck, tc, &data.train, segment.fresh)?,
        None => Trainer::new(tc, &data.train)?,
    };
    if !append {
        let snap = snapshot(cfg, data);
        checkpoint::write_atomic(&dir.join("config.toml"), snap.to_toml().as_bytes())?;
    }
    let eval = Evaluator::new(cfg, data)?;
    let mut obs = RunObserver {
        eval: &eval,
        total,
        probe_until: probe_from + cfg.eval.probe_g_steps,
        downstream_every_eval: cfg.eval.downstream_every_eval,
        train_log: CsvOut::open(dir.join("train_log.csv"), TRAIN_LOG_HEADER, append)?,
        eval_log: CsvOut::open(dir.join("eval_report.csv"), EVAL_HEADER, append)?,
        probe_log: CsvOut::open(dir.join("probe.csv"), PROBE_HEADER, append)?,
        evals: Vec::new(),
        probes: Vec::new(),
    };
    let log = trainer.run_until(segment.stop_at.unwrap_or(total), &mut obs)?;
    let epsilon = trainer.epsilon()?;
    let state = trainer.into_state();
    checkpoint::save(&state, &dir.join("checkpoint.bin"))?;
    if state.t == total {
        write_summary(&dir, cfg, epsilon, &state)?;
    }
    Ok(RunOutcome { dir, log, evals: obs.evals, probes: obs.probes, epsilon, state })
}

/// `epsilon=<v> delta=<d> d_steps=<T> g_steps=<k>`, with `epsilon=inf` for non-private runs.
pub fn summary_line(cfg: &ExperimentConfig, epsilon: f64, state: &Checkpoint) -> String {
    let delta = if cfg.train.private { cfg.train.delta.to_string() } else { "-".into() };
    format!(
        "epsilon={epsilon} delta={delta} d_steps={} g_steps={} probe=diagnostic-not-dp-releasable",
        state.t, state.k
    )
}

fn write_summary(dir: &Path, cfg: &ExperimentConfig, epsilon: f64, state: &Checkpoint) -> Result<()> {
    let line = summary_line(cfg, epsilon, state) + "\n";
    checkpoint::write_atomic(&dir.join("summary.txt"), line.as_bytes())
}
