use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use dpgan::config::ExperimentConfig;
use dpgan::datasets::{self, LoadedData};
use dpgan::harness::{self, Evaluator, EVAL_HEADER};
use dpgan::restart::{self, VariantFile};
use dpgan::sweep::{self, SweepSpec};
use dpgan::{checkpoint, Result};
use dpgan_core::accountant::{epsilon_after, max_steps, BudgetQuery};

#[derive(Parser)]
#[command(name = "dpgan", version, about = "Differentially private GAN training and evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model per configured seed.
    Run { config: PathBuf },
    /// Run a grid over n_d, sigma or batch size.
    Sweep { spec: PathBuf, config: PathBuf },
    /// Resume checkpoints of a non-private base model under several variants.
    Restart {
        config: PathBuf,
        /// Generator steps at which the base model is checkpointed.
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoints: Vec<u64>,
        #[arg(long)]
        variants: PathBuf,
    },
    /// Privacy accounting: epsilon after T steps, or the largest T for a target epsilon.
    #[command(group(ArgGroup::new("target").required(true).args(["steps", "epsilon"])))]
    Budget {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long = "T")]
        steps: Option<u64>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Score a checkpoint. DATASET is a run config (uses its held-out split
    /// and mode centers) or a CSV of held-out records.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5000)]
        samples: usize,
    },
}

fn run_all(cfg: &ExperimentConfig) -> Result<()> {
    let seeds = cfg.seeds();
    for &seed in &seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        if seeds.len() > 1 {
            c.output_dir = cfg.output_dir.join(format!("seed{seed}"));
        }
        let r = harness::run(&c)?;
        println!("{}: {}", r.dir.display(), harness::summary_line(&c, r.epsilon, &r.state));
    }
    Ok(())
}

fn eval_data(path: &Path, seed: u64) -> Result<(ExperimentConfig, LoadedData)> {
    if path.extension().is_some_and(|e| e == "toml") {
        let mut cfg = ExperimentConfig::load(path)?;
        cfg.seed = seed;
        let data = datasets::load(&cfg.dataset, seed)?;
        Ok((cfg, data))
    } else {
        let d = datasets::ingest_csv(path, false)?;
        let data = LoadedData { train: d.clone(), held_out: d, modes: None };
        Ok((ExperimentConfig { seed, ..ExperimentConfig::default() }, data))
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run { config } => run_all(&ExperimentConfig::load(&config)?),
        Cmd::Sweep { spec, config } => {
            let path = sweep::sweep(&SweepSpec::load(&spec)?, &ExperimentConfig::load(&config)?)?;
            println!("{}", path.display());
            Ok(())
        }
        Cmd::Restart { config, checkpoints, variants } => {
            let out =
                restart::restart_experiment(&ExperimentConfig::load(&config)?, &checkpoints, &VariantFile::load(&variants)?)?;
            println!("{}", out.csv.display());
            Ok(())
        }
        Cmd::Budget { q, sigma, delta, steps, epsilon } => {
            match (steps, epsilon) {
                (Some(steps), _) => {
                    let r = epsilon_after(&BudgetQuery { steps, q, sigma, delta })?;
                    let order = r.order.map_or("-".to_string(), |a| a.to_string());
                    println!("epsilon={} order={order}", r.epsilon);
                }
                (None, Some(eps)) => println!("T_max={}", max_steps(q, sigma, delta, eps)?),
                (None, None) => unreachable!("clap requires one of --T and --epsilon"),
            }
            Ok(())
        }
        Cmd::Eval { checkpoint: ck, dataset, seed, samples } => {
            let state = checkpoint::load(&ck)?;
            let (mut cfg, data) = eval_data(&dataset, seed)?;
            cfg.eval.samples = samples;
            let ev = Evaluator::new(&cfg, &data)?;
            let row = ev.evaluate(&state.generator, &state.discriminator, state.t, true)?;
            println!("{EVAL_HEADER}\n{}", harness::eval_line(&row));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
