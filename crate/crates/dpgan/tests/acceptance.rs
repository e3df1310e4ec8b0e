//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test -p dpgan --test acceptance -- 1 2 13`.

use std::path::Path;
use std::time::{Duration, Instant};

use dpgan::config::{ExperimentConfig, NdSetting};
use dpgan::harness::{self, Segment};
use dpgan_core::accountant::{epsilon_after, max_steps, rdp_subsampled_gaussian, BudgetQuery};
use dpgan_core::dp::{self, PrivacySpec};
use dpgan_core::engine::{adaptive_update, default_ladder, ScheduleState};
use dpgan_core::eval::{frechet_distance, GaussianSummary};
use dpgan_core::nn::{
    backward_mean, backward_per_example, forward, init_network, Activation, Batch, LossKind, ModelState, NetworkSpec,
    OutputActivation, PerExampleGradMatrix, PROB_CLAMP,
};
use dpgan_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    summary: String,
    details: Vec<String>,
}

impl Outcome {
    fn new(pass: bool, summary: impl Into<String>) -> Self {
        Outcome { pass, summary: summary.into(), details: Vec::new() }
    }
}

fn eps(steps: u64, q: f64, sigma: f64) -> f64 {
    epsilon_after(&BudgetQuery { steps, q, sigma, delta: 1e-5 }).unwrap().epsilon
}

fn accountant_anchor() -> Outcome {
    let start = Instant::now();
    let e = eps(450_000, 128.0 / 60_000.0, 1.0);
    let secs = start.elapsed().as_secs_f64();
    Outcome::new((9.0..=11.0).contains(&e) && secs < 1.0, format!("epsilon={e:.4} in [9, 11], {secs:.3}s"))
}

fn low_noise_anchor() -> Outcome {
    let start = Instant::now();
    let t = max_steps(128.0 / 60_000.0, 0.4, 1e-5, 10.0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    Outcome::new((270..=450).contains(&t) && secs < 5.0, format!("T_max={t} in [270, 450], {secs:.3}s"))
}

fn accountant_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = Vec::new();
    for i in 0..200 {
        let q = rng.random_range(1e-4..0.1);
        let s = rng.random_range(0.6..3.0);
        let t = rng.random_range(1..20_000u64);
        let base = eps(t, q, s);
        let tol = 1e-12 * base.max(1.0);
        let up_t = eps(t + rng.random_range(1..20_000u64), q, s) >= base - tol;
        let up_q = eps(t, (q * rng.random_range(1.01..2.0)).min(1.0), s) >= base - tol;
        let down_s = eps(t, q, s * rng.random_range(1.01..2.0)) <= base + tol;
        if !(up_t && up_q && down_s) {
            bad.push(format!("draw {i}: q={q} sigma={s} T={t}"));
        }
    }
    let zero = eps(0, 0.01, 1.0) == 0.0;
    let mut worst: f64 = 0.0;
    for &(s, a) in &[(0.5f64, 2.0f64), (1.0, 3.0), (1.3, 7.5), (2.0, 32.0)] {
        worst = worst.max((rdp_subsampled_gaussian(1.0, s, a).unwrap() - a / (2.0 * s * s)).abs());
    }
    for &(q, s) in &[(0.01f64, 1.0f64), (0.2, 0.8), (0.5, 2.0), (128.0 / 60_000.0, 1.0)] {
        let want = (1.0 + q * q * ((1.0 / (s * s)).exp() - 1.0)).ln();
        worst = worst.max((rdp_subsampled_gaussian(q, s, 2.0).unwrap() - want).abs());
    }
    let mut o = Outcome::new(
        bad.is_empty() && zero && worst <= 1e-10,
        format!("{} monotonicity violations in 200 draws, T=0 gives 0: {zero}, closed-form error {worst:.1e}", bad.len()),
    );
    o.details = bad;
    o
}

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().expect("temporary directory")
}

fn small_run_cfg(dir: &Path, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = seed;
    c.output_dir = dir.to_path_buf();
    c.eval.samples = 2000;
    c.eval.probe_g_steps = 50;
    c.eval.downstream_samples = 2000;
    c.eval.downstream_epochs = 2;
    c
}

fn privacy_cost_invariance() -> Outcome {
    let start = Instant::now();
    let run = |n_d| {
        let d = tmp();
        let mut c = small_run_cfg(d.path(), 0);
        c.train.total_d_steps = 2000;
        c.train.eval_every = 1000;
        c.train.n_d = NdSetting::Fixed(n_d);
        harness::run(&c).unwrap().epsilon
    };
    let (a, b) = (run(1), run(20));
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(a.to_bits() == b.to_bits() && secs < 300.0, format!("n_D=1 epsilon={a}, n_D=20 epsilon={b}, {secs:.1}s"))
}

fn central_diff(params: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / (g.abs().max(w.abs()) + 1e-4))
        .fold(0.0, f64::max)
}

fn disc_loss(spec: &NetworkSpec, params: &[f64], x: &Batch, kind: LossKind) -> f64 {
    let m = ModelState::from_params(spec.clone(), params.to_vec()).unwrap();
    let p = forward(&m, x).unwrap().get(0, 0).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    match kind {
        LossKind::Real => -p.ln(),
        LossKind::Fake => -(1.0 - p).ln(),
    }
}

fn random_net(rng: &mut ChaCha8Rng, data: usize, out: usize, head: OutputActivation, seed: u64) -> ModelState {
    loop {
        let (k, e) = if rng.random_bool(0.5) { (rng.random_range(2..4), rng.random_range(1..3)) } else { (0, 0) };
        let mut sizes = vec![data + e];
        for _ in 0..rng.random_range(1..3) {
            sizes.push(rng.random_range(2..5));
        }
        sizes.push(out);
        let activation = [Activation::LeakyRelu(0.2), Activation::Tanh, Activation::Sigmoid][rng.random_range(0..3)];
        let spec = NetworkSpec { layer_sizes: sizes, activation, num_classes: k, label_embed_dim: e, output_activation: head };
        if spec.param_count() <= 50 {
            return init_network(spec, seed).unwrap();
        }
    }
}

fn random_batch(rng: &mut ChaCha8Rng, d: usize, classes: usize, n: usize) -> Batch {
    let x = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let labels = (classes > 0).then(|| (0..n).map(|_| rng.random_range(0..classes)).collect());
    Batch::new(Matrix::from_vec(n, d, x).unwrap(), labels).unwrap()
}

fn one(b: &Batch, i: usize) -> Batch {
    Batch::new(b.inputs.select_rows(&[i]), b.labels.as_ref().map(|l| vec![l[i]])).unwrap()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for net in 0..20u64 {
        let data = rng.random_range(1..4);
        let d = random_net(&mut rng, data, 1, OutputActivation::Sigmoid, net);
        let spec = d.spec().clone();
        let batch = random_batch(&mut rng, data, spec.num_classes, 3);
        for kind in [LossKind::Real, LossKind::Fake] {
            let pe = backward_per_example(&d, &batch, kind).unwrap();
            for i in 0..batch.len() {
                let x = one(&batch, i);
                let fd = central_diff(d.params(), |p| disc_loss(&spec, p, &x, kind));
                worst = worst.max(max_rel_err(pe.grads.row(i), &fd));
            }
        }

        // generator loss through a fixed discriminator
        let k = rng.random_range(2..4);
        let latent = rng.random_range(1..3);
        let g_spec = NetworkSpec {
            layer_sizes: vec![latent + 1, rng.random_range(2..4), data],
            activation: Activation::Relu,
            num_classes: k,
            label_embed_dim: 1,
            output_activation: OutputActivation::Tanh,
        };
        let d_spec = NetworkSpec {
            layer_sizes: vec![data + 2, 3, 1],
            activation: Activation::LeakyRelu(0.2),
            num_classes: k,
            label_embed_dim: 2,
            output_activation: OutputActivation::Sigmoid,
        };
        let g = init_network(g_spec.clone(), 100 + net).unwrap();
        let dc = init_network(d_spec.clone(), 200 + net).unwrap();
        let z = random_batch(&mut rng, latent, k, 3);
        let got = backward_mean(&g, &dc, &z).unwrap();
        let loss = |p: &[f64]| {
            let gm = ModelState::from_params(g_spec.clone(), p.to_vec()).unwrap();
            let x = Batch::new(forward(&gm, &z).unwrap(), z.labels.clone()).unwrap();
            (0..x.len()).map(|i| disc_loss(&d_spec, dc.params(), &one(&x, i), LossKind::Real)).sum::<f64>() / 3.0
        };
        worst = worst.max(max_rel_err(&got.grad, &central_diff(g.params(), loss)));
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(worst <= 1e-4 && secs < 60.0, format!("max relative error {worst:.2e} over 20 networks, {secs:.2}s"))
}

fn dp_mechanics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (mut over, mut not_idem) = (0, 0);
    for _ in 0..10_000 {
        let (n, p) = (rng.random_range(1..6), rng.random_range(1..8));
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let v = (0..n * p).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let g = PerExampleGradMatrix::from_grads(Matrix::from_vec(n, p, v).unwrap());
        let clip = 10f64.powf(rng.random_range(-2.0..2.0));
        let c = dp::clip_per_example(&g, clip).unwrap();
        over += c.grads.iter_rows().filter(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt() > clip).count();
        let twice = dp::clip_per_example(&c, clip).unwrap();
        if twice.grads.as_slice().iter().zip(c.grads.as_slice()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            not_idem += 1;
        }
    }
    let (clip, sigma, b, p) = (1.5, 0.8, 64usize, 10_000usize);
    let spec = PrivacySpec::private(clip, sigma, b, 1e-5, 10_000).unwrap();
    let empty = PerExampleGradMatrix::from_grads(Matrix::zeros(0, p));
    let out = dp::aggregate_and_noise(&empty, &spec, &mut rng).unwrap();
    let z: Vec<f64> = out.iter().map(|v| v * 2.0 * b as f64).collect();
    let mean = z.iter().sum::<f64>() / p as f64;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (p - 1) as f64;
    let target = clip * clip * sigma * sigma;
    let se = target * (2.0 / (p - 1) as f64).sqrt();
    let within = (var - target).abs() < 3.0 * se;
    Outcome::new(
        over == 0 && not_idem == 0 && within,
        format!(
            "{over} rows above C, {not_idem} non-idempotent clips in 10^4 matrices; noise variance {var:.4} vs {target:.4} ({:.2} SE)",
            (var - target) / se
        ),
    )
}

fn schedule_changes(trace: &[f64]) -> Vec<usize> {
    let mut s = ScheduleState::new(0.99, 0.6, default_ladder()).unwrap();
    let mut prev = s.current();
    let mut out = Vec::new();
    for (i, &a) in trace.iter().enumerate() {
        let (next, n) = adaptive_update(&s, a).unwrap();
        s = next;
        if n != prev {
            out.push(i + 1);
            prev = n;
        }
    }
    out
}

/// Independent replay of the EMA recurrence with a grace period of 200.
fn replay(trace: &[f64]) -> Vec<usize> {
    let (beta, floor, grace) = (0.99, 0.6, 200u64);
    let (mut ema, mut since, mut out) = (None::<f64>, 0u64, Vec::new());
    for (i, &a) in trace.iter().enumerate() {
        let e = ema.map_or(a, |p| beta * p + (1.0 - beta) * a);
        ema = Some(e);
        since += 1;
        if e < floor && since >= grace {
            out.push(i + 1);
            since = 0;
        }
    }
    out
}

fn scheduler_oracle() -> Outcome {
    let high = schedule_changes(&[0.9; 10_000]);
    let half = schedule_changes(&[0.5; 1000]);
    let mut step = vec![0.8; 300];
    step.extend(std::iter::repeat_n(0.55, 1000));
    let stepped = schedule_changes(&step);
    let expect = replay(&step);
    let pass = high.is_empty() && half == [200, 400, 600, 800, 1000] && stepped == expect && stepped.first() == Some(&461);
    Outcome::new(
        pass,
        format!("0.9: {high:?}; 0.5: {half:?}; step trace first advance {:?} (replay {:?})", stepped.first(), expect.first()),
    )
}

struct RingRun {
    covered: usize,
    frechet: f64,
    early_probe: f64,
    secs: f64,
}

fn ring_run(seed: u64, n_d: NdSetting, private: bool, d_steps: u64) -> RingRun {
    let dir = tmp();
    let mut c = ExperimentConfig::default();
    c.seed = seed;
    c.output_dir = dir.path().to_path_buf();
    c.dataset.labelled = false;
    c.train.n_d = n_d;
    c.train.private = private;
    c.train.total_d_steps = d_steps;
    c.train.eval_every = d_steps;
    let start = Instant::now();
    let r = harness::run(&c).unwrap();
    let last = r.evals.last().expect("final evaluation");
    RingRun {
        covered: last.covered_modes.expect("ring data has modes"),
        frechet: last.frechet,
        early_probe: r.probes.iter().map(|p| p.probe_acc).sum::<f64>() / r.probes.len().max(1) as f64,
        secs: start.elapsed().as_secs_f64(),
    }
}

struct RingRuns {
    nd1: Vec<RingRun>,
    nd10: Vec<RingRun>,
    elapsed: Duration,
}

fn ring_runs() -> RingRuns {
    let start = Instant::now();
    let nd1 = SEEDS.iter().map(|&s| ring_run(s, NdSetting::Fixed(1), true, 30_000)).collect();
    let nd10 = SEEDS.iter().map(|&s| ring_run(s, NdSetting::Fixed(10), true, 30_000)).collect();
    RingRuns { nd1, nd10, elapsed: start.elapsed() }
}

fn more_steps_help(runs: &RingRuns) -> Outcome {
    let mut wins = 0;
    let mut details = Vec::new();
    for (i, (a, b)) in runs.nd1.iter().zip(&runs.nd10).enumerate() {
        let win = b.covered > a.covered && b.frechet < a.frechet;
        wins += win as usize;
        details.push(format!(
            "seed {}: n_D=1 modes={} frechet={:.4} ({:.0}s); n_D=10 modes={} frechet={:.4} ({:.0}s)",
            SEEDS[i], a.covered, a.frechet, a.secs, b.covered, b.frechet, b.secs
        ));
    }
    let mins = runs.elapsed.as_secs_f64() / 60.0;
    let mut o = Outcome::new(wins >= 4 && mins < 30.0, format!("n_D=10 wins in {wins}/5 seeds, {mins:.1} min"));
    o.details = details;
    o
}

fn probe_direction(runs: &RingRuns) -> Outcome {
    let higher = runs.nd1.iter().zip(&runs.nd10).filter(|(a, b)| b.early_probe > a.early_probe).count();
    let mean1 = runs.nd1.iter().map(|r| r.early_probe).sum::<f64>() / runs.nd1.len() as f64;
    let mut o = Outcome::new(
        higher >= 4 && mean1 < 0.55,
        format!("n_D=10 probe higher in {higher}/5 seeds, n_D=1 mean probe {mean1:.3} (< 0.55)"),
    );
    o.details = SEEDS
        .iter()
        .zip(runs.nd1.iter().zip(&runs.nd10))
        .map(|(s, (a, b))| format!("seed {s}: n_D=1 {:.3}, n_D=10 {:.3}", a.early_probe, b.early_probe))
        .collect();
    o
}

fn non_private_control() -> Outcome {
    let mut ok = 0;
    let mut details = Vec::new();
    for &s in &SEEDS {
        let a = ring_run(s, NdSetting::Fixed(1), false, 3_000);
        let b = ring_run(s, NdSetting::Fixed(10), false, 30_000);
        let pass = b.frechet >= 0.9 * a.frechet;
        ok += pass as usize;
        details.push(format!("seed {s}: n_D=1 frechet={:.4}, n_D=10 frechet={:.4}, no improvement: {pass}", a.frechet, b.frechet));
    }
    let mut o = Outcome::new(ok >= 4, format!("no improvement from n_D=10 in {ok}/5 seeds"));
    o.details = details;
    o
}

fn adaptive_vs_fixed(runs: &RingRuns) -> Outcome {
    let mut ok = 0;
    let mut details = Vec::new();
    for (i, &s) in SEEDS.iter().enumerate() {
        let best = runs.nd1[i].covered.max(runs.nd10[i].covered);
        let a = ring_run(s, NdSetting::ADAPTIVE, true, 30_000);
        ok += (a.covered >= best) as usize;
        details.push(format!("seed {s}: adaptive modes={}, best fixed modes={best}", a.covered));
    }
    let mut o = Outcome::new(ok >= 3, format!("adaptive matches or beats the best fixed n_D in {ok}/5 seeds"));
    o.details = details;
    o
}

fn gaussian(mean: Vec<f64>, cov: Vec<f64>) -> GaussianSummary {
    let d = mean.len();
    GaussianSummary { mean, cov: Matrix::from_vec(d, d, cov).unwrap(), n_samples: 100 }
}

fn frechet_suite() -> Outcome {
    let a = gaussian(vec![0.3, -1.0], vec![2.0, 0.5, 0.5, 1.0]);
    let identity = frechet_distance(&a, &a).unwrap().abs();
    // (1 - 4)^2 + 4 + 1 - 2*2 = 10
    let one_d = (frechet_distance(&gaussian(vec![1.0], vec![4.0]), &gaussian(vec![4.0], vec![1.0])).unwrap() - 10.0).abs();
    // 2 + (1 + 9) + (4 + 1) - 2 * (2 + 3) = 7
    let diag = (frechet_distance(&gaussian(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 9.0]), &gaussian(vec![1.0, 1.0], vec![4.0, 0.0, 0.0, 1.0]))
        .unwrap()
        - 7.0)
        .abs();
    let b = gaussian(vec![1.0, 2.0], vec![1.0, -0.3, -0.3, 0.7]);
    let sym = (frechet_distance(&a, &b).unwrap() - frechet_distance(&b, &a).unwrap()).abs();
    Outcome::new(
        identity <= 1e-9 && one_d <= 1e-9 && diag <= 1e-9 && sym <= 1e-9,
        format!("identity {identity:.1e}, 1D {one_d:.1e}, diagonal {diag:.1e}, symmetry {sym:.1e}"),
    )
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

fn checkpoint_transparency() -> Outcome {
    let (a, b) = (tmp(), tmp());
    let ca = small_run_cfg(a.path(), 5);
    let cb = small_run_cfg(b.path(), 5);
    let total = 400;
    let set = |mut c: ExperimentConfig| {
        c.train.total_d_steps = total;
        c.train.eval_every = 50;
        c.train.n_d = NdSetting::Fixed(3);
        c
    };
    let (ca, cb) = (set(ca), set(cb));
    harness::run(&ca).unwrap();
    harness::run_segment(&cb, Segment { stop_at: Some(total / 2), ..Segment::default() }).unwrap();
    let ck = dpgan::checkpoint::load(&b.path().join("checkpoint.bin")).unwrap();
    harness::run_segment(&cb, Segment { resume: Some(ck), ..Segment::default() }).unwrap();
    let same: Vec<bool> = ["train_log.csv", "eval_report.csv", "probe.csv"]
        .iter()
        .map(|f| read(&a.path().join(f)) == read(&b.path().join(f)))
        .collect();
    Outcome::new(same.iter().all(|&s| s), format!("train log, eval report, probe log identical: {same:?}"))
}

fn determinism() -> Outcome {
    let (a, b) = (tmp(), tmp());
    let cfg = |dir: &Path| {
        let mut c = small_run_cfg(dir, 9);
        c.train.total_d_steps = 300;
        c.train.eval_every = 100;
        c.train.n_d = NdSetting::ADAPTIVE;
        c
    };
    harness::run(&cfg(a.path())).unwrap();
    harness::run(&cfg(b.path())).unwrap();
    let same: Vec<bool> =
        ["train_log.csv", "eval_report.csv"].iter().map(|f| read(&a.path().join(f)) == read(&b.path().join(f))).collect();
    Outcome::new(same.iter().all(|&s| s), format!("train log, eval report identical: {same:?}"))
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut ring: Option<RingRuns> = None;
    let mut failed = 0;
    let mut report = |n: u32, name: &str, o: Outcome| {
        println!("{} [{n:02}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.summary);
        for d in &o.details {
            println!("       {d}");
        }
        failed += !o.pass as usize;
    };
    let t: [(u32, &str, fn() -> Outcome); 7] = [
        (1, "accountant anchor", accountant_anchor),
        (2, "low-noise anchor", low_noise_anchor),
        (3, "accountant properties", accountant_properties),
        (4, "privacy cost independent of n_D", privacy_cost_invariance),
        (5, "gradient correctness", gradient_correctness),
        (6, "DP mechanics", dp_mechanics),
        (7, "adaptive scheduler oracle", scheduler_oracle),
    ];
    for (n, name, f) in t {
        if on(n) {
            report(n, name, f());
        }
    }
    if on(8) || on(9) || on(11) {
        ring = Some(ring_runs());
    }
    if let Some(r) = &ring {
        if on(8) {
            report(8, "more discriminator steps help under DP", more_steps_help(r));
        }
        if on(9) {
            report(9, "discriminator probe accuracy", probe_direction(r));
        }
    }
    if on(10) {
        report(10, "non-private control", non_private_control());
    }
    if let (true, Some(r)) = (on(11), &ring) {
        report(11, "adaptive vs fixed n_D", adaptive_vs_fixed(r));
    }
    let t: [(u32, &str, fn() -> Outcome); 3] = [
        (12, "Frechet distance unit suite", frechet_suite),
        (13, "checkpoint transparency", checkpoint_transparency),
        (14, "determinism", determinism),
    ];
    for (n, name, f) in t {
        if on(n) {
            report(n, name, f());
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
