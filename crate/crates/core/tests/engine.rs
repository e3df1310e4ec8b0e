use dpgan_core::data::Dataset;
use dpgan_core::dp::{self, AdamParams};
use dpgan_core::engine::{
    adaptive_update, derive_seed, fake_accuracy, grace_period, sample_noise, AdaptiveConfig, Architecture, PrivacyMode,
    ScheduleState, StepFrequency, TrainConfig, Trainer,
};
use dpgan_core::nn::{self, Batch, LossKind, ModelState};
use dpgan_core::{Error, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_ring(n: usize, k: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        let a = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
        x.push(0.7 * a.cos() + 0.03 * (rng.random::<f64>() - 0.5));
        x.push(0.7 * a.sin() + 0.03 * (rng.random::<f64>() - 0.5));
        y.push(c);
    }
    Dataset::new(Matrix::from_vec(n, 2, x).unwrap(), Some(y), k).unwrap()
}

fn small_config(n_d: u32, total: u64, private: bool, conditional_classes: usize) -> TrainConfig {
    let mut cfg = TrainConfig::desk_default(2, conditional_classes);
    let arch = Architecture::uniform(8, 1, 2);
    let (g, d) = arch.networks(2, conditional_classes, cfg.latent_dim);
    cfg.generator = g;
    cfg.discriminator = d;
    cfg.step_frequency = StepFrequency::Fixed(n_d);
    cfg.total_d_steps = total;
    cfg.expected_batch = 16;
    cfg.eval_every = 5;
    cfg.seed = 7;
    if !private {
        cfg.privacy = PrivacyMode::NonPrivate;
    }
    cfg
}

#[test]
fn generator_cadence_follows_divisibility() {
    let data = small_ring(200, 4, 1);
    let mut tr = Trainer::new(small_config(3, 10, true, 4), &data).unwrap();
    struct Seen(Vec<u64>);
    impl dpgan_core::engine::Observer for Seen {
        fn before_generator_step(&mut self, s: &dpgan_core::engine::Checkpoint) -> dpgan_core::Result<()> {
            self.0.push(s.t);
            Ok(())
        }
    }
    let mut seen = Seen(Vec::new());
    let log = tr.run(&mut seen).unwrap();
    assert_eq!(seen.0, vec![3, 6, 9]);
    assert_eq!(tr.state().k, 3);
    assert_eq!(tr.state().t, 10);
    assert_eq!(log.iter().map(|r| (r.t, r.k)).collect::<Vec<_>>(), vec![(5, 1), (10, 3)]);
    for r in &log {
        assert_eq!(r.k, r.t / 3);
    }
}

#[test]
fn identical_seeds_give_identical_logs() {
    let data = small_ring(300, 4, 2);
    let run = || {
        let mut tr = Trainer::new(small_config(2, 40, true, 4), &data).unwrap();
        let log = tr.run(&mut ()).unwrap();
        (log, tr.into_state())
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(format!("{x:?}"), format!("{y:?}"));
    }
    assert_eq!(sa.discriminator, sb.discriminator);
    assert_eq!(sa.generator, sb.generator);
}

fn plain_adam(w: &mut [f64], m: &mut [f64], v: &mut [f64], t: i32, g: &[f64], p: AdamParams) {
    for i in 0..w.len() {
        m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g[i];
        v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g[i] * g[i];
        let mh = m[i] / (1.0 - p.beta1.powi(t));
        let vh = v[i] / (1.0 - p.beta2.powi(t));
        w[i] -= p.alpha * mh / (vh.sqrt() + p.eps_hat);
    }
}

#[test]
fn non_private_step_matches_plain_training() {
    // q = 1 so the real batch is the full dataset of B rows.
    let data = small_ring(16, 4, 3);
    let cfg = small_config(1, 10, false, 4);
    let mut tr = Trainer::new(cfg.clone(), &data).unwrap();
    let d0: ModelState = tr.state().discriminator.clone();
    let g0: ModelState = tr.state().generator.clone();
    tr.discriminator_step().unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    let idx = dp::poisson_sample(16, 1.0, &mut rng);
    assert_eq!(idx.len(), 16);
    let noise = sample_noise(&cfg.generator, 16, &mut rng);
    let fake = Batch { inputs: nn::forward(&g0, &noise).unwrap(), labels: noise.labels };
    let real = data.batch(&idx);
    let gr = nn::backward_sum(&d0, &real, LossKind::Real).unwrap();
    let gf = nn::backward_sum(&d0, &fake, LossKind::Fake).unwrap();
    let grad: Vec<f64> = gr.iter().zip(&gf).map(|(a, b)| (a + b) / 32.0).collect();
    let mut w = d0.params().to_vec();
    let (mut m, mut v) = (vec![0.0; w.len()], vec![0.0; w.len()]);
    plain_adam(&mut w, &mut m, &mut v, 1, &grad, cfg.d_adam);
    for (a, b) in tr.state().discriminator.params().iter().zip(&w) {
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }
}

#[test]
fn empty_real_batch_still_steps() {
    let data = small_ring(200_000, 4, 4);
    let mut cfg = small_config(1, 5, true, 4);
    cfg.expected_batch = 1;
    let mut tr = Trainer::new(cfg, &data).unwrap();
    let mut saw_empty = false;
    for _ in 0..5 {
        let before = tr.state().discriminator.params().to_vec();
        let r = tr.discriminator_step().unwrap();
        saw_empty |= r.realized_batch == 0;
        assert_ne!(before, tr.state().discriminator.params());
    }
    assert!(saw_empty);
    assert_eq!(tr.state().accountant_steps, 5);
}

#[test]
fn generator_steps_cost_nothing() {
    let data = small_ring(400, 4, 5);
    let mut tr = Trainer::new(small_config(1, 100, true, 4), &data).unwrap();
    for _ in 0..10 {
        tr.discriminator_step().unwrap();
    }
    let eps = tr.epsilon().unwrap();
    for _ in 0..100 {
        let r = tr.generator_step().unwrap();
        assert!((0.0..=1.0).contains(&r.fake_accuracy));
    }
    assert_eq!(tr.epsilon().unwrap().to_bits(), eps.to_bits());
    assert_eq!(tr.state().accountant_steps, 10);
}

#[test]
fn half_discriminator_reports_zero_fake_accuracy() {
    assert_eq!(fake_accuracy(&[0.5; 8]), 0.0);
    assert_eq!(fake_accuracy(&[0.4999, 0.5, 0.7, 0.1]), 0.5);

    let data = small_ring(100, 4, 6);
    let cfg = small_config(1, 10, true, 4);
    let tr = Trainer::new(cfg, &data).unwrap();
    let mut st = tr.into_state();
    st.discriminator.params_mut().iter_mut().for_each(|w| *w = 0.0);
    let mut tr = Trainer::resume(st, small_config(1, 10, true, 4), &data, false).unwrap();
    assert_eq!(tr.generator_step().unwrap().fake_accuracy, 0.0);
}

#[test]
fn epsilon_does_not_depend_on_step_frequency() {
    let data = small_ring(500, 4, 7);
    let eps = |n_d| {
        let mut tr = Trainer::new(small_config(n_d, 60, true, 4), &data).unwrap();
        tr.run(&mut ()).unwrap().last().unwrap().epsilon
    };
    assert_eq!(eps(1).to_bits(), eps(50).to_bits());
}

#[test]
fn non_private_runs_report_infinite_epsilon() {
    let data = small_ring(200, 4, 8);
    let mut tr = Trainer::new(small_config(1, 10, false, 4), &data).unwrap();
    let log = tr.run(&mut ()).unwrap();
    assert!(log.iter().all(|r| r.epsilon == f64::INFINITY));
    assert_eq!(tr.state().accountant_steps, 0);
}

#[test]
fn resume_is_transparent() {
    let data = small_ring(300, 4, 9);
    let cfg = small_config(3, 100, true, 4);
    let mut full = Trainer::new(cfg.clone(), &data).unwrap();
    let full_log = full.run(&mut ()).unwrap();

    let mut first = Trainer::new(cfg.clone(), &data).unwrap();
    let mut log = first.run_until(50, &mut ()).unwrap();
    let ck = first.into_state();
    let mut second = Trainer::resume(ck, cfg, &data, false).unwrap();
    log.extend(second.run(&mut ()).unwrap());
    assert_eq!(format!("{full_log:?}"), format!("{log:?}"));
    assert_eq!(full.state().generator, second.state().generator);
}

#[test]
fn fresh_segment_restarts_accounting() {
    let data = small_ring(300, 4, 10);
    let mut base = Trainer::new(small_config(1, 40, false, 4), &data).unwrap();
    base.run_until(20, &mut ()).unwrap();
    let ck = base.into_state();
    let mut tr = Trainer::resume(ck, small_config(5, 40, true, 4), &data, true).unwrap();
    assert_eq!(tr.epsilon().unwrap(), 0.0);
    tr.discriminator_step().unwrap();
    assert_eq!(tr.state().accountant_steps, 1);
    assert!(tr.epsilon().unwrap() > 0.0);
    assert_eq!(tr.state().t, 21);
}

#[test]
fn resume_rejects_mismatched_architecture() {
    let data = small_ring(100, 4, 11);
    let ck = Trainer::new(small_config(1, 10, true, 4), &data).unwrap().into_state();
    let mut other = small_config(1, 10, true, 4);
    let (g, d) = Architecture::uniform(9, 1, 2).networks(2, 4, other.latent_dim);
    other.generator = g;
    other.discriminator = d;
    assert!(matches!(Trainer::resume(ck, other, &data, false), Err(Error::Config(_))));
}

#[test]
fn adaptive_run_matches_schedule_replay() {
    let data = small_ring(400, 4, 12);
    let mut cfg = small_config(1, 300, true, 4);
    cfg.step_frequency = StepFrequency::Adaptive(AdaptiveConfig { beta: 0.9, floor: 0.6, ladder: vec![1, 2, 5, 10] });
    let mut tr = Trainer::new(cfg, &data).unwrap();
    let mut accs = Vec::new();
    let mut rungs = Vec::new();
    while tr.state().t < 300 {
        tr.discriminator_step().unwrap();
        if tr.state().d_steps_since_g >= tr.current_n_d() as u64 {
            let r = tr.generator_step().unwrap();
            accs.push(r.fake_accuracy);
            rungs.push(r.n_d);
        }
    }
    let mut s = ScheduleState::new(0.9, 0.6, vec![1, 2, 5, 10]).unwrap();
    for (a, n) in accs.iter().zip(&rungs) {
        assert_eq!(s.update(*a).unwrap(), *n);
    }
    assert!(rungs.windows(2).all(|w| w[0] <= w[1]));
    // logged EMA agrees with an independent replay
    let mut ema = accs[0];
    for a in &accs[1..] {
        ema = 0.9 * ema + 0.1 * a;
    }
    assert!((tr.state().fake_acc_ema.value.unwrap() - ema).abs() < 1e-12);
}

/// Rung-change indices (1-based update counts) from a direct replay of the
/// EMA recurrence and grace rule.
fn replay_changes(trace: &[f64], beta: f64, floor: f64, grace: u64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut ema: Option<f64> = None;
    let mut since = 0u64;
    for (i, &a) in trace.iter().enumerate() {
        let e = match ema {
            None => a,
            Some(p) => beta * p + (1.0 - beta) * a,
        };
        ema = Some(e);
        since += 1;
        if e < floor && since >= grace {
            out.push(i + 1);
            since = 0;
        }
    }
    out
}

fn schedule_changes(trace: &[f64]) -> Vec<usize> {
    let mut s = ScheduleState::new(0.99, 0.6, dpgan_core::engine::default_ladder()).unwrap();
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

#[test]
fn scheduler_high_accuracy_never_advances() {
    assert!(schedule_changes(&vec![0.9; 10_000]).is_empty());
}

#[test]
fn scheduler_constant_half_advances_every_grace_period() {
    assert_eq!(grace_period(0.99), 200);
    let changes = schedule_changes(&vec![0.5; 1000]);
    assert_eq!(changes, vec![200, 400, 600, 800, 1000]);
    assert_eq!(changes, replay_changes(&vec![0.5; 1000], 0.99, 0.6, 200));
}

#[test]
fn scheduler_step_trace_matches_replay() {
    let mut trace = vec![0.8; 300];
    trace.extend(std::iter::repeat_n(0.55, 1000));
    let expected = replay_changes(&trace, 0.99, 0.6, 200);
    assert_eq!(expected[0], 461);
    assert_eq!(schedule_changes(&trace), expected);
}

#[test]
fn scheduler_exhausted_ladder_stays_on_top() {
    let mut s = ScheduleState::new(0.5, 0.6, vec![1, 2]).unwrap();
    for _ in 0..100 {
        s.update(0.0).unwrap();
    }
    assert_eq!(s.current(), 2);
    assert!(s.exhausted_warned);
    assert!(s.update(1.5).is_err());
}
