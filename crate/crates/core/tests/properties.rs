use dpgan_core::accountant::{epsilon_after, max_steps, BudgetQuery};
use dpgan_core::dp::{self, PrivacySpec};
use dpgan_core::nn::PerExampleGradMatrix;
use dpgan_core::Matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grad_matrix() -> impl Strategy<Value = PerExampleGradMatrix> {
    (1usize..6, 1usize..8).prop_flat_map(|(n, p)| {
        prop::collection::vec(-1e3f64..1e3, n * p)
            .prop_map(move |v| PerExampleGradMatrix::from_grads(Matrix::from_vec(n, p, v).unwrap()))
    })
}

fn l2(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn clipped_rows_stay_in_the_ball(g in grad_matrix(), clip in 1e-3f64..1e2) {
        let c = dp::clip_per_example(&g, clip).unwrap();
        for (i, row) in c.grads.iter_rows().enumerate() {
            prop_assert!(l2(row) <= clip * (1.0 + 1e-12));
            let orig = g.grads.row(i);
            if l2(orig) <= clip {
                prop_assert!(row.iter().zip(orig).all(|(a, b)| a.to_bits() == b.to_bits()));
            } else {
                // same direction: clipped = f * orig with one positive f
                let f = clip / l2(orig);
                for (a, b) in row.iter().zip(orig) {
                    prop_assert!((a - f * b).abs() <= 1e-12 * b.abs().max(1.0));
                }
            }
        }
        let twice = dp::clip_per_example(&c, clip).unwrap();
        prop_assert_eq!(
            twice.grads.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            c.grads.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn one_record_moves_the_sum_by_at_most_c(g in grad_matrix(), clip in 1e-2f64..10.0, drop in 0usize..6) {
        prop_assume!(drop < g.len());
        let c = dp::clip_per_example(&g, clip).unwrap();
        let full = c.sum_rows();
        let keep: Vec<usize> = (0..c.len()).filter(|&i| i != drop).collect();
        let without = PerExampleGradMatrix::from_grads(c.grads.select_rows(&keep)).sum_rows();
        let diff: Vec<f64> = full.iter().zip(&without).map(|(a, b)| a - b).collect();
        prop_assert!(l2(&diff) <= clip * (1.0 + 1e-9));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn epsilon_is_monotone(
        q in 1e-4f64..0.1,
        sigma in 0.6f64..3.0,
        t in 1u64..20_000,
        dq in 1.01f64..2.0,
        ds in 1.01f64..2.0,
        dt in 1u64..20_000,
    ) {
        let eps = |t, q, s| epsilon_after(&BudgetQuery { steps: t, q, sigma: s, delta: 1e-5 }).unwrap().epsilon;
        let base = eps(t, q, sigma);
        let tol = 1e-12 * base.max(1.0);
        prop_assert!(eps(t + dt, q, sigma) >= base - tol);
        prop_assert!(eps(t, (q * dq).min(1.0), sigma) >= base - tol);
        prop_assert!(eps(t, q, sigma * ds) <= base + tol);
        prop_assert_eq!(eps(0, q, sigma), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn max_steps_is_the_last_feasible_step(q in 1e-3f64..0.05, sigma in 0.7f64..2.0, eps in 0.5f64..8.0) {
        let e = |t| epsilon_after(&BudgetQuery { steps: t, q, sigma, delta: 1e-5 }).unwrap().epsilon;
        let Ok(t) = max_steps(q, sigma, 1e-5, eps) else {
            prop_assert!(e(1) > eps);
            return Ok(());
        };
        prop_assert!(e(t) <= eps);
        prop_assert!(e(t + 1) > eps);
    }
}

#[test]
fn poisson_batch_size_matches_expectation() {
    let (n, q, reps) = (60_000usize, 128.0 / 60_000.0, 2_000);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut total = 0usize;
    for _ in 0..reps {
        let idx = dp::poisson_sample(n, q, &mut rng);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(idx.last().is_none_or(|&i| i < n));
        total += idx.len();
    }
    let mean = total as f64 / reps as f64;
    let se = (n as f64 * q * (1.0 - q) / reps as f64).sqrt();
    assert!((mean - 128.0).abs() < 3.0 * se, "mean {mean}, se {se}");
}

#[test]
fn poisson_inclusion_is_uniform_over_records() {
    let (n, q, reps) = (20usize, 0.3, 20_000);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut counts = vec![0usize; n];
    for _ in 0..reps {
        for i in dp::poisson_sample(n, q, &mut rng) {
            counts[i] += 1;
        }
    }
    let se = (q * (1.0 - q) / reps as f64).sqrt();
    for c in counts {
        // 4 SE per record keeps the family-wise false alarm rate small
        assert!((c as f64 / reps as f64 - q).abs() < 4.0 * se);
    }
}

#[test]
fn noise_variance_matches_c_sigma_squared() {
    let (c, sigma, b, p) = (1.5, 0.8, 64usize, 10_000usize);
    let spec = PrivacySpec::private(c, sigma, b, 1e-5, 10_000).unwrap();
    let empty = PerExampleGradMatrix::from_grads(Matrix::zeros(0, p));
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let out = dp::aggregate_and_noise(&empty, &spec, &mut rng).unwrap();
    let z: Vec<f64> = out.iter().map(|v| v * 2.0 * b as f64).collect();
    let mean = z.iter().sum::<f64>() / p as f64;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (p - 1) as f64;
    let target = c * c * sigma * sigma;
    let se = target * (2.0 / (p - 1) as f64).sqrt();
    assert!((var - target).abs() < 3.0 * se, "var {var}, target {target}");
    assert!(mean.abs() < 3.0 * (target / p as f64).sqrt());
}
