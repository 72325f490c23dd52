use mhp::synth::{
    benchmark_config, make_benchmark_sized, sample_path, simulate_hawkes, HawkesGenConfig,
};
use mhp::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mean_rate(cfg: &HawkesGenConfig, runs: u64) -> Vec<f64> {
    let mut counts = vec![0usize; cfg.num_types];
    for seed in 0..runs {
        let (_, types) = sample_path(cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        for k in types {
            counts[k] += 1;
        }
    }
    counts.iter().map(|&c| c as f64 / (runs as f64 * cfg.horizon)).collect()
}

#[test]
fn stationary_univariate_rates() {
    for (mu, alpha, beta) in [(0.5, 0.5, 1.0), (0.2, 1.5, 2.5), (1.0, 0.3, 3.0)] {
        let cfg = HawkesGenConfig::univariate(mu, alpha, beta, 500.0, 0);
        let want = mu / (1.0 - alpha / beta);
        let got = mean_rate(&cfg, 200)[0];
        assert!((got - want).abs() / want < 0.05, "mu {mu} alpha {alpha} beta {beta}: {got} vs {want}");
    }
}

#[test]
fn benchmark_rates_match_the_linear_solve() {
    let mut cfg = benchmark_config(0);
    cfg.horizon = 400.0;
    let want = cfg.stationary_rates().unwrap();
    let got = mean_rate(&cfg, 100);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() / w < 0.08, "{got:?} vs {want:?}");
    }
}

#[test]
fn poisson_counts_have_matching_mean_and_variance() {
    let (mu, horizon, runs) = (2.0, 10.0, 2000u64);
    let cfg = HawkesGenConfig::univariate(mu, 0.0, 1.0, horizon, 0);
    let counts: Vec<f64> = (0..runs)
        .map(|s| sample_path(&cfg, &mut ChaCha8Rng::seed_from_u64(s)).0.len() as f64)
        .collect();
    let mean = counts.iter().sum::<f64>() / runs as f64;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
    assert!((mean - mu * horizon).abs() < 0.5, "mean {mean}");
    assert!((var / mean - 1.0).abs() < 0.1, "dispersion {}", var / mean);
}

#[test]
fn zero_base_rate_exhausts_retries() {
    let cfg = HawkesGenConfig::univariate(0.0, 0.5, 1.0, 10.0, 1);
    assert!(matches!(simulate_hawkes(&cfg), Err(Error::RetriesExhausted { attempts: 100, .. })));
}

#[test]
fn explosive_configuration_is_rejected() {
    let cfg = HawkesGenConfig::univariate(0.1, 2.0, 1.0, 10.0, 1);
    assert!(matches!(simulate_hawkes(&cfg), Err(Error::Explosive { .. })));
}

#[test]
fn benchmark_respects_length_bounds() {
    let bench = make_benchmark_sized(3, [40, 10, 10]).unwrap();
    for ds in [&bench.train, &bench.dev, &bench.test] {
        assert_eq!(ds.num_types, 5);
        for s in &ds.sequences {
            assert!((20..=100).contains(&s.len()));
            assert!(s.times().iter().all(|&t| t <= 41.0));
        }
    }
    assert_eq!(bench.train.len(), 40);
}
