//! Multivariate Hawkes processes with exponential kernels, sampled by Ogata
//! thinning, and the pinned synthetic benchmark.
//!
//! Type `k` has intensity
//!
//! ```text
//! λ_k(t) = μ_k + Σ_{t_i < t} α[k][k_i] · exp(−β[k][k_i] · (t − t_i))
//! ```
//!
//! so `α[k][j]` is how strongly an event of type `j` excites type `k`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EventSequence, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HawkesGenConfig {
    pub num_types: usize,
    /// Base rates `μ_k`, length `K`.
    pub mu: Vec<f64>,
    /// Excitation `α[k][j]`, row-major `K × K`.
    pub alpha: Vec<f64>,
    /// Kernel decay `β[k][j]`, row-major `K × K`.
    pub decay: Vec<f64>,
    /// Sequences are simulated on `[0, horizon]`.
    pub horizon: f64,
    /// Accepted lengths; paths outside are discarded and redrawn.
    pub min_len: usize,
    pub max_len: usize,
    pub max_retries: usize,
    pub seed: u64,
}

impl HawkesGenConfig {
    /// Univariate process with one exponential kernel and no length bounds
    /// beyond being non-empty.
    pub fn univariate(mu: f64, alpha: f64, decay: f64, horizon: f64, seed: u64) -> Self {
        HawkesGenConfig {
            num_types: 1,
            mu: vec![mu],
            alpha: vec![alpha],
            decay: vec![decay],
            horizon,
            min_len: 1,
            max_len: usize::MAX,
            max_retries: 100,
            seed,
        }
    }

    /// Branching matrix `α[k][j] / β[k][j]`.
    pub fn branching_matrix(&self) -> Vec<f64> {
        self.alpha.iter().zip(&self.decay).map(|(a, b)| a / b).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_types;
        let bad = |m: String| Err(Error::Config(m));
        if k == 0 {
            return bad("K must be positive".into());
        }
        if self.mu.len() != k || self.alpha.len() != k * k || self.decay.len() != k * k {
            return bad(format!("parameter sizes do not match K = {k}"));
        }
        if self.mu.iter().chain(&self.alpha).any(|&v| !(v >= 0.0 && v.is_finite())) {
            return bad("base rates and excitations must be finite and non-negative".into());
        }
        if self.decay.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("decay rates must be positive".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.min_len > self.max_len {
            return bad(format!("min_len {} exceeds max_len {}", self.min_len, self.max_len));
        }
        let radius = spectral_radius(&self.branching_matrix(), k);
        if radius >= 1.0 {
            return Err(Error::Explosive { radius });
        }
        Ok(())
    }

    /// Long-run event rate per type, `(I − α/β)⁻¹ μ`.
    pub fn stationary_rates(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let k = self.num_types;
        let g = self.branching_matrix();
        // Gauss-Jordan on (I - G) x = mu; I - G is an M-matrix, no pivoting needed
        let mut m: Vec<f64> = (0..k * k)
            .map(|i| f64::from(u8::from(i / k == i % k)) - g[i])
            .collect();
        let mut x = self.mu.clone();
        for col in 0..k {
            let p = m[col * k + col];
            for j in 0..k {
                m[col * k + j] /= p;
            }
            x[col] /= p;
            for row in (0..k).filter(|&r| r != col) {
                let f = m[row * k + col];
                for j in 0..k {
                    m[row * k + j] -= f * m[col * k + j];
                }
                x[row] -= f * x[col];
            }
        }
        Ok(x)
    }
}

/// Spectral radius of a non-negative `n × n` matrix by Gelfand's formula,
/// `ρ = lim ‖Gᵐ‖^{1/m}`, evaluated along `m = 2^s` with rescaling.
pub fn spectral_radius(g: &[f64], n: usize) -> f64 {
    let norm = |m: &[f64]| {
        (0..n)
            .map(|r| m[r * n..(r + 1) * n].iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    let mut m = g.to_vec();
    let mut log_scale = 0.0;
    let s0 = norm(&m);
    if s0 == 0.0 {
        return 0.0;
    }
    m.iter_mut().for_each(|v| *v /= s0);
    log_scale += s0.ln();
    let mut power = 1.0;
    for _ in 0..40 {
        let mut sq = vec![0.0; n * n];
        for i in 0..n {
            for l in 0..n {
                let a = m[i * n + l];
                if a != 0.0 {
                    for j in 0..n {
                        sq[i * n + j] += a * m[l * n + j];
                    }
                }
            }
        }
        let s = norm(&sq);
        if s == 0.0 {
            return 0.0;
        }
        sq.iter_mut().for_each(|v| *v /= s);
        m = sq;
        log_scale = 2.0 * log_scale + s.ln();
        power *= 2.0;
    }
    (log_scale / power).exp()
}

/// One path of the process on `[0, horizon]` by Ogata thinning.
///
/// Between events every kernel decays, so the total intensity just after the
/// current time bounds it until the next acceptance.
pub fn sample_path(cfg: &HawkesGenConfig, rng: &mut impl Rng) -> (Vec<f64>, Vec<usize>) {
    let k = cfg.num_types;
    // excitation[k * K + j]: current contribution of past type-j events to type k
    let mut excitation = vec![0.0; k * k];
    let mut intensities = vec![0.0; k];
    let mut times = Vec::new();
    let mut types = Vec::new();
    let mut t = 0.0;
    let total = |exc: &[f64], out: &mut [f64]| {
        for (row, o) in out.iter_mut().enumerate() {
            *o = cfg.mu[row] + exc[row * k..(row + 1) * k].iter().sum::<f64>();
        }
        out.iter().sum::<f64>()
    };
    loop {
        let bound = total(&excitation, &mut intensities);
        if bound <= 0.0 {
            break;
        }
        let step: f64 = Exp::new(bound).expect("positive rate").sample(rng);
        let s = t + step;
        if s > cfg.horizon {
            break;
        }
        for (e, &b) in excitation.iter_mut().zip(&cfg.decay) {
            *e *= (-b * step).exp();
        }
        t = s;
        let lambda = total(&excitation, &mut intensities);
        let u: f64 = rng.random::<f64>() * bound;
        if u >= lambda {
            continue;
        }
        // u is uniform on [0, λ(s)) here, reuse it to pick the type
        let mut acc = 0.0;
        let mut kind = k - 1;
        for (j, &l) in intensities.iter().enumerate() {
            acc += l;
            if u < acc {
                kind = j;
                break;
            }
        }
        times.push(t);
        types.push(kind);
        for row in 0..k {
            excitation[row * k + kind] += cfg.alpha[row * k + kind];
        }
    }
    (times, types)
}

/// Draws paths until one has a length in `[min_len, max_len]`.
pub fn simulate_hawkes_with(cfg: &HawkesGenConfig, rng: &mut impl Rng) -> Result<EventSequence> {
    cfg.validate()?;
    let min = cfg.min_len.max(1);
    for _ in 0..cfg.max_retries.max(1) {
        let (times, types) = sample_path(cfg, rng);
        if (min..=cfg.max_len).contains(&times.len()) {
            return EventSequence::new(times, types);
        }
    }
    Err(Error::RetriesExhausted {
        min,
        max: cfg.max_len,
        attempts: cfg.max_retries.max(1),
    })
}

/// [`simulate_hawkes_with`] seeded from `cfg.seed`.
pub fn simulate_hawkes(cfg: &HawkesGenConfig) -> Result<EventSequence> {
    simulate_hawkes_with(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// Generator of the synthetic benchmark: five types arranged in a cycle
/// where each type mainly triggers the next one, plus weak self-excitation.
pub fn benchmark_config(seed: u64) -> HawkesGenConfig {
    const K: usize = 5;
    let mut alpha = vec![0.0; K * K];
    for j in 0..K {
        alpha[((j + 1) % K) * K + j] = 1.2;
        alpha[j * K + j] = 0.2;
    }
    HawkesGenConfig {
        num_types: K,
        mu: vec![0.1; K],
        alpha,
        decay: vec![2.0; K * K],
        horizon: BENCHMARK_HORIZON,
        min_len: 20,
        max_len: 100,
        max_retries: 1000,
        seed,
    }
}

/// Horizon chosen so accepted benchmark sequences average about 60 events.
pub const BENCHMARK_HORIZON: f64 = 41.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

impl Benchmark {
    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Default split sizes of the benchmark.
pub const BENCHMARK_SIZES: [usize; 3] = [1600, 200, 200];

/// The synthetic benchmark with the default 1600/200/200 split.
pub fn make_synthetic_benchmark(seed: u64) -> Result<Benchmark> {
    make_benchmark_sized(seed, BENCHMARK_SIZES)
}

/// Sequence `i` (counted across train, dev, test in that order) is drawn
/// from its own ChaCha stream, so the result does not depend on the number
/// of worker threads.
pub fn make_benchmark_sized(seed: u64, sizes: [usize; 3]) -> Result<Benchmark> {
    let cfg = benchmark_config(seed);
    let total: usize = sizes.iter().sum();
    let sequences = (0..total)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            simulate_hawkes_with(&cfg, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rest = sequences.into_iter();
    let mut take = |n: usize, split| -> Result<Dataset> {
        Ok(Dataset::new(cfg.num_types, rest.by_ref().take(n).collect())?.with_split(split))
    };
    Ok(Benchmark {
        train: take(sizes[0], Split::Train)?,
        dev: take(sizes[1], Split::Dev)?,
        test: take(sizes[2], Split::Test)?,
    })
}

/// One-sample Kolmogorov-Smirnov statistic of `samples` against
/// Exponential(`rate`).
pub fn ks_statistic_exponential(samples: &[f64], rate: f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = -(-rate * x).exp_m1();
            (cdf - i as f64 / n).max((i + 1) as f64 / n - cdf)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic p-value of a KS statistic `d` from `n` samples, using the
/// Kolmogorov distribution with Stephens' small-sample correction.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut p = 0.0;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64 * lambda).powi(2)).exp();
        p += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * p).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_radius_matches_closed_form() {
        // 2x2 eigenvalues from the characteristic polynomial
        let cases: [[f64; 4]; 4] = [[0.3, 0.2, 0.1, 0.4], [0.0, 0.9, 0.5, 0.0], [0.5, 0.0, 0.0, 0.2], [0.0, 1.0, 0.0, 0.0]];
        for m in cases {
            let tr = m[0] + m[3];
            let det = m[0] * m[3] - m[1] * m[2];
            let disc = tr * tr - 4.0 * det;
            let want = if disc >= 0.0 {
                ((tr + disc.sqrt()) / 2.0).abs().max(((tr - disc.sqrt()) / 2.0).abs())
            } else {
                det.sqrt()
            };
            let got = spectral_radius(&m, 2);
            assert!((got - want).abs() < 1e-9, "{m:?}: {got} vs {want}");
        }
        // cyclic permutation scaled by c has radius c
        let mut p = vec![0.0; 25];
        for j in 0..5 {
            p[((j + 1) % 5) * 5 + j] = 0.7;
        }
        assert!((spectral_radius(&p, 5) - 0.7).abs() < 1e-9);
    }

    #[test]
    fn explosive_configuration_is_rejected() {
        let cfg = HawkesGenConfig::univariate(0.1, 1.5, 1.0, 10.0, 0);
        assert!(matches!(simulate_hawkes(&cfg), Err(Error::Explosive { .. })));
    }

    #[test]
    fn zero_base_rate_exhausts_retries() {
        let mut cfg = HawkesGenConfig::univariate(0.0, 0.5, 1.0, 10.0, 0);
        cfg.max_retries = 5;
        assert!(matches!(
            simulate_hawkes(&cfg),
            Err(Error::RetriesExhausted { attempts: 5, .. })
        ));
    }

    #[test]
    fn poisson_event_counts() {
        // 200 seeds of a rate-2 Poisson process on [0, 1000]
        let counts: Vec<f64> = (0..200)
            .map(|s| {
                let cfg = HawkesGenConfig::univariate(2.0, 0.0, 1.0, 1000.0, s);
                sample_path(&cfg, &mut ChaCha8Rng::seed_from_u64(s)).0.len() as f64
            })
            .collect();
        let mean = counts.iter().sum::<f64>() / 200.0;
        let se = (2000.0f64 / 200.0).sqrt();
        assert!((mean - 2000.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn stationary_rate_solver() {
        let cfg = HawkesGenConfig::univariate(0.2, 0.8, 1.0, 1.0, 0);
        assert!((cfg.stationary_rates().unwrap()[0] - 1.0).abs() < 1e-12);
        let b = benchmark_config(0);
        let rates = b.stationary_rates().unwrap();
        // symmetric cycle: every type has rate μ / (1 − 0.7)
        for r in rates {
            assert!((r - 0.1 / 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn ks_p_value_reference_points() {
        // Kolmogorov distribution: P(K > 1.358) ≈ 0.05, P(K > 1.628) ≈ 0.01
        let n = 1_000_000;
        let sn = (n as f64).sqrt();
        let at = |lam: f64| ks_p_value(lam / (sn + 0.12 + 0.11 / sn), n);
        assert!((at(1.358) - 0.05).abs() < 1e-3);
        assert!((at(1.628) - 0.01).abs() < 1e-3);
        assert_eq!(ks_p_value(0.0, 10), 1.0);
    }

    #[test]
    fn benchmark_shape_statistics() {
        let b = make_benchmark_sized(11, [400, 0, 0]).unwrap();
        let lens: Vec<usize> = b.train.sequences.iter().map(EventSequence::len).collect();
        let mean = lens.iter().sum::<usize>() as f64 / lens.len() as f64;
        assert!((55.0..=65.0).contains(&mean), "mean length {mean}");
        let mut counts = [0usize; 5];
        for s in &b.train.sequences {
            for &k in s.types() {
                counts[k] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        assert!(counts.iter().all(|&c| (c as f64 / total as f64 - 0.2).abs() < 0.02));
    }

    #[test]
    fn benchmark_is_deterministic_and_bounded() {
        let a = make_benchmark_sized(3, [20, 5, 5]).unwrap();
        let b = make_benchmark_sized(3, [20, 5, 5]).unwrap();
        assert_eq!(a, b);
        for split in Split::ALL {
            let ds = a.split(split);
            assert_eq!(ds.num_types, 5);
            assert_eq!(ds.split, Some(split));
            assert!(ds.sequences.iter().all(|s| (20..=100).contains(&s.len())));
        }
    }
}
