//! Deterministic parallel Monte Carlo plumbing.
//!
//! Every estimator draws from ChaCha streams keyed by `(seed, purpose, batch)`.
//! Work is split into fixed-size batches; each batch owns an independent RNG
//! stream and partial results are reduced in batch order. The outcome is a
//! pure function of `(seed, purpose, n)` and never depends on how many rayon
//! workers execute the batches.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Samples per RNG stream. Fixed: changing it changes every estimate.
pub(crate) const BATCH: u64 = 8192;

/// A Monte Carlo point estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub n_samples: u64,
}

/// RNG for one (purpose, batch) cell of a seeded run.
///
/// `purpose` values must be distinct per call site (and per grid knot when an
/// estimator loops over a grid); batches within a purpose use the low stream
/// bits.
pub(crate) fn rng_for(seed: u64, purpose: u64, batch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | (batch & 0xffff_ffff));
    rng
}

fn n_batches(n: u64) -> u64 {
    n.div_ceil(BATCH)
}

/// Mean and stderr of `f` over `n` draws. `f` receives the batch RNG and the
/// global sample index.
pub(crate) fn mc_mean<F>(n: u64, seed: u64, purpose: u64, f: F) -> Estimate
where
    F: Fn(&mut ChaCha8Rng, u64) -> f64 + Sync,
{
    assert!(n >= 1, "mc_mean requires at least one sample");
    let partials: Vec<(f64, f64)> = (0..n_batches(n))
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_for(seed, purpose, b);
            let lo = b * BATCH;
            let hi = (lo + BATCH).min(n);
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for i in lo..hi {
                let v = f(&mut rng, i);
                sum += v;
                sumsq += v * v;
            }
            (sum, sumsq)
        })
        .collect();
    // Sequential fold in batch order keeps the floating-point sum identical
    // across worker counts.
    let (sum, sumsq) = partials
        .iter()
        .fold((0.0, 0.0), |(s, q), (bs, bq)| (s + bs, q + bq));
    let nf = n as f64;
    let mean = sum / nf;
    let stderr = if n > 1 {
        let var = ((sumsq - sum * sum / nf) / (nf - 1.0)).max(0.0);
        (var / nf).sqrt()
    } else {
        0.0
    };
    Estimate {
        value: mean,
        stderr,
        n_samples: n,
    }
}

/// Paired means sharing one sample stream, plus the difference estimate.
pub(crate) struct PairEstimate {
    pub first: Estimate,
    pub second: Estimate,
    pub diff: Estimate,
}

/// Means of both components of `f` over shared draws, with the stderr of
/// their per-sample difference.
pub(crate) fn mc_mean_pair<F>(n: u64, seed: u64, purpose: u64, f: F) -> PairEstimate
where
    F: Fn(&mut ChaCha8Rng, u64) -> (f64, f64) + Sync,
{
    assert!(n >= 1, "mc_mean_pair requires at least one sample");
    let partials: Vec<[f64; 6]> = (0..n_batches(n))
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_for(seed, purpose, b);
            let lo = b * BATCH;
            let hi = (lo + BATCH).min(n);
            let mut acc = [0.0; 6];
            for i in lo..hi {
                let (a, c) = f(&mut rng, i);
                let d = a - c;
                acc[0] += a;
                acc[1] += a * a;
                acc[2] += c;
                acc[3] += c * c;
                acc[4] += d;
                acc[5] += d * d;
            }
            acc
        })
        .collect();
    let mut acc = [0.0; 6];
    for p in &partials {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    let make = |sum: f64, sumsq: f64| {
        let nf = n as f64;
        let mean = sum / nf;
        let stderr = if n > 1 {
            (((sumsq - sum * sum / nf) / (nf - 1.0)).max(0.0) / nf).sqrt()
        } else {
            0.0
        };
        Estimate {
            value: mean,
            stderr,
            n_samples: n,
        }
    };
    PairEstimate {
        first: make(acc[0], acc[1]),
        second: make(acc[2], acc[3]),
        diff: make(acc[4], acc[5]),
    }
}

/// Fraction of `n` draws on which `f` holds. Counting is integer so the rate
/// is exactly worker-order independent.
pub(crate) fn mc_rate<F>(n: u64, seed: u64, purpose: u64, f: F) -> Estimate
where
    F: Fn(&mut ChaCha8Rng, u64) -> bool + Sync,
{
    assert!(n >= 1, "mc_rate requires at least one sample");
    let hits: u64 = (0..n_batches(n))
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_for(seed, purpose, b);
            let lo = b * BATCH;
            let hi = (lo + BATCH).min(n);
            (lo..hi).filter(|&i| f(&mut rng, i)).count() as u64
        })
        .sum();
    rate_estimate(hits, n)
}

/// Bernoulli rate estimate from a hit count.
pub(crate) fn rate_estimate(hits: u64, n: u64) -> Estimate {
    let p = hits as f64 / n as f64;
    let stderr = if n > 1 {
        (p * (1.0 - p) / n as f64).sqrt()
    } else {
        0.0
    };
    Estimate {
        value: p,
        stderr,
        n_samples: n,
    }
}

/// Maps `f` over item indices, one RNG stream per item, output ordered by
/// index regardless of scheduling.
pub(crate) fn par_map_seeded<T, F>(n: u64, seed: u64, purpose: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64, ChaCha8Rng) -> T + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|i| f(i, rng_for(seed, purpose, i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn mean_is_worker_count_independent() {
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| mc_mean(100_000, 7, 3, |rng, _| rng.random::<f64>()))
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
    }

    #[test]
    fn uniform_mean_near_half() {
        let e = mc_mean(200_000, 1, 0, |rng, _| rng.random::<f64>());
        assert!((e.value - 0.5).abs() < 4.0 * e.stderr);
        assert!(e.stderr > 0.0);
    }

    #[test]
    fn rate_counts_exactly() {
        let e = mc_rate(10_000, 1, 1, |_, i| i % 4 == 0);
        assert_eq!(e.value, 0.25);
    }

    #[test]
    fn distinct_purposes_decorrelate() {
        let a = mc_mean(10_000, 5, 10, |rng, _| rng.random::<f64>());
        let b = mc_mean(10_000, 5, 11, |rng, _| rng.random::<f64>());
        assert_ne!(a.value.to_bits(), b.value.to_bits());
    }
}
