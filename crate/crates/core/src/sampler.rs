//! Probability-flow ODE sampling and memorization metrics.
//!
//! Sampling integrates `dx/dsigma = (x - m(x, sigma)) / sigma` from
//! `sigma_max` down to `sigma_min` along the schedule knots, starting from
//! `x = sigma_max * z`. Heun re-evaluates the slope at the Euler predictor
//! and averages; each step depends only on `(x_i, sigma_i, sigma_{i+1})`, so
//! splitting a schedule at any knot composes bit-exactly.
//!
//! A terminal sample is flagged memorized when its nearest-training distance
//! is below `d_2NN / ratio` (strict, so duplicate-row ties never flag). The
//! same criterion applied to one-step denoiser outputs at a fixed sigma gives
//! the per-noise-level rate.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::denoise::{denoise, standard_normal_vec, DenoiserSpec};
use crate::error::{Error, Result};
use crate::mc;
use crate::schedule::NoiseSchedule;
use crate::vecmath::all_finite;

const PURPOSE_TRAJECTORY: u64 = 0x4_0000;
const PURPOSE_PER_NOISE: u64 = 0x4_1000;

/// Default distance-ratio constant of the memorization criterion
/// `d_1NN < d_2NN / ratio`.
pub const DEFAULT_MEMORIZATION_RATIO: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Euler,
    Heun,
}

/// States of one ODE solve, one row per schedule knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    sigmas: Vec<f64>,
    dim: usize,
    states: Vec<f64>,
}

impl Trajectory {
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_states(&self) -> usize {
        self.sigmas.len()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    /// State at `sigma_min`.
    pub fn terminal(&self) -> &[f64] {
        self.state(self.n_states() - 1)
    }

    pub fn states_flat(&self) -> &[f64] {
        &self.states
    }
}

/// Core stepper over an explicit decreasing knot sequence, starting from
/// `x0` at `knots[0]`. Returns one state per knot, `x0` first.
pub fn integrate_from(
    denoiser: &DenoiserSpec,
    knots: &[f64],
    x0: Vec<f64>,
    method: Method,
) -> Result<Vec<Vec<f64>>> {
    if knots.len() < 2 {
        return Err(Error::InvalidParameter(
            "integration needs at least two knots".into(),
        ));
    }
    if knots.windows(2).any(|w| w[1] >= w[0]) || *knots.last().unwrap() <= 0.0 {
        return Err(Error::InvalidParameter(
            "knots must be strictly decreasing and positive".into(),
        ));
    }
    if let Some((lo, hi)) = denoiser.covered_range() {
        if knots[0] > hi || *knots.last().unwrap() < lo {
            return Err(Error::CompositeCoverage {
                sigma: knots[0],
                lo,
                hi,
            });
        }
    }
    let mut states = Vec::with_capacity(knots.len());
    let mut x = x0;
    states.push(x.clone());
    for i in 0..knots.len() - 1 {
        let sigma = knots[i];
        let sigma_next = knots[i + 1];
        let h = sigma_next - sigma;
        let m = denoise(denoiser, &x, sigma)?;
        let slope: Vec<f64> = x.iter().zip(&m).map(|(xi, mi)| (xi - mi) / sigma).collect();
        let euler: Vec<f64> = x
            .iter()
            .zip(&slope)
            .map(|(xi, di)| xi + h * di)
            .collect();
        x = if matches!(method, Method::Heun) && sigma_next > 0.0 {
            let m_next = denoise(denoiser, &euler, sigma_next)?;
            let slope_next: Vec<f64> = euler
                .iter()
                .zip(&m_next)
                .map(|(xi, mi)| (xi - mi) / sigma_next)
                .collect();
            x.iter()
                .zip(slope.iter().zip(&slope_next))
                .map(|(xi, (d1, d2))| xi + h * 0.5 * (d1 + d2))
                .collect()
        } else {
            euler
        };
        if !all_finite(&x) {
            return Err(Error::NonFiniteState {
                step: i + 1,
                sigma: sigma_next,
            });
        }
        states.push(x.clone());
    }
    Ok(states)
}

/// Full solve from `x = sigma_max * z` down the schedule.
pub fn integrate(
    denoiser: &DenoiserSpec,
    schedule: &NoiseSchedule,
    z: &[f64],
    method: Method,
) -> Result<Trajectory> {
    let x0: Vec<f64> = z.iter().map(|v| v * schedule.sigma_max()).collect();
    let states = integrate_from(denoiser, schedule.sigmas(), x0, method)?;
    let dim = z.len();
    let mut flat = Vec::with_capacity(states.len() * dim);
    for s in states {
        flat.extend_from_slice(&s);
    }
    Ok(Trajectory {
        sigmas: schedule.sigmas().to_vec(),
        dim,
        states: flat,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorizationRecord {
    pub d_1nn: f64,
    pub d_2nn: f64,
    pub memorized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    pub n_samples: u64,
    pub n_memorized: u64,
    pub rate: f64,
    pub ratio: f64,
    /// True when per-noise test points overlap the training rows.
    pub overlapping_test_points: bool,
    pub records: Vec<MemorizationRecord>,
}

impl MemorizationReport {
    fn from_records(records: Vec<MemorizationRecord>, ratio: f64, overlapping: bool) -> Self {
        let n_samples = records.len() as u64;
        let n_memorized = records.iter().filter(|r| r.memorized).count() as u64;
        Self {
            n_samples,
            n_memorized,
            rate: n_memorized as f64 / n_samples as f64,
            ratio,
            overlapping_test_points: overlapping,
            records,
        }
    }
}

fn record_for(dataset: &Dataset, point: &[f64], ratio: f64) -> Result<MemorizationRecord> {
    let (d1, d2) = dataset.nearest_two_distances(point)?;
    Ok(MemorizationRecord {
        d_1nn: d1,
        d_2nn: d2,
        memorized: d1 < d2 / ratio,
    })
}

/// Generates `n_samples` trajectories from fresh Gaussian noise and flags
/// terminal states by the distance-ratio criterion against `dataset`.
pub fn trajectory_memorization(
    denoiser: &DenoiserSpec,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    n_samples: u64,
    method: Method,
    seed: u64,
    ratio: f64,
) -> Result<MemorizationReport> {
    if n_samples < 1 {
        return Err(Error::InvalidParameter("n_samples must be >= 1".into()));
    }
    if dataset.n_points() < 2 {
        return Err(Error::TooFewPoints {
            min: 2,
            got: dataset.n_points(),
        });
    }
    if !(ratio > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "criterion ratio must be positive, got {ratio}"
        )));
    }
    let d = dataset.dim();
    let results = mc::par_map_seeded(n_samples, seed, PURPOSE_TRAJECTORY, |_, mut rng| {
        let z = standard_normal_vec(&mut rng, d);
        integrate(denoiser, schedule, &z, method)
            .and_then(|traj| record_for(dataset, traj.terminal(), ratio))
    });
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        records.push(r?);
    }
    Ok(MemorizationReport::from_records(records, ratio, false))
}

/// One-step memorization at a fixed noise level: flags `m(x + sigma z)` by
/// the distance-ratio criterion, over `(test point, noise)` pairs.
pub fn per_noise_memorization(
    denoiser: &DenoiserSpec,
    dataset: &Dataset,
    test_points: &Dataset,
    sigma: f64,
    n_noise: u64,
    seed: u64,
    ratio: f64,
) -> Result<MemorizationReport> {
    if dataset.n_points() < 2 {
        return Err(Error::TooFewPoints {
            min: 2,
            got: dataset.n_points(),
        });
    }
    if dataset.dim() != test_points.dim() {
        return Err(Error::DimensionMismatch {
            expected: dataset.dim(),
            got: test_points.dim(),
            context: "per-noise test points".into(),
        });
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("per-noise check requires sigma > 0, got {sigma}")));
    }
    if n_noise < 1 || !(ratio > 0.0) {
        return Err(Error::InvalidParameter(
            "per-noise check needs n_noise >= 1 and a positive ratio".into(),
        ));
    }
    let overlapping = test_points
        .rows()
        .any(|t| dataset.rows().any(|r| r == t));
    let total = test_points.n_points() as u64 * n_noise;
    let results = mc::par_map_seeded(total, seed, PURPOSE_PER_NOISE, |i, mut rng| {
        let x = test_points.row((i / n_noise) as usize);
        let noisy = crate::denoise::noisy_point(&mut rng, x, sigma);
        denoise(denoiser, &noisy, sigma).and_then(|out| record_for(dataset, &out, ratio))
    });
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        records.push(r?);
    }
    Ok(MemorizationReport::from_records(records, ratio, overlapping))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub baseline: MemorizationReport,
    pub swapped: MemorizationReport,
    pub band: (f64, f64),
}

/// Trajectory memorization for a base denoiser versus the same denoiser with
/// `insert` swapped into the sigma band `[lo, hi]`. Both runs consume the
/// same noise streams, so an identical insert reproduces the baseline bit for
/// bit.
pub fn swap_experiment(
    base: &DenoiserSpec,
    insert: &DenoiserSpec,
    band: (f64, f64),
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    n_samples: u64,
    method: Method,
    seed: u64,
    ratio: f64,
) -> Result<SwapReport> {
    let (lo, hi) = band;
    if !(schedule.sigma_min() <= lo && lo < hi && hi <= schedule.sigma_max()) {
        return Err(Error::InvalidParameter(format!(
            "swap band [{lo}, {hi}] must satisfy sigma_min <= lo < hi <= sigma_max"
        )));
    }
    let mut pieces = Vec::new();
    if hi < schedule.sigma_max() {
        pieces.push((hi, schedule.sigma_max(), base.clone()));
    }
    pieces.push((lo, hi.min(schedule.sigma_max()), insert.clone()));
    if lo > schedule.sigma_min() {
        pieces.push((schedule.sigma_min(), lo, base.clone()));
    }
    let composite = DenoiserSpec::composite(pieces)?;
    let baseline =
        trajectory_memorization(base, dataset, schedule, n_samples, method, seed, ratio)?;
    let swapped =
        trajectory_memorization(&composite, dataset, schedule, n_samples, method, seed, ratio)?;
    Ok(SwapReport {
        baseline,
        swapped,
        band,
    })
}
