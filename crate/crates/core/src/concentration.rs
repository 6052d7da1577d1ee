//! Posterior-weight concentration diagnostics.
//!
//! The expected max posterior weight curve W_sigma tracks how hard the
//! empirical optimal denoiser snaps to single training rows as noise falls.
//! The concentration thresholds certify, per training point, a sigma above
//! which the self weight stays below q and a sigma below which it stays
//! above q, each with probability 1 - delta:
//!
//!   sigma_high = min_{K>1} d_KNN(x1) / a_{K-1,delta,q}
//!   sigma_low  = d_2NN(x1) / b_{delta,q}
//!
//! with
//!
//!   a_{K,delta,q} = F^{-1}(delta/K) + sqrt(F^{-1}(delta/K)^2 + 2 log(K q/(1-q)))
//!   b_{delta,q}   = Ftilde^{-1}(delta/N)
//!                   + sqrt(Ftilde^{-1}(delta/N)^2 + 2 log(N q/(1-q)))
//!
//! where F is the standard normal CDF and Ftilde = 1 - F. The cosine-bound
//! report carries the high-dimensional alignment guarantee between the
//! optimal and conditional flow-matching vector fields.

use serde::{Deserialize, Serialize};

use crate::curve::DiagnosticCurve;
use crate::data::{distance_profile, Dataset};
use crate::denoise::{flow_vector_fields, noisy_point, posterior_weights};
use crate::error::{Error, Result};
use crate::mc::{self, Estimate};
use crate::schedule::SigmaGrid;
use crate::vecmath::{dot, norm, squared_distance, sub};

const PURPOSE_W_CURVE: u64 = 0x3_0000;
const PURPOSE_MAXSELF: u64 = 0x3_1000;
const PURPOSE_VALIDATE_HIGH: u64 = 0x3_2000;
const PURPOSE_VALIDATE_LOW: u64 = 0x3_2001;
const PURPOSE_COSINE: u64 = 0x3_3000;
const PURPOSE_BASE_SAMPLE: u64 = 0x3_4000;

// ---------------------------------------------------------------------------
// Standard normal kernel: erfc after W. J. Cody's rational Chebyshev fits,
// quantile via Acklam's approximation refined by one Newton step on the
// erfc-based CDF. Quantile absolute error is far below the 1e-9 contract;
// the constants feed thresholds through square roots, so anything past 1e-6
// is already invisible there.
// ---------------------------------------------------------------------------

const SQRPI_INV: f64 = 0.56418958354775628695;

fn erf_small(x: f64) -> f64 {
    const A: [f64; 5] = [
        3.16112374387056560e0,
        1.13864154151050156e2,
        3.77485237685302021e2,
        3.20937758913846947e3,
        1.85777706184603153e-1,
    ];
    const B: [f64; 4] = [
        2.36012909523441209e1,
        2.44024637934444173e2,
        1.28261652607737228e3,
        2.84423683343917062e3,
    ];
    let y = x * x;
    let mut num = A[4] * y;
    let mut den = y;
    for i in 0..3 {
        num = (num + A[i]) * y;
        den = (den + B[i]) * y;
    }
    x * (num + A[3]) / (den + B[3])
}

fn erfc_mid(y: f64) -> f64 {
    const C: [f64; 9] = [
        5.64188496988670089e-1,
        8.88314979438837594e0,
        6.61191906371416295e1,
        2.98635138197400131e2,
        8.81952221241769090e2,
        1.71204761263407058e3,
        2.05107837782607147e3,
        1.23033935479799725e3,
        2.15311535474403846e-8,
    ];
    const D: [f64; 8] = [
        1.57449261107098347e1,
        1.17693950891312499e2,
        5.37181101862009858e2,
        1.62138957456669019e3,
        3.29079923573345963e3,
        4.36261909014324716e3,
        3.43936767414372164e3,
        1.23033935480374942e3,
    ];
    let mut num = C[8] * y;
    let mut den = y;
    for i in 0..7 {
        num = (num + C[i]) * y;
        den = (den + D[i]) * y;
    }
    let ratio = (num + C[7]) / (den + D[7]);
    split_exp(y) * ratio
}

fn erfc_far(y: f64) -> f64 {
    const P: [f64; 6] = [
        3.05326634961232344e-1,
        3.60344899949804439e-1,
        1.25781726111229246e-1,
        1.60837851487422766e-2,
        6.58749161529837803e-4,
        1.63153871373020978e-2,
    ];
    const Q: [f64; 5] = [
        2.56852019228982242e0,
        1.87295284992346047e0,
        5.27905102951428412e-1,
        6.05183413124413191e-2,
        2.33520497626869185e-3,
    ];
    let ysq = 1.0 / (y * y);
    let mut num = P[5] * ysq;
    let mut den = ysq;
    for i in 0..4 {
        num = (num + P[i]) * ysq;
        den = (den + Q[i]) * ysq;
    }
    let r = ysq * (num + P[4]) / (den + Q[4]);
    split_exp(y) * (SQRPI_INV - r) / y
}

/// exp(-y^2) with the argument split to keep accuracy for large y.
fn split_exp(y: f64) -> f64 {
    let ysq = (y * 16.0).trunc() / 16.0;
    let del = (y - ysq) * (y + ysq);
    (-ysq * ysq).exp() * (-del).exp()
}

/// Complementary error function, ~1 ulp over the finite range.
pub fn erfc(x: f64) -> f64 {
    let y = x.abs();
    let result = if y <= 0.46875 {
        return 1.0 - erf_small(x);
    } else if y <= 4.0 {
        erfc_mid(y)
    } else if y < 26.6 {
        erfc_far(y)
    } else {
        0.0
    };
    if x < 0.0 {
        2.0 - result
    } else {
        result
    }
}

pub fn erf(x: f64) -> f64 {
    if x.abs() <= 0.46875 {
        erf_small(x)
    } else {
        let tail = erfc(x.abs());
        let mag = 1.0 - tail;
        if x < 0.0 {
            -mag
        } else {
            mag
        }
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal survival function 1 - F(x), accurate in the far tail.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn acklam(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239e0,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838e0,
        -2.549732539343734e0,
        4.374664141464968e0,
        2.938163982698783e0,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996e0,
        3.754408661907416e0,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Inverse standard normal CDF.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("normal quantile requires p in (0,1), got {p}")));
    }
    let x = acklam(p);
    // one Newton step against the erfc-based CDF; in the lower tail compare
    // against F directly, in the upper tail against the survival function to
    // avoid cancellation
    let refined = if p <= 0.5 {
        x - (normal_cdf(x) - p) / normal_pdf(x)
    } else {
        x + (normal_sf(x) - (1.0 - p)) / normal_pdf(x)
    };
    Ok(refined)
}

/// Upper-tail quantile: `Ftilde^{-1}(p) = -F^{-1}(p)`.
pub fn normal_upper_quantile(p: f64) -> Result<f64> {
    Ok(-normal_quantile(p)?)
}

// ---------------------------------------------------------------------------
// Curves
// ---------------------------------------------------------------------------

fn sample_base_points(dataset: &Dataset, n_base: usize, seed: u64) -> Result<Vec<usize>> {
    if n_base == 0 || n_base > dataset.n_points() {
        return Err(Error::InvalidParameter(format!(
            "n_base must be in 1..={}, got {n_base}",
            dataset.n_points()
        )));
    }
    if n_base == dataset.n_points() {
        return Ok((0..n_base).collect());
    }
    let mut rng = mc::rng_for(seed, PURPOSE_BASE_SAMPLE, 0);
    Ok(rand::seq::index::sample(&mut rng, dataset.n_points(), n_base).into_vec())
}

/// Expected max posterior weight over noisy training samples, per grid knot.
/// Base points are drawn without replacement; expectation is over training
/// rows only.
pub fn w_sigma_curve(
    dataset: &Dataset,
    sigma_grid: &SigmaGrid,
    n_base: usize,
    n_noise: u64,
    seed: u64,
) -> Result<DiagnosticCurve> {
    let bases = sample_base_points(dataset, n_base, seed)?;
    if n_noise < 1 {
        return Err(Error::InvalidParameter("n_noise must be >= 1".into()));
    }
    let mut curve = DiagnosticCurve::new("w_sigma");
    let total = bases.len() as u64 * n_noise;
    for (i, &sigma) in sigma_grid.sigmas().iter().enumerate() {
        let est = mc::mc_mean(total, seed, PURPOSE_W_CURVE + i as u64, |rng, idx| {
            let base = dataset.row(bases[(idx / n_noise) as usize]);
            let noisy = noisy_point(rng, base, sigma);
            posterior_weights(dataset, &noisy, sigma)
                .expect("validated inputs")
                .max_weight()
        });
        curve.push(sigma, est);
    }
    Ok(curve)
}

/// Max-weight and self-weight curves sharing the same noisy samples, plus
/// their pointwise gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxVsSelfCurves {
    pub max_weight: DiagnosticCurve,
    pub self_weight: DiagnosticCurve,
    pub gap: DiagnosticCurve,
}

pub fn max_vs_self_weight(
    dataset: &Dataset,
    sigma_grid: &SigmaGrid,
    n_base: usize,
    n_noise: u64,
    seed: u64,
) -> Result<MaxVsSelfCurves> {
    let bases = sample_base_points(dataset, n_base, seed)?;
    if n_noise < 1 {
        return Err(Error::InvalidParameter("n_noise must be >= 1".into()));
    }
    let mut max_weight = DiagnosticCurve::new("max_weight");
    let mut self_weight = DiagnosticCurve::new("self_weight");
    let mut gap = DiagnosticCurve::new("max_minus_self");
    let total = bases.len() as u64 * n_noise;
    for (i, &sigma) in sigma_grid.sigmas().iter().enumerate() {
        let pair = mc::mc_mean_pair(total, seed, PURPOSE_MAXSELF + i as u64, |rng, idx| {
            let base_idx = bases[(idx / n_noise) as usize];
            let noisy = noisy_point(rng, dataset.row(base_idx), sigma);
            let w = posterior_weights(dataset, &noisy, sigma).expect("validated inputs");
            (w.max_weight(), w.weight(base_idx))
        });
        max_weight.push(sigma, pair.first);
        self_weight.push(sigma, pair.second);
        gap.push(sigma, pair.diff);
    }
    Ok(MaxVsSelfCurves {
        max_weight,
        self_weight,
        gap,
    })
}

// ---------------------------------------------------------------------------
// Thresholds
// ---------------------------------------------------------------------------

/// Concentration thresholds for one training point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub point_index: usize,
    pub q: f64,
    pub delta: f64,
    /// `min_{K>1} d_KNN / a_{K-1}`; None when every candidate K was skipped.
    pub sigma_high: Option<f64>,
    /// The K attaining the minimum.
    pub k_star: Option<usize>,
    /// `d_2NN / b`; zero when the point has a duplicate.
    pub sigma_low: f64,
    /// `a_{K-1, delta, q}` for K = 2..=N (entry m is K = m + 2).
    pub a_constants: Vec<f64>,
    pub b_constant: f64,
    pub d_2nn: f64,
}

/// `a_{K, delta, q}` as defined in the module docs.
pub fn a_constant(k: usize, delta: f64, q: f64) -> Result<f64> {
    check_q_delta(q, delta)?;
    if k < 1 {
        return Err(Error::InvalidParameter("a constant needs K >= 1".into()));
    }
    let z = normal_quantile(delta / k as f64)?;
    Ok(z + (z * z + 2.0 * (k as f64 * q / (1.0 - q)).ln()).sqrt())
}

/// `b_{delta, q}` for a dataset of N points.
pub fn b_constant(n: usize, delta: f64, q: f64) -> Result<f64> {
    check_q_delta(q, delta)?;
    if n < 2 {
        return Err(Error::TooFewPoints { min: 2, got: n });
    }
    let z = normal_upper_quantile(delta / n as f64)?;
    Ok(z + (z * z + 2.0 * (n as f64 * q / (1.0 - q)).ln()).sqrt())
}

fn check_q_delta(q: f64, delta: f64) -> Result<()> {
    if !(q > 0.5 && q < 1.0) {
        return Err(Error::Domain(format!("q must lie in (1/2, 1), got {q}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

pub fn concentration_thresholds(
    dataset: &Dataset,
    point_index: usize,
    q: f64,
    delta: f64,
) -> Result<ThresholdReport> {
    check_q_delta(q, delta)?;
    let n = dataset.n_points();
    if n < 2 {
        return Err(Error::TooFewPoints { min: 2, got: n });
    }
    if point_index >= n {
        return Err(Error::InvalidParameter(format!(
            "point index {point_index} out of range"
        )));
    }
    let profile = distance_profile(dataset, dataset.row(point_index), true)?;
    let mut a_constants = Vec::with_capacity(n - 1);
    let mut sigma_high: Option<f64> = None;
    let mut k_star = None;
    for k in 2..=n {
        let a = a_constant(k - 1, delta, q)?;
        a_constants.push(a);
        if a <= 0.0 {
            continue;
        }
        let candidate = profile.d_knn(k) / a;
        if sigma_high.is_none_or(|best| candidate < best) {
            sigma_high = Some(candidate);
            k_star = Some(k);
        }
    }
    let b = b_constant(n, delta, q)?;
    let d_2nn = profile.d_knn(2);
    Ok(ThresholdReport {
        point_index,
        q,
        delta,
        sigma_high,
        k_star,
        sigma_low: d_2nn / b,
        a_constants,
        b_constant: b,
        d_2nn,
    })
}

/// Monte Carlo check of both threshold implications: at `sigma_high` the
/// fraction of trials with `w_1 > q`, and at `sigma_low` the fraction with
/// `w_1 < q`. Both must stay within the delta budget up to MC slack.
pub fn validate_thresholds(
    dataset: &Dataset,
    point_index: usize,
    q: f64,
    delta: f64,
    n_trials: u64,
    seed: u64,
) -> Result<(Estimate, Estimate)> {
    let report = concentration_thresholds(dataset, point_index, q, delta)?;
    let sigma_high = report.sigma_high.ok_or_else(|| {
        Error::InvalidParameter("no valid upper threshold for this point".into())
    })?;
    if report.sigma_low <= 0.0 {
        return Err(Error::InvalidParameter(
            "sigma_low is zero (duplicate point); nothing to validate".into(),
        ));
    }
    if n_trials < 1 {
        return Err(Error::InvalidParameter("n_trials must be >= 1".into()));
    }
    let base = dataset.row(point_index);
    let fail_high = mc::mc_rate(n_trials, seed, PURPOSE_VALIDATE_HIGH, |rng, _| {
        let noisy = noisy_point(rng, base, sigma_high);
        let w = posterior_weights(dataset, &noisy, sigma_high).expect("validated inputs");
        w.weight(point_index) > q
    });
    let fail_low = mc::mc_rate(n_trials, seed, PURPOSE_VALIDATE_LOW, |rng, _| {
        let noisy = noisy_point(rng, base, report.sigma_low);
        let w = posterior_weights(dataset, &noisy, report.sigma_low).expect("validated inputs");
        w.weight(point_index) < q
    });
    Ok((fail_high, fail_low))
}

// ---------------------------------------------------------------------------
// Cosine similarity bound
// ---------------------------------------------------------------------------

/// Alignment guarantee between the optimal and conditional flow-matching
/// vector fields at time t, conditioned on one training point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineBoundReport {
    pub point_index: usize,
    pub t: f64,
    pub epsilon: f64,
    pub a: f64,
    pub c: f64,
    /// Cosine lower bound; `-inf` when the radicand is nonpositive and the
    /// bound is vacuous.
    pub bound: f64,
    pub vacuous: bool,
    /// Total failure mass `e^{-c} + Ftilde(a/2) + sum_j Ftilde(...)`.
    pub delta_total: f64,
    pub kappa_epsilon: f64,
    pub diameter: f64,
}

pub fn cosine_bound(
    dataset: &Dataset,
    point_index: usize,
    t: f64,
    epsilon: f64,
    a: f64,
    c: f64,
) -> Result<CosineBoundReport> {
    let n = dataset.n_points();
    if point_index >= n {
        return Err(Error::InvalidParameter(format!(
            "point index {point_index} out of range"
        )));
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!("t must lie in (0,1), got {t}")));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Domain(format!("epsilon must lie in (0,1), got {epsilon}")));
    }
    if !(a > 0.0 && c > 0.0) {
        return Err(Error::Domain("a and c must be positive".into()));
    }
    if n < 2 {
        return Err(Error::TooFewPoints { min: 2, got: n });
    }
    let x1 = dataset.row(point_index);
    let x1_norm = norm(x1);
    if x1_norm == 0.0 {
        return Err(Error::InvalidParameter(
            "cosine bound requires the conditioning point to be nonzero".into(),
        ));
    }
    let d = dataset.dim() as f64;
    let diameter = dataset.diameter();
    let kappa = (epsilon / ((n as f64 - 1.0) * (1.0 - epsilon))).ln();
    let sigma = (1.0 - t) / t;
    let mut delta_total = (-c).exp() + normal_sf(a / 2.0);
    for (j, row) in dataset.rows().enumerate() {
        if j == point_index {
            continue;
        }
        let dist = squared_distance(row, x1).sqrt();
        if dist == 0.0 {
            // duplicate row: the self-weight event is unreachable
            delta_total += 1.0;
        } else {
            delta_total += normal_sf(dist / (2.0 * sigma) + sigma * kappa / dist);
        }
    }
    let radicand = d - 2.0 * (d * c).sqrt() + x1_norm * x1_norm - a * x1_norm;
    let (bound, vacuous) = if radicand <= 0.0 {
        (f64::NEG_INFINITY, true)
    } else {
        let de = diameter * epsilon;
        (
            1.0 - 2.0 * de / ((1.0 - t) * radicand.sqrt() + de),
            false,
        )
    };
    Ok(CosineBoundReport {
        point_index,
        t,
        epsilon,
        a,
        c,
        bound,
        vacuous,
        delta_total,
        kappa_epsilon: kappa,
        diameter,
    })
}

/// Fraction of noise draws on which the empirical cosine between the optimal
/// and conditional vector fields meets `bound`, with
/// `X_t = (1-t) Z + t x_1`.
pub fn cosine_alignment_rate(
    dataset: &Dataset,
    point_index: usize,
    t: f64,
    bound: f64,
    n_draws: u64,
    seed: u64,
) -> Result<Estimate> {
    if n_draws < 1 {
        return Err(Error::InvalidParameter("n_draws must be >= 1".into()));
    }
    let x1 = dataset.row(point_index);
    let d = dataset.dim();
    Ok(mc::mc_rate(n_draws, seed, PURPOSE_COSINE, |rng, _| {
        let mut x_t = Vec::with_capacity(d);
        for &xi in x1 {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            x_t.push((1.0 - t) * z + t * xi);
        }
        let (u_opt, u_cond) =
            flow_vector_fields(dataset, &x_t, t, point_index).expect("validated inputs");
        let cos = dot(&u_opt, &u_cond) / (norm(&u_opt) * norm(&u_cond));
        cos >= bound
    }))
}
