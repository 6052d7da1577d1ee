//! Closed-form denoisers and their diagnostics.
//!
//! The empirical optimal denoiser is the posterior mean over a finite
//! dataset: a softmax-weighted average of training rows with weights
//! `w_i(x, sigma) = softmax_i(-|x - x_i|^2 / (2 sigma^2))`. The Gaussian
//! linear denoiser is its large-noise limit for moment-matched data. A
//! composite denoiser stitches denoisers over disjoint sigma intervals, which
//! is what the swapping experiments exercise.
//!
//! Numerical notes:
//! - Weights are always computed in log space with max subtraction; sigma
//!   values far below the data scale push exponents to -1e6 and below, where
//!   direct exponentiation underflows.
//! - The Gaussian branch applies `Sigma (Sigma + sigma^2 I)^{-1}` through the
//!   eigendecomposition of `Sigma` computed once at construction; `sigma^2`
//!   shifts the spectrum, so the solve stays positive definite for any
//!   `sigma > 0` even when `Sigma` is singular. No inverse is ever formed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::curve::DiagnosticCurve;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mc::{self, Estimate};
use crate::schedule::SigmaGrid;
use crate::vecmath::{add_scaled, all_finite, norm, squared_distance, sub};

const PURPOSE_MSE: u64 = 0x1000;
const PURPOSE_EXCESS_ROWS: u64 = 0x1100;

/// Posterior weights of a noisy observation over the dataset rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorWeights {
    weights: Vec<f64>,
    argmax_index: usize,
    max_weight: f64,
}

impl PosteriorWeights {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn argmax_index(&self) -> usize {
        self.argmax_index
    }

    pub fn max_weight(&self) -> f64 {
        self.max_weight
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }
}

/// Softmax posterior weights `w_i = softmax(-|x - x_i|^2 / (2 sigma^2))`,
/// computed via max-subtracted log-sum-exp.
pub fn posterior_weights(dataset: &Dataset, x: &[f64], sigma: f64) -> Result<PosteriorWeights> {
    dataset.check_dim(x)?;
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!(
            "posterior weights require sigma > 0, got {sigma}"
        )));
    }
    if !all_finite(x) {
        return Err(Error::Domain("non-finite query point".into()));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut logw: Vec<f64> = dataset
        .rows()
        .map(|r| -squared_distance(x, r) * inv)
        .collect();
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for lw in logw.iter_mut() {
        *lw = (*lw - max).exp();
        sum += *lw;
    }
    let mut argmax = 0;
    let mut best = -1.0;
    for (i, w) in logw.iter_mut().enumerate() {
        *w /= sum;
        if *w > best {
            best = *w;
            argmax = i;
        }
    }
    Ok(PosteriorWeights {
        weights: logw,
        argmax_index: argmax,
        max_weight: best,
    })
}

/// Gaussian model with cached spectral factorization of its covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianModelConfig", into = "GaussianModelConfig")]
pub struct GaussianModel {
    mean: Vec<f64>,
    covariance: Vec<f64>,
    eigvals: Vec<f64>,
    eigvecs: DMatrix<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GaussianModelConfig {
    mean: Vec<f64>,
    covariance: Vec<f64>,
}

impl TryFrom<GaussianModelConfig> for GaussianModel {
    type Error = Error;
    fn try_from(c: GaussianModelConfig) -> Result<Self> {
        GaussianModel::new(c.mean, c.covariance)
    }
}

impl From<GaussianModel> for GaussianModelConfig {
    fn from(m: GaussianModel) -> Self {
        GaussianModelConfig {
            mean: m.mean,
            covariance: m.covariance,
        }
    }
}

impl GaussianModel {
    /// Builds from a mean and a row-major `d x d` covariance. The covariance
    /// must be symmetric to 1e-12 and PSD up to an eigenvalue slack of
    /// -1e-10 (slightly negative eigenvalues are clamped to zero).
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                got: covariance.len(),
                context: "covariance buffer".into(),
            });
        }
        if !all_finite(&mean) || !all_finite(&covariance) {
            return Err(Error::Domain("non-finite Gaussian model".into()));
        }
        let scale = covariance.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
        for i in 0..d {
            for j in (i + 1)..d {
                if (covariance[i * d + j] - covariance[j * d + i]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidParameter(format!(
                        "covariance asymmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let m = DMatrix::from_fn(d, d, |i, j| 0.5 * (covariance[i * d + j] + covariance[j * d + i]));
        let eig = m.symmetric_eigen();
        let mut eigvals = Vec::with_capacity(d);
        for &l in eig.eigenvalues.iter() {
            if l < -1e-10 * scale {
                return Err(Error::InvalidParameter(format!(
                    "covariance has negative eigenvalue {l}"
                )));
            }
            eigvals.push(l.max(0.0));
        }
        Ok(Self {
            mean,
            covariance,
            eigvals,
            eigvecs: eig.eigenvectors,
        })
    }

    /// Moment-matched model: dataset mean and biased (1/N) covariance.
    pub fn from_dataset_moments(dataset: &Dataset) -> Result<Self> {
        Self::new(dataset.mean(), dataset.covariance())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &[f64] {
        &self.covariance
    }

    /// `mu + Sigma (Sigma + sigma^2 I)^{-1} (x - mu)` through the cached
    /// factorization.
    pub fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
                context: "gaussian denoise input".into(),
            });
        }
        let s2 = sigma * sigma;
        let centered = DVector::from_iterator(self.dim(), x.iter().zip(&self.mean).map(|(a, b)| a - b));
        let mut coeffs = self.eigvecs.transpose() * centered;
        for (c, &l) in coeffs.iter_mut().zip(&self.eigvals) {
            *c *= l / (l + s2);
        }
        let shrunk = &self.eigvecs * coeffs;
        Ok(self
            .mean
            .iter()
            .zip(shrunk.iter())
            .map(|(m, s)| m + s)
            .collect())
    }

    /// Constant Jacobian `Sigma (Sigma + sigma^2 I)^{-1}`, row-major.
    pub fn jacobian(&self, sigma: f64) -> Vec<f64> {
        let d = self.dim();
        let s2 = sigma * sigma;
        let mut scaled = self.eigvecs.clone();
        for (k, &l) in self.eigvals.iter().enumerate() {
            let f = l / (l + s2);
            scaled.column_mut(k).scale_mut(f);
        }
        let jac = scaled * self.eigvecs.transpose();
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = jac[(i, j)];
            }
        }
        out
    }
}

/// One sigma interval of a composite denoiser: active on `[sigma_lo,
/// sigma_hi)`, except the topmost interval which is closed at `sigma_hi`.
/// Boundary values therefore resolve to the higher-noise branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeSegment {
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub denoiser: DenoiserSpec,
}

/// A closed-form denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DenoiserSpec {
    /// Posterior mean over the dataset (the empirical optimal denoiser).
    Empirical { dataset: Dataset },
    /// Linear denoiser of a Gaussian model.
    Gaussian { model: GaussianModel },
    /// Ignores the input and returns a fixed vector.
    Constant { value: Vec<f64> },
    /// Piecewise denoiser over disjoint sigma intervals, stored in
    /// decreasing sigma order and covering a contiguous range.
    Composite { segments: Vec<CompositeSegment> },
}

impl DenoiserSpec {
    pub fn empirical(dataset: Dataset) -> Self {
        DenoiserSpec::Empirical { dataset }
    }

    pub fn gaussian(model: GaussianModel) -> Self {
        DenoiserSpec::Gaussian { model }
    }

    pub fn constant(value: Vec<f64>) -> Self {
        DenoiserSpec::Constant { value }
    }

    /// Builds a composite from `(sigma_lo, sigma_hi, denoiser)` pieces. The
    /// pieces must tile a contiguous range exactly: after sorting by
    /// decreasing `sigma_hi`, each piece's `sigma_lo` must equal the next
    /// piece's `sigma_hi`.
    pub fn composite(pieces: Vec<(f64, f64, DenoiserSpec)>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::InvalidParameter("composite needs at least one piece".into()));
        }
        let mut segments: Vec<CompositeSegment> = pieces
            .into_iter()
            .map(|(sigma_lo, sigma_hi, denoiser)| CompositeSegment {
                sigma_lo,
                sigma_hi,
                denoiser,
            })
            .collect();
        segments.sort_by(|a, b| b.sigma_hi.partial_cmp(&a.sigma_hi).unwrap());
        for s in &segments {
            if !(s.sigma_lo < s.sigma_hi) || !(s.sigma_lo >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "composite interval [{}, {}] is empty or negative",
                    s.sigma_lo, s.sigma_hi
                )));
            }
        }
        for w in segments.windows(2) {
            if w[0].sigma_lo != w[1].sigma_hi {
                return Err(Error::InvalidParameter(format!(
                    "composite intervals must tile: [{}, {}] then [{}, {}]",
                    w[1].sigma_lo, w[1].sigma_hi, w[0].sigma_lo, w[0].sigma_hi
                )));
            }
        }
        Ok(DenoiserSpec::Composite { segments })
    }

    /// The sigma range a composite covers; unrestricted denoisers return None.
    pub fn covered_range(&self) -> Option<(f64, f64)> {
        match self {
            DenoiserSpec::Composite { segments } => Some((
                segments.last().unwrap().sigma_lo,
                segments.first().unwrap().sigma_hi,
            )),
            _ => None,
        }
    }
}

/// Evaluates a denoiser at `(x, sigma)`.
pub fn denoise(spec: &DenoiserSpec, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("denoise requires sigma > 0, got {sigma}")));
    }
    match spec {
        DenoiserSpec::Empirical { dataset } => {
            let w = posterior_weights(dataset, x, sigma)?;
            let mut out = vec![0.0; dataset.dim()];
            for (wi, row) in w.weights().iter().zip(dataset.rows()) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += wi * v;
                }
            }
            Ok(out)
        }
        DenoiserSpec::Gaussian { model } => model.denoise(x, sigma),
        DenoiserSpec::Constant { value } => {
            if value.len() != x.len() {
                return Err(Error::DimensionMismatch {
                    expected: x.len(),
                    got: value.len(),
                    context: "constant denoiser".into(),
                });
            }
            Ok(value.clone())
        }
        DenoiserSpec::Composite { segments } => {
            let hi = segments.first().unwrap().sigma_hi;
            let lo = segments.last().unwrap().sigma_lo;
            if sigma > hi || sigma < lo {
                return Err(Error::CompositeCoverage { sigma, lo, hi });
            }
            for seg in segments {
                if sigma >= seg.sigma_lo {
                    return denoise(&seg.denoiser, x, sigma);
                }
            }
            Err(Error::CompositeCoverage { sigma, lo, hi })
        }
    }
}

/// Monte Carlo fixed-sigma denoising MSE over `(X uniform on eval_set,
/// Z ~ N(0, I))` pairs.
pub fn denoising_mse(
    spec: &DenoiserSpec,
    eval_set: &Dataset,
    sigma: f64,
    n_noise: u64,
    seed: u64,
) -> Result<Estimate> {
    if n_noise < 1 {
        return Err(Error::InvalidParameter("denoising_mse needs n_noise >= 1".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("denoising_mse requires sigma > 0, got {sigma}")));
    }
    let d = eval_set.dim();
    let est = mc::mc_mean(n_noise, seed, PURPOSE_MSE, |rng, _| {
        let row = eval_set.row(rng.random_range(0..eval_set.n_points()));
        let mut noisy = Vec::with_capacity(d);
        for &v in row {
            let z: f64 = StandardNormal.sample(rng);
            noisy.push(v + sigma * z);
        }
        let out = denoise(spec, &noisy, sigma).expect("validated denoiser");
        squared_distance(&out, row)
    });
    Ok(est)
}

/// Optimal and conditional flow-matching vector fields at time `t`, with the
/// linear schedule weights `w_i(x, t) = softmax(-|x - t x_i|^2 / (2(1-t)^2))`.
///
/// Returns `(u_opt, u_cond)` where `u_cond = (x_cond - x)/(1 - t)`.
pub fn flow_vector_fields(
    dataset: &Dataset,
    x: &[f64],
    t: f64,
    conditioning_index: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    dataset.check_dim(x)?;
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!("flow fields require t in (0,1), got {t}")));
    }
    if conditioning_index >= dataset.n_points() {
        return Err(Error::InvalidParameter(format!(
            "conditioning index {conditioning_index} out of range"
        )));
    }
    let omt = 1.0 - t;
    let inv = 1.0 / (2.0 * omt * omt);
    let mut logw: Vec<f64> = dataset
        .rows()
        .map(|r| {
            let sq: f64 = x
                .iter()
                .zip(r)
                .map(|(xi, ri)| {
                    let d = xi - t * ri;
                    d * d
                })
                .sum();
            -sq * inv
        })
        .collect();
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for lw in logw.iter_mut() {
        *lw = (*lw - max).exp();
        sum += *lw;
    }
    let d = dataset.dim();
    let mut u_opt = vec![0.0; d];
    for (w, row) in logw.iter().zip(dataset.rows()) {
        let wi = w / sum;
        for (u, (ri, xi)) in u_opt.iter_mut().zip(row.iter().zip(x)) {
            *u += wi * (ri - xi) / omt;
        }
    }
    let cond_row = dataset.row(conditioning_index);
    let u_cond: Vec<f64> = cond_row
        .iter()
        .zip(x)
        .map(|(ri, xi)| (ri - xi) / omt)
        .collect();
    Ok((u_opt, u_cond))
}

/// Analytic posterior-covariance Jacobian of the empirical denoiser divided
/// by sigma^2: `sigma^{-2} (sum_i w_i x_i x_i^T - m m^T)`, row-major.
pub fn empirical_jacobian(dataset: &Dataset, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    let w = posterior_weights(dataset, x, sigma)?;
    let d = dataset.dim();
    let mut second = vec![0.0; d * d];
    let mut mean = vec![0.0; d];
    for (wi, row) in w.weights().iter().zip(dataset.rows()) {
        for i in 0..d {
            mean[i] += wi * row[i];
            for j in 0..d {
                second[i * d + j] += wi * row[i] * row[j];
            }
        }
    }
    let inv_s2 = 1.0 / (sigma * sigma);
    for i in 0..d {
        for j in 0..d {
            second[i * d + j] = (second[i * d + j] - mean[i] * mean[j]) * inv_s2;
        }
    }
    Ok(second)
}

/// Compares central finite differences of the empirical denoiser against the
/// posterior-covariance form of its Jacobian. Returns the largest elementwise
/// deviation relative to the largest entry magnitude of either matrix.
pub fn tweedie_jacobian_check(
    dataset: &Dataset,
    x: &[f64],
    sigma: f64,
    fd_step: f64,
) -> Result<f64> {
    if !(fd_step > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "fd_step must be positive, got {fd_step}"
        )));
    }
    dataset.check_dim(x)?;
    let analytic = empirical_jacobian(dataset, x, sigma)?;
    let d = dataset.dim();
    let spec = DenoiserSpec::empirical(dataset.clone());
    let mut fd = vec![0.0; d * d];
    let mut probe = x.to_vec();
    for j in 0..d {
        probe[j] = x[j] + fd_step;
        let plus = denoise(&spec, &probe, sigma)?;
        probe[j] = x[j] - fd_step;
        let minus = denoise(&spec, &probe, sigma)?;
        probe[j] = x[j];
        for i in 0..d {
            fd[i * d + j] = (plus[i] - minus[i]) / (2.0 * fd_step);
        }
    }
    let scale = analytic
        .iter()
        .chain(fd.iter())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 {
        return Ok(0.0);
    }
    let max_abs = analytic
        .iter()
        .zip(&fd)
        .fold(0.0f64, |a, (an, f)| a.max((an - f).abs()));
    Ok(max_abs / scale)
}

/// Sup over sampled dataset rows of `(1 + sigma)^2 |m_sigma(x) - m_sigma^G(x)|`
/// per grid knot, with the Gaussian model moment-matched to the dataset.
/// Bounded curves witness the second-order large-noise expansion.
pub fn gauss_excess_profile(
    dataset: &Dataset,
    sigma_grid: &SigmaGrid,
    n_eval: usize,
    seed: u64,
) -> Result<DiagnosticCurve> {
    let model = GaussianModel::from_dataset_moments(dataset)?;
    let n_eval = n_eval.clamp(1, dataset.n_points());
    let rows: Vec<usize> = if n_eval == dataset.n_points() {
        (0..n_eval).collect()
    } else {
        let mut rng = mc::rng_for(seed, PURPOSE_EXCESS_ROWS, 0);
        rand::seq::index::sample(&mut rng, dataset.n_points(), n_eval).into_vec()
    };
    let empirical = DenoiserSpec::empirical(dataset.clone());
    let mut curve = DiagnosticCurve::new("gauss_excess");
    for &sigma in sigma_grid.sigmas() {
        let mut sup = 0.0f64;
        for &i in &rows {
            let x = dataset.row(i);
            let m_emp = denoise(&empirical, x, sigma)?;
            let m_gauss = model.denoise(x, sigma)?;
            let weight = (1.0 + sigma) * (1.0 + sigma);
            sup = sup.max(weight * norm(&sub(&m_emp, &m_gauss)));
        }
        curve.push(
            sigma,
            Estimate {
                value: sup,
                stderr: 0.0,
                n_samples: rows.len() as u64,
            },
        );
    }
    Ok(curve)
}

/// Draws a standard normal vector.
pub(crate) fn standard_normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// `x + sigma z` for a fresh standard normal z.
pub(crate) fn noisy_point(rng: &mut ChaCha8Rng, x: &[f64], sigma: f64) -> Vec<f64> {
    let z = standard_normal_vec(rng, x.len());
    add_scaled(x, sigma, &z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;

    fn planar_three() -> Dataset {
        Dataset::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]], "tri").unwrap()
    }

    #[test]
    fn single_point_weight_is_one() {
        let ds = Dataset::from_rows(&[vec![3.0, 4.0]], "one").unwrap();
        for sigma in [1e-3, 1.0, 1e6] {
            let w = posterior_weights(&ds, &[100.0, -5.0], sigma).unwrap();
            assert_eq!(w.weights(), &[1.0]);
            assert_eq!(w.argmax_index(), 0);
        }
    }

    #[test]
    fn equidistant_pair_splits_evenly() {
        let ds = Dataset::from_rows(&[vec![-1.0], vec![1.0]], "pair").unwrap();
        let w = posterior_weights(&ds, &[0.0], 0.7).unwrap();
        assert!((w.weight(0) - 0.5).abs() < 1e-15);
        assert!((w.weight(1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn weights_match_high_precision_oracle() {
        // 220-digit softmax evaluation of the same fixture.
        let ds = planar_three();
        let w = posterior_weights(&ds, &[0.2, 0.1], 0.5).unwrap();
        let expected = [
            0.768084080129286334719,
            0.2313424791968490838723,
            0.0005734406738645814086132,
        ];
        for (got, want) in w.weights().iter().zip(expected) {
            assert!(
                ((got - want) / want).abs() < 1e-14,
                "weight {got} vs oracle {want}"
            );
        }
        assert_eq!(w.argmax_index(), 0);
    }

    #[test]
    fn weights_survive_extreme_small_sigma() {
        let ds = planar_three();
        let w = posterior_weights(&ds, &[0.01, 0.0], 1e-3).unwrap();
        assert_eq!(w.argmax_index(), 0);
        assert!((w.max_weight() - 1.0).abs() < 1e-12);
        assert!(w.weights().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn weights_sum_to_one_and_shift_invariant() {
        let ds = planar_three();
        let x = [0.3, 0.7];
        let sigma = 0.9;
        let w = posterior_weights(&ds, &x, sigma).unwrap();
        let total: f64 = w.weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        // translate everything jointly: weights unchanged
        let shift = [13.25, -4.5];
        let shifted_rows: Vec<Vec<f64>> = ds
            .rows()
            .map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect())
            .collect();
        let ds2 = Dataset::from_rows(&shifted_rows, "shifted").unwrap();
        let x2 = [x[0] + shift[0], x[1] + shift[1]];
        let w2 = posterior_weights(&ds2, &x2, sigma).unwrap();
        for (a, b) in w.weights().iter().zip(w2.weights()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_single_point_returns_the_point() {
        let ds = Dataset::from_rows(&[vec![2.0, -1.0]], "one").unwrap();
        let spec = DenoiserSpec::empirical(ds);
        for sigma in [0.01, 1.0, 100.0] {
            let out = denoise(&spec, &[50.0, 7.0], sigma).unwrap();
            assert_eq!(out, vec![2.0, -1.0]);
        }
    }

    #[test]
    fn gaussian_isotropic_closed_form() {
        let d = 3;
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = 1.0;
        }
        let model = GaussianModel::new(vec![0.0; d], cov).unwrap();
        let x = [1.0, -2.0, 0.5];
        let sigma = 1.7;
        let out = model.denoise(&x, sigma).unwrap();
        for (o, xi) in out.iter().zip(x) {
            assert!((o - xi / (1.0 + sigma * sigma)).abs() < 1e-14);
        }
    }

    #[test]
    fn gaussian_diagonal_solve_oracle() {
        // Sigma = diag(4, 1), mu = (1, 2), x = (3, 3), sigma = 2:
        // (Sigma + 4I) = diag(8, 5); m = mu + (4/8 * 2, 1/5 * 1) = (2, 2.2).
        let model = GaussianModel::new(vec![1.0, 2.0], vec![4.0, 0.0, 0.0, 1.0]).unwrap();
        let out = model.denoise(&[3.0, 3.0], 2.0).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-14);
        assert!((out[1] - 2.2).abs() < 1e-14);
    }

    #[test]
    fn gaussian_fixes_its_mean() {
        let model =
            GaussianModel::new(vec![1.0, -2.0], vec![3.0, 0.5, 0.5, 2.0]).unwrap();
        for sigma in [1e-3, 1.0, 1e4] {
            let out = model.denoise(&[1.0, -2.0], sigma).unwrap();
            assert!((out[0] - 1.0).abs() < 1e-12);
            assert!((out[1] + 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_rejects_asymmetric_and_indefinite() {
        assert!(GaussianModel::new(vec![0.0, 0.0], vec![1.0, 0.5, 0.2, 1.0]).is_err());
        assert!(GaussianModel::new(vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0]).is_err());
    }

    #[test]
    fn singular_covariance_is_accepted() {
        // rank-1 covariance; sigma^2 I keeps the solve well posed
        let model = GaussianModel::new(vec![0.0, 0.0], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let out = model.denoise(&[1.0, 0.0], 0.5).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constant_denoiser_returns_value() {
        let spec = DenoiserSpec::constant(vec![1.0, 2.0]);
        assert_eq!(denoise(&spec, &[9.0, 9.0], 1.0).unwrap(), vec![1.0, 2.0]);
        assert!(denoise(&spec, &[9.0], 1.0).is_err());
    }

    #[test]
    fn composite_picks_higher_noise_branch_on_boundary() {
        let a = DenoiserSpec::constant(vec![1.0]);
        let b = DenoiserSpec::constant(vec![2.0]);
        let c = DenoiserSpec::constant(vec![3.0]);
        let spec = DenoiserSpec::composite(vec![
            (8.4, 80.0, a),
            (0.14, 8.4, b),
            (0.002, 0.14, c),
        ])
        .unwrap();
        assert_eq!(denoise(&spec, &[0.0], 80.0).unwrap(), vec![1.0]);
        assert_eq!(denoise(&spec, &[0.0], 8.4).unwrap(), vec![1.0]);
        assert_eq!(denoise(&spec, &[0.0], 8.3999).unwrap(), vec![2.0]);
        assert_eq!(denoise(&spec, &[0.0], 0.14).unwrap(), vec![2.0]);
        assert_eq!(denoise(&spec, &[0.0], 0.1399).unwrap(), vec![3.0]);
        assert_eq!(denoise(&spec, &[0.0], 0.002).unwrap(), vec![3.0]);
        assert!(matches!(
            denoise(&spec, &[0.0], 81.0),
            Err(Error::CompositeCoverage { .. })
        ));
        assert!(matches!(
            denoise(&spec, &[0.0], 0.001),
            Err(Error::CompositeCoverage { .. })
        ));
    }

    #[test]
    fn composite_agrees_bit_exactly_with_active_branch() {
        let ds = planar_three();
        let empirical = DenoiserSpec::empirical(ds.clone());
        let gauss = DenoiserSpec::gaussian(GaussianModel::from_dataset_moments(&ds).unwrap());
        let spec = DenoiserSpec::composite(vec![
            (1.0, 10.0, empirical.clone()),
            (0.01, 1.0, gauss.clone()),
        ])
        .unwrap();
        let x = [0.4, 0.6];
        for sigma in [10.0, 2.5, 1.0, 0.5, 0.01] {
            let combined = denoise(&spec, &x, sigma).unwrap();
            let branch = if sigma >= 1.0 { &empirical } else { &gauss };
            let direct = denoise(branch, &x, sigma).unwrap();
            assert_eq!(combined, direct);
        }
    }

    #[test]
    fn composite_rejects_gaps_and_overlaps() {
        let c = |v: f64| DenoiserSpec::constant(vec![v]);
        assert!(DenoiserSpec::composite(vec![(1.0, 2.0, c(0.0)), (0.1, 0.9, c(1.0))]).is_err());
        assert!(DenoiserSpec::composite(vec![(1.0, 2.0, c(0.0)), (0.5, 1.5, c(1.0))]).is_err());
    }

    #[test]
    fn empirical_output_stays_in_convex_hull() {
        let ds = planar_three();
        let spec = DenoiserSpec::empirical(ds.clone());
        let mut rng = mc::rng_for(3, 0, 0);
        for _ in 0..50 {
            let x = standard_normal_vec(&mut rng, 2);
            let sigma = 0.05 + 5.0 * rng.random::<f64>();
            let out = denoise(&spec, &x, sigma).unwrap();
            for j in 0..2 {
                let lo = ds.rows().map(|r| r[j]).fold(f64::INFINITY, f64::min);
                let hi = ds.rows().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
                assert!(out[j] >= lo - 1e-9 && out[j] <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn empirical_limits_mean_and_self() {
        let ds = planar_three();
        let spec = DenoiserSpec::empirical(ds.clone());
        let diam = ds.diameter();
        // sigma -> infinity: dataset mean
        let out = denoise(&spec, &[0.3, -0.2], 1e6 * diam).unwrap();
        let mean = ds.mean();
        let dist = norm(&sub(&out, &mean));
        assert!(dist <= 1e-6 * diam, "distance to mean {dist}");
        // sigma -> 0 with a perturbed row: collapse to the row
        let sigma = 1e-3;
        let x = [0.0 + 0.3 * sigma, 2.0 - 0.2 * sigma];
        let out = denoise(&spec, &x, sigma).unwrap();
        assert!(norm(&sub(&out, &vec![0.0, 2.0])) < 1e-9);
    }

    #[test]
    fn mse_of_matching_constant_is_zero() {
        let ds = Dataset::from_rows(&[vec![1.5, -0.5]], "pt").unwrap();
        let spec = DenoiserSpec::constant(vec![1.5, -0.5]);
        let est = denoising_mse(&spec, &ds, 1.0, 500, 42).unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn mse_of_empirical_vanishes_at_tiny_sigma() {
        let ds = planar_three();
        let sep = ds.min_pairwise_distance().unwrap();
        let spec = DenoiserSpec::empirical(ds.clone());
        let est = denoising_mse(&spec, &ds, 1e-3 * sep, 400, 9).unwrap();
        assert!(est.value < 1e-12, "mse = {}", est.value);
    }

    #[test]
    fn flow_fields_single_point_coincide() {
        let ds = Dataset::from_rows(&[vec![1.0, 2.0]], "one").unwrap();
        let (u_opt, u_cond) = flow_vector_fields(&ds, &[0.3, 0.3], 0.6, 0).unwrap();
        assert_eq!(u_opt, u_cond);
    }

    #[test]
    fn flow_weights_collapse_on_scaled_row() {
        let ds = Dataset::from_rows(&[vec![0.0, 0.0], vec![30.0, 0.0]], "sep").unwrap();
        let t = 0.5;
        let x: Vec<f64> = ds.row(1).iter().map(|v| t * v).collect();
        let (u_opt, u_cond) = flow_vector_fields(&ds, &x, t, 1).unwrap();
        for (a, b) in u_opt.iter().zip(&u_cond) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn flow_identity_matches_sigma_denoiser() {
        // m_t(t x) equals m_sigma(x) with sigma = (1 - t)/t
        let ds = planar_three();
        let mut rng = mc::rng_for(11, 1, 0);
        for _ in 0..25 {
            let x = standard_normal_vec(&mut rng, 2);
            let t = 0.05 + 0.9 * rng.random::<f64>();
            let sigma = (1.0 - t) / t;
            let tx: Vec<f64> = x.iter().map(|v| t * v).collect();
            // m_t(y) = sum_i w_i(y, t) x_i
            let omt = 1.0 - t;
            let inv = 1.0 / (2.0 * omt * omt);
            let logw: Vec<f64> = ds
                .rows()
                .map(|r| {
                    -inv * tx
                        .iter()
                        .zip(r)
                        .map(|(a, b)| (a - t * b) * (a - t * b))
                        .sum::<f64>()
                })
                .collect();
            let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ws: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = ws.iter().sum();
            let mut m_t = vec![0.0; 2];
            for (w, r) in ws.iter().zip(ds.rows()) {
                for (mi, ri) in m_t.iter_mut().zip(r) {
                    *mi += w / total * ri;
                }
            }
            let m_sigma = denoise(&DenoiserSpec::empirical(ds.clone()), &x, sigma).unwrap();
            for (a, b) in m_t.iter().zip(&m_sigma) {
                let scale = b.abs().max(1.0);
                assert!((a - b).abs() < 1e-12 * scale, "{a} vs {b} at t={t}");
            }
        }
    }

    #[test]
    fn tweedie_single_point_is_exactly_zero() {
        let ds = Dataset::from_rows(&[vec![1.0, 2.0, 3.0]], "one").unwrap();
        let err = tweedie_jacobian_check(&ds, &[0.5, 0.5, 0.5], 1.0, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn gaussian_jacobian_matches_finite_difference() {
        let model = GaussianModel::new(vec![0.5, -0.5], vec![2.0, 0.3, 0.3, 1.0]).unwrap();
        let sigma = 0.8;
        let jac = model.jacobian(sigma);
        let x = [0.2, 0.9];
        let h = 1e-6;
        for j in 0..2 {
            let mut p = x;
            p[j] += h;
            let plus = model.denoise(&p, sigma).unwrap();
            p[j] = x[j] - h;
            let minus = model.denoise(&p, sigma).unwrap();
            for i in 0..2 {
                let fd = (plus[i] - minus[i]) / (2.0 * h);
                assert!(
                    (fd - jac[i * 2 + j]).abs() < 1e-9,
                    "entry ({i},{j}): fd {fd} vs {}",
                    jac[i * 2 + j]
                );
            }
        }
    }

    #[test]
    fn tweedie_error_scales_quadratically() {
        let spec = data::SyntheticSpec {
            kind: data::SyntheticKind::GaussianMixture {
                means: vec![vec![0.0; 3]],
                scales: vec![1.0],
            },
            n_points: 5,
            dim: 3,
            seed: 21,
        };
        let ds = data::synthesize(&spec).unwrap();
        let x = [0.1, -0.2, 0.4];
        let e_coarse = tweedie_jacobian_check(&ds, &x, 1.0, 2e-3).unwrap();
        let e_fine = tweedie_jacobian_check(&ds, &x, 1.0, 1e-3).unwrap();
        let ratio = e_coarse / e_fine;
        assert!(
            (2.5..6.0).contains(&ratio),
            "expected ~4x drop, got {ratio} ({e_coarse} -> {e_fine})"
        );
        // and the small-step check lands well under the acceptance ceiling
        let e_small = tweedie_jacobian_check(&ds, &x, 1.0, 1e-5).unwrap();
        assert!(e_small <= 1e-5, "rel err {e_small}");
    }

    #[test]
    fn excess_profile_is_zero_for_single_point() {
        let ds = Dataset::from_rows(&[vec![0.7, -0.1]], "one").unwrap();
        let grid = SigmaGrid::log_uniform(0.1, 100.0, 8).unwrap();
        let curve = gauss_excess_profile(&ds, &grid, 1, 0).unwrap();
        for p in &curve.points {
            assert!(p.value.abs() < 1e-10, "sigma {}: {}", p.sigma, p.value);
        }
    }

    #[test]
    fn excess_matches_two_point_tanh_form() {
        // Symmetric pair {-a, a} in 1-D: m_sigma(x) = a tanh(a x / sigma^2),
        // moment-matched Gaussian gives a^2 x / (a^2 + sigma^2).
        let a = 1.3;
        let ds = Dataset::from_rows(&[vec![-a], vec![a]], "sym").unwrap();
        let grid = SigmaGrid::log_uniform(0.5, 50.0, 12).unwrap();
        let curve = gauss_excess_profile(&ds, &grid, 2, 0).unwrap();
        for p in &curve.points {
            let s2 = p.sigma * p.sigma;
            let analytic = {
                // evaluated at the rows x = +-a; symmetric, use x = a
                let emp = a * (a * a / s2).tanh();
                let gauss = a * a * a / (a * a + s2);
                (1.0 + p.sigma).powi(2) * (emp - gauss).abs()
            };
            assert!(
                (p.value - analytic).abs() < 1e-10,
                "sigma {}: {} vs {}",
                p.sigma,
                p.value,
                analytic
            );
        }
    }

    #[test]
    fn denoiser_spec_serde_round_trip() {
        let ds = planar_three();
        let spec = DenoiserSpec::composite(vec![
            (1.0, 80.0, DenoiserSpec::empirical(ds.clone())),
            (
                0.002,
                1.0,
                DenoiserSpec::gaussian(GaussianModel::from_dataset_moments(&ds).unwrap()),
            ),
        ])
        .unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        let back: DenoiserSpec = serde_json::from_str(&text).unwrap();
        let x = [0.2, 0.4];
        assert_eq!(
            denoise(&spec, &x, 0.5).unwrap(),
            denoise(&back, &x, 0.5).unwrap()
        );
    }
}
