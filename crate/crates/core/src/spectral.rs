//! Circulant-covariance sensitivity analysis.
//!
//! For a stationary Gaussian model with circulant covariance, the denoiser
//! Jacobian is circulant with spectral filter `h_k = sigma^2/(lambda_k +
//! sigma^2)`; its kernel `q_r` (inverse DFT of `h`) gives the off-diagonal
//! sensitivity at wrap-around distance `r`, and the cyclic total variation of
//! `h` bounds `|q_n| <= TV(h)/(4n)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Threshold below which the kernel is considered decayed in sweeps.
pub const DECAY_THRESHOLD: f64 = 1e-3;

const IMAG_RESIDUE_TOL: f64 = 1e-10;

/// Circulant covariance given by its DFT spectrum.
///
/// The spectrum is the primary input; the first row of the covariance is the
/// derived real inverse DFT. Eigenvalues must be nonnegative and satisfy the
/// index symmetry `lambda_k = lambda_{d-k}` so the row is real.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CirculantModel {
    dim: usize,
    spectrum: Vec<f64>,
    first_row: Vec<f64>,
}

impl CirculantModel {
    pub fn new(spectrum: Vec<f64>) -> Result<Self> {
        let d = spectrum.len();
        if d < 2 {
            return Err(Error::InvalidParameter(format!(
                "circulant model needs dim >= 2, got {d}"
            )));
        }
        if let Some(k) = spectrum.iter().position(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "spectrum entry {} at index {k} is not a nonnegative real",
                spectrum[k]
            )));
        }
        let scale = spectrum.iter().cloned().fold(0.0f64, f64::max).max(1.0);
        for k in 1..d {
            if (spectrum[k] - spectrum[d - k]).abs() > 1e-12 * scale {
                return Err(Error::InvalidParameter(format!(
                    "spectrum must satisfy lambda_k = lambda_(d-k); mismatch at k={k}: {} vs {}",
                    spectrum[k],
                    spectrum[d - k]
                )));
            }
        }
        let first_row = real_inverse_dft(&spectrum)?;
        Ok(Self {
            dim: d,
            spectrum,
            first_row,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    /// First row of the covariance; `Sigma[i][j] = first_row[(i-j) mod d]`.
    pub fn first_row(&self) -> &[f64] {
        &self.first_row
    }
}

/// Inverse DFT `(1/d) sum_k v_k exp(2 pi i r k / d)` of an index-symmetric
/// real vector; errors if the imaginary residue exceeds tolerance.
///
/// O(d^2) on purpose: inputs are desk-scale and the direct sum keeps the
/// module dependency free.
pub(crate) fn real_inverse_dft(values: &[f64]) -> Result<Vec<f64>> {
    let d = values.len();
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let mut out = Vec::with_capacity(d);
    let step = 2.0 * std::f64::consts::PI / d as f64;
    for r in 0..d {
        let mut re = 0.0;
        let mut im = 0.0;
        for (k, v) in values.iter().enumerate() {
            let angle = step * ((r * k) % d) as f64;
            re += v * angle.cos();
            im += v * angle.sin();
        }
        im /= d as f64;
        if im.abs() > IMAG_RESIDUE_TOL * scale {
            return Err(Error::AsymmetricSpectrum { residue: im.abs() });
        }
        out.push(re / d as f64);
    }
    Ok(out)
}

/// Spectral filter, sensitivity kernel, and decay bounds at one noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub sigma: f64,
    /// `h_k = sigma^2 / (lambda_k + sigma^2)`, each in (0, 1].
    pub h: Vec<f64>,
    /// Real circulant kernel: `q_r` with `Q[i][j] = q_((i-j) mod d)`.
    pub q: Vec<f64>,
    /// Cyclic total variation `sum_k |h_(k+1) - h_k|`.
    pub tv: f64,
    /// `tv / (4n)` for n = 1..floor(d/2), indexed by n-1.
    pub bounds: Vec<f64>,
}

impl SensitivityProfile {
    /// Off-diagonal sensitivity at wrap-around distance n >= 1.
    pub fn q_at_distance(&self, n: usize) -> f64 {
        self.q[n % self.q.len()].abs()
    }
}

pub fn sensitivity_profile(model: &CirculantModel, sigma: f64) -> Result<SensitivityProfile> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!(
            "sensitivity profile requires sigma > 0, got {sigma}"
        )));
    }
    let s2 = sigma * sigma;
    let h: Vec<f64> = model.spectrum.iter().map(|l| s2 / (l + s2)).collect();
    let q = real_inverse_dft(&h)?;
    let d = model.dim;
    let tv: f64 = (0..d).map(|k| (h[(k + 1) % d] - h[k]).abs()).sum();
    let bounds: Vec<f64> = (1..=d / 2).map(|n| tv / (4.0 * n as f64)).collect();
    Ok(SensitivityProfile {
        sigma,
        h,
        q,
        tv,
        bounds,
    })
}

/// `|d[m_sigma]_i / d x_j| = |q_n|` at wrap-around distance
/// `n = min(|i-j|, d-|i-j|)`; the diagonal is excluded.
pub fn offdiag_sensitivity(model: &CirculantModel, sigma: f64, i: usize, j: usize) -> Result<f64> {
    let d = model.dim;
    if i >= d || j >= d {
        return Err(Error::InvalidParameter(format!(
            "indices ({i}, {j}) out of range for dim {d}"
        )));
    }
    if i == j {
        return Err(Error::InvalidParameter(
            "offdiag_sensitivity is defined for i != j only".into(),
        ));
    }
    let profile = sensitivity_profile(model, sigma)?;
    Ok(profile.q_at_distance(wraparound_distance(i, j, d)))
}

pub fn wraparound_distance(i: usize, j: usize, d: usize) -> usize {
    let diff = i.abs_diff(j) % d;
    diff.min(d - diff)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Index of the model in the input family.
    pub model_index: usize,
    pub tv: f64,
    /// Smallest n with |q_n| below [`DECAY_THRESHOLD`], if any.
    pub decay_index: Option<usize>,
}

/// Evaluates TV(h) and the kernel decay index for each model of a family at a
/// shared noise level; rows ordered by TV ascending (ties keep input order).
pub fn spectrum_concentration_sweep(models: &[CirculantModel], sigma: f64) -> Result<Vec<SweepRow>> {
    if models.is_empty() {
        return Err(Error::InvalidParameter("empty model family".into()));
    }
    let d = models[0].dim;
    if models.iter().any(|m| m.dim != d) {
        return Err(Error::InvalidParameter(
            "sweep family members must share dim".into(),
        ));
    }
    let mut rows = Vec::with_capacity(models.len());
    for (idx, m) in models.iter().enumerate() {
        let p = sensitivity_profile(m, sigma)?;
        let decay_index = (1..=d / 2).find(|&n| p.q_at_distance(n) < DECAY_THRESHOLD);
        rows.push(SweepRow {
            model_index: idx,
            tv: p.tv,
            decay_index,
        });
    }
    rows.sort_by(|a, b| a.tv.partial_cmp(&b.tv).unwrap());
    Ok(rows)
}

/// Symmetric power-law spectrum `lambda_k = scale / (1 + min(k, d-k))^exponent`.
pub fn power_law_spectrum(d: usize, exponent: f64, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|k| scale / (1.0 + k.min(d - k) as f64).powf(exponent))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn example_model() -> CirculantModel {
        CirculantModel::new(vec![8.0, 4.0, 2.0, 1.0, 1.0, 1.0, 2.0, 4.0]).unwrap()
    }

    #[test]
    fn flat_spectrum_has_zero_tv_and_local_kernel() {
        let m = CirculantModel::new(vec![3.0; 16]).unwrap();
        let p = sensitivity_profile(&m, 2.0).unwrap();
        assert_eq!(p.tv, 0.0);
        let expected_q0 = 4.0 / (3.0 + 4.0);
        assert!((p.q[0] - expected_q0).abs() < 1e-14);
        for n in 1..16 {
            assert!(p.q[n].abs() < 1e-14, "q[{n}] = {}", p.q[n]);
        }
    }

    #[test]
    fn kernel_matches_dense_solve() {
        let m = example_model();
        let sigma = 1.0;
        let p = sensitivity_profile(&m, sigma).unwrap();
        let d = m.dim();
        let row = m.first_row();
        let cov = DMatrix::from_fn(d, d, |i, j| row[(i + d - j) % d]);
        let shifted = &cov + DMatrix::identity(d, d) * sigma * sigma;
        let inv = shifted.try_inverse().expect("positive definite");
        for i in 0..d {
            for j in 0..d {
                let dense = sigma * sigma * inv[(i, j)];
                let kernel = p.q[(i + d - j) % d];
                assert!(
                    (dense - kernel).abs() < 1e-10,
                    "entry ({i},{j}): {dense} vs {kernel}"
                );
            }
        }
    }

    #[test]
    fn decay_bound_holds_exactly() {
        let m = example_model();
        let p = sensitivity_profile(&m, 1.0).unwrap();
        for n in 1..=4 {
            assert!(
                p.q_at_distance(n) <= p.bounds[n - 1] + 1e-12,
                "n={n}: |q|={} bound={}",
                p.q_at_distance(n),
                p.bounds[n - 1]
            );
        }
    }

    #[test]
    fn kernel_is_circulant_symmetric() {
        let p = sensitivity_profile(&example_model(), 0.7).unwrap();
        let d = p.q.len();
        for n in 1..d {
            assert!((p.q[n] - p.q[d - n]).abs() < 1e-10);
        }
        // q_0 is the mean of h
        let mean_h: f64 = p.h.iter().sum::<f64>() / d as f64;
        assert!((p.q[0] - mean_h).abs() < 1e-12);
    }

    #[test]
    fn sensitivity_depends_only_on_wraparound_distance() {
        let m = example_model();
        let a = offdiag_sensitivity(&m, 1.0, 0, 3).unwrap();
        let b = offdiag_sensitivity(&m, 1.0, 2, 5).unwrap();
        assert_eq!(a, b);
        assert!(offdiag_sensitivity(&m, 1.0, 3, 3).is_err());
    }

    #[test]
    fn flat_spectrum_offdiag_is_zero() {
        let m = CirculantModel::new(vec![5.0; 8]).unwrap();
        for j in 1..8 {
            assert!(offdiag_sensitivity(&m, 1.0, 0, j).unwrap() < 1e-14);
        }
    }

    #[test]
    fn asymmetric_spectrum_rejected() {
        assert!(CirculantModel::new(vec![1.0, 2.0, 3.0, 4.0]).is_err());
    }

    #[test]
    fn locality_increases_as_sigma_vanishes() {
        let m = example_model();
        let sigma = 1e-4 * 8.0f64.sqrt();
        let p = sensitivity_profile(&m, sigma).unwrap();
        for n in 1..=4 {
            assert!(p.q_at_distance(n) < 1e-7, "n={n}: {}", p.q_at_distance(n));
        }
    }

    #[test]
    fn power_law_sweep_orders_by_concentration() {
        let d = 64;
        let models: Vec<CirculantModel> = [1.0, 2.0, 4.0]
            .iter()
            .map(|&p| CirculantModel::new(power_law_spectrum(d, p, 4.0)).unwrap())
            .collect();
        let rows = spectrum_concentration_sweep(&models, 0.5).unwrap();
        // steeper power law = more concentrated spectrum = larger TV and a
        // slower-decaying kernel
        let tv_by_model: Vec<f64> = {
            let mut v = vec![0.0; 3];
            for r in &rows {
                v[r.model_index] = r.tv;
            }
            v
        };
        assert!(tv_by_model[0] < tv_by_model[1]);
        assert!(tv_by_model[1] < tv_by_model[2]);
    }

    #[test]
    fn two_flat_spectra_tie_at_zero_tv() {
        let models = vec![
            CirculantModel::new(vec![1.0; 8]).unwrap(),
            CirculantModel::new(vec![9.0; 8]).unwrap(),
        ];
        let rows = spectrum_concentration_sweep(&models, 1.0).unwrap();
        assert_eq!(rows[0].tv, 0.0);
        assert_eq!(rows[1].tv, 0.0);
        assert_eq!(rows[0].model_index, 0);
    }

    #[test]
    fn spike_spectrum_maximizes_tv_in_family() {
        let d = 32;
        let mut spike = vec![1e-6; d];
        spike[0] = 50.0;
        let family = vec![
            CirculantModel::new(vec![1.0; d]).unwrap(),
            CirculantModel::new(power_law_spectrum(d, 2.0, 50.0)).unwrap(),
            CirculantModel::new(spike).unwrap(),
        ];
        let rows = spectrum_concentration_sweep(&family, 1.0).unwrap();
        assert_eq!(rows.last().unwrap().model_index, 2);
    }
}
