//! Gaussian-shell geometry and coverage.
//!
//! A standard normal in dimension d concentrates on the annulus
//! `[r_in, r_out]` with `r_in = sqrt(d - 2 sqrt(cd))` and
//! `r_out = sqrt(d + 2 sqrt(cd) + 2c)`, holding mass at least `1 - 2 e^{-c}`.
//! Shells of radius `sigma * r` around training points model the supervised
//! region at noise level sigma; coverage is the chance a noisy population
//! sample lands in the union of shells, and the two-shell overlap function
//! `Phi_{d,c}(t)` sandwiches it from both sides.
//!
//! Sampling note: every shell/overlap event depends on a Gaussian vector Z
//! only through `(Z_1, |Z|^2)`, whose exact law is (standard normal,
//! Z_1^2 + chi^2_{d-1}). The sample bank stores those pairs, which makes
//! million-sample estimates at image dimension instant and lets one bank be
//! reused across every t argument, matching the shared-sample protocol the
//! bounds assume.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::denoise::{denoise, standard_normal_vec, DenoiserSpec};
use crate::error::{Error, Result};
use crate::mc::{self, Estimate};
use crate::vecmath::squared_distance;

const PURPOSE_BANK: u64 = 0x2000;
const PURPOSE_COVERAGE: u64 = 0x2200;
const PURPOSE_SHELL_LOSS: u64 = 0x2400;
const PURPOSE_PAIR_SAMPLE: u64 = 0x2600;

/// Number of positive knots in a default Phi table.
pub const PHI_TABLE_KNOTS: usize = 120;
/// Smallest positive knot of a default Phi table.
pub const PHI_TABLE_T_MIN: f64 = 1e-3;
/// Cap on enumerated test-point pairs in the coverage upper bound.
const MAX_PAIRS: usize = 20_000;

/// Shell geometry for one (dimension, concentration) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShellSpec {
    pub dim: usize,
    pub c: f64,
    pub r_in: f64,
    pub r_out: f64,
    /// True when `d - 2 sqrt(cd) < 0` so the annulus degenerates to a ball.
    pub degenerate: bool,
}

/// Shell radii per the chi-square concentration bounds; for low dimensions
/// where the inner radicand goes negative, `r_in` clamps to 0 and the
/// degenerate flag is set.
pub fn shell_radii(dim: usize, c: f64) -> Result<ShellSpec> {
    if dim < 2 {
        return Err(Error::InvalidParameter(format!(
            "shell spec requires d >= 2, got {dim}"
        )));
    }
    if !(c > 0.0) {
        return Err(Error::InvalidParameter(format!("c must be positive, got {c}")));
    }
    let d = dim as f64;
    let radicand = d - 2.0 * (c * d).sqrt();
    let degenerate = radicand < 0.0;
    let r_in = if degenerate { 0.0 } else { radicand.sqrt() };
    let r_out = (d + 2.0 * (c * d).sqrt() + 2.0 * c).sqrt();
    Ok(ShellSpec {
        dim,
        c,
        r_in,
        r_out,
        degenerate,
    })
}

impl ShellSpec {
    /// Lower bound on the in-shell mass: `1 - 2 e^{-c}`.
    pub fn guaranteed_mass(&self) -> f64 {
        1.0 - 2.0 * (-self.c).exp()
    }

    pub fn contains_sq_norm(&self, s: f64) -> bool {
        s >= self.r_in * self.r_in && s <= self.r_out * self.r_out
    }

    /// Second moment of the radius under the uniform-annulus law
    /// (density proportional to r^(d-1) on [r_in, r_out]).
    pub fn annulus_second_moment(&self) -> f64 {
        let d = self.dim as f64;
        let rho = self.r_in / self.r_out;
        let num = 1.0 - rho.powf(d + 2.0);
        let den = 1.0 - rho.powf(d);
        self.r_out * self.r_out * (d / (d + 2.0)) * num / den
    }
}

/// Bank of `(Z_1, |Z|^2)` pairs for radial shell events, reusable across
/// every t argument under one seed.
#[derive(Debug, Clone)]
pub struct ShellSampleBank {
    dim: usize,
    z1: Vec<f64>,
    sq_norm: Vec<f64>,
}

impl ShellSampleBank {
    pub fn generate(dim: usize, n_samples: u64, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidParameter(format!(
                "sample bank requires d >= 2, got {dim}"
            )));
        }
        if n_samples < 1 {
            return Err(Error::InvalidParameter("sample bank needs n >= 1".into()));
        }
        let rest = ChiSquared::new((dim - 1) as f64)
            .map_err(|e| Error::InvalidParameter(format!("chi-square setup: {e}")))?;
        let pairs = mc::par_map_seeded(n_samples.div_ceil(mc::BATCH), seed, PURPOSE_BANK, |b, mut rng| {
            let lo = b * mc::BATCH;
            let hi = (lo + mc::BATCH).min(n_samples);
            let mut chunk = Vec::with_capacity((hi - lo) as usize);
            for _ in lo..hi {
                let z1: f64 = StandardNormal.sample(&mut rng);
                let r: f64 = rest.sample(&mut rng);
                chunk.push((z1, z1 * z1 + r));
            }
            chunk
        });
        let mut z1 = Vec::with_capacity(n_samples as usize);
        let mut sq_norm = Vec::with_capacity(n_samples as usize);
        for chunk in pairs {
            for (a, s) in chunk {
                z1.push(a);
                sq_norm.push(s);
            }
        }
        Ok(Self { dim, z1, sq_norm })
    }

    pub fn len(&self) -> usize {
        self.z1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z1.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Fraction of bank samples with `|Z|` inside the shell.
    pub fn membership_rate(&self, spec: &ShellSpec) -> Estimate {
        let hits = self
            .sq_norm
            .iter()
            .filter(|&&s| spec.contains_sq_norm(s))
            .count() as u64;
        mc::rate_estimate(hits, self.len() as u64)
    }

    /// Two-shell overlap at offset t: `P(|Z| in shell and |Z + t e1| in
    /// shell)`, using `|Z + t e1|^2 = |Z|^2 + 2 t Z_1 + t^2`.
    pub fn phi(&self, spec: &ShellSpec, t: f64) -> Result<PhiEstimate> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("phi requires t >= 0, got {t}")));
        }
        let hits = self
            .z1
            .iter()
            .zip(&self.sq_norm)
            .filter(|&(&z1, &s)| {
                spec.contains_sq_norm(s) && spec.contains_sq_norm(s + 2.0 * t * z1 + t * t)
            })
            .count() as u64;
        let est = mc::rate_estimate(hits, self.len() as u64);
        Ok(PhiEstimate {
            t,
            value: est.value,
            stderr: est.stderr,
            n_samples: est.n_samples,
        })
    }
}

/// Monte Carlo estimate of the in-shell probability of a standard normal.
pub fn shell_membership_rate(spec: &ShellSpec, n_samples: u64, seed: u64) -> Result<Estimate> {
    Ok(ShellSampleBank::generate(spec.dim, n_samples, seed)?.membership_rate(spec))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiEstimate {
    pub t: f64,
    pub value: f64,
    pub stderr: f64,
    pub n_samples: u64,
}

/// One-shot Phi estimate; shares its samples with any other call under the
/// same `(dim, n_samples, seed)`.
pub fn phi(spec: &ShellSpec, t: f64, n_samples: u64, seed: u64) -> Result<PhiEstimate> {
    ShellSampleBank::generate(spec.dim, n_samples, seed)?.phi(spec, t)
}

/// Phi evaluated on a fixed knot grid with one shared sample bank, queried by
/// interpolation: linear in t on the segment touching t = 0, linear in log t
/// elsewhere, exactly 0 beyond 2 r_out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiTable {
    pub dim: usize,
    pub c: f64,
    pub r_out: f64,
    knots: Vec<f64>,
    values: Vec<f64>,
    stderrs: Vec<f64>,
    n_samples: u64,
}

impl PhiTable {
    /// Default table: knot at 0 plus [`PHI_TABLE_KNOTS`] log-spaced knots on
    /// `[PHI_TABLE_T_MIN, 2 r_out]`.
    pub fn build(spec: &ShellSpec, n_samples: u64, seed: u64) -> Result<Self> {
        let top = 2.0 * spec.r_out;
        let lo_ln = PHI_TABLE_T_MIN.ln();
        let hi_ln = top.ln();
        let mut knots = vec![0.0];
        for i in 0..PHI_TABLE_KNOTS {
            let f = i as f64 / (PHI_TABLE_KNOTS - 1) as f64;
            knots.push((lo_ln + f * (hi_ln - lo_ln)).exp());
        }
        *knots.last_mut().unwrap() = top;
        Self::build_with_knots(spec, knots, n_samples, seed)
    }

    pub fn build_with_knots(
        spec: &ShellSpec,
        knots: Vec<f64>,
        n_samples: u64,
        seed: u64,
    ) -> Result<Self> {
        if knots.is_empty() || knots.windows(2).any(|w| w[1] <= w[0]) || knots[0] < 0.0 {
            return Err(Error::InvalidParameter(
                "phi knots must be nonnegative and strictly increasing".into(),
            ));
        }
        let bank = ShellSampleBank::generate(spec.dim, n_samples, seed)?;
        let mut values = Vec::with_capacity(knots.len());
        let mut stderrs = Vec::with_capacity(knots.len());
        for &t in &knots {
            let est = bank.phi(spec, t)?;
            values.push(est.value);
            stderrs.push(est.stderr);
        }
        Ok(Self {
            dim: spec.dim,
            c: spec.c,
            r_out: spec.r_out,
            knots,
            values,
            stderrs,
            n_samples,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn stderrs(&self) -> &[f64] {
        &self.stderrs
    }

    pub fn n_samples(&self) -> u64 {
        self.n_samples
    }

    /// Largest per-knot standard error, a conservative proxy for the table's
    /// own Monte Carlo noise at any queried argument.
    pub fn max_stderr(&self) -> f64 {
        self.stderrs.iter().cloned().fold(0.0, f64::max)
    }

    /// Interpolated Phi value. Exactly 0 for t beyond 2 r_out (two shells at
    /// that separation cannot intersect); refuses to extrapolate above the
    /// top knot when the table was built short of 2 r_out.
    pub fn eval(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("phi table requires t >= 0, got {t}")));
        }
        if t > 2.0 * self.r_out {
            return Ok(0.0);
        }
        let top = *self.knots.last().unwrap();
        if t > top {
            return Err(Error::PhiTableRange {
                t,
                lo: self.knots[0],
                hi: top,
            });
        }
        if t <= self.knots[0] {
            // only reachable for tables whose first knot is positive
            if t == self.knots[0] {
                return Ok(self.values[0]);
            }
            return Err(Error::PhiTableRange {
                t,
                lo: self.knots[0],
                hi: top,
            });
        }
        let hi = self.knots.partition_point(|&k| k < t);
        let lo = hi - 1;
        if self.knots[lo] == 0.0 {
            // linear in t against the t = 0 anchor
            let f = (t - self.knots[lo]) / (self.knots[hi] - self.knots[lo]);
            return Ok(self.values[lo] + f * (self.values[hi] - self.values[lo]));
        }
        let f = (t.ln() - self.knots[lo].ln()) / (self.knots[hi].ln() - self.knots[lo].ln());
        Ok(self.values[lo] + f * (self.values[hi] - self.values[lo]))
    }

    /// CSV export: `t,value,stderr,n` with dim/c/r_out header comments.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# dim: {}\n", self.dim));
        out.push_str(&format!("# c: {}\n", self.c));
        out.push_str(&format!("# r_out: {}\n", self.r_out));
        out.push_str("t,value,stderr,n\n");
        for i in 0..self.knots.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.knots[i], self.values[i], self.stderrs[i], self.n_samples
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut dim = None;
        let mut c = None;
        let mut r_out = None;
        let mut knots = Vec::new();
        let mut values = Vec::new();
        let mut stderrs = Vec::new();
        let mut n_samples = 0u64;
        for (li, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("dim:") {
                    dim = v.trim().parse::<usize>().ok();
                } else if let Some(v) = rest.strip_prefix("c:") {
                    c = v.trim().parse::<f64>().ok();
                } else if let Some(v) = rest.strip_prefix("r_out:") {
                    r_out = v.trim().parse::<f64>().ok();
                }
                continue;
            }
            if line.is_empty() || line.starts_with("t,") {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    row: li + 1,
                    col: 1,
                    msg: format!("expected 4 fields, got {}", fields.len()),
                });
            }
            let parse = |col: usize| -> Result<f64> {
                fields[col].parse().map_err(|e| Error::Parse {
                    row: li + 1,
                    col: col + 1,
                    msg: format!("{e}"),
                })
            };
            knots.push(parse(0)?);
            values.push(parse(1)?);
            stderrs.push(parse(2)?);
            n_samples = fields[3].parse().map_err(|e| Error::Parse {
                row: li + 1,
                col: 4,
                msg: format!("{e}"),
            })?;
        }
        let (dim, c, r_out) = match (dim, c, r_out) {
            (Some(d), Some(c), Some(r)) => (d, c, r),
            _ => {
                return Err(Error::MalformedHeader(
                    "phi table CSV is missing dim/c/r_out comments".into(),
                ))
            }
        };
        if knots.is_empty() {
            return Err(Error::MalformedHeader("phi table CSV has no rows".into()));
        }
        Ok(Self {
            dim,
            c,
            r_out,
            knots,
            values,
            stderrs,
            n_samples,
        })
    }
}

/// Monte Carlo Gaussian-shell coverage: the fraction of `(test point X,
/// noise Z)` pairs with `X + sigma Z` inside at least one shell around a
/// dataset row. `n_noise` counts draws per test point.
pub fn coverage(
    dataset: &Dataset,
    spec: &ShellSpec,
    test_points: &Dataset,
    sigma: f64,
    n_noise: u64,
    seed: u64,
) -> Result<Estimate> {
    if dataset.dim() != test_points.dim() {
        return Err(Error::DimensionMismatch {
            expected: dataset.dim(),
            got: test_points.dim(),
            context: "coverage test points".into(),
        });
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("coverage requires sigma > 0, got {sigma}")));
    }
    if n_noise < 1 {
        return Err(Error::InvalidParameter("coverage needs n_noise >= 1".into()));
    }
    let n_test = test_points.n_points();
    // candidate centers ordered by distance to the clean test point so the
    // any-shell scan hits early; ordering does not change the result
    let orders: Vec<Vec<u32>> = (0..n_test)
        .map(|ti| {
            let tp = test_points.row(ti);
            let mut idx: Vec<u32> = (0..dataset.n_points() as u32).collect();
            let dists: Vec<f64> = dataset.rows().map(|r| squared_distance(tp, r)).collect();
            idx.sort_by(|&a, &b| dists[a as usize].partial_cmp(&dists[b as usize]).unwrap());
            idx
        })
        .collect();
    let lo = sigma * spec.r_in;
    let hi = sigma * spec.r_out;
    let (lo2, hi2) = (lo * lo, hi * hi);
    let total = n_test as u64 * n_noise;
    let d = dataset.dim();
    Ok(mc::mc_rate(total, seed, PURPOSE_COVERAGE, |rng, i| {
        let ti = (i / n_noise) as usize;
        let x = test_points.row(ti);
        let mut noisy = Vec::with_capacity(d);
        for &v in x {
            let z: f64 = StandardNormal.sample(rng);
            noisy.push(v + sigma * z);
        }
        orders[ti].iter().any(|&ci| {
            let sq = squared_distance(&noisy, dataset.row(ci as usize));
            sq >= lo2 && sq <= hi2
        })
    }))
}

/// Coverage sandwich per the two-shell bounds: the lower bound averages
/// `Phi(d_1NN(X)/sigma)` over test points; the upper bound is
/// `2 e^{-c} + N * mean_pairs Phi(|X - X'| / sigma)`, clamped to [0, 1].
pub fn coverage_bounds(
    dataset: &Dataset,
    spec: &ShellSpec,
    test_points: &Dataset,
    sigma: f64,
    phi_table: &PhiTable,
    seed: u64,
) -> Result<(Estimate, Estimate)> {
    if dataset.dim() != test_points.dim() {
        return Err(Error::DimensionMismatch {
            expected: dataset.dim(),
            got: test_points.dim(),
            context: "coverage bound test points".into(),
        });
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("bounds require sigma > 0, got {sigma}")));
    }
    let n_test = test_points.n_points();
    // lower: mean of Phi(d_1NN / sigma) over test points
    let mut lower_vals = Vec::with_capacity(n_test);
    for tp in test_points.rows() {
        let d1 = dataset
            .rows()
            .map(|r| squared_distance(tp, r))
            .fold(f64::INFINITY, f64::min)
            .sqrt();
        lower_vals.push(phi_table.eval(d1 / sigma)?);
    }
    let lower = mean_estimate(&lower_vals);

    // upper: all unordered test pairs, or a seeded subsample when too many
    let mut pair_vals = Vec::new();
    let n_pairs_all = n_test * n_test.saturating_sub(1) / 2;
    if n_pairs_all == 0 {
        return Err(Error::TooFewPoints { min: 2, got: n_test });
    }
    if n_pairs_all <= MAX_PAIRS {
        for i in 0..n_test {
            for j in (i + 1)..n_test {
                let dist = squared_distance(test_points.row(i), test_points.row(j)).sqrt();
                pair_vals.push(phi_table.eval(dist / sigma)?);
            }
        }
    } else {
        let mut rng = mc::rng_for(seed, PURPOSE_PAIR_SAMPLE, 0);
        for _ in 0..MAX_PAIRS {
            let i = rng.random_range(0..n_test);
            let mut j = rng.random_range(0..n_test - 1);
            if j >= i {
                j += 1;
            }
            let dist = squared_distance(test_points.row(i), test_points.row(j)).sqrt();
            pair_vals.push(phi_table.eval(dist / sigma)?);
        }
    }
    let pair_mean = mean_estimate(&pair_vals);
    let n = dataset.n_points() as f64;
    let upper_raw = 2.0 * (-spec.c).exp() + n * pair_mean.value;
    let upper = Estimate {
        value: upper_raw.clamp(0.0, 1.0),
        stderr: n * pair_mean.stderr,
        n_samples: pair_mean.n_samples,
    };
    Ok((lower, upper))
}

fn mean_estimate(values: &[f64]) -> Estimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stderr = if values.len() > 1 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Estimate {
        value: mean,
        stderr,
        n_samples: values.len() as u64,
    }
}

/// Largest sigma below which all shells around dataset rows are pairwise
/// disjoint: `min pairwise distance / (2 r_out)`.
pub fn disjointness_sigma(dataset: &Dataset, spec: &ShellSpec) -> Result<f64> {
    Ok(dataset.min_pairwise_distance()? / (2.0 * spec.r_out))
}

/// Noise law for the shell-only objective. The disjoint-shell zero-loss
/// statement idealizes the corruption as uniform on the annulus; the Gaussian
/// law is reported alongside it without an equivalence claim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShellNoise {
    UniformAnnulus,
    Gaussian,
}

/// Shell-only denoising objective for an arbitrary map
/// `y -> denoised(y)`: `E ||f(x_i + sigma Z) - x_i||^2` with i uniform over
/// rows and Z from the chosen law.
pub fn shell_only_loss_fn<F>(
    dataset: &Dataset,
    spec: &ShellSpec,
    sigma: f64,
    n_samples: u64,
    seed: u64,
    noise: ShellNoise,
    f: F,
) -> Result<Estimate>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("shell loss requires sigma > 0, got {sigma}")));
    }
    if n_samples < 1 {
        return Err(Error::InvalidParameter("shell loss needs n >= 1".into()));
    }
    let d = dataset.dim();
    let df = d as f64;
    // fraction of annulus volume inside r_in, in a form that cannot overflow
    let volume_ratio = if spec.r_in == 0.0 {
        0.0
    } else {
        (df * (spec.r_in / spec.r_out).ln()).exp()
    };
    Ok(mc::mc_mean(n_samples, seed, PURPOSE_SHELL_LOSS, |rng, _| {
        let i = rng.random_range(0..dataset.n_points());
        let x = dataset.row(i);
        let z = match noise {
            ShellNoise::Gaussian => standard_normal_vec(rng, d),
            ShellNoise::UniformAnnulus => {
                let mut dir = standard_normal_vec(rng, d);
                let nrm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let u: f64 = rng.random();
                let radius =
                    spec.r_out * (volume_ratio + u * (1.0 - volume_ratio)).powf(1.0 / df);
                for v in dir.iter_mut() {
                    *v *= radius / nrm;
                }
                dir
            }
        };
        let noisy: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a + sigma * b).collect();
        let out = f(&noisy);
        squared_distance(&out, x)
    }))
}

/// Shell-only objective of a [`DenoiserSpec`].
pub fn shell_only_loss(
    dataset: &Dataset,
    spec: &ShellSpec,
    denoiser: &DenoiserSpec,
    sigma: f64,
    n_samples: u64,
    seed: u64,
    noise: ShellNoise,
) -> Result<Estimate> {
    shell_only_loss_fn(dataset, spec, sigma, n_samples, seed, noise, |y| {
        denoise(denoiser, y, sigma).expect("denoiser covers sigma")
    })
}

/// Maps any point to the nearest dataset row: on disjoint shells this is a
/// global minimizer of the shell-only objective.
pub fn nearest_center_projector(dataset: &Dataset) -> impl Fn(&[f64]) -> Vec<f64> + Sync + '_ {
    |y: &[f64]| {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, r) in dataset.rows().enumerate() {
            let d = squared_distance(y, r);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        dataset.row(best).to_vec()
    }
}
