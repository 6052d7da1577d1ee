//! Dataset representation, file ingestion, synthetic generators, and
//! brute-force nearest-neighbor distances.
//!
//! Every estimator in this crate borrows a read-only [`Dataset`]. Datasets are
//! immutable after construction and safe to share across workers.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral;
use crate::vecmath::{distance, squared_distance};

/// A finite point set: `n_points` rows of dimension `dim`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n_points: usize,
    dim: usize,
    values: Vec<f64>,
    label: String,
}

impl Dataset {
    /// Builds a dataset from row-major values, rejecting non-finite entries.
    pub fn new(
        n_points: usize,
        dim: usize,
        values: Vec<f64>,
        label: impl Into<String>,
    ) -> Result<Self> {
        if n_points == 0 || dim == 0 {
            return Err(Error::InvalidParameter(
                "dataset must have n_points >= 1 and dim >= 1".into(),
            ));
        }
        if values.len() != n_points * dim {
            return Err(Error::DimensionMismatch {
                expected: n_points * dim,
                got: values.len(),
                context: "dataset value buffer".into(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim + 1,
                col: pos % dim + 1,
            });
        }
        Ok(Self {
            n_points,
            dim,
            values,
            label: label.into(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], label: impl Into<String>) -> Result<Self> {
        let n = rows.len();
        let dim = rows.first().map_or(0, |r| r.len());
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                    context: format!("row {}", i + 1),
                });
            }
        }
        Self::new(n, dim, rows.concat(), label)
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Sample mean of the rows.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for r in self.rows() {
            for (mi, x) in m.iter_mut().zip(r) {
                *mi += x;
            }
        }
        let n = self.n_points as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Biased (1/N) sample covariance, row-major `dim x dim`.
    pub fn covariance(&self) -> Vec<f64> {
        let mu = self.mean();
        let d = self.dim;
        let mut cov = vec![0.0; d * d];
        for r in self.rows() {
            for i in 0..d {
                let ci = r[i] - mu[i];
                for j in i..d {
                    cov[i * d + j] += ci * (r[j] - mu[j]);
                }
            }
        }
        let n = self.n_points as f64;
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / n;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        cov
    }

    /// Largest pairwise distance.
    pub fn diameter(&self) -> f64 {
        let mut best: f64 = 0.0;
        for i in 0..self.n_points {
            for j in (i + 1)..self.n_points {
                best = best.max(squared_distance(self.row(i), self.row(j)));
            }
        }
        best.sqrt()
    }

    /// Smallest distance between two distinct rows. Requires N >= 2.
    pub fn min_pairwise_distance(&self) -> Result<f64> {
        if self.n_points < 2 {
            return Err(Error::TooFewPoints {
                min: 2,
                got: self.n_points,
            });
        }
        let mut best = f64::INFINITY;
        for i in 0..self.n_points {
            for j in (i + 1)..self.n_points {
                best = best.min(squared_distance(self.row(i), self.row(j)));
            }
        }
        Ok(best.sqrt())
    }

    /// Distances to the nearest and second-nearest rows from an arbitrary
    /// query point (the query itself is not excluded). Requires N >= 2.
    pub fn nearest_two_distances(&self, query: &[f64]) -> Result<(f64, f64)> {
        if self.n_points < 2 {
            return Err(Error::TooFewPoints {
                min: 2,
                got: self.n_points,
            });
        }
        self.check_dim(query)?;
        let mut d1 = f64::INFINITY;
        let mut d2 = f64::INFINITY;
        for r in self.rows() {
            let d = squared_distance(query, r);
            if d < d1 {
                d2 = d1;
                d1 = d;
            } else if d < d2 {
                d2 = d;
            }
        }
        Ok((d1.sqrt(), d2.sqrt()))
    }

    /// Affine per-coordinate rescale mapping `[src_lo, src_hi]` onto `[-1, 1]`.
    pub fn rescaled(&self, src_lo: f64, src_hi: f64) -> Result<Dataset> {
        if !(src_hi > src_lo) {
            return Err(Error::InvalidParameter(format!(
                "rescale range [{src_lo}, {src_hi}] is empty"
            )));
        }
        let scale = 2.0 / (src_hi - src_lo);
        let values = self
            .values
            .iter()
            .map(|v| (v - src_lo) * scale - 1.0)
            .collect();
        Dataset::new(self.n_points, self.dim, values, self.label.clone())
    }

    pub(crate) fn check_dim(&self, query: &[f64]) -> Result<()> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
                context: "query vector".into(),
            });
        }
        Ok(())
    }
}

/// On-disk dataset formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    /// Comma-separated values, one row per point, no header.
    Csv,
    /// 16-byte header (little-endian u64 `n_points`, `dim`) followed by
    /// `n_points * dim` little-endian f64 values.
    RawF64,
}

pub fn load_dataset(path: impl AsRef<Path>, format: Format) -> Result<Dataset> {
    let path = path.as_ref();
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let io_err = |source| Error::Io {
        path: path.display().to_string(),
        source,
    };
    match format {
        Format::Csv => {
            let text = fs::read_to_string(path).map_err(io_err)?;
            parse_csv(&text, label)
        }
        Format::RawF64 => {
            let bytes = fs::read(path).map_err(io_err)?;
            parse_raw_f64(&bytes, label)
        }
    }
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>, format: Format) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.display().to_string(),
        source,
    };
    match format {
        Format::Csv => {
            let mut out = String::new();
            for r in dataset.rows() {
                let row: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
                out.push_str(&row.join(","));
                out.push('\n');
            }
            fs::write(path, out).map_err(io_err)
        }
        Format::RawF64 => {
            let mut f = fs::File::create(path).map_err(io_err)?;
            f.write_all(&(dataset.n_points as u64).to_le_bytes())
                .map_err(io_err)?;
            f.write_all(&(dataset.dim as u64).to_le_bytes())
                .map_err(io_err)?;
            let mut buf = Vec::with_capacity(dataset.values.len() * 8);
            for v in &dataset.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&buf).map_err(io_err)
        }
    }
}

fn parse_csv(text: &str, label: String) -> Result<Dataset> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dim = None;
    for (li, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (ci, field) in line.split(',').enumerate() {
            let v: f64 = field.trim().parse().map_err(|e| Error::Parse {
                row: li + 1,
                col: ci + 1,
                msg: format!("{e}: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row: li + 1,
                    col: ci + 1,
                });
            }
            row.push(v);
        }
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: row.len(),
                    context: format!("row {}", li + 1),
                })
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::MalformedHeader("empty CSV file".into()));
    }
    Dataset::from_rows(&rows, label)
}

fn parse_raw_f64(bytes: &[u8], label: String) -> Result<Dataset> {
    if bytes.len() < 16 {
        return Err(Error::MalformedHeader(format!(
            "raw file too short for header: {} bytes",
            bytes.len()
        )));
    }
    let n = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let expected = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_mul(8))
        .ok_or_else(|| Error::MalformedHeader(format!("header overflow: n={n}, dim={d}")))?;
    if bytes.len() - 16 != expected {
        return Err(Error::MalformedHeader(format!(
            "payload is {} bytes, header (n={n}, dim={d}) implies {expected}",
            bytes.len() - 16
        )));
    }
    let mut values = Vec::with_capacity(n * d);
    for (i, chunk) in bytes[16..].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite {
                row: i / d + 1,
                col: i % d + 1,
            });
        }
        values.push(v);
    }
    Dataset::new(n, d, values, label)
}

/// Sorted distances from one query point to every dataset row.
///
/// For member queries the smallest entry is the self-distance 0, so
/// `d_knn(1) = 0` and `d_knn(2)` is the distance to the nearest *other* row,
/// matching the k-th nearest neighbor convention used throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceProfile {
    distances: Vec<f64>,
}

impl DistanceProfile {
    /// Distance to the k-th nearest point, 1-indexed.
    pub fn d_knn(&self, k: usize) -> f64 {
        assert!(k >= 1 && k <= self.distances.len(), "k out of range");
        self.distances[k - 1]
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }
}

/// Brute-force distance profile. `is_member` asserts the query is one of the
/// rows (duplicate rows are legal, so membership is an explicit flag rather
/// than a distance-zero inference).
pub fn distance_profile(
    dataset: &Dataset,
    query: &[f64],
    is_member: bool,
) -> Result<DistanceProfile> {
    dataset.check_dim(query)?;
    let mut distances: Vec<f64> = dataset.rows().map(|r| distance(query, r)).collect();
    if is_member && !distances.iter().any(|&d| d == 0.0) {
        return Err(Error::InvalidParameter(
            "query flagged as member but matches no dataset row".into(),
        ));
    }
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(DistanceProfile { distances })
}

/// Generator family for desk-scale synthetic datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Equal-weight isotropic Gaussian mixture; component chosen uniformly
    /// per point.
    GaussianMixture {
        means: Vec<Vec<f64>>,
        scales: Vec<f64>,
    },
    /// N/2 points at +(separation/2)*e1 followed by N/2 at the mirror point,
    /// plus isotropic Gaussian noise of scale `spread`.
    TwoCluster { separation: f64, spread: f64 },
    /// Uniform on the centered cube of the given side length.
    UniformCube { side: f64 },
    /// Stationary Gaussian with circulant covariance given by its DFT
    /// spectrum (nonnegative, index-symmetric).
    CirculantStationary { spectrum: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n_points: usize,
    pub dim: usize,
    pub seed: u64,
}

/// Deterministic synthetic dataset: a pure function of `(spec, seed)`.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n_points == 0 || spec.dim == 0 {
        return Err(Error::InvalidParameter(
            "synthetic spec needs n_points >= 1 and dim >= 1".into(),
        ));
    }
    let n = spec.n_points;
    let d = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Vec::with_capacity(n * d);
    let label;
    match &spec.kind {
        SyntheticKind::GaussianMixture { means, scales } => {
            if means.is_empty() || means.len() != scales.len() {
                return Err(Error::InvalidParameter(
                    "gaussian-mixture needs one scale per mean".into(),
                ));
            }
            for (k, m) in means.iter().enumerate() {
                if m.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: m.len(),
                        context: format!("mixture mean {k}"),
                    });
                }
            }
            for _ in 0..n {
                let k = rng.random_range(0..means.len());
                for j in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    values.push(means[k][j] + scales[k] * z);
                }
            }
            label = "gaussian-mixture";
        }
        SyntheticKind::TwoCluster { separation, spread } => {
            let half = separation / 2.0;
            let n_pos = n / 2 + n % 2;
            for i in 0..n {
                let center = if i < n_pos { half } else { -half };
                for j in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let base = if j == 0 { center } else { 0.0 };
                    values.push(base + spread * z);
                }
            }
            label = "two-cluster";
        }
        SyntheticKind::UniformCube { side } => {
            let half = side / 2.0;
            for _ in 0..n * d {
                values.push(rng.random_range(-half..=half));
            }
            label = "uniform-cube";
        }
        SyntheticKind::CirculantStationary { spectrum } => {
            // x = S g with S the circulant square root of the covariance;
            // row generator of S is the real inverse DFT of sqrt(spectrum).
            if spectrum.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: spectrum.len(),
                    context: "circulant spectrum".into(),
                });
            }
            if let Some(k) = spectrum.iter().position(|&l| l < 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "invalid spectrum: negative eigenvalue {} at index {k}",
                    spectrum[k]
                )));
            }
            let sqrt_spec: Vec<f64> = spectrum.iter().map(|l| l.sqrt()).collect();
            let s_row = spectral::real_inverse_dft(&sqrt_spec)?;
            for _ in 0..n {
                let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                for i in 0..d {
                    let mut acc = 0.0;
                    for (j, gj) in g.iter().enumerate() {
                        acc += s_row[(i + d - j) % d] * gj;
                    }
                    values.push(acc);
                }
            }
            label = "circulant-stationary";
        }
    }
    Dataset::new(n, d, values, label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_set() -> Dataset {
        Dataset::from_rows(&[vec![0.0], vec![3.0], vec![4.0]], "line").unwrap()
    }

    #[test]
    fn csv_parse_basic() {
        let ds = parse_csv("0,0,0\n1,1,1", "t".into()).unwrap();
        assert_eq!(ds.n_points(), 2);
        assert_eq!(ds.dim(), 3);
        assert_eq!(ds.row(1), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        let err = parse_csv("1,2\n3", "t".into()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn csv_reports_parse_position() {
        let err = parse_csv("1,2\n3,x", "t".into()).unwrap_err();
        match err {
            Error::Parse { row, col, .. } => {
                assert_eq!((row, col), (2, 2));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn raw_single_value_round_trip() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&0.5f64.to_le_bytes());
        let ds = parse_raw_f64(&bytes, "t".into()).unwrap();
        assert_eq!(ds.n_points(), 1);
        assert_eq!(ds.row(0), &[0.5]);
    }

    #[test]
    fn raw_rejects_short_payload() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&0.5f64.to_le_bytes());
        assert!(matches!(
            parse_raw_f64(&bytes, "t".into()),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn raw_reports_nonfinite_position() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&1.0f64.to_le_bytes());
        bytes.extend_from_slice(&f64::NAN.to_le_bytes());
        match parse_raw_f64(&bytes, "t".into()) {
            Err(Error::NonFinite { row, col }) => assert_eq!((row, col), (1, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn profile_member_and_nonmember() {
        let ds = line_set();
        let member = distance_profile(&ds, &[0.0], true).unwrap();
        assert_eq!(member.distances(), &[0.0, 3.0, 4.0]);
        assert_eq!(member.d_knn(1), 0.0);
        let non = distance_profile(&ds, &[1.0], false).unwrap();
        assert_eq!(non.distances(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn profile_member_flag_requires_exact_row() {
        let ds = line_set();
        assert!(distance_profile(&ds, &[1.0], true).is_err());
    }

    #[test]
    fn profile_is_row_order_invariant() {
        let a =
            Dataset::from_rows(&[vec![0.0, 1.0], vec![2.0, 2.0], vec![5.0, -1.0]], "a").unwrap();
        let b =
            Dataset::from_rows(&[vec![5.0, -1.0], vec![0.0, 1.0], vec![2.0, 2.0]], "b").unwrap();
        let q = [1.0, 0.5];
        assert_eq!(
            distance_profile(&a, &q, false).unwrap(),
            distance_profile(&b, &q, false).unwrap()
        );
    }

    #[test]
    fn member_d2nn_is_min_over_other_rows() {
        let ds = Dataset::from_rows(&[vec![0.0], vec![0.0], vec![7.0]], "dup").unwrap();
        let p = distance_profile(&ds, &[0.0], true).unwrap();
        // duplicate row: the nearest *other* row is at distance zero
        assert_eq!(p.d_knn(2), 0.0);
    }

    #[test]
    fn two_cluster_zero_noise_is_exact() {
        let spec = SyntheticSpec {
            kind: SyntheticKind::TwoCluster {
                separation: 20.0,
                spread: 0.0,
            },
            n_points: 4,
            dim: 2,
            seed: 1,
        };
        let ds = synthesize(&spec).unwrap();
        assert_eq!(ds.row(0), &[10.0, 0.0]);
        assert_eq!(ds.row(1), &[10.0, 0.0]);
        assert_eq!(ds.row(2), &[-10.0, 0.0]);
        assert_eq!(ds.row(3), &[-10.0, 0.0]);
    }

    #[test]
    fn synthesize_is_deterministic() {
        let spec = SyntheticSpec {
            kind: SyntheticKind::GaussianMixture {
                means: vec![vec![0.0; 4], vec![5.0; 4]],
                scales: vec![1.0, 0.5],
            },
            n_points: 64,
            dim: 4,
            seed: 99,
        };
        assert_eq!(synthesize(&spec).unwrap(), synthesize(&spec).unwrap());
    }

    #[test]
    fn mixture_mean_matches_spec_mean() {
        // Law of large numbers: sample mean within 4 stderr of the mixture mean.
        let spec = SyntheticSpec {
            kind: SyntheticKind::GaussianMixture {
                means: vec![vec![1.0, -2.0], vec![3.0, 0.0]],
                scales: vec![0.7, 0.7],
            },
            n_points: 10_000,
            dim: 2,
            seed: 5,
        };
        let ds = synthesize(&spec).unwrap();
        let mean = ds.mean();
        // per-coordinate sd: sqrt(scale^2 + between-component variance)
        let sd = [(0.49f64 + 1.0).sqrt(), (0.49f64 + 1.0).sqrt()];
        let stderr = [sd[0] / 100.0, sd[1] / 100.0];
        assert!(
            (mean[0] - 2.0).abs() < 4.0 * stderr[0],
            "mean[0] = {}",
            mean[0]
        );
        assert!(
            (mean[1] + 1.0).abs() < 4.0 * stderr[1],
            "mean[1] = {}",
            mean[1]
        );
    }

    #[test]
    fn circulant_rejects_negative_eigenvalue() {
        let spec = SyntheticSpec {
            kind: SyntheticKind::CirculantStationary {
                spectrum: vec![1.0, 2.0, -0.5, 2.0],
            },
            n_points: 3,
            dim: 4,
            seed: 0,
        };
        assert!(matches!(synthesize(&spec), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn circulant_covariance_matches_spectrum() {
        let spectrum = vec![4.0, 2.0, 1.0, 2.0];
        let spec = SyntheticSpec {
            kind: SyntheticKind::CirculantStationary {
                spectrum: spectrum.clone(),
            },
            n_points: 40_000,
            dim: 4,
            seed: 11,
        };
        let ds = synthesize(&spec).unwrap();
        let cov = ds.covariance();
        let first_row = spectral::real_inverse_dft(&spectrum).unwrap();
        // empirical Cov[0][j] should approach the circulant generator
        for j in 0..4 {
            assert!(
                (cov[j] - first_row[j]).abs() < 0.1,
                "cov[0][{j}] = {} vs {}",
                cov[j],
                first_row[j]
            );
        }
    }

    #[test]
    fn nonfinite_rows_rejected() {
        assert!(matches!(
            Dataset::from_rows(&[vec![f64::INFINITY]], "bad"),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn nearest_two_tracks_smallest_pair() {
        let ds = line_set();
        let (d1, d2) = ds.nearest_two_distances(&[3.2]).unwrap();
        assert!((d1 - 0.2).abs() < 1e-15);
        assert!((d2 - 0.8).abs() < 1e-15);
    }

    #[test]
    fn rescale_maps_range_to_unit_interval() {
        let ds = Dataset::from_rows(&[vec![0.0, 255.0]], "img").unwrap();
        let r = ds.rescaled(0.0, 255.0).unwrap();
        assert_eq!(r.row(0), &[-1.0, 1.0]);
    }
}
