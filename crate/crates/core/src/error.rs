//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch: expected {expected}, got {got}{}", context_suffix(.context))]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("domain violation: {0}")]
    Domain(String),

    #[error("sigma {sigma} outside composite denoiser coverage [{lo}, {hi}]")]
    CompositeCoverage { sigma: f64, lo: f64, hi: f64 },

    #[error("phi table does not cover t = {t} (knot range [{lo}, {hi}]); extrapolation refused")]
    PhiTableRange { t: f64, lo: f64, hi: f64 },

    #[error("non-finite state at integration step {step} (sigma = {sigma})")]
    NonFiniteState { step: usize, sigma: f64 },

    #[error("dataset must contain at least {min} points, got {got}")]
    TooFewPoints { min: usize, got: usize },

    #[error("no danger zone present in regime report")]
    NoDangerZone,

    #[error("spectrum is not symmetric: kernel imaginary residue {residue} exceeds tolerance")]
    AsymmetricSpectrum { residue: f64 },
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

pub type Result<T> = std::result::Result<T, Error>;
