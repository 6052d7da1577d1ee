//! Diagnostic curves: ordered `(sigma, value, stderr, n_samples)` records with
//! CSV import/export. Floats are written in shortest round-trip form so a
//! parsed curve reproduces the in-memory values bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mc::Estimate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub sigma: f64,
    pub value: f64,
    pub stderr: f64,
    pub n_samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticCurve {
    pub name: String,
    pub points: Vec<CurvePoint>,
}

impl DiagnosticCurve {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, sigma: f64, est: Estimate) {
        self.points.push(CurvePoint {
            sigma,
            value: est.value,
            stderr: est.stderr,
            n_samples: est.n_samples,
        });
    }

    pub fn sigmas(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.sigma)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.value)
    }

    /// CSV body: `sigma,value,stderr,n` rows prefixed by `#` comment lines.
    pub fn to_csv(&self, header_comments: &[String]) -> String {
        let mut out = String::new();
        for c in header_comments {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        out.push_str("sigma,value,stderr,n\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{},{}\n", p.sigma, p.value, p.stderr, p.n_samples));
        }
        out
    }

    /// Parses the format written by [`Self::to_csv`], ignoring `#` comments.
    pub fn from_csv(name: impl Into<String>, text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (li, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("sigma,") {
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
            let parse_f = |col: usize| -> Result<f64> {
                fields[col].parse().map_err(|e| Error::Parse {
                    row: li + 1,
                    col: col + 1,
                    msg: format!("{e}"),
                })
            };
            let n_samples: u64 = fields[3].parse().map_err(|e| Error::Parse {
                row: li + 1,
                col: 4,
                msg: format!("{e}"),
            })?;
            points.push(CurvePoint {
                sigma: parse_f(0)?,
                value: parse_f(1)?,
                stderr: parse_f(2)?,
                n_samples,
            });
        }
        Ok(Self {
            name: name.into(),
            points,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let mut c = DiagnosticCurve::new("w");
        c.push(
            0.1 + 0.2,
            Estimate {
                value: 1.0 / 3.0,
                stderr: 2e-17,
                n_samples: 12345,
            },
        );
        c.push(
            80.0,
            Estimate {
                value: f64::MIN_POSITIVE,
                stderr: 0.0,
                n_samples: 1,
            },
        );
        let text = c.to_csv(&["seed: 7".into()]);
        let back = DiagnosticCurve::from_csv("w", &text).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn csv_reports_bad_line() {
        let err = DiagnosticCurve::from_csv("w", "1,2,3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { row: 1, .. }));
    }
}
