//! Per-epoch signal-model likelihoods and their CSV format.
//!
//! The CSV carries the header `W,REM,N1,N2,N3` and one probability row per
//! epoch. Rows are renormalized on load; a deviation from unit sum above
//! 1e-6 logs a warning and above 1e-3 is an error.

use crate::error::{Error, Result};
use crate::stage::{StageDistribution, ALL_STAGES, STAGE_COUNT};
use std::fmt::Write as _;
use std::path::Path;

/// Row-sum deviation below which a row is accepted silently.
const SUM_WARN_THRESHOLD: f64 = 1e-6;
/// Row-sum deviation at or above which a row is rejected.
const SUM_ERROR_THRESHOLD: f64 = 1e-3;

/// A `T x 5` matrix of per-epoch stage probabilities from a signal model.
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodMatrix {
    rows: Vec<StageDistribution>,
}

impl LikelihoodMatrix {
    /// Wraps per-epoch rows; at least one row is required.
    pub fn new(rows: Vec<StageDistribution>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("likelihood matrix has no rows".into()));
        }
        Ok(LikelihoodMatrix { rows })
    }

    pub fn rows(&self) -> &[StageDistribution] {
        &self.rows
    }

    pub fn row(&self, epoch: usize) -> &StageDistribution {
        &self.rows[epoch]
    }

    /// Number of epochs; always at least 1.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        false // non-empty by construction
    }

    /// Renders the CSV text format.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("W,REM,N1,N2,N3\n");
        for row in &self.rows {
            let probs = row.probs();
            for (i, p) in probs.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{p}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the CSV text format; `origin` labels parse errors.
    pub fn parse_csv(input: &str, origin: &str) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let Some((_, header)) = lines.next() else {
            return Err(Error::parse(origin, 1, "empty input"));
        };
        let expected: Vec<&str> = ALL_STAGES.iter().map(|s| s.token()).collect();
        let got: Vec<&str> = header.split(',').map(str::trim).collect();
        if got != expected {
            return Err(Error::parse(
                origin,
                1,
                format!("expected header \"W,REM,N1,N2,N3\", found {header:?}"),
            ));
        }

        let mut rows = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != STAGE_COUNT {
                return Err(Error::parse(
                    origin,
                    line_no,
                    format!("expected {STAGE_COUNT} fields, found {}", fields.len()),
                ));
            }
            let mut probs = [0.0f64; STAGE_COUNT];
            for (i, field) in fields.iter().enumerate() {
                let value: f64 = field.parse().map_err(|_| {
                    Error::parse(origin, line_no, format!("invalid float {field:?}"))
                })?;
                if !value.is_finite() || value < 0.0 {
                    return Err(Error::parse(
                        origin,
                        line_no,
                        format!("probability {value} must be finite and >= 0"),
                    ));
                }
                probs[i] = value;
            }
            let sum: f64 = probs.iter().sum();
            let deviation = (sum - 1.0).abs();
            if deviation >= SUM_ERROR_THRESHOLD {
                return Err(Error::parse(
                    origin,
                    line_no,
                    format!("row sums to {sum}, more than {SUM_ERROR_THRESHOLD} from 1"),
                ));
            }
            if deviation > SUM_WARN_THRESHOLD {
                log::warn!("{origin}:{line_no}: row sums to {sum}; renormalizing");
            }
            // Renormalize unless the row is already exact; leaving exact rows
            // untouched keeps save/load round trips bit-identical.
            let row = if deviation <= 1e-12 {
                StageDistribution::new_unchecked(probs)
            } else {
                StageDistribution::from_weights(probs)
                    .map_err(|e| Error::parse(origin, line_no, e.to_string()))?
            };
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::parse(origin, 1, "no probability rows"));
        }
        Ok(LikelihoodMatrix { rows })
    }

    pub fn read_csv_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text, &path.display().to_string())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

impl std::ops::Index<usize> for LikelihoodMatrix {
    type Output = StageDistribution;

    fn index(&self, epoch: usize) -> &StageDistribution {
        &self.rows[epoch]
    }
}
