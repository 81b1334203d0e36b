//! Per-step metric rows and their CSV form.
//!
//! The column contract is versioned and bit-exact: floats are written in
//! shortest round-trip form, so identical runs produce identical bytes and
//! a parsed log reproduces the original values exactly.

use crate::error::{Error, Result};
use crate::harness::config::AdaptationMode;

/// Leading fixed columns; one `p{i}` column per actuator follows.
pub const METRICS_COLUMNS: [&str; 7] = [
    "t",
    "seed",
    "mode",
    "reward",
    "control_error",
    "a0_norm",
    "ac_norm",
];

/// One environment step as logged by the runner.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub t: u64,
    pub seed: u64,
    pub mode: AdaptationMode,
    pub reward: f64,
    /// Squared prediction error `||z_hat - z||^2` of the step's outcome
    /// against the model's prediction under the base action.
    pub control_error: f64,
    pub a0_norm: f64,
    pub ac_norm: f64,
    pub p: Vec<f64>,
}

impl MetricsRow {
    pub fn is_finite(&self) -> bool {
        [self.reward, self.control_error, self.a0_norm, self.ac_norm]
            .iter()
            .all(|x| x.is_finite())
            && self.p.iter().all(|x| x.is_finite())
    }
}

/// Ordered per-step rows, exactly one per environment step. The action
/// dimension is carried separately so an empty log still knows its header.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub action_dim: usize,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new(action_dim: usize) -> Self {
        Self {
            action_dim,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if row.p.len() != self.action_dim {
            return Err(Error::DimMismatch {
                context: "metrics row p",
                expected: self.action_dim,
                got: row.p.len(),
            });
        }
        if row.control_error < 0.0 {
            return Err(Error::InvalidSpec(format!(
                "negative control_error {} at t={}",
                row.control_error, row.t
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn header(&self) -> String {
        let mut cols: Vec<String> = METRICS_COLUMNS.iter().map(|c| c.to_string()).collect();
        for i in 0..self.action_dim {
            cols.push(format!("p{i}"));
        }
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}",
                r.t, r.seed, r.mode, r.reward, r.control_error, r.a0_norm, r.ac_norm
            ));
            for v in &r.p {
                out.push(',');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty metrics file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < METRICS_COLUMNS.len()
            || cols[..METRICS_COLUMNS.len()] != METRICS_COLUMNS[..]
        {
            return Err(Error::Parse(format!("unrecognized metrics header: {header}")));
        }
        let action_dim = cols.len() - METRICS_COLUMNS.len();
        let mut log = Self::new(action_dim);
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::Parse(format!(
                    "row {}: {} fields, expected {}",
                    lineno + 2,
                    fields.len(),
                    cols.len()
                )));
            }
            let num = |i: usize| -> Result<f64> {
                fields[i]
                    .parse()
                    .map_err(|e| Error::Parse(format!("row {}: {e}", lineno + 2)))
            };
            let int = |i: usize| -> Result<u64> {
                fields[i]
                    .parse()
                    .map_err(|e| Error::Parse(format!("row {}: {e}", lineno + 2)))
            };
            let mut p = Vec::with_capacity(action_dim);
            for i in 0..action_dim {
                p.push(num(METRICS_COLUMNS.len() + i)?);
            }
            log.push(MetricsRow {
                t: int(0)?,
                seed: int(1)?,
                mode: fields[2].parse()?,
                reward: num(3)?,
                control_error: num(4)?,
                a0_norm: num(5)?,
                ac_norm: num(6)?,
                p,
            })?;
        }
        Ok(log)
    }

    pub fn modes(&self) -> Vec<AdaptationMode> {
        let mut modes: Vec<AdaptationMode> = self.rows.iter().map(|r| r.mode).collect();
        modes.sort_unstable();
        modes.dedup();
        modes
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut seeds: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        seeds
    }

    pub fn by_mode(&self, mode: AdaptationMode) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(move |r| r.mode == mode)
    }

    /// Merges logs into one, ordered by (mode, seed, t) so output bytes do
    /// not depend on job completion order.
    pub fn merged(logs: Vec<MetricsLog>) -> Result<Self> {
        let mut iter = logs.into_iter();
        let mut first = iter.next().ok_or(Error::EmptyInput("metrics logs"))?;
        for log in iter {
            if log.action_dim != first.action_dim {
                return Err(Error::DimMismatch {
                    context: "merged metrics action_dim",
                    expected: first.action_dim,
                    got: log.action_dim,
                });
            }
            first.rows.extend(log.rows);
        }
        first.rows.sort_by_key(|r| (r.mode, r.seed, r.t));
        Ok(first)
    }
}
