//! Windowed linear-regression baseline.
//!
//! The conventional decoder this pipeline is benchmarked against: count
//! every unit's spikes in sliding windows (100 ms long, 50 ms hop), then
//! fit force at the window centers with ordinary least squares over the
//! count vector plus an intercept. Fitting uses a singular-value
//! decomposition, which returns the minimum-norm solution when columns
//! are collinear (duplicated or silent units) instead of failing.
//!
//! Predictions come out as a [`ForceTrace`] on the window-center grid:
//! one sample per hop, first sample at `window_len / 2`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{io_err, Error, Result};
use crate::signal::{window_counts, ForceTrace, MuSpikeTrain};

/// Default analysis window length, seconds.
pub const BASELINE_WINDOW_LEN: f64 = 0.1;
/// Default hop between window starts, seconds.
pub const BASELINE_HOP: f64 = 0.05;

/// Identity of one input channel: (grid, mu_id). Predictions check these
/// so a model is never applied to a permuted or different unit set.
pub type ChannelId = (u8, u32);

/// A fitted windowed-OLS decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub window_len: f64,
    pub hop: f64,
    /// One coefficient per channel, in channel order.
    pub coef: Vec<f64>,
    pub intercept: f64,
    /// The units the model was fitted on, in feature order.
    pub channels: Vec<ChannelId>,
}

/// Minimum-norm least-squares solution of `rows * beta ~ y` via SVD.
/// Singular values below `max_sv * max(n_rows, n_cols) * eps` are treated
/// as zero, so rank-deficient systems get the smallest solution instead
/// of a blow-up.
pub fn solve_least_squares(rows: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::invalid("least squares needs at least one row"));
    }
    let n_cols = rows[0].len();
    if n_cols == 0 {
        return Err(Error::invalid("least squares needs at least one column"));
    }
    if rows.len() != y.len() {
        return Err(Error::invalid(format!(
            "{} rows but {} targets",
            rows.len(),
            y.len()
        )));
    }
    for row in rows {
        if row.len() != n_cols {
            return Err(Error::invalid("ragged design matrix"));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite target value"));
    }
    let a = DMatrix::from_row_iterator(rows.len(), n_cols, rows.iter().flatten().copied());
    let b = DVector::from_column_slice(y);
    let svd = a.svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let eps = max_sv * rows.len().max(n_cols) as f64 * f64::EPSILON;
    let beta = svd
        .solve(&b, eps)
        .map_err(|e| Error::invalid(format!("least-squares solve failed: {e}")))?;
    Ok(beta.iter().copied().collect())
}

/// Window-count feature rows (one per window, one column per unit plus a
/// trailing 1 for the intercept) and the force at each window's center.
fn design(
    trains: &[MuSpikeTrain],
    force: &ForceTrace,
    window_len: f64,
    hop: f64,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let counts = window_counts(trains, window_len, hop, force.duration())?;
    let n_units = counts.n_units();
    let rows: Vec<Vec<f64>> = (0..counts.n_windows())
        .map(|w| {
            let mut row: Vec<f64> = (0..n_units).map(|u| counts.counts[w][u] as f64).collect();
            row.push(1.0);
            row
        })
        .collect();
    let y: Vec<f64> = (0..counts.n_windows())
        .map(|w| force.value_at(counts.window_center(w)))
        .collect();
    Ok((rows, y))
}

impl LinearModel {
    /// Fit the baseline on one trial. The force must start at t = 0 and
    /// defines the analyzed duration.
    pub fn fit(
        trains: &[MuSpikeTrain],
        force: &ForceTrace,
        window_len: f64,
        hop: f64,
    ) -> Result<LinearModel> {
        if trains.is_empty() {
            return Err(Error::invalid("baseline fit needs at least one unit"));
        }
        if force.t0 != 0.0 {
            return Err(Error::invalid("baseline fit expects force starting at t = 0"));
        }
        force.validate()?;
        let (rows, y) = design(trains, force, window_len, hop)?;
        let mut beta = solve_least_squares(&rows, &y)?;
        let intercept = beta.pop().expect("design always has an intercept column");
        Ok(LinearModel {
            window_len,
            hop,
            coef: beta,
            intercept,
            channels: trains.iter().map(|t| (t.grid, t.mu_id)).collect(),
        })
    }

    /// Fit with the default 100 ms / 50 ms windowing.
    pub fn fit_default(trains: &[MuSpikeTrain], force: &ForceTrace) -> Result<LinearModel> {
        LinearModel::fit(trains, force, BASELINE_WINDOW_LEN, BASELINE_HOP)
    }

    /// Decode a trial: count spikes in the same windows and apply the
    /// fitted coefficients. The result lives on the window-center grid
    /// (`1 / hop` Hz starting at `window_len / 2`).
    pub fn predict(&self, trains: &[MuSpikeTrain], duration: f64) -> Result<ForceTrace> {
        let got: Vec<ChannelId> = trains.iter().map(|t| (t.grid, t.mu_id)).collect();
        if got != self.channels {
            return Err(Error::invalid(
                "unit set does not match the one the baseline was fitted on",
            ));
        }
        let counts = window_counts(trains, self.window_len, self.hop, duration)?;
        let samples: Vec<f64> = (0..counts.n_windows())
            .map(|w| {
                self.intercept
                    + self
                        .coef
                        .iter()
                        .zip(&counts.counts[w])
                        .map(|(c, &n)| c * n as f64)
                        .sum::<f64>()
            })
            .collect();
        Ok(ForceTrace {
            sample_rate: counts.center_rate(),
            t0: self.window_len / 2.0,
            samples,
        })
    }

    // -- serialization ------------------------------------------------------

    pub fn to_model_string(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(out, "format,muforce_baseline,1");
        let _ = writeln!(out, "window_len,{}", self.window_len);
        let _ = writeln!(out, "hop,{}", self.hop);
        let _ = writeln!(out, "intercept,{}", self.intercept);
        for (i, ((grid, mu_id), coef)) in self.channels.iter().zip(&self.coef).enumerate() {
            let _ = writeln!(out, "channel,{i},{grid},{mu_id},{coef}");
        }
        out
    }

    pub fn parse(content: &str, path: &str) -> Result<LinearModel> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_string(),
            line,
            msg,
        };
        let mut lines = content.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == "format,muforce_baseline,1" => {}
            _ => return Err(perr(1, "expected 'format,muforce_baseline,1'".into())),
        }
        let mut window_len = None;
        let mut hop = None;
        let mut intercept = None;
        let mut channels: Vec<ChannelId> = Vec::new();
        let mut coef: Vec<f64> = Vec::new();
        for (idx, raw) in lines {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            match parts.as_slice() {
                ["window_len", v] => {
                    window_len = Some(v.parse().map_err(|_| perr(line_no, "bad window_len".into()))?)
                }
                ["hop", v] => hop = Some(v.parse().map_err(|_| perr(line_no, "bad hop".into()))?),
                ["intercept", v] => {
                    intercept = Some(v.parse().map_err(|_| perr(line_no, "bad intercept".into()))?)
                }
                ["channel", i, grid, mu_id, c] => {
                    let i: usize = i.parse().map_err(|_| perr(line_no, "bad channel index".into()))?;
                    if i != channels.len() {
                        return Err(perr(line_no, format!("channel {i} out of order")));
                    }
                    channels.push((
                        grid.parse().map_err(|_| perr(line_no, "bad grid".into()))?,
                        mu_id.parse().map_err(|_| perr(line_no, "bad mu_id".into()))?,
                    ));
                    coef.push(c.parse().map_err(|_| perr(line_no, "bad coefficient".into()))?);
                }
                _ => return Err(perr(line_no, format!("unrecognized line '{line}'"))),
            }
        }
        let missing = |what: &str| Error::Parse {
            path: path.to_string(),
            line: 0,
            msg: format!("missing '{what}'"),
        };
        if channels.is_empty() {
            return Err(missing("channel"));
        }
        Ok(LinearModel {
            window_len: window_len.ok_or_else(|| missing("window_len"))?,
            hop: hop.ok_or_else(|| missing("hop"))?,
            coef,
            intercept: intercept.ok_or_else(|| missing("intercept"))?,
            channels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| io_err(format!("creating {}", parent.display()), e))?;
            }
        }
        std::fs::write(path, self.to_model_string())
            .map_err(|e| io_err(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<LinearModel> {
        let content = std::fs::read_to_string(path)
            .map_err(|e| io_err(format!("reading {}", path.display()), e))?;
        LinearModel::parse(&content, &path.display().to_string())
    }
}
