//! On-disk formats: spike and force CSVs, output-spike CSVs, and the
//! plain-text key-value configuration files.
//!
//! All floats are written either with a fixed decimal count (times, so
//! repeated runs are byte-identical) or with Rust's shortest-roundtrip
//! formatting (values that must survive a write/read cycle exactly).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{io_err, Error, Result};
use crate::signal::{Finger, ForceTrace, MuSpikeTrain};

fn parse_field<T: FromStr>(path: &str, line: usize, name: &str, raw: &str) -> Result<T> {
    raw.trim().parse().map_err(|_| Error::Parse {
        path: path.to_string(),
        line,
        msg: format!("cannot parse {name} from '{raw}'"),
    })
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| io_err(format!("reading {}", path.display()), e))
}

fn write_string(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| io_err(format!("creating {}", parent.display()), e))?;
        }
    }
    std::fs::write(path, content).map_err(|e| io_err(format!("writing {}", path.display()), e))
}

// ---------------------------------------------------------------------------
// Motor-unit spike CSV: mu_id,grid,finger,trial,time_s (one row per spike)
// ---------------------------------------------------------------------------

const SPIKE_HEADER: &str = "mu_id,grid,finger,trial,time_s";

/// Serialize spike trains, one row per spike, times with nine decimals
/// (nanosecond resolution).
pub fn spike_csv_string(trains: &[MuSpikeTrain]) -> String {
    let mut out = String::from(SPIKE_HEADER);
    out.push('\n');
    for tr in trains {
        for &t in &tr.spike_times {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.9}",
                tr.mu_id, tr.grid, tr.finger, tr.trial, t
            );
        }
    }
    out
}

pub fn write_spike_csv(path: &Path, trains: &[MuSpikeTrain]) -> Result<()> {
    write_string(path, &spike_csv_string(trains))
}

/// Parse a spike CSV. Rows are grouped by (finger, trial, grid, mu_id),
/// per-train times are sorted ascending, and the trains are returned in
/// that key order. Spike times need not be sorted in the file.
pub fn parse_spike_csv(content: &str, path: &str) -> Result<Vec<MuSpikeTrain>> {
    let mut lines = content.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == SPIKE_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_string(),
                line: 1,
                msg: format!("expected header '{SPIKE_HEADER}'"),
            })
        }
    }
    let mut groups: BTreeMap<(Finger, u32, u8, u32), Vec<f64>> = BTreeMap::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                path: path.to_string(),
                line: line_no,
                msg: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let mu_id: u32 = parse_field(path, line_no, "mu_id", fields[0])?;
        let grid: u8 = parse_field(path, line_no, "grid", fields[1])?;
        if !(1..=4).contains(&grid) {
            return Err(Error::Parse {
                path: path.to_string(),
                line: line_no,
                msg: format!("grid must be 1..=4, got {grid}"),
            });
        }
        let finger: Finger = fields[2].parse().map_err(|e: Error| Error::Parse {
            path: path.to_string(),
            line: line_no,
            msg: e.to_string(),
        })?;
        let trial: u32 = parse_field(path, line_no, "trial", fields[3])?;
        let time: f64 = parse_field(path, line_no, "time_s", fields[4])?;
        if !time.is_finite() {
            return Err(Error::Parse {
                path: path.to_string(),
                line: line_no,
                msg: "spike time is not finite".into(),
            });
        }
        groups.entry((finger, trial, grid, mu_id)).or_default().push(time);
    }
    Ok(groups
        .into_iter()
        .map(|((finger, trial, grid, mu_id), mut times)| {
            times.sort_by(f64::total_cmp);
            MuSpikeTrain {
                mu_id,
                grid,
                finger,
                trial,
                spike_times: times,
            }
        })
        .collect())
}

pub fn read_spike_csv(path: &Path) -> Result<Vec<MuSpikeTrain>> {
    parse_spike_csv(&read_to_string(path)?, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Force CSV: time_s,force_pct_mvc
// ---------------------------------------------------------------------------

const FORCE_HEADER: &str = "time_s,force_pct_mvc";

/// Serialize a force trace; times fixed at six decimals, values with
/// shortest-roundtrip formatting so they read back bit-exact.
pub fn force_csv_string(force: &ForceTrace) -> String {
    let mut out = String::from(FORCE_HEADER);
    out.push('\n');
    for (n, &v) in force.samples.iter().enumerate() {
        let _ = writeln!(out, "{:.6},{}", force.time_at(n), v);
    }
    out
}

pub fn write_force_csv(path: &Path, force: &ForceTrace) -> Result<()> {
    write_string(path, &force_csv_string(force))
}

/// Parse a force CSV, recovering the sample rate from the time column.
/// Times must be uniformly spaced; the rate snaps to the nearest integer
/// when within 1e-6 relative (so "0.010000" steps read back as 100 Hz).
pub fn parse_force_csv(content: &str, path: &str) -> Result<ForceTrace> {
    let mut lines = content.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == FORCE_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_string(),
                line: 1,
                msg: format!("expected header '{FORCE_HEADER}'"),
            })
        }
    }
    let mut times = Vec::new();
    let mut samples = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (t_raw, v_raw) = line.split_once(',').ok_or_else(|| Error::Parse {
            path: path.to_string(),
            line: line_no,
            msg: "expected 2 fields".into(),
        })?;
        times.push(parse_field::<f64>(path, line_no, "time_s", t_raw)?);
        samples.push(parse_field::<f64>(path, line_no, "force_pct_mvc", v_raw)?);
    }
    if samples.len() < 2 {
        return Err(Error::Parse {
            path: path.to_string(),
            line: 0,
            msg: "force trace needs at least 2 samples".into(),
        });
    }
    let t0 = times[0];
    let span = times[times.len() - 1] - t0;
    if !(span > 0.0) {
        return Err(Error::Parse {
            path: path.to_string(),
            line: 0,
            msg: "time column must be strictly increasing".into(),
        });
    }
    let mut rate = (times.len() - 1) as f64 / span;
    if (rate - rate.round()).abs() < 1e-6 * rate.max(1.0) {
        rate = rate.round();
    }
    // Verify uniformity to half a sample step.
    for (n, &t) in times.iter().enumerate() {
        let expect = t0 + n as f64 / rate;
        if (t - expect).abs() > 0.5 / rate {
            return Err(Error::Parse {
                path: path.to_string(),
                line: n + 2,
                msg: format!("time {t} deviates from a uniform grid at {rate} Hz"),
            });
        }
    }
    Ok(ForceTrace::with_offset(rate, t0, samples))
}

pub fn read_force_csv(path: &Path) -> Result<ForceTrace> {
    parse_force_csv(&read_to_string(path)?, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Output-spike CSV: neuron_id,time_s (events of the simulated substrate)
// ---------------------------------------------------------------------------

const OUTPUT_SPIKE_HEADER: &str = "neuron_id,time_s";

/// Serialize per-neuron output spikes as a time-ordered event log (ties
/// broken by neuron id).
pub fn output_spike_csv_string(spikes: &[Vec<f64>]) -> String {
    let mut events: Vec<(f64, usize)> = spikes
        .iter()
        .enumerate()
        .flat_map(|(n, ts)| ts.iter().map(move |&t| (t, n)))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = String::from(OUTPUT_SPIKE_HEADER);
    out.push('\n');
    for (t, n) in events {
        let _ = writeln!(out, "{n},{t:.9}");
    }
    out
}

pub fn write_output_spike_csv(path: &Path, spikes: &[Vec<f64>]) -> Result<()> {
    write_string(path, &output_spike_csv_string(spikes))
}

/// Parse an output-spike CSV back into per-neuron sorted spike lists.
/// `n_neurons` fixes the output length; ids beyond it are an error.
pub fn parse_output_spike_csv(content: &str, path: &str, n_neurons: usize) -> Result<Vec<Vec<f64>>> {
    let mut lines = content.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == OUTPUT_SPIKE_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_string(),
                line: 1,
                msg: format!("expected header '{OUTPUT_SPIKE_HEADER}'"),
            })
        }
    }
    let mut spikes = vec![Vec::new(); n_neurons];
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (n_raw, t_raw) = line.split_once(',').ok_or_else(|| Error::Parse {
            path: path.to_string(),
            line: line_no,
            msg: "expected 2 fields".into(),
        })?;
        let n: usize = parse_field(path, line_no, "neuron_id", n_raw)?;
        if n >= n_neurons {
            return Err(Error::Parse {
                path: path.to_string(),
                line: line_no,
                msg: format!("neuron id {n} out of range (n_neurons = {n_neurons})"),
            });
        }
        spikes[n].push(parse_field(path, line_no, "time_s", t_raw)?);
    }
    for s in &mut spikes {
        s.sort_by(f64::total_cmp);
    }
    Ok(spikes)
}

// ---------------------------------------------------------------------------
// Key-value configuration files
// ---------------------------------------------------------------------------

/// A parsed `key = value` configuration file. Lines starting with `#` and
/// blank lines are ignored; later assignments to the same key win. Key
/// namespaces use dotted prefixes (for example `core.0.neuron.g_l`).
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: Vec<(String, String)>,
}

impl KvConfig {
    pub fn parse_str(content: &str, path: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, raw) in content.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_string(),
                line: idx + 1,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: idx + 1,
                    msg: "empty key".into(),
                });
            }
            entries.push((key.to_string(), value.trim().to_string()));
        }
        Ok(KvConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&read_to_string(path)?, &path.display().to_string())
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    /// Last value assigned to `key`, if any.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                Error::invalid(format!(
                    "config key '{key}': cannot parse '{raw}' as {}",
                    std::any::type_name::<T>()
                ))
            }),
        }
    }

    /// Parsed value or a default when the key is absent.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get_parsed(key)?.unwrap_or(default))
    }

    /// Parsed value, erroring when the key is absent.
    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get_parsed(key)?
            .ok_or_else(|| Error::invalid(format!("missing required config key '{key}'")))
    }

    pub fn get_bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("yes") | Some("1") | Some("on") => Ok(true),
            Some("false") | Some("no") | Some("0") | Some("off") => Ok(false),
            Some(other) => Err(Error::invalid(format!(
                "config key '{key}': expected a boolean, got '{other}'"
            ))),
        }
    }

    /// Comma-separated list parsed element-wise.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        Error::invalid(format!("config key '{key}': cannot parse element '{s}'"))
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// All distinct keys that start with `prefix`, in first-seen order.
    pub fn keys_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> {
        let mut seen = Vec::new();
        self.entries
            .iter()
            .filter_map(move |(k, _)| {
                if k.starts_with(prefix) && !seen.contains(k) {
                    seen.push(k.clone());
                    Some(k.as_str())
                } else {
                    None
                }
            })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every assignment in file order, including shadowed ones.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_string(path, &self.to_config_string())
    }
}
