//! Integer connectivity and the address-event fabric.
//!
//! On the device a connection from an input channel to a neuron is not a
//! real-valued weight but a small integer count of identical synapse
//! circuits, signed by type: positive counts are wired to an excitatory
//! circuit, negative counts to an inhibitory one. [`Connectivity`] holds
//! the programmable count matrix; [`compile_connectivity`] lowers it to the
//! flat synapse table the simulator consumes, enforcing the per-neuron
//! fan-in budget of the router.

use crate::error::{Error, Result};
use crate::signal::MuSpikeTrain;
use crate::substrate::SynapseType;

/// Programmable synapse-count matrix from `n_inputs` channels onto
/// `n_outputs` neurons. Entries are integers in [-k, +k]; the magnitude
/// bound is enforced on every write, the fan-in budget when compiling.
#[derive(Debug, Clone, PartialEq)]
pub struct Connectivity {
    n_inputs: usize,
    n_outputs: usize,
    k: u32,
    fan_in_limit: u32,
    /// Row-major: `w[input * n_outputs + output]`.
    w: Vec<i32>,
}

impl Connectivity {
    /// All-zero matrix. `k` is the per-connection magnitude bound (>= 1),
    /// `fan_in_limit` the per-neuron synapse budget.
    pub fn new(n_inputs: usize, n_outputs: usize, k: u32, fan_in_limit: u32) -> Result<Self> {
        if n_inputs == 0 || n_outputs == 0 {
            return Err(Error::invalid("connectivity must have inputs and outputs"));
        }
        if k == 0 {
            return Err(Error::invalid("weight bound k must be at least 1"));
        }
        if fan_in_limit == 0 {
            return Err(Error::invalid("fan-in limit must be at least 1"));
        }
        Ok(Connectivity {
            n_inputs,
            n_outputs,
            k,
            fan_in_limit,
            w: vec![0; n_inputs * n_outputs],
        })
    }

    /// Build from rows (`rows[input][output]`), validating the k bound.
    pub fn from_rows(rows: &[Vec<i32>], k: u32, fan_in_limit: u32) -> Result<Self> {
        let n_inputs = rows.len();
        let n_outputs = rows.first().map_or(0, Vec::len);
        let mut c = Connectivity::new(n_inputs, n_outputs, k, fan_in_limit)?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_outputs {
                return Err(Error::invalid("connectivity rows have unequal lengths"));
            }
            for (j, &v) in row.iter().enumerate() {
                c.set(i, j, v)?;
            }
        }
        Ok(c)
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn fan_in_limit(&self) -> u32 {
        self.fan_in_limit
    }

    pub fn get(&self, input: usize, output: usize) -> i32 {
        self.w[input * self.n_outputs + output]
    }

    pub fn set(&mut self, input: usize, output: usize, value: i32) -> Result<()> {
        if value.unsigned_abs() > self.k {
            return Err(Error::WeightRange {
                input,
                neuron: output,
                value: value as i64,
                k: self.k,
            });
        }
        self.w[input * self.n_outputs + output] = value;
        Ok(())
    }

    /// Total synapse count onto one neuron: sum of |w| over its column.
    pub fn fan_in(&self, output: usize) -> u64 {
        (0..self.n_inputs)
            .map(|i| self.get(i, output).unsigned_abs() as u64)
            .sum()
    }

    /// Check both device constraints: every |entry| <= k and every column
    /// fan-in within the budget.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n_inputs {
            for j in 0..self.n_outputs {
                let v = self.get(i, j);
                if v.unsigned_abs() > self.k {
                    return Err(Error::WeightRange {
                        input: i,
                        neuron: j,
                        value: v as i64,
                        k: self.k,
                    });
                }
            }
        }
        for j in 0..self.n_outputs {
            let total = self.fan_in(j);
            if total > self.fan_in_limit as u64 {
                return Err(Error::FanInExceeded {
                    neuron: j,
                    total,
                    limit: self.fan_in_limit,
                });
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> Vec<Vec<i32>> {
        (0..self.n_inputs)
            .map(|i| (0..self.n_outputs).map(|j| self.get(i, j)).collect())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Synapse table
// ---------------------------------------------------------------------------

/// Where the events driving a synapse come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventSource {
    /// External input channel (a motor unit's event stream).
    Input(usize),
    /// Another simulated neuron, by global index.
    Neuron(usize),
}

/// One compiled connection: `count` identical synapses of one type from a
/// source onto a target neuron.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynapseEntry {
    pub source: EventSource,
    /// Global index of the postsynaptic neuron.
    pub target: usize,
    pub kind: SynapseType,
    pub count: u32,
}

/// Flat list of compiled synapses; the routing program of the device.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynapseTable {
    pub entries: Vec<SynapseEntry>,
}

impl SynapseTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total synapse count (sum of entry counts) onto one neuron.
    pub fn fan_in(&self, neuron: usize) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.target == neuron)
            .map(|e| e.count as u64)
            .sum()
    }

    /// Rewrite the table for placement in a larger network: input channel
    /// `i` becomes `input_map[i]` and neuron indices (sources and targets)
    /// shift by `neuron_offset`.
    pub fn remapped(&self, input_map: &[usize], neuron_offset: usize) -> Result<SynapseTable> {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let source = match e.source {
                    EventSource::Input(i) => EventSource::Input(
                        *input_map
                            .get(i)
                            .ok_or_else(|| Error::invalid(format!("input {i} missing from map")))?,
                    ),
                    EventSource::Neuron(n) => EventSource::Neuron(n + neuron_offset),
                };
                Ok(SynapseEntry {
                    source,
                    target: e.target + neuron_offset,
                    ..*e
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SynapseTable { entries })
    }

    /// Concatenate tables (they must already live in one global index
    /// space).
    pub fn merged(tables: &[&SynapseTable]) -> SynapseTable {
        SynapseTable {
            entries: tables.iter().flat_map(|t| t.entries.iter().copied()).collect(),
        }
    }
}

/// Lower a count matrix onto the event fabric: positive entries become
/// `exc` synapses, negative entries `inh` synapses of the absolute count,
/// zeros vanish. `exc` must be an excitatory type and `inh` inhibitory.
/// Fails with the precise neuron if any fan-in exceeds the budget.
pub fn compile_connectivity(
    w: &Connectivity,
    exc: SynapseType,
    inh: SynapseType,
) -> Result<SynapseTable> {
    if !exc.is_excitatory() {
        return Err(Error::invalid(format!(
            "positive weights need an excitatory type, got {exc}"
        )));
    }
    if inh.is_excitatory() {
        return Err(Error::invalid(format!(
            "negative weights need an inhibitory type, got {inh}"
        )));
    }
    w.validate()?;
    let mut entries = Vec::new();
    for i in 0..w.n_inputs() {
        for j in 0..w.n_outputs() {
            let v = w.get(i, j);
            if v == 0 {
                continue;
            }
            entries.push(SynapseEntry {
                source: EventSource::Input(i),
                target: j,
                kind: if v > 0 { exc } else { inh },
                count: v.unsigned_abs(),
            });
        }
    }
    Ok(SynapseTable { entries })
}

// ---------------------------------------------------------------------------
// Address events
// ---------------------------------------------------------------------------

/// One input event on the fabric: a spike of input channel `source` at
/// `time` seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AddressEvent {
    pub time: f64,
    pub source: usize,
}

/// Merge spike trains into one time-sorted event stream. Channel `i` is
/// the position of the train in the slice; simultaneous events order by
/// ascending channel. Spike times must be finite.
pub fn merge_event_streams(trains: &[MuSpikeTrain]) -> Result<Vec<AddressEvent>> {
    let mut events = Vec::with_capacity(trains.iter().map(|t| t.spike_times.len()).sum());
    for (i, tr) in trains.iter().enumerate() {
        for &t in &tr.spike_times {
            if !t.is_finite() {
                return Err(Error::invalid(format!(
                    "channel {i} contains a non-finite spike time"
                )));
            }
            events.push(AddressEvent { time: t, source: i });
        }
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.source.cmp(&b.source)));
    Ok(events)
}
