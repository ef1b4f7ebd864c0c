//! Chip-in-the-loop training of the integer connectivity.
//!
//! The device cannot do gradient descent on its integer synapses directly,
//! so learning runs on a shadow copy: real-valued weights live on the host,
//! and every epoch
//!
//! 1. streams the trial's spikes through the substrate with the current
//!    integer matrix and records the output spikes,
//! 2. turns recorded and input spikes into exponential-kernel rates
//!    (tau = 200 ms) and scores the population-mean rate against the
//!    rectified force target with mean squared error,
//! 3. forms a surrogate gradient: the substrate is modeled as the linear
//!    map `y_mean = (alpha / m_out) * sum_ij W_ij x_i`, where `alpha` is
//!    the rate gain measured by a calibration probe
//!    ([`crate::substrate::calibrate_rate_gain`]), so
//!    `dL/dW_ij = (2 alpha / m_out) * mean_t(err(t) * x_i(t))`,
//! 4. steps the shadow weights, clamps them to `[-k, +k]`, and
//! 5. stochastically rounds every shadow weight to the nearest integers
//!    (unbiased), giving the matrix the next epoch runs with.
//!
//! An epoch either commits completely or not at all: any failure (fan-in
//! over budget, divergence, non-finite loss) leaves state and matrix
//! untouched. Every random decision draws from a stream derived from
//! `(seed, population, epoch)`, which makes checkpoint resume bit-exact:
//! epochs 5..10 replay identically whether or not 0..5 happened in the
//! same process.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, Error, Result};
use crate::seeds::{derive_seed, tag};
use crate::signal::{exp_kernel_rate, resample_linear, ForceTrace, MuSpikeTrain, RateTrace};
use crate::substrate::{
    compile_connectivity, merge_event_streams, simulate, Connectivity, CoreConfig, SynapseType,
    DEFAULT_DT,
};

/// Default shadow-weight step size. Sized against the default task (20-ish
/// units, rates in the tens of Hz, rate gain near 1/30) so the loss settles
/// well inside the default epoch budget without oscillating.
pub const DEFAULT_LEARNING_RATE: f64 = 2.0;
/// Default number of training epochs.
pub const DEFAULT_EPOCHS: u32 = 30;
/// Default per-connection synapse bound.
pub const DEFAULT_K: u32 = 3;
/// Default per-neuron fan-in budget.
pub const DEFAULT_FAN_IN_LIMIT: u32 = 64;
/// Kernel time constant for both recorded and input rates, seconds.
pub const RATE_KERNEL_TAU: f64 = 0.2;
/// Sampling rate of the rate readout, Hz.
pub const RATE_SAMPLE_RATE: f64 = 100.0;

// ---------------------------------------------------------------------------
// Populations and the substrate handle
// ---------------------------------------------------------------------------

/// The two output populations of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopulationName {
    Flexion,
    Extension,
}

impl PopulationName {
    pub fn name(self) -> &'static str {
        match self {
            PopulationName::Flexion => "flexion",
            PopulationName::Extension => "extension",
        }
    }

    /// Stable word for seed derivation.
    pub fn index(self) -> u64 {
        match self {
            PopulationName::Flexion => 0,
            PopulationName::Extension => 1,
        }
    }
}

impl std::fmt::Display for PopulationName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PopulationName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "flexion" => Ok(PopulationName::Flexion),
            "extension" => Ok(PopulationName::Extension),
            other => Err(Error::invalid(format!("unknown population '{other}'"))),
        }
    }
}

/// Where one decoder population lives and what feeds it.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpec {
    pub name: PopulationName,
    /// Core hosting the population.
    pub core_id: u8,
    /// Number of output neurons.
    pub n_neurons: usize,
    /// Electrode grids whose motor units feed this population.
    pub grids: Vec<u8>,
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_neurons == 0 {
            return Err(Error::invalid(format!("population {} has no neurons", self.name)));
        }
        if self.grids.is_empty() {
            return Err(Error::invalid(format!("population {} has no input grids", self.name)));
        }
        for &g in &self.grids {
            if !(1..=4).contains(&g) {
                return Err(Error::invalid(format!("population {}: grid {g} out of range", self.name)));
            }
        }
        Ok(())
    }

    /// The trains (by reference into `trains`) this population listens to,
    /// in input-channel order.
    pub fn select_trains(&self, trains: &[MuSpikeTrain]) -> Vec<MuSpikeTrain> {
        trains
            .iter()
            .filter(|t| self.grids.contains(&t.grid))
            .cloned()
            .collect()
    }
}

/// Everything the training loop needs to talk to the (simulated) device:
/// the core the population runs on, the synapse types compiled for
/// positive and negative weights, the integration step, and the measured
/// rate gain `alpha` that scales the surrogate gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstrateHandle {
    pub core: CoreConfig,
    pub exc: SynapseType,
    pub inh: SynapseType,
    pub dt: f64,
    /// Output-rate increase per synapse per input Hz at the operating
    /// point, from the calibration probe.
    pub rate_gain: f64,
}

impl SubstrateHandle {
    /// Handle with the conventional type assignment (AMPA for positive
    /// weights, GABA_B for negative) and the default step.
    pub fn new(core: CoreConfig, rate_gain: f64) -> Self {
        SubstrateHandle {
            core,
            exc: SynapseType::Ampa,
            inh: SynapseType::GabaB,
            dt: DEFAULT_DT,
            rate_gain,
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: u32,
    pub learning_rate: f64,
    pub k: u32,
    pub fan_in_limit: u32,
    pub seed: u64,
    /// When set, a checkpoint file is written after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: DEFAULT_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            k: DEFAULT_K,
            fan_in_limit: DEFAULT_FAN_IN_LIMIT,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Trainer state
// ---------------------------------------------------------------------------

/// Host-side state of one population's training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub population: PopulationName,
    /// Number of completed epochs; also the index of the next one.
    pub epoch: u32,
    pub k: u32,
    pub fan_in_limit: u32,
    pub learning_rate: f64,
    pub rate_gain: f64,
    pub rng_seed: u64,
    /// Shadow weights, `shadow[input][output]`, each in [-k, +k].
    pub shadow: Vec<Vec<f64>>,
    /// `loss_history[e]` is the mean squared error measured in epoch `e`.
    pub loss_history: Vec<f64>,
}

impl TrainerState {
    pub fn n_inputs(&self) -> usize {
        self.shadow.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.shadow.first().map_or(0, Vec::len)
    }
}

/// Fresh state plus the first integer matrix sampled from it.
///
/// Shadow weights start uniform in [0, 1): weakly excitatory, so the
/// untrained populations fire a little and the first gradients see signal.
pub fn init_trainer(
    n_inputs: usize,
    population: PopulationName,
    n_outputs: usize,
    handle: &SubstrateHandle,
    opts: &TrainOptions,
) -> Result<(TrainerState, Connectivity)> {
    if n_inputs == 0 || n_outputs == 0 {
        return Err(Error::invalid("trainer needs at least one input and one output"));
    }
    if !(opts.learning_rate > 0.0) || !opts.learning_rate.is_finite() {
        return Err(Error::invalid("learning rate must be positive"));
    }
    if !(handle.rate_gain > 0.0) || !handle.rate_gain.is_finite() {
        return Err(Error::invalid("rate gain must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        opts.seed,
        &[tag::SHADOW_INIT, population.index()],
    ));
    let shadow: Vec<Vec<f64>> = (0..n_inputs)
        .map(|_| (0..n_outputs).map(|_| rng.random::<f64>()).collect())
        .collect();
    let state = TrainerState {
        population,
        epoch: 0,
        k: opts.k,
        fan_in_limit: opts.fan_in_limit,
        learning_rate: opts.learning_rate,
        rate_gain: handle.rate_gain,
        rng_seed: opts.seed,
        shadow,
        loss_history: Vec::new(),
    };
    let w = round_shadow(&state, 0)?;
    Ok((state, w))
}

// ---------------------------------------------------------------------------
// Stochastic rounding
// ---------------------------------------------------------------------------

/// Round a shadow weight to an integer stochastically: with fractional
/// part `rho`, round up with probability `rho`, down otherwise, then clamp
/// to [-k, +k]. Unbiased for any value already inside the clamp range.
pub fn stochastic_round<R: Rng + ?Sized>(w_prime: f64, k: u32, rng: &mut R) -> Result<i32> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if !w_prime.is_finite() {
        return Err(Error::invalid(format!("cannot round non-finite weight {w_prime}")));
    }
    let floor = w_prime.floor();
    let rho = w_prime - floor;
    let r: f64 = rng.random();
    let rounded = if rho > r { floor + 1.0 } else { floor };
    let k = k as f64;
    Ok(rounded.clamp(-k, k) as i32)
}

/// Sample an integer matrix from the shadow weights. `round_index`
/// identifies the draw (0 for the initial matrix, `epoch + 1` for the
/// matrix produced by that epoch), so any single rounding can be replayed.
fn round_shadow(state: &TrainerState, round_index: u64) -> Result<Connectivity> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        state.rng_seed,
        &[tag::ROUND, state.population.index(), round_index],
    ));
    let mut w = Connectivity::new(
        state.n_inputs(),
        state.n_outputs(),
        state.k,
        state.fan_in_limit,
    )?;
    for i in 0..state.n_inputs() {
        for j in 0..state.n_outputs() {
            w.set(i, j, stochastic_round(state.shadow[i][j], state.k, &mut rng)?)?;
        }
    }
    // Surface fan-in violations in the epoch that created the matrix, not
    // when the next one tries to run it.
    w.validate()?;
    Ok(w)
}

// ---------------------------------------------------------------------------
// Surrogate loss and gradient
// ---------------------------------------------------------------------------

/// Mean squared error of the population-mean recorded rate against the
/// target, and its gradient under the linear surrogate model
/// `y_mean(t) = (rate_gain / m_out) * sum_ij W_ij x_i(t)`.
///
/// The gradient is rank one in the output index: every column of row `i`
/// receives `(2 rate_gain / m_out) * mean_t(err(t) * x_i(t))`. `shadow` is
/// only consulted for its dimensions; the surrogate is linear, so its
/// gradient does not depend on the point of evaluation.
pub fn surrogate_loss_and_grad(
    recorded: &[RateTrace],
    inputs: &[RateTrace],
    target: &ForceTrace,
    shadow: &[Vec<f64>],
    rate_gain: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n_inputs = shadow.len();
    let n_outputs = shadow.first().map_or(0, Vec::len);
    if recorded.len() != n_outputs {
        return Err(Error::invalid(format!(
            "recorded {} populations, shadow expects {n_outputs}",
            recorded.len()
        )));
    }
    if inputs.len() != n_inputs {
        return Err(Error::invalid(format!(
            "got {} input rates, shadow expects {n_inputs}",
            inputs.len()
        )));
    }
    let len = target.samples.len();
    if len == 0 {
        return Err(Error::invalid("empty target"));
    }
    for (what, traces) in [("recorded", recorded), ("input", inputs)] {
        for tr in traces {
            if tr.values.len() != len || tr.sample_rate != target.sample_rate {
                return Err(Error::invalid(format!(
                    "{what} rate grid does not match the target grid"
                )));
            }
        }
    }

    // err(t) = population mean - target.
    let inv_m = 1.0 / n_outputs as f64;
    let err: Vec<f64> = (0..len)
        .map(|t| recorded.iter().map(|r| r.values[t]).sum::<f64>() * inv_m - target.samples[t])
        .collect();
    let mse = err.iter().map(|e| e * e).sum::<f64>() / len as f64;

    let scale = 2.0 * rate_gain * inv_m / len as f64;
    let grad: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| {
            let g = scale
                * x.values
                    .iter()
                    .zip(&err)
                    .map(|(&xv, &ev)| xv * ev)
                    .sum::<f64>();
            vec![g; n_outputs]
        })
        .collect();
    Ok((mse, grad))
}

// ---------------------------------------------------------------------------
// Epochs
// ---------------------------------------------------------------------------

/// Run one training epoch: simulate with the current integer matrix, score
/// it, step the shadow weights, and sample the next matrix. Returns the
/// updated state and matrix, leaving the inputs untouched on any error.
pub fn train_epoch(
    state: &TrainerState,
    w: &Connectivity,
    trains: &[MuSpikeTrain],
    target: &ForceTrace,
    handle: &SubstrateHandle,
) -> Result<(TrainerState, Connectivity)> {
    if trains.len() != state.n_inputs() {
        return Err(Error::invalid(format!(
            "{} spike trains for {} shadow rows",
            trains.len(),
            state.n_inputs()
        )));
    }
    if w.n_inputs() != state.n_inputs() || w.n_outputs() != state.n_outputs() {
        return Err(Error::invalid("integer matrix shape does not match the shadow"));
    }
    if handle.core.n_neurons != state.n_outputs() {
        return Err(Error::invalid(format!(
            "core allocates {} neurons but the population has {}",
            handle.core.n_neurons,
            state.n_outputs()
        )));
    }
    if target.t0 != 0.0 {
        return Err(Error::invalid("training target must start at t = 0"));
    }
    let duration = target.duration();

    // Stream the trial through the device.
    let table = compile_connectivity(w, handle.exc, handle.inh)?;
    let events = merge_event_streams(trains)?;
    let noise_seed = derive_seed(
        state.rng_seed,
        &[tag::NOISE, state.population.index(), state.epoch as u64],
    );
    let out = simulate(&[handle.core.clone()], &table, &events, duration, handle.dt, noise_seed)?;

    // Rates on the readout grid.
    let recorded: Vec<RateTrace> = out
        .spikes
        .iter()
        .map(|s| exp_kernel_rate(s, RATE_KERNEL_TAU, target.sample_rate, duration))
        .collect::<Result<_>>()?;
    let inputs: Vec<RateTrace> = trains
        .iter()
        .map(|t| exp_kernel_rate(&t.spike_times, RATE_KERNEL_TAU, target.sample_rate, duration))
        .collect::<Result<_>>()?;

    let (mse, grad) = surrogate_loss_and_grad(&recorded, &inputs, target, &state.shadow, state.rate_gain)?;
    if !mse.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: state.epoch,
            detail: format!("mse = {mse}"),
        });
    }

    let kf = state.k as f64;
    let mut next = state.clone();
    for (i, row) in next.shadow.iter_mut().enumerate() {
        for (j, s) in row.iter_mut().enumerate() {
            let stepped = *s - state.learning_rate * grad[i][j];
            if !stepped.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: state.epoch,
                    detail: format!("shadow[{i}][{j}] became {stepped}"),
                });
            }
            *s = stepped.clamp(-kf, kf);
        }
    }
    next.loss_history.push(mse);
    next.epoch += 1;
    let w_next = round_shadow(&next, next.epoch as u64)?;
    Ok((next, w_next))
}

/// Outcome of training one population.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainerState,
    pub w: Connectivity,
}

impl TrainOutcome {
    pub fn loss_history(&self) -> &[f64] {
        &self.state.loss_history
    }
}

/// Train one population against its rectified target for
/// `opts.epochs` total epochs. `resume` continues from a checkpoint; the
/// run is bit-exact with an uninterrupted one because every epoch's
/// randomness is derived from `(seed, population, epoch)` alone.
///
/// With `epochs = 0` this returns the freshly initialized random matrix
/// and an empty loss history.
pub fn train_population(
    trains: &[MuSpikeTrain],
    target: &ForceTrace,
    spec: &PopulationSpec,
    handle: &SubstrateHandle,
    opts: &TrainOptions,
    resume: Option<(TrainerState, Connectivity)>,
) -> Result<TrainOutcome> {
    spec.validate()?;
    if trains.is_empty() {
        return Err(Error::invalid(format!(
            "population {} receives no motor units; check the grid assignment",
            spec.name
        )));
    }
    if handle.core.core_id != spec.core_id {
        return Err(Error::invalid(format!(
            "population {} expects core {}, handle provides {}",
            spec.name, spec.core_id, handle.core.core_id
        )));
    }
    // The target must live on the readout grid; resample only if needed so
    // the common path stays bit-exact.
    let n_target = (RATE_SAMPLE_RATE * target.duration()).round() as usize;
    let target = if target.sample_rate == RATE_SAMPLE_RATE
        && target.t0 == 0.0
        && target.samples.len() == n_target
    {
        target.clone()
    } else {
        resample_linear(target, RATE_SAMPLE_RATE, 0.0, n_target)?
    };

    let (mut state, mut w) = match resume {
        Some((state, w)) => {
            if state.population != spec.name {
                return Err(Error::invalid(format!(
                    "checkpoint holds population {}, expected {}",
                    state.population, spec.name
                )));
            }
            if state.n_inputs() != trains.len() || state.n_outputs() != spec.n_neurons {
                return Err(Error::invalid("checkpoint shape does not match this task"));
            }
            (state, w)
        }
        None => init_trainer(trains.len(), spec.name, spec.n_neurons, handle, opts)?,
    };

    while state.epoch < opts.epochs {
        let (next_state, next_w) = train_epoch(&state, &w, trains, &target, handle)?;
        state = next_state;
        w = next_w;
        if let Some(dir) = &opts.checkpoint_dir {
            let path = dir.join(format!("{}_epoch{:04}.ckpt", spec.name, state.epoch));
            write_checkpoint(&path, &state, &w)?;
        }
    }
    Ok(TrainOutcome { state, w })
}

/// Both populations of the decoder, trained independently against their
/// rectified targets on the same trial.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTraining {
    pub flexion: TrainOutcome,
    pub extension: TrainOutcome,
}

/// Train the full decoder: partition the trial's units by grid, rectify
/// the force into the two targets, and train each population.
pub fn train_decoder(
    trains: &[MuSpikeTrain],
    force: &ForceTrace,
    flexion: &PopulationSpec,
    extension: &PopulationSpec,
    flexion_handle: &SubstrateHandle,
    extension_handle: &SubstrateHandle,
    opts: &TrainOptions,
) -> Result<DecoderTraining> {
    let (flex_target, ext_target) = crate::signal::rectified_targets(force);
    let flex_trains = flexion.select_trains(trains);
    let ext_trains = extension.select_trains(trains);
    let flexion_out = train_population(
        &flex_trains,
        &flex_target,
        flexion,
        flexion_handle,
        opts,
        None,
    )?;
    let extension_out = train_population(
        &ext_trains,
        &ext_target,
        extension,
        extension_handle,
        opts,
        None,
    )?;
    Ok(DecoderTraining {
        flexion: flexion_out,
        extension: extension_out,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &str = "format,muforce_checkpoint,1";

/// Serialize trainer state and integer matrix. Floats use
/// shortest-roundtrip formatting, so a resumed run continues from exactly
/// the same numbers.
pub fn checkpoint_string(state: &TrainerState, w: &Connectivity) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(out, "population,{}", state.population);
    let _ = writeln!(out, "epoch,{}", state.epoch);
    let _ = writeln!(out, "n_inputs,{}", state.n_inputs());
    let _ = writeln!(out, "n_outputs,{}", state.n_outputs());
    let _ = writeln!(out, "k,{}", state.k);
    let _ = writeln!(out, "fan_in_limit,{}", state.fan_in_limit);
    let _ = writeln!(out, "learning_rate,{}", state.learning_rate);
    let _ = writeln!(out, "rate_gain,{}", state.rate_gain);
    let _ = writeln!(out, "rng_seed,{}", state.rng_seed);
    for (e, l) in state.loss_history.iter().enumerate() {
        let _ = writeln!(out, "loss,{e},{l}");
    }
    for (i, row) in state.shadow.iter().enumerate() {
        for (j, s) in row.iter().enumerate() {
            let _ = writeln!(out, "shadow,{i},{j},{s}");
        }
    }
    for i in 0..w.n_inputs() {
        for j in 0..w.n_outputs() {
            let _ = writeln!(out, "w,{i},{j},{}", w.get(i, j));
        }
    }
    out
}

pub fn write_checkpoint(path: &Path, state: &TrainerState, w: &Connectivity) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| io_err(format!("creating {}", parent.display()), e))?;
        }
    }
    std::fs::write(path, checkpoint_string(state, w))
        .map_err(|e| io_err(format!("writing {}", path.display()), e))
}

/// Parse a checkpoint back into state and matrix.
pub fn parse_checkpoint(content: &str, path: &str) -> Result<(TrainerState, Connectivity)> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_string(),
        line,
        msg,
    };
    let mut lines = content.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == CHECKPOINT_MAGIC => {}
        _ => return Err(perr(1, format!("expected '{CHECKPOINT_MAGIC}'"))),
    }
    let mut population = None;
    let mut epoch = None;
    let mut n_inputs = None;
    let mut n_outputs = None;
    let mut k = None;
    let mut fan_in_limit = None;
    let mut learning_rate = None;
    let mut rate_gain = None;
    let mut rng_seed = None;
    let mut losses: Vec<(usize, f64)> = Vec::new();
    let mut shadow_entries: Vec<(usize, usize, f64)> = Vec::new();
    let mut w_entries: Vec<(usize, usize, i32)> = Vec::new();

    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let key = parts.next().unwrap_or("");
        let rest: Vec<&str> = parts.collect();
        let one = |rest: &[&str]| -> Result<String> {
            if rest.len() != 1 {
                return Err(perr(line_no, format!("'{key}' expects one value")));
            }
            Ok(rest[0].to_string())
        };
        match key {
            "population" => population = Some(one(&rest)?.parse::<PopulationName>()?),
            "epoch" => epoch = Some(one(&rest)?.parse::<u32>().map_err(|e| perr(line_no, e.to_string()))?),
            "n_inputs" => n_inputs = Some(one(&rest)?.parse::<usize>().map_err(|e| perr(line_no, e.to_string()))?),
            "n_outputs" => n_outputs = Some(one(&rest)?.parse::<usize>().map_err(|e| perr(line_no, e.to_string()))?),
            "k" => k = Some(one(&rest)?.parse::<u32>().map_err(|e| perr(line_no, e.to_string()))?),
            "fan_in_limit" => fan_in_limit = Some(one(&rest)?.parse::<u32>().map_err(|e| perr(line_no, e.to_string()))?),
            "learning_rate" => learning_rate = Some(one(&rest)?.parse::<f64>().map_err(|e| perr(line_no, e.to_string()))?),
            "rate_gain" => rate_gain = Some(one(&rest)?.parse::<f64>().map_err(|e| perr(line_no, e.to_string()))?),
            "rng_seed" => rng_seed = Some(one(&rest)?.parse::<u64>().map_err(|e| perr(line_no, e.to_string()))?),
            "loss" | "shadow" | "w" => {
                let want = if key == "loss" { 2 } else { 3 };
                if rest.len() != want {
                    return Err(perr(line_no, format!("'{key}' expects {want} values")));
                }
                match key {
                    "loss" => losses.push((
                        rest[0].parse().map_err(|_| perr(line_no, "bad loss index".into()))?,
                        rest[1].parse().map_err(|_| perr(line_no, "bad loss value".into()))?,
                    )),
                    "shadow" => shadow_entries.push((
                        rest[0].parse().map_err(|_| perr(line_no, "bad row".into()))?,
                        rest[1].parse().map_err(|_| perr(line_no, "bad col".into()))?,
                        rest[2].parse().map_err(|_| perr(line_no, "bad value".into()))?,
                    )),
                    _ => w_entries.push((
                        rest[0].parse().map_err(|_| perr(line_no, "bad row".into()))?,
                        rest[1].parse().map_err(|_| perr(line_no, "bad col".into()))?,
                        rest[2].parse().map_err(|_| perr(line_no, "bad value".into()))?,
                    )),
                }
            }
            other => return Err(perr(line_no, format!("unknown key '{other}'"))),
        }
    }

    let missing = |what: &str| Error::Parse {
        path: path.to_string(),
        line: 0,
        msg: format!("missing '{what}'"),
    };
    let n_inputs = n_inputs.ok_or_else(|| missing("n_inputs"))?;
    let n_outputs = n_outputs.ok_or_else(|| missing("n_outputs"))?;
    let k = k.ok_or_else(|| missing("k"))?;
    let fan_in_limit = fan_in_limit.ok_or_else(|| missing("fan_in_limit"))?;
    let epoch = epoch.ok_or_else(|| missing("epoch"))?;

    let mut shadow = vec![vec![f64::NAN; n_outputs]; n_inputs];
    for (i, j, v) in shadow_entries {
        *shadow
            .get_mut(i)
            .and_then(|r| r.get_mut(j))
            .ok_or_else(|| missing("shadow entry in range"))? = v;
    }
    if shadow.iter().flatten().any(|v| v.is_nan()) {
        return Err(missing("complete shadow matrix"));
    }
    let mut w = Connectivity::new(n_inputs, n_outputs, k, fan_in_limit)?;
    let mut w_seen = vec![false; n_inputs * n_outputs];
    for (i, j, v) in w_entries {
        if i >= n_inputs || j >= n_outputs {
            return Err(missing("w entry in range"));
        }
        w.set(i, j, v)?;
        w_seen[i * n_outputs + j] = true;
    }
    if !w_seen.iter().all(|&b| b) {
        return Err(missing("complete integer matrix"));
    }
    // Exactly one loss per completed epoch: a checkpoint whose epoch field
    // and loss history disagree would resume on the wrong random streams.
    let mut loss_history = vec![f64::NAN; epoch as usize];
    for (e, l) in losses {
        if e >= loss_history.len() {
            return Err(missing("loss indices matching the epoch count"));
        }
        if !loss_history[e].is_nan() {
            return Err(missing("unique loss indices"));
        }
        loss_history[e] = l;
    }
    if loss_history.iter().any(|v| v.is_nan()) {
        return Err(missing("one loss entry per completed epoch"));
    }

    Ok((
        TrainerState {
            population: population.ok_or_else(|| missing("population"))?,
            epoch,
            k,
            fan_in_limit,
            learning_rate: learning_rate.ok_or_else(|| missing("learning_rate"))?,
            rate_gain: rate_gain.ok_or_else(|| missing("rate_gain"))?,
            rng_seed: rng_seed.ok_or_else(|| missing("rng_seed"))?,
            shadow,
            loss_history,
        },
        w,
    ))
}

pub fn read_checkpoint(path: &Path) -> Result<(TrainerState, Connectivity)> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| io_err(format!("reading {}", path.display()), e))?;
    parse_checkpoint(&content, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::Finger;
    use crate::synth::{synth_spike_trains, MuProfile};

    fn handle(n_neurons: usize) -> SubstrateHandle {
        let mut core = CoreConfig::new(0, n_neurons, 7);
        core.mismatch_sigma = 0.0;
        core.noise_current_sigma = 0.0;
        SubstrateHandle::new(core, 1.0 / 30.0)
    }

    fn toy_trains(n: usize, duration: f64) -> Vec<MuSpikeTrain> {
        // Jittered units at staggered rates.
        let force = ForceTrace::new(100.0, vec![30.0; (duration * 100.0) as usize]);
        let profiles: Vec<MuProfile> = (0..n)
            .map(|i| MuProfile {
                mu_id: i as u32,
                grid: 1,
                recruitment_threshold: 0.0,
                min_rate_hz: 10.0 + i as f64 * 2.0,
                peak_rate_hz: 10.0 + i as f64 * 2.0 + 1e-9,
                direction_bias: 0.0,
                jitter_cv: 0.15,
            })
            .collect();
        synth_spike_trains(&profiles, &force, Finger::Index, 1, 3).unwrap()
    }

    // -- stochastic rounding ---------------------------------------------------

    #[test]
    fn rounding_support_and_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let v = stochastic_round(1.4, 3, &mut rng).unwrap();
            assert!(v == 1 || v == 2);
        }
        for _ in 0..100 {
            // Clamp: values at or beyond the bound can only round inward.
            assert_eq!(stochastic_round(3.0, 3, &mut rng).unwrap(), 3);
            assert_eq!(stochastic_round(5.7, 3, &mut rng).unwrap(), 3);
            assert_eq!(stochastic_round(-3.0, 3, &mut rng).unwrap(), -3);
            assert_eq!(stochastic_round(-9.1, 3, &mut rng).unwrap(), -3);
            let v = stochastic_round(-0.2, 3, &mut rng).unwrap();
            assert!(v == -1 || v == 0);
        }
        assert_eq!(stochastic_round(2.0, 3, &mut rng).unwrap(), 2);
        assert!(stochastic_round(f64::NAN, 3, &mut rng).is_err());
        assert!(stochastic_round(0.5, 0, &mut rng).is_err());
    }

    #[test]
    fn rounding_quick_unbiasedness() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = 0.3;
        let n = 20_000;
        let sum: i64 = (0..n)
            .map(|_| stochastic_round(w, 3, &mut rng).unwrap() as i64)
            .sum();
        let mean = sum as f64 / n as f64;
        // std of one draw = sqrt(0.3*0.7) ~ 0.458; 4 sigma of the mean.
        assert!((mean - w).abs() < 4.0 * 0.458 / (n as f64).sqrt());
    }

    // -- surrogate ---------------------------------------------------------------

    #[test]
    fn surrogate_hand_computed_case() {
        // Two outputs at constant 2 Hz and 4 Hz, target 5: err = -2.
        let rec = vec![
            RateTrace { sample_rate: 10.0, tau: 0.2, values: vec![2.0; 4] },
            RateTrace { sample_rate: 10.0, tau: 0.2, values: vec![4.0; 4] },
        ];
        let inputs = vec![RateTrace { sample_rate: 10.0, tau: 0.2, values: vec![3.0; 4] }];
        let target = ForceTrace::new(10.0, vec![5.0; 4]);
        let shadow = vec![vec![0.0, 0.0]];
        let (mse, grad) = surrogate_loss_and_grad(&rec, &inputs, &target, &shadow, 0.5).unwrap();
        assert!((mse - 4.0).abs() < 1e-12);
        // g = 2 * 0.5 / 2 * mean(-2 * 3) = -3, same for every column.
        assert_eq!(grad.len(), 1);
        assert!((grad[0][0] + 3.0).abs() < 1e-12);
        assert_eq!(grad[0][0], grad[0][1]);
    }

    #[test]
    fn surrogate_zero_error_zero_grad() {
        let rec = vec![RateTrace { sample_rate: 10.0, tau: 0.2, values: vec![7.0; 5] }];
        let inputs = vec![RateTrace { sample_rate: 10.0, tau: 0.2, values: vec![3.0; 5] }];
        let target = ForceTrace::new(10.0, vec![7.0; 5]);
        let (mse, grad) =
            surrogate_loss_and_grad(&rec, &inputs, &target, &[vec![1.0]], 0.1).unwrap();
        assert_eq!(mse, 0.0);
        assert_eq!(grad[0][0], 0.0);
    }

    #[test]
    fn surrogate_matches_finite_differences_small() {
        // Forward model y(t) = (alpha/m) sum_ij w_ij x_i(t); gradient of the
        // mse against a finite-difference probe of the same closed form.
        let alpha = 0.04;
        let (n_in, n_out, len) = (3usize, 2usize, 50usize);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<Vec<f64>> = (0..n_in)
            .map(|_| (0..len).map(|_| rng.random_range(0.0..30.0)).collect())
            .collect();
        let tgt: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..20.0)).collect();
        let w0: Vec<Vec<f64>> = (0..n_in)
            .map(|_| (0..n_out).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();

        let forward = |w: &[Vec<f64>], t: usize| -> f64 {
            let mut y = 0.0;
            for i in 0..n_in {
                for j in 0..n_out {
                    y += w[i][j] * xs[i][t];
                }
            }
            alpha / n_out as f64 * y
        };
        let loss = |w: &[Vec<f64>]| -> f64 {
            (0..len).map(|t| (forward(w, t) - tgt[t]).powi(2)).sum::<f64>() / len as f64
        };

        // Analytic gradient via the shared code path: recorded rates are
        // the per-neuron surrogate outputs (all equal to the mean here).
        let rec: Vec<RateTrace> = (0..n_out)
            .map(|_| RateTrace {
                sample_rate: 100.0,
                tau: 0.2,
                values: (0..len).map(|t| forward(&w0, t)).collect(),
            })
            .collect();
        let inputs: Vec<RateTrace> = xs
            .iter()
            .map(|x| RateTrace { sample_rate: 100.0, tau: 0.2, values: x.clone() })
            .collect();
        let target = ForceTrace::new(100.0, tgt.clone());
        let (_, grad) = surrogate_loss_and_grad(&rec, &inputs, &target, &w0, alpha).unwrap();

        let h = 1e-5;
        for i in 0..n_in {
            for j in 0..n_out {
                let mut wp = w0.clone();
                let mut wm = w0.clone();
                wp[i][j] += h;
                wm[i][j] -= h;
                let fd = (loss(&wp) - loss(&wm)) / (2.0 * h);
                let denom = fd.abs().max(grad[i][j].abs()).max(1e-12);
                assert!(
                    (fd - grad[i][j]).abs() / denom < 1e-6,
                    "grad[{i}][{j}] = {} vs fd {fd}",
                    grad[i][j]
                );
            }
        }
    }

    // -- epochs -------------------------------------------------------------------

    #[test]
    fn init_produces_weakly_excitatory_matrix() {
        let h = handle(4);
        let (state, w) = init_trainer(6, PopulationName::Flexion, 4, &h, &TrainOptions::default()).unwrap();
        assert_eq!(state.epoch, 0);
        assert!(state.shadow.iter().flatten().all(|&s| (0.0..1.0).contains(&s)));
        for i in 0..6 {
            for j in 0..4 {
                assert!((0..=1).contains(&w.get(i, j)));
            }
        }
        // Deterministic per seed, distinct across populations.
        let (state2, _) = init_trainer(6, PopulationName::Flexion, 4, &h, &TrainOptions::default()).unwrap();
        assert_eq!(state.shadow, state2.shadow);
        let (ext, _) = init_trainer(6, PopulationName::Extension, 4, &h, &TrainOptions::default()).unwrap();
        assert_ne!(state.shadow, ext.shadow);
    }

    #[test]
    fn epoch_updates_are_atomic_and_recorded() {
        let h = handle(3);
        let trains = toy_trains(4, 5.0);
        let target = ForceTrace::new(100.0, vec![10.0; 500]);
        let opts = TrainOptions { epochs: 1, ..TrainOptions::default() };
        let (state, w) = init_trainer(4, PopulationName::Flexion, 3, &h, &opts).unwrap();
        let (next, w2) = train_epoch(&state, &w, &trains, &target, &h).unwrap();
        assert_eq!(next.epoch, 1);
        assert_eq!(next.loss_history.len(), 1);
        assert!(next.loss_history[0].is_finite());
        assert_eq!(w2.n_inputs(), 4);
        // Shape mismatch fails without touching anything (pure API).
        assert!(train_epoch(&state, &w, &trains[..2], &target, &h).is_err());
        // Core size mismatch is caught.
        let bad = handle(5);
        assert!(train_epoch(&state, &w, &trains, &target, &bad).is_err());
    }

    #[test]
    fn training_reduces_loss_on_constant_target() {
        let h = handle(4);
        let trains = toy_trains(5, 6.0);
        let target = ForceTrace::new(100.0, vec![12.0; 600]);
        let spec = PopulationSpec {
            name: PopulationName::Flexion,
            core_id: 0,
            n_neurons: 4,
            grids: vec![1],
        };
        let opts = TrainOptions { epochs: 10, seed: 5, ..TrainOptions::default() };
        let out = train_population(&trains, &target, &spec, &h, &opts, None).unwrap();
        let hist = out.loss_history();
        assert_eq!(hist.len(), 10);
        let late = hist[7..].iter().sum::<f64>() / 3.0;
        assert!(
            late < hist[0],
            "loss failed to move: first {} late {late}",
            hist[0]
        );
    }

    #[test]
    fn resume_is_bit_exact() {
        let h = handle(3);
        let trains = toy_trains(4, 4.0);
        let target = ForceTrace::new(100.0, vec![8.0; 400]);
        let spec = PopulationSpec {
            name: PopulationName::Extension,
            core_id: 0,
            n_neurons: 3,
            grids: vec![1],
        };
        let straight = train_population(
            &trains,
            &target,
            &spec,
            &h,
            &TrainOptions { epochs: 6, seed: 11, ..TrainOptions::default() },
            None,
        )
        .unwrap();
        let first_half = train_population(
            &trains,
            &target,
            &spec,
            &h,
            &TrainOptions { epochs: 3, seed: 11, ..TrainOptions::default() },
            None,
        )
        .unwrap();
        // Serialize through the checkpoint format to prove the file carries
        // everything resume needs.
        let text = checkpoint_string(&first_half.state, &first_half.w);
        let (state, w) = parse_checkpoint(&text, "mem").unwrap();
        assert_eq!(state, first_half.state);
        assert_eq!(w, first_half.w);
        let resumed = train_population(
            &trains,
            &target,
            &spec,
            &h,
            &TrainOptions { epochs: 6, seed: 11, ..TrainOptions::default() },
            Some((state, w)),
        )
        .unwrap();
        assert_eq!(straight.state, resumed.state);
        assert_eq!(straight.w, resumed.w);
    }

    #[test]
    fn zero_epochs_returns_initial_matrix() {
        let h = handle(2);
        let trains = toy_trains(3, 4.0);
        let target = ForceTrace::new(100.0, vec![5.0; 400]);
        let spec = PopulationSpec {
            name: PopulationName::Flexion,
            core_id: 0,
            n_neurons: 2,
            grids: vec![1],
        };
        let opts = TrainOptions { epochs: 0, seed: 2, ..TrainOptions::default() };
        let out = train_population(&trains, &target, &spec, &h, &opts, None).unwrap();
        assert!(out.loss_history().is_empty());
        let (_, w0) = init_trainer(3, PopulationName::Flexion, 2, &h, &opts).unwrap();
        assert_eq!(out.w, w0);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let h = handle(2);
        let (state, w) = init_trainer(2, PopulationName::Flexion, 2, &h, &TrainOptions::default()).unwrap();
        let good = checkpoint_string(&state, &w);
        assert!(parse_checkpoint(&good.replace("muforce_checkpoint,1", "nope"), "mem").is_err());
        // Remove one shadow entry: incomplete matrix.
        let cut: String = good
            .lines()
            .filter(|l| !l.starts_with("shadow,1,1,"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(parse_checkpoint(&cut, "mem").is_err());
        // Out-of-band integer weight.
        let bad = good.replace("w,0,0,", "w,0,0,9").replace("w,0,0,91", "w,0,0,9");
        assert!(parse_checkpoint(&bad, "mem").is_err());
        // Epoch count ahead of the recorded losses.
        assert!(parse_checkpoint(&good.replace("epoch,0", "epoch,3"), "mem").is_err());
        // A consistent claim parses; a duplicated loss index does not.
        let one = good.replace("epoch,0", "epoch,1") + "loss,0,5.0\n";
        assert!(parse_checkpoint(&one, "mem").is_ok());
        assert!(parse_checkpoint(&(one + "loss,0,5.0\n"), "mem").is_err());
    }
}
