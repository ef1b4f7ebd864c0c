//! Emulation of a mixed-signal neuromorphic processor.
//!
//! The modeled device carries four cores of up to 256 adaptive exponential
//! integrate-and-fire neurons. Neurons within a core share one set of
//! programmable parameters ([`NeuronParams`], [`SynapseParams`]), but every
//! physical neuron deviates from the programmed values by fabrication
//! mismatch: each parameter is scaled by `1 + e` with
//! `e ~ N(0, mismatch_sigma^2)` truncated to (-0.5, 0.5), drawn
//! deterministically per (chip seed, core, neuron, parameter), so one seed
//! pins one virtual chip ([`apply_mismatch`]).
//!
//! Spikes travel as address events; [`connectivity`] maps integer synapse
//! counts onto the event fabric and [`sim`] integrates the dynamics.
//!
//! Membrane dynamics per neuron (normalized units):
//!
//! ```text
//! C dV/dt = -g_L (V - E_L) + g_L * Delta_T * exp((V - V_T)/Delta_T)
//!           - w + I_syn + I_noise
//! tau_w dw/dt = a (V - E_L) - w
//! ```
//!
//! with a spike at `V >= V_peak` followed by `V <- V_reset`, `w <- w + b`,
//! and an absolute refractory hold. The exponential term is gated off more
//! than three `Delta_T` below threshold; the silent resting state is then
//! an exact fixed point instead of carrying an `exp(-5)` drift, at the cost
//! of a relative rate error far below the mismatch floor.
//!
//! Synapses are current-based with exponential decay. Each incoming event
//! adds its integer synapse count to the state `s` of its type, and
//!
//! ```text
//! I_syn = sum over types of sign * gain * s,    ds/dt = -s / tau_syn
//! ```
//!
//! AMPA and NMDA are excitatory (fast/slow), GABA_A and GABA_B inhibitory
//! (fast/slow). Default gains are tuned so that 30 AMPA synapses driven at
//! 30 Hz produce an output rate near 30 Hz, the operating point of the
//! force-decoding task.

pub mod connectivity;
pub mod sim;

pub use connectivity::{
    compile_connectivity, merge_event_streams, AddressEvent, Connectivity, EventSource,
    SynapseEntry, SynapseTable,
};
pub use sim::{calibrate_rate_gain, simulate, RateGainProbe, SimResult};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::io::KvConfig;
use crate::seeds::{derive_seed, tag};

/// Hard limits of the emulated device.
pub const MAX_NEURONS_PER_CORE: usize = 256;
pub const N_CORES: usize = 4;
/// Largest usable integration step, seconds.
pub const MAX_DT: f64 = 5e-4;
/// Default integration step, seconds.
pub const DEFAULT_DT: f64 = 1e-4;

// ---------------------------------------------------------------------------
// Neuron parameters
// ---------------------------------------------------------------------------

/// Programmable neuron parameters of one core, in normalized units
/// (membrane capacitance 1, resting potential 0, threshold 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronParams {
    /// Membrane capacitance.
    pub c: f64,
    /// Leak conductance.
    pub g_l: f64,
    /// Resting potential.
    pub e_l: f64,
    /// Soft spike-initiation threshold.
    pub v_t: f64,
    /// Sharpness of the spike-initiation exponential.
    pub delta_t: f64,
    /// Hard spike cutoff.
    pub v_peak: f64,
    /// Post-spike reset potential.
    pub v_reset: f64,
    /// Subthreshold adaptation coupling.
    pub a: f64,
    /// Spike-triggered adaptation increment.
    pub b: f64,
    /// Adaptation time constant, seconds.
    pub tau_w: f64,
    /// Absolute refractory period, seconds.
    pub refractory: f64,
}

impl Default for NeuronParams {
    fn default() -> Self {
        NeuronParams {
            c: 1.0,
            g_l: 0.05,
            e_l: 0.0,
            v_t: 1.0,
            delta_t: 0.2,
            v_peak: 2.0,
            v_reset: 0.0,
            a: 0.0,
            b: 0.1,
            tau_w: 0.1,
            refractory: 2e-3,
        }
    }
}

impl NeuronParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(Error::invalid("capacitance must be positive"));
        }
        if !(self.g_l >= 0.0) {
            return Err(Error::invalid("leak conductance must be non-negative"));
        }
        if !(self.delta_t > 0.0) {
            return Err(Error::invalid("delta_t must be positive"));
        }
        if !(self.v_reset < self.v_peak) {
            return Err(Error::invalid(format!(
                "v_reset {} must lie below v_peak {}",
                self.v_reset, self.v_peak
            )));
        }
        if !(self.tau_w > 0.0) {
            return Err(Error::invalid("tau_w must be positive"));
        }
        if !(self.refractory >= 0.0) {
            return Err(Error::invalid("refractory period must be non-negative"));
        }
        for (name, v) in [
            ("c", self.c),
            ("g_l", self.g_l),
            ("e_l", self.e_l),
            ("v_t", self.v_t),
            ("delta_t", self.delta_t),
            ("v_peak", self.v_peak),
            ("v_reset", self.v_reset),
            ("a", self.a),
            ("b", self.b),
            ("tau_w", self.tau_w),
            ("refractory", self.refractory),
        ] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("neuron parameter {name} is not finite")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synapse parameters
// ---------------------------------------------------------------------------

/// The four synapse circuits of the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SynapseType {
    /// Fast excitatory.
    Ampa,
    /// Slow excitatory.
    Nmda,
    /// Fast inhibitory.
    GabaA,
    /// Slow inhibitory.
    GabaB,
}

impl SynapseType {
    pub const ALL: [SynapseType; 4] = [
        SynapseType::Ampa,
        SynapseType::Nmda,
        SynapseType::GabaA,
        SynapseType::GabaB,
    ];

    pub fn is_excitatory(self) -> bool {
        matches!(self, SynapseType::Ampa | SynapseType::Nmda)
    }

    /// Current sign: +1 excitatory, -1 inhibitory.
    pub fn sign(self) -> f64 {
        if self.is_excitatory() {
            1.0
        } else {
            -1.0
        }
    }

    /// Dense index 0..4 used for state arrays and mismatch streams.
    pub fn index(self) -> usize {
        match self {
            SynapseType::Ampa => 0,
            SynapseType::Nmda => 1,
            SynapseType::GabaA => 2,
            SynapseType::GabaB => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SynapseType::Ampa => "ampa",
            SynapseType::Nmda => "nmda",
            SynapseType::GabaA => "gaba_a",
            SynapseType::GabaB => "gaba_b",
        }
    }
}

impl std::fmt::Display for SynapseType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SynapseType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ampa" => Ok(SynapseType::Ampa),
            "nmda" => Ok(SynapseType::Nmda),
            "gaba_a" | "gabaa" => Ok(SynapseType::GabaA),
            "gaba_b" | "gabab" => Ok(SynapseType::GabaB),
            other => Err(Error::invalid(format!("unknown synapse type '{other}'"))),
        }
    }
}

/// Decay time constant and current gain of one synapse circuit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynapseKind {
    /// Decay time constant, seconds.
    pub tau: f64,
    /// Current contributed per accumulated synapse unit.
    pub gain: f64,
}

/// Per-core parameters of all four synapse circuits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynapseParams {
    pub ampa: SynapseKind,
    pub nmda: SynapseKind,
    pub gaba_a: SynapseKind,
    pub gaba_b: SynapseKind,
}

impl Default for SynapseParams {
    fn default() -> Self {
        // AMPA gain calibrated for the 30-synapse/30 Hz -> ~30 Hz operating
        // point of the decoding task (see the rate-gain probe in `sim`).
        SynapseParams {
            ampa: SynapseKind {
                tau: 0.010,
                gain: 6.7,
            },
            nmda: SynapseKind {
                tau: 0.100,
                gain: 0.67,
            },
            gaba_a: SynapseKind {
                tau: 0.010,
                gain: 6.7,
            },
            gaba_b: SynapseKind {
                tau: 0.100,
                gain: 0.67,
            },
        }
    }
}

impl SynapseParams {
    pub fn kind(&self, t: SynapseType) -> SynapseKind {
        match t {
            SynapseType::Ampa => self.ampa,
            SynapseType::Nmda => self.nmda,
            SynapseType::GabaA => self.gaba_a,
            SynapseType::GabaB => self.gaba_b,
        }
    }

    pub fn kind_mut(&mut self, t: SynapseType) -> &mut SynapseKind {
        match t {
            SynapseType::Ampa => &mut self.ampa,
            SynapseType::Nmda => &mut self.nmda,
            SynapseType::GabaA => &mut self.gaba_a,
            SynapseType::GabaB => &mut self.gaba_b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in SynapseType::ALL {
            let k = self.kind(t);
            if !(k.tau > 0.0) || !k.tau.is_finite() {
                return Err(Error::invalid(format!("{t} tau must be positive")));
            }
            if !(k.gain >= 0.0) || !k.gain.is_finite() {
                return Err(Error::invalid(format!("{t} gain must be non-negative")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Core configuration and mismatch
// ---------------------------------------------------------------------------

/// Programmed state of one core plus the chip identity seed.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreConfig {
    /// Core index 0..4.
    pub core_id: u8,
    /// Allocated neurons on this core.
    pub n_neurons: usize,
    pub neuron: NeuronParams,
    pub synapse: SynapseParams,
    /// Relative mismatch spread sigma; 0 disables mismatch.
    pub mismatch_sigma: f64,
    /// Standard deviation of the per-step membrane noise current; 0
    /// disables noise.
    pub noise_current_sigma: f64,
    /// Chip identity: fixes the mismatch realization of this core.
    pub seed: u64,
}

impl CoreConfig {
    pub fn new(core_id: u8, n_neurons: usize, seed: u64) -> Self {
        CoreConfig {
            core_id,
            n_neurons,
            neuron: NeuronParams::default(),
            synapse: SynapseParams::default(),
            mismatch_sigma: 0.1,
            noise_current_sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.core_id as usize >= N_CORES {
            return Err(Error::invalid(format!(
                "core id {} out of range (device has {N_CORES} cores)",
                self.core_id
            )));
        }
        if self.n_neurons == 0 || self.n_neurons > MAX_NEURONS_PER_CORE {
            return Err(Error::invalid(format!(
                "core {} allocates {} neurons, limit is {MAX_NEURONS_PER_CORE}",
                self.core_id, self.n_neurons
            )));
        }
        if !(self.mismatch_sigma >= 0.0) || self.mismatch_sigma >= 0.5 {
            return Err(Error::invalid("mismatch sigma must lie in [0, 0.5)"));
        }
        if !(self.noise_current_sigma >= 0.0) || !self.noise_current_sigma.is_finite() {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        self.neuron.validate()?;
        self.synapse.validate()
    }
}

/// Effective parameters of one physical neuron after mismatch.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedNeuron {
    pub params: NeuronParams,
    /// Per-type synaptic gains, indexed by [`SynapseType::index`].
    pub gains: [f64; 4],
}

/// Number of mismatched parameters per neuron: the eleven membrane
/// parameters in declaration order, then the four synapse gains.
pub const MISMATCH_PARAM_COUNT: usize = 15;

/// One multiplicative mismatch factor `1 + e`, `e ~ N(0, sigma^2)` redrawn
/// until it falls inside (-0.5, 0.5). The draw is a pure function of the
/// identifying tuple, so any neuron's realization can be reproduced in
/// isolation.
fn mismatch_factor(seed: u64, core_id: u8, neuron: usize, param: usize, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &[tag::MISMATCH, core_id as u64, neuron as u64, param as u64],
    ));
    loop {
        let e: f64 = sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        if e > -0.5 && e < 0.5 {
            return 1.0 + e;
        }
    }
}

/// Realize the physical neurons of a core: every programmed parameter and
/// synapse gain is scaled by its own mismatch factor. With
/// `mismatch_sigma = 0` the programmed values come back exactly. Errors if
/// a realization violates basic feasibility (for example reset above peak).
pub fn apply_mismatch(core: &CoreConfig) -> Result<Vec<RealizedNeuron>> {
    core.validate()?;
    let sigma = core.mismatch_sigma;
    let nominal = core.neuron;
    let mut out = Vec::with_capacity(core.n_neurons);
    for j in 0..core.n_neurons {
        let f = |param: usize| mismatch_factor(core.seed, core.core_id, j, param, sigma);
        let params = NeuronParams {
            c: nominal.c * f(0),
            g_l: nominal.g_l * f(1),
            e_l: nominal.e_l * f(2),
            v_t: nominal.v_t * f(3),
            delta_t: nominal.delta_t * f(4),
            v_peak: nominal.v_peak * f(5),
            v_reset: nominal.v_reset * f(6),
            a: nominal.a * f(7),
            b: nominal.b * f(8),
            tau_w: nominal.tau_w * f(9),
            refractory: nominal.refractory * f(10),
        };
        params.validate().map_err(|e| {
            Error::invalid(format!(
                "core {} neuron {j}: mismatch produced infeasible parameters: {e}",
                core.core_id
            ))
        })?;
        let mut gains = [0.0; 4];
        for t in SynapseType::ALL {
            gains[t.index()] = core.synapse.kind(t).gain * f(11 + t.index());
        }
        out.push(RealizedNeuron { params, gains });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Substrate configuration files (core.N.* namespaces)
// ---------------------------------------------------------------------------

fn core_from_kv(kv: &KvConfig, core_id: u8) -> Result<CoreConfig> {
    let p = format!("core.{core_id}");
    let mut core = CoreConfig::new(
        core_id,
        kv.require(&format!("{p}.n_neurons"))?,
        kv.get_or(&format!("{p}.seed"), 0u64)?,
    );
    let d = NeuronParams::default();
    core.neuron = NeuronParams {
        c: kv.get_or(&format!("{p}.neuron.c"), d.c)?,
        g_l: kv.get_or(&format!("{p}.neuron.g_l"), d.g_l)?,
        e_l: kv.get_or(&format!("{p}.neuron.e_l"), d.e_l)?,
        v_t: kv.get_or(&format!("{p}.neuron.v_t"), d.v_t)?,
        delta_t: kv.get_or(&format!("{p}.neuron.delta_t"), d.delta_t)?,
        v_peak: kv.get_or(&format!("{p}.neuron.v_peak"), d.v_peak)?,
        v_reset: kv.get_or(&format!("{p}.neuron.v_reset"), d.v_reset)?,
        a: kv.get_or(&format!("{p}.neuron.a"), d.a)?,
        b: kv.get_or(&format!("{p}.neuron.b"), d.b)?,
        tau_w: kv.get_or(&format!("{p}.neuron.tau_w"), d.tau_w)?,
        refractory: kv.get_or(&format!("{p}.neuron.refractory"), d.refractory)?,
    };
    for t in SynapseType::ALL {
        let dk = SynapseParams::default().kind(t);
        let kind = core.synapse.kind_mut(t);
        kind.tau = kv.get_or(&format!("{p}.synapse.{t}.tau"), dk.tau)?;
        kind.gain = kv.get_or(&format!("{p}.synapse.{t}.gain"), dk.gain)?;
    }
    core.mismatch_sigma = kv.get_or(&format!("{p}.mismatch_sigma"), 0.1)?;
    core.noise_current_sigma = kv.get_or(&format!("{p}.noise_sigma"), 0.0)?;
    core.validate()?;
    Ok(core)
}

/// Parse all cores found in a key-value config: every `core.N.*` namespace
/// with an `n_neurons` key yields one [`CoreConfig`]; unspecified
/// parameters take the device defaults.
pub fn cores_from_config(kv: &KvConfig) -> Result<Vec<CoreConfig>> {
    let mut cores = Vec::new();
    for id in 0..N_CORES as u8 {
        if kv.get(&format!("core.{id}.n_neurons")).is_some() {
            cores.push(core_from_kv(kv, id)?);
        }
    }
    if cores.is_empty() {
        return Err(Error::invalid(
            "substrate config declares no cores (no core.N.n_neurons keys)",
        ));
    }
    Ok(cores)
}

/// Serialize cores into the `core.N.*` key-value namespace, one key per
/// parameter, so the file round-trips through [`cores_from_config`].
pub fn cores_to_config(cores: &[CoreConfig]) -> KvConfig {
    let mut kv = KvConfig::default();
    for c in cores {
        let p = format!("core.{}", c.core_id);
        kv.set(format!("{p}.n_neurons"), c.n_neurons);
        kv.set(format!("{p}.seed"), c.seed);
        kv.set(format!("{p}.mismatch_sigma"), c.mismatch_sigma);
        kv.set(format!("{p}.noise_sigma"), c.noise_current_sigma);
        let n = c.neuron;
        kv.set(format!("{p}.neuron.c"), n.c);
        kv.set(format!("{p}.neuron.g_l"), n.g_l);
        kv.set(format!("{p}.neuron.e_l"), n.e_l);
        kv.set(format!("{p}.neuron.v_t"), n.v_t);
        kv.set(format!("{p}.neuron.delta_t"), n.delta_t);
        kv.set(format!("{p}.neuron.v_peak"), n.v_peak);
        kv.set(format!("{p}.neuron.v_reset"), n.v_reset);
        kv.set(format!("{p}.neuron.a"), n.a);
        kv.set(format!("{p}.neuron.b"), n.b);
        kv.set(format!("{p}.neuron.tau_w"), n.tau_w);
        kv.set(format!("{p}.neuron.refractory"), n.refractory);
        for t in SynapseType::ALL {
            let k = c.synapse.kind(t);
            kv.set(format!("{p}.synapse.{t}.tau"), k.tau);
            kv.set(format!("{p}.synapse.{t}.gain"), k.gain);
        }
    }
    kv
}
