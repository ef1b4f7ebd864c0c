//! Event-driven time-stepped simulation of the emulated device.
//!
//! Integration uses an exponential-Euler step: over one step the
//! non-membrane terms (spike-initiation current, adaptation, synaptic and
//! noise currents) are frozen, and the leak relaxation toward the combined
//! drive is applied with its exact exponential factor. The silent resting
//! state is therefore an exact fixed point, and the scheme stays stable for
//! any step size.
//!
//! Event semantics per step `[t, t + dt)`:
//!
//! 1. External address events with time in `[t, t + dt)` add their synapse
//!    counts to the target state.
//! 2. Spikes emitted by neurons in the previous step arrive through
//!    recurrent table entries (one-step axonal latency).
//! 3. Every neuron integrates: synaptic current from the post-delivery
//!    state, then membrane and adaptation update, then per-type synaptic
//!    decay. A neuron crossing `V_peak` records a spike stamped at the end
//!    of the step, resets, and holds for `ceil(refractory / dt)` steps.
//!
//! Membrane noise draws one current sample per neuron per non-refractory
//! step from its own counter-derived stream, so runs are reproducible for
//! any (configs, connectivity, events, seed, dt) tuple.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seeds::{derive_seed, tag};
use crate::signal::regular_spike_times;
use crate::substrate::connectivity::{AddressEvent, EventSource, SynapseTable};
use crate::substrate::{apply_mismatch, CoreConfig, SynapseType, MAX_DT};

/// Spike output of one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    /// Per-neuron spike times (global neuron index), each sorted ascending.
    pub spikes: Vec<Vec<f64>>,
    /// Membrane potential of every neuron after the last step.
    pub v_final: Vec<f64>,
    /// Adaptation state of every neuron after the last step.
    pub w_final: Vec<f64>,
}

impl SimResult {
    pub fn n_neurons(&self) -> usize {
        self.spikes.len()
    }

    pub fn total_spikes(&self) -> usize {
        self.spikes.iter().map(Vec::len).sum()
    }

    /// Mean firing rate of one neuron over `[t_start, t_end)`, Hz.
    pub fn mean_rate_between(&self, neuron: usize, t_start: f64, t_end: f64) -> f64 {
        if t_end <= t_start {
            return 0.0;
        }
        let n = self.spikes[neuron]
            .iter()
            .filter(|&&t| t >= t_start && t < t_end)
            .count();
        n as f64 / (t_end - t_start)
    }
}

/// Per-neuron constants precomputed outside the hot loop.
struct NeuronConsts {
    e_l: f64,
    v_t: f64,
    delta_t: f64,
    v_peak: f64,
    v_reset: f64,
    a: f64,
    b: f64,
    /// g_L * Delta_T, the prefactor of the spike-initiation current.
    exp_scale: f64,
    /// Gate below which the spike-initiation current is treated as zero:
    /// V_T - 3 Delta_T.
    gate: f64,
    /// exp(-g_L dt / C); 1 when the leak is absent.
    decay_v: f64,
    /// Multiplier turning the frozen drive current into a voltage
    /// increment: (1 - decay_v)/g_L, or dt/C in the leakless limit.
    drive: f64,
    decay_w: f64,
    refr_steps: u32,
    gains: [f64; 4],
    syn_decay: [f64; 4],
    noise_sigma: f64,
}

struct NeuronState {
    v: f64,
    w: f64,
    refr_left: u32,
    s: [f64; 4],
}

const SYN_SIGN: [f64; 4] = [1.0, 1.0, -1.0, -1.0];

/// Run the device: `cores` define the physical neurons (global indices
/// concatenate the cores in slice order), `table` the compiled synapses,
/// `events` the external input stream (time-sorted). Returns every spike.
///
/// `noise_seed` selects the membrane-noise realization of this run and is
/// deliberately separate from the chip seed in [`CoreConfig`]: repeated
/// runs on the same virtual chip share mismatch but draw fresh noise.
pub fn simulate(
    cores: &[CoreConfig],
    table: &SynapseTable,
    events: &[AddressEvent],
    duration: f64,
    dt: f64,
    noise_seed: u64,
) -> Result<SimResult> {
    if cores.is_empty() {
        return Err(Error::invalid("simulation needs at least one core"));
    }
    for (i, a) in cores.iter().enumerate() {
        for b in &cores[i + 1..] {
            if a.core_id == b.core_id {
                return Err(Error::invalid(format!("duplicate core id {}", a.core_id)));
            }
        }
    }
    if !(dt > 0.0) || dt > MAX_DT {
        return Err(Error::invalid(format!(
            "dt must lie in (0, {MAX_DT}] seconds, got {dt}"
        )));
    }
    if !(duration >= 0.0) || !duration.is_finite() {
        return Err(Error::invalid(format!("bad duration {duration}")));
    }
    for pair in events.windows(2) {
        if pair[1].time < pair[0].time {
            return Err(Error::invalid("events must be sorted by time"));
        }
    }
    if let Some(bad) = events.iter().find(|e| !e.time.is_finite() || e.time < 0.0) {
        return Err(Error::invalid(format!("bad event time {}", bad.time)));
    }

    // Realize the physical neurons and freeze per-neuron constants.
    let mut consts: Vec<NeuronConsts> = Vec::new();
    let mut states: Vec<NeuronState> = Vec::new();
    for core in cores {
        for rn in apply_mismatch(core)? {
            let p = rn.params;
            let (decay_v, drive) = if p.g_l > 0.0 {
                let d = (-p.g_l * dt / p.c).exp();
                (d, (1.0 - d) / p.g_l)
            } else {
                (1.0, dt / p.c)
            };
            let mut syn_decay = [0.0; 4];
            for t in SynapseType::ALL {
                syn_decay[t.index()] = (-dt / core.synapse.kind(t).tau).exp();
            }
            consts.push(NeuronConsts {
                e_l: p.e_l,
                v_t: p.v_t,
                delta_t: p.delta_t,
                v_peak: p.v_peak,
                v_reset: p.v_reset,
                a: p.a,
                b: p.b,
                exp_scale: p.g_l * p.delta_t,
                gate: p.v_t - 3.0 * p.delta_t,
                decay_v,
                drive,
                decay_w: (-dt / p.tau_w).exp(),
                refr_steps: (p.refractory / dt).ceil() as u32,
                gains: rn.gains,
                syn_decay,
                noise_sigma: core.noise_current_sigma,
            });
            states.push(NeuronState {
                v: p.e_l,
                w: 0.0,
                refr_left: 0,
                s: [0.0; 4],
            });
        }
    }
    let n_total = states.len();

    // Compile the table into dense adjacency: one list per input channel
    // and one per presynaptic neuron.
    let mut max_input = 0usize;
    for e in &table.entries {
        if e.target >= n_total {
            return Err(Error::invalid(format!(
                "synapse targets neuron {} but only {n_total} exist",
                e.target
            )));
        }
        match e.source {
            EventSource::Input(i) => max_input = max_input.max(i + 1),
            EventSource::Neuron(n) => {
                if n >= n_total {
                    return Err(Error::invalid(format!(
                        "synapse sources neuron {n} but only {n_total} exist"
                    )));
                }
            }
        }
    }
    let mut input_adj: Vec<Vec<(u32, u8, f64)>> = vec![Vec::new(); max_input];
    let mut neuron_adj: Vec<Vec<(u32, u8, f64)>> = vec![Vec::new(); n_total];
    for e in &table.entries {
        if e.count == 0 {
            continue;
        }
        let item = (e.target as u32, e.kind.index() as u8, e.count as f64);
        match e.source {
            EventSource::Input(i) => input_adj[i].push(item),
            EventSource::Neuron(n) => neuron_adj[n].push(item),
        }
    }

    let has_noise = consts.iter().any(|c| c.noise_sigma > 0.0);
    let mut noise_rngs: Vec<ChaCha8Rng> = if has_noise {
        (0..n_total)
            .map(|n| ChaCha8Rng::seed_from_u64(derive_seed(noise_seed, &[tag::NOISE, n as u64])))
            .collect()
    } else {
        Vec::new()
    };

    let n_steps = (duration / dt).round() as usize;
    let mut spikes: Vec<Vec<f64>> = vec![Vec::new(); n_total];
    let mut fired_prev: Vec<u32> = Vec::new();
    let mut fired_now: Vec<u32> = Vec::new();
    let mut ev_idx = 0usize;

    for step in 0..n_steps {
        let t_end = (step + 1) as f64 * dt;

        // 1. External events that fall inside this step.
        while ev_idx < events.len() && events[ev_idx].time < t_end {
            let src = events[ev_idx].source;
            if src < input_adj.len() {
                for &(target, kind, count) in &input_adj[src] {
                    states[target as usize].s[kind as usize] += count;
                }
            }
            ev_idx += 1;
        }

        // 2. Recurrent spikes from the previous step.
        for &n in &fired_prev {
            for &(target, kind, count) in &neuron_adj[n as usize] {
                states[target as usize].s[kind as usize] += count;
            }
        }
        fired_prev.clear();

        // 3. Integrate every neuron.
        for n in 0..n_total {
            let c = &consts[n];
            let st = &mut states[n];

            let i_syn = SYN_SIGN[0] * c.gains[0] * st.s[0]
                + SYN_SIGN[1] * c.gains[1] * st.s[1]
                + SYN_SIGN[2] * c.gains[2] * st.s[2]
                + SYN_SIGN[3] * c.gains[3] * st.s[3];

            if st.refr_left > 0 {
                st.refr_left -= 1;
                st.v = c.v_reset;
                let w_inf = c.a * (c.v_reset - c.e_l);
                st.w = w_inf + (st.w - w_inf) * c.decay_w;
            } else {
                let noise = if c.noise_sigma > 0.0 {
                    c.noise_sigma
                        * <StandardNormal as Distribution<f64>>::sample(
                            &StandardNormal,
                            &mut noise_rngs[n],
                        )
                } else {
                    0.0
                };
                let phi = if st.v >= c.gate {
                    c.exp_scale * (((st.v - c.v_t) / c.delta_t).min(40.0)).exp()
                } else {
                    0.0
                };
                let j = phi - st.w + i_syn + noise;
                let w_inf = c.a * (st.v - c.e_l);
                let v_new = c.e_l + (st.v - c.e_l) * c.decay_v + j * c.drive;
                st.w = w_inf + (st.w - w_inf) * c.decay_w;
                if v_new >= c.v_peak {
                    spikes[n].push(t_end);
                    st.v = c.v_reset;
                    st.w += c.b;
                    st.refr_left = c.refr_steps;
                    fired_now.push(n as u32);
                } else if v_new.is_finite() && st.w.is_finite() {
                    st.v = v_new;
                } else {
                    return Err(Error::Diverged { neuron: n, time: t_end });
                }
            }

            st.s[0] *= c.syn_decay[0];
            st.s[1] *= c.syn_decay[1];
            st.s[2] *= c.syn_decay[2];
            st.s[3] *= c.syn_decay[3];
        }
        std::mem::swap(&mut fired_prev, &mut fired_now);
    }

    Ok(SimResult {
        v_final: states.iter().map(|s| s.v).collect(),
        w_final: states.iter().map(|s| s.w).collect(),
        spikes,
    })
}

// ---------------------------------------------------------------------------
// Rate-gain calibration probe
// ---------------------------------------------------------------------------

/// Stimulus of the calibration probe: one nominal neuron is driven through
/// `base_count` and then `base_count + extra_count` excitatory synapses by
/// a regular train, and the rate difference per synapse per input Hz is the
/// substrate's local rate gain.
#[derive(Debug, Clone, PartialEq)]
pub struct RateGainProbe {
    pub input_rate_hz: f64,
    pub base_count: u32,
    pub extra_count: u32,
    pub duration: f64,
    /// Settling time excluded from the rate measurement.
    pub settle: f64,
    pub dt: f64,
}

impl Default for RateGainProbe {
    fn default() -> Self {
        RateGainProbe {
            input_rate_hz: 30.0,
            base_count: 12,
            extra_count: 3,
            duration: 30.0,
            settle: 3.0,
            dt: crate::substrate::DEFAULT_DT,
        }
    }
}

/// Measure the rate gain of a core at the task's operating point: the
/// output-rate increase per added synapse per input Hz.
///
/// The probe runs on one neuron with nominal parameters (mismatch and
/// noise off); the trained populations average over enough neurons that
/// the nominal gain matches the population mean well. Used to scale the
/// learning gradient, so only its magnitude matters, not its last digit.
pub fn calibrate_rate_gain(
    core: &CoreConfig,
    exc: SynapseType,
    probe: &RateGainProbe,
) -> Result<f64> {
    if !exc.is_excitatory() {
        return Err(Error::invalid("calibration needs an excitatory synapse type"));
    }
    if probe.extra_count == 0 || probe.input_rate_hz <= 0.0 {
        return Err(Error::invalid("probe needs extra synapses and a positive rate"));
    }
    if !(probe.settle >= 0.0) || probe.settle >= probe.duration {
        return Err(Error::invalid("probe settle time must lie inside its duration"));
    }
    let mut probe_core = core.clone();
    probe_core.n_neurons = 1;
    probe_core.mismatch_sigma = 0.0;
    probe_core.noise_current_sigma = 0.0;

    let events: Vec<AddressEvent> = regular_spike_times(probe.input_rate_hz, probe.duration)
        .into_iter()
        .map(|t| AddressEvent { time: t, source: 0 })
        .collect();

    let rate_with = |count: u32| -> Result<f64> {
        let table = SynapseTable {
            entries: vec![crate::substrate::SynapseEntry {
                source: EventSource::Input(0),
                target: 0,
                kind: exc,
                count,
            }],
        };
        let out = simulate(&[probe_core.clone()], &table, &events, probe.duration, probe.dt, 0)?;
        Ok(out.mean_rate_between(0, probe.settle, probe.duration))
    };

    let r_base = rate_with(probe.base_count)?;
    let r_more = rate_with(probe.base_count + probe.extra_count)?;
    let gain = (r_more - r_base) / (probe.extra_count as f64 * probe.input_rate_hz);
    if !(gain > 0.0) {
        return Err(Error::invalid(format!(
            "calibration probe measured a non-positive rate gain ({r_base} Hz -> {r_more} Hz); \
             the core is outside its usable operating range"
        )));
    }
    Ok(gain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::{compile_connectivity, Connectivity};

    fn quiet_core(n: usize) -> CoreConfig {
        let mut core = CoreConfig::new(0, n, 7);
        core.mismatch_sigma = 0.0;
        core.noise_current_sigma = 0.0;
        core
    }

    fn ampa_drive(count: u32, rate: f64, duration: f64) -> (SynapseTable, Vec<AddressEvent>) {
        let table = SynapseTable {
            entries: vec![crate::substrate::SynapseEntry {
                source: EventSource::Input(0),
                target: 0,
                kind: SynapseType::Ampa,
                count,
            }],
        };
        let events = regular_spike_times(rate, duration)
            .into_iter()
            .map(|t| AddressEvent { time: t, source: 0 })
            .collect();
        (table, events)
    }

    #[test]
    fn zero_input_rests_exactly() {
        let mut core = quiet_core(8);
        core.mismatch_sigma = 0.1; // per-neuron resting potentials differ
        let neurons = apply_mismatch(&core).unwrap();
        let out = simulate(&[core], &SynapseTable::default(), &[], 2.0, 1e-4, 0).unwrap();
        assert_eq!(out.total_spikes(), 0);
        for (j, n) in neurons.iter().enumerate() {
            assert!(
                (out.v_final[j] - n.params.e_l).abs() <= 1e-9,
                "neuron {j} drifted to {} from {}",
                out.v_final[j],
                n.params.e_l
            );
        }
    }

    #[test]
    fn output_rate_scales_with_synapse_count() {
        // The device operates as a near-perfect integrator (tau_m = C/g_L
        // = 20 s), so output rate is close to linear in synapse count:
        // 30 synapses at 30 Hz sit near 30 Hz out, one synapse near 1 Hz.
        let core = quiet_core(1);
        let (table, events) = ampa_drive(30, 30.0, 10.0);
        let out = simulate(&[core.clone()], &table, &events, 10.0, 1e-4, 0).unwrap();
        let strong = out.mean_rate_between(0, 2.0, 10.0);
        assert!(
            (15.0..45.0).contains(&strong),
            "30 synapses at 30 Hz gave {strong} Hz"
        );

        let (table, events) = ampa_drive(1, 30.0, 10.0);
        let out = simulate(&[core], &table, &events, 10.0, 1e-4, 0).unwrap();
        let weak = out.mean_rate_between(0, 2.0, 10.0);
        assert!(weak < strong / 10.0, "one synapse gave {weak} Hz vs {strong} Hz");
    }

    #[test]
    fn refractory_bounds_isi() {
        // Saturating drive: ISI must never undercut the refractory period.
        let core = quiet_core(1);
        let refr = core.neuron.refractory;
        let (table, events) = ampa_drive(64, 100.0, 3.0);
        let out = simulate(&[core], &table, &events, 3.0, 1e-4, 0).unwrap();
        assert!(out.spikes[0].len() > 100);
        for w in out.spikes[0].windows(2) {
            assert!(
                w[1] - w[0] >= refr - 1e-12,
                "ISI {} violates refractory {refr}",
                w[1] - w[0]
            );
        }
    }

    #[test]
    fn f_i_curve_is_nondecreasing() {
        let core = quiet_core(1);
        let mut last = 0.0;
        for count in [0u32, 5, 10, 15, 20, 30, 40, 55] {
            let (table, events) = ampa_drive(count.max(1), 30.0, 8.0);
            let table = if count == 0 { SynapseTable::default() } else { table };
            let out = simulate(&[core.clone()], &table, &events, 8.0, 1e-4, 0).unwrap();
            let rate = out.mean_rate_between(0, 2.0, 8.0);
            assert!(
                rate >= last - 1e-9,
                "rate dropped from {last} to {rate} at {count} synapses"
            );
            last = rate;
        }
        assert!(last > 20.0);
    }

    #[test]
    fn inhibition_reduces_rate() {
        let core = quiet_core(1);
        let (mut table, mut events) = ampa_drive(30, 30.0, 6.0);
        let baseline = simulate(&[core.clone()], &table, &events, 6.0, 1e-4, 0)
            .unwrap()
            .mean_rate_between(0, 1.0, 6.0);
        // Add a second channel driving GABA_B synapses.
        table.entries.push(crate::substrate::SynapseEntry {
            source: EventSource::Input(1),
            target: 0,
            kind: SynapseType::GabaB,
            count: 30,
        });
        let inhib_events: Vec<AddressEvent> = regular_spike_times(30.0, 6.0)
            .into_iter()
            .map(|t| AddressEvent { time: t, source: 1 })
            .collect();
        events.extend(inhib_events);
        events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.source.cmp(&b.source)));
        let suppressed = simulate(&[core], &table, &events, 6.0, 1e-4, 0)
            .unwrap()
            .mean_rate_between(0, 1.0, 6.0);
        assert!(
            suppressed < baseline * 0.5,
            "inhibition barely acted: {baseline} -> {suppressed}"
        );
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let mut core = quiet_core(4);
        core.mismatch_sigma = 0.1;
        core.noise_current_sigma = 2.0;
        let w = Connectivity::from_rows(&[vec![3, 2, 1, 0], vec![1, 1, 1, 3]], 3, 64).unwrap();
        let table = compile_connectivity(&w, SynapseType::Ampa, SynapseType::GabaB).unwrap();
        let mut events = Vec::new();
        for (i, rate) in [(0usize, 25.0), (1usize, 18.0)] {
            events.extend(
                regular_spike_times(rate, 4.0)
                    .into_iter()
                    .map(|t| AddressEvent { time: t, source: i }),
            );
        }
        events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.source.cmp(&b.source)));
        let a = simulate(&[core.clone()], &table, &events, 4.0, 1e-4, 42).unwrap();
        let b = simulate(&[core.clone()], &table, &events, 4.0, 1e-4, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.total_spikes() > 0);
        // A different noise seed must change the outcome.
        let c = simulate(&[core], &table, &events, 4.0, 1e-4, 43).unwrap();
        assert_ne!(a.spikes, c.spikes);
    }

    #[test]
    fn noise_alone_can_fire_and_is_reproducible() {
        let mut core = quiet_core(2);
        core.noise_current_sigma = 300.0; // strong, to fire from rest quickly
        let a = simulate(&[core.clone()], &SynapseTable::default(), &[], 4.0, 1e-4, 5).unwrap();
        let b = simulate(&[core], &SynapseTable::default(), &[], 4.0, 1e-4, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.total_spikes() > 0);
    }

    #[test]
    fn recurrent_inhibition_across_cores() {
        // Neuron 0 (core 0) drives GABA_B onto neuron 1 (core 1).
        let mut core0 = quiet_core(1);
        core0.core_id = 0;
        let mut core1 = quiet_core(1);
        core1.core_id = 1;
        let (mut table, events) = ampa_drive(30, 30.0, 6.0);
        // Also drive neuron 1 with its own excitatory channel.
        table.entries.push(crate::substrate::SynapseEntry {
            source: EventSource::Input(0),
            target: 1,
            kind: SynapseType::Ampa,
            count: 30,
        });
        let free = simulate(
            &[core0.clone(), core1.clone()],
            &table,
            &events,
            6.0,
            1e-4,
            0,
        )
        .unwrap();
        let free_rate = free.mean_rate_between(1, 1.0, 6.0);

        table.entries.push(crate::substrate::SynapseEntry {
            source: EventSource::Neuron(0),
            target: 1,
            kind: SynapseType::GabaB,
            count: 20,
        });
        let gated = simulate(&[core0, core1], &table, &events, 6.0, 1e-4, 0).unwrap();
        let gated_rate = gated.mean_rate_between(1, 1.0, 6.0);
        assert!(
            gated_rate < free_rate,
            "cross-core inhibition had no effect: {free_rate} vs {gated_rate}"
        );
        // The inhibiting neuron itself is untouched.
        assert_eq!(free.spikes[0], gated.spikes[0]);
    }

    #[test]
    fn simulate_validates_inputs() {
        let core = quiet_core(1);
        let (table, events) = ampa_drive(10, 30.0, 1.0);
        // dt out of range.
        assert!(simulate(&[core.clone()], &table, &events, 1.0, 1e-3, 0).is_err());
        // Unsorted events.
        let bad = vec![
            AddressEvent { time: 0.5, source: 0 },
            AddressEvent { time: 0.1, source: 0 },
        ];
        assert!(simulate(&[core.clone()], &table, &bad, 1.0, 1e-4, 0).is_err());
        // Table targeting a missing neuron.
        let table_bad = SynapseTable {
            entries: vec![crate::substrate::SynapseEntry {
                source: EventSource::Input(0),
                target: 3,
                kind: SynapseType::Ampa,
                count: 1,
            }],
        };
        assert!(simulate(&[core.clone()], &table_bad, &events, 1.0, 1e-4, 0).is_err());
        // Duplicate core ids.
        assert!(simulate(&[core.clone(), core], &table, &events, 1.0, 1e-4, 0).is_err());
    }

    #[test]
    fn events_past_duration_are_ignored() {
        let core = quiet_core(1);
        let (table, _) = ampa_drive(30, 30.0, 1.0);
        let events = vec![AddressEvent { time: 5.0, source: 0 }];
        let out = simulate(&[core], &table, &events, 1.0, 1e-4, 0).unwrap();
        assert_eq!(out.total_spikes(), 0);
        assert_eq!(out.v_final[0], 0.0);
    }

    #[test]
    fn calibration_probe_matches_operating_point() {
        // Default tuning: the rate gain should make 30 synapses at 30 Hz
        // land near 30 Hz output, i.e. gain near 1/30 per synapse per Hz.
        let core = quiet_core(1);
        let gain = calibrate_rate_gain(&core, SynapseType::Ampa, &RateGainProbe::default()).unwrap();
        assert!(
            (0.5 / 30.0..2.0 / 30.0).contains(&gain),
            "rate gain {gain} far from the intended 1/30"
        );
    }
}
