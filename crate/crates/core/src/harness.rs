//! End-to-end experiment harness.
//!
//! One experiment is: synthesize (or receive) a session of motor-unit
//! trials for a finger, train the two-population decoder on the training
//! trial, then decode each test trial several times with fresh device
//! noise and score against the true force in %MVC. A windowed
//! linear-regression baseline is fitted on the same training trial and
//! scored on the same test trials.
//!
//! The deployed decoder couples the populations: every extension neuron
//! inhibits every flexion neuron through a fixed slow synapse, which
//! suppresses co-activation when the antagonist carries the movement.
//! That overlay is part of the inference wiring only — training sees each
//! population alone, driven purely by its own grids.
//!
//! Everything downstream of the config is deterministic: rerunning an
//! experiment reproduces `runs.csv` byte for byte. Repetitions differ
//! only through derived noise seeds, and a repetition that fails (e.g. a
//! diverging neuron) is recorded and skipped instead of sinking the whole
//! experiment.

use std::path::{Path, PathBuf};

use crate::baseline::{LinearModel, BASELINE_HOP, BASELINE_WINDOW_LEN};
use crate::error::{io_err, Error, Result};
use crate::io::KvConfig;
use crate::seeds::{derive_seed, tag};
use crate::signal::{
    exp_kernel_rate, resample_linear, rmse, ForceTrace, Finger, MuSpikeTrain, RateTrace,
};
use crate::substrate::{
    cores_from_config, cores_to_config, merge_event_streams, simulate, calibrate_rate_gain,
    compile_connectivity, CoreConfig, EventSource, RateGainProbe, SynapseEntry, SynapseTable,
    SynapseType, DEFAULT_DT,
};
use crate::synth::{synth_dataset, SynthSpec, TrialSpec};
use crate::trainer::{
    train_decoder, DecoderTraining, PopulationName, PopulationSpec, SubstrateHandle, TrainOptions,
    RATE_KERNEL_TAU, RATE_SAMPLE_RATE,
};

/// Default number of noisy decode repetitions per test trial.
pub const DEFAULT_REPETITIONS: u32 = 5;
/// Default synapse count of each extension-to-flexion inhibitory link.
pub const DEFAULT_INHIBITION_COUNT: u32 = 1;
/// Default device noise level (std of the per-step noise current). Enough
/// to decorrelate spike timing between repeated decodes of the same trial
/// (the readout then varies by a few tenths of a %MVC point to point);
/// raising it further mostly saturates, because the input trains still
/// pin when each neuron can fire.
pub const DEFAULT_NOISE_SIGMA: f64 = 20.0;
/// Extension cores ship a higher excitatory gain by default: the
/// extension grids carry fewer units, so each synapse must contribute
/// more rate for the population to reach the same readout scale.
pub const DEFAULT_EXTENSION_GAIN_BOOST: f64 = 2.0;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Full description of one experiment. Everything has a default; a config
/// file only needs to name what it changes.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub fingers: Vec<Finger>,
    /// Trial length, seconds.
    pub duration: f64,
    /// Ramp apex, %MVC.
    pub peak_pct_mvc: f64,
    /// Force sampling rate, Hz.
    pub force_sample_rate: f64,
    /// Flexion-extension ramp pairs per trial.
    pub n_ramps: u32,
    pub n_flexion_units: usize,
    pub n_extension_units: usize,
    pub n_trials: u32,
    /// 1-based trial used for training and baseline fitting.
    pub train_trial: u32,
    /// 1-based held-out trials.
    pub test_trials: Vec<u32>,
    pub n_repetitions: u32,
    pub epochs: u32,
    pub learning_rate: f64,
    /// Per-connection synapse bound.
    pub k: u32,
    /// Per-neuron fan-in budget for the trained matrix.
    pub fan_in_limit: u32,
    pub dt: f64,
    pub seed: u64,
    /// Synapses of each extension-to-flexion inhibitory link (0 disables
    /// the overlay).
    pub inhibition_count: u32,
    pub baseline_window_len: f64,
    pub baseline_hop: f64,
    pub flexion: PopulationSpec,
    pub extension: PopulationSpec,
    /// Core templates, one per referenced core id.
    pub cores: Vec<CoreConfig>,
    /// When set, trainer checkpoints land here.
    pub checkpoint_dir: Option<PathBuf>,
}

/// The default cores: flexion on core 0 with stock parameters, extension
/// on core 1 with the excitatory gain boost.
pub fn default_cores(seed: u64, noise_sigma: f64) -> Vec<CoreConfig> {
    let mut flex = CoreConfig::new(0, 20, seed);
    flex.noise_current_sigma = noise_sigma;
    let mut ext = CoreConfig::new(1, 20, seed);
    ext.noise_current_sigma = noise_sigma;
    ext.synapse.ampa.gain *= DEFAULT_EXTENSION_GAIN_BOOST;
    vec![flex, ext]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let trial = TrialSpec::default();
        let seed = 42;
        ExperimentConfig {
            fingers: vec![Finger::Index],
            duration: trial.duration,
            peak_pct_mvc: trial.peak_pct_mvc,
            force_sample_rate: trial.sample_rate,
            n_ramps: trial.n_ramps,
            n_flexion_units: 20,
            n_extension_units: 6,
            n_trials: 3,
            train_trial: 1,
            test_trials: vec![2, 3],
            n_repetitions: DEFAULT_REPETITIONS,
            epochs: crate::trainer::DEFAULT_EPOCHS,
            learning_rate: crate::trainer::DEFAULT_LEARNING_RATE,
            k: crate::trainer::DEFAULT_K,
            fan_in_limit: crate::trainer::DEFAULT_FAN_IN_LIMIT,
            dt: DEFAULT_DT,
            seed,
            inhibition_count: DEFAULT_INHIBITION_COUNT,
            baseline_window_len: BASELINE_WINDOW_LEN,
            baseline_hop: BASELINE_HOP,
            flexion: PopulationSpec {
                name: PopulationName::Flexion,
                core_id: 0,
                n_neurons: 20,
                grids: vec![1, 2],
            },
            extension: PopulationSpec {
                name: PopulationName::Extension,
                core_id: 1,
                n_neurons: 20,
                grids: vec![3, 4],
            },
            cores: default_cores(seed, DEFAULT_NOISE_SIGMA),
            checkpoint_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fingers.is_empty() {
            return Err(Error::invalid("no fingers configured"));
        }
        if self.n_trials == 0 || self.train_trial == 0 || self.train_trial > self.n_trials {
            return Err(Error::invalid(format!(
                "train trial {} outside 1..={}",
                self.train_trial, self.n_trials
            )));
        }
        if self.test_trials.is_empty() {
            return Err(Error::invalid("no test trials configured"));
        }
        for &t in &self.test_trials {
            if t == 0 || t > self.n_trials {
                return Err(Error::invalid(format!(
                    "test trial {t} outside 1..={}",
                    self.n_trials
                )));
            }
            if t == self.train_trial {
                return Err(Error::invalid(format!(
                    "trial {t} cannot be both the training and a test trial"
                )));
            }
        }
        if self.n_repetitions == 0 {
            return Err(Error::invalid("need at least one repetition"));
        }
        self.flexion.validate()?;
        self.extension.validate()?;
        for spec in [&self.flexion, &self.extension] {
            if self.core_template(spec.core_id).is_none() {
                return Err(Error::invalid(format!(
                    "population {} references core {} but no such core is configured",
                    spec.name, spec.core_id
                )));
            }
        }
        for core in &self.cores {
            core.validate()?;
        }
        for g in &self.flexion.grids {
            if self.extension.grids.contains(g) {
                return Err(Error::invalid(format!(
                    "grid {g} assigned to both populations"
                )));
            }
        }
        Ok(())
    }

    pub fn core_template(&self, core_id: u8) -> Option<&CoreConfig> {
        self.cores.iter().find(|c| c.core_id == core_id)
    }

    /// The synthesis spec this config implies.
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            n_flexion: self.n_flexion_units,
            n_extension: self.n_extension_units,
            n_trials: self.n_trials,
            trial: TrialSpec {
                duration: self.duration,
                peak_pct_mvc: self.peak_pct_mvc,
                sample_rate: self.force_sample_rate,
                n_ramps: self.n_ramps,
            },
            seed: self.seed,
        }
    }

    /// Trainer hyperparameters for one finger's run; the seed is derived
    /// per finger so sessions never share random streams.
    pub fn train_options(&self, finger: Finger) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            k: self.k,
            fan_in_limit: self.fan_in_limit,
            seed: derive_seed(self.seed, &[tag::FINGER, finger.index()]),
            checkpoint_dir: self.checkpoint_dir.clone(),
        }
    }

    /// Population core with the population's neuron count applied.
    /// Mismatch depends only on (seed, core, neuron index), so training on
    /// a shrunk core and deploying beside another population is exact.
    fn population_core(&self, spec: &PopulationSpec) -> Result<CoreConfig> {
        let mut core = self
            .core_template(spec.core_id)
            .ok_or_else(|| Error::invalid(format!("core {} not configured", spec.core_id)))?
            .clone();
        core.n_neurons = spec.n_neurons;
        core.validate()?;
        Ok(core)
    }

    /// Measure the rate gain and bundle the substrate handle for one
    /// population.
    pub fn handle_for(&self, spec: &PopulationSpec) -> Result<SubstrateHandle> {
        let core = self.population_core(spec)?;
        let alpha = calibrate_rate_gain(&core, SynapseType::Ampa, &RateGainProbe::default())?;
        Ok(SubstrateHandle {
            core,
            exc: SynapseType::Ampa,
            inh: SynapseType::GabaB,
            dt: self.dt,
            rate_gain: alpha,
        })
    }

    // -- config file ---------------------------------------------------------

    /// Read a config, starting from defaults and overriding any key the
    /// file names. Core templates replace the default set wholesale when
    /// any `core.<id>.*` key appears.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        if let Some(fingers) = kv.get_list::<Finger>("fingers")? {
            cfg.fingers = fingers;
        }
        cfg.duration = kv.get_or("duration_s", cfg.duration)?;
        cfg.peak_pct_mvc = kv.get_or("peak_pct_mvc", cfg.peak_pct_mvc)?;
        cfg.force_sample_rate = kv.get_or("force_sample_rate_hz", cfg.force_sample_rate)?;
        cfg.n_ramps = kv.get_or("n_ramps", cfg.n_ramps)?;
        cfg.n_flexion_units = kv.get_or("n_flexion_units", cfg.n_flexion_units)?;
        cfg.n_extension_units = kv.get_or("n_extension_units", cfg.n_extension_units)?;
        cfg.n_trials = kv.get_or("n_trials", cfg.n_trials)?;
        cfg.train_trial = kv.get_or("train_trial", cfg.train_trial)?;
        if let Some(tests) = kv.get_list::<u32>("test_trials")? {
            cfg.test_trials = tests;
        }
        cfg.n_repetitions = kv.get_or("n_repetitions", cfg.n_repetitions)?;
        cfg.epochs = kv.get_or("epochs", cfg.epochs)?;
        cfg.learning_rate = kv.get_or("learning_rate", cfg.learning_rate)?;
        cfg.k = kv.get_or("k_max", cfg.k)?;
        cfg.fan_in_limit = kv.get_or("fan_in_limit", cfg.fan_in_limit)?;
        cfg.dt = kv.get_or("dt_s", cfg.dt)?;
        cfg.seed = kv.get_or("seed", cfg.seed)?;
        cfg.inhibition_count = kv.get_or("inhibition_count", cfg.inhibition_count)?;
        cfg.baseline_window_len = kv.get_or("baseline_window_s", cfg.baseline_window_len)?;
        cfg.baseline_hop = kv.get_or("baseline_hop_s", cfg.baseline_hop)?;
        cfg.flexion.core_id = kv.get_or("flexion_core", cfg.flexion.core_id)?;
        cfg.extension.core_id = kv.get_or("extension_core", cfg.extension.core_id)?;
        cfg.flexion.n_neurons = kv.get_or("flexion_neurons", cfg.flexion.n_neurons)?;
        cfg.extension.n_neurons = kv.get_or("extension_neurons", cfg.extension.n_neurons)?;
        if let Some(grids) = kv.get_list::<u8>("flexion_grids")? {
            cfg.flexion.grids = grids;
        }
        if let Some(grids) = kv.get_list::<u8>("extension_grids")? {
            cfg.extension.grids = grids;
        }
        if let Some(dir) = kv.get("checkpoint_dir") {
            cfg.checkpoint_dir = Some(PathBuf::from(dir));
        }
        if kv.keys_with_prefix("core.").next().is_some() {
            cfg.cores = cores_from_config(kv)?;
        } else {
            // Defaults carry the experiment seed and noise level.
            let noise = kv.get_or("noise_current_sigma", DEFAULT_NOISE_SIGMA)?;
            cfg.cores = default_cores(cfg.seed, noise);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serialize every setting, core templates included.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set(
            "fingers",
            self.fingers
                .iter()
                .map(|f| f.name())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.set("duration_s", self.duration);
        kv.set("peak_pct_mvc", self.peak_pct_mvc);
        kv.set("force_sample_rate_hz", self.force_sample_rate);
        kv.set("n_ramps", self.n_ramps);
        kv.set("n_flexion_units", self.n_flexion_units);
        kv.set("n_extension_units", self.n_extension_units);
        kv.set("n_trials", self.n_trials);
        kv.set("train_trial", self.train_trial);
        kv.set(
            "test_trials",
            self.test_trials
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.set("n_repetitions", self.n_repetitions);
        kv.set("epochs", self.epochs);
        kv.set("learning_rate", self.learning_rate);
        kv.set("k_max", self.k);
        kv.set("fan_in_limit", self.fan_in_limit);
        kv.set("dt_s", self.dt);
        kv.set("seed", self.seed);
        kv.set("inhibition_count", self.inhibition_count);
        kv.set("baseline_window_s", self.baseline_window_len);
        kv.set("baseline_hop_s", self.baseline_hop);
        kv.set("flexion_core", self.flexion.core_id);
        kv.set("extension_core", self.extension.core_id);
        kv.set("flexion_neurons", self.flexion.n_neurons);
        kv.set("extension_neurons", self.extension.n_neurons);
        kv.set(
            "flexion_grids",
            self.flexion.grids.iter().map(u8::to_string).collect::<Vec<_>>().join(","),
        );
        kv.set(
            "extension_grids",
            self.extension.grids.iter().map(u8::to_string).collect::<Vec<_>>().join(","),
        );
        if let Some(dir) = &self.checkpoint_dir {
            kv.set("checkpoint_dir", dir.display());
        }
        for (key, value) in cores_to_config(&self.cores).entries() {
            kv.set(key, value);
        }
        kv
    }
}

// ---------------------------------------------------------------------------
// Session data
// ---------------------------------------------------------------------------

/// One recorded or synthesized trial: its units (sorted by channel) and
/// the force it was performed against.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialData {
    pub trial: u32,
    pub trains: Vec<MuSpikeTrain>,
    pub force: ForceTrace,
}

/// A full session for one finger.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerData {
    pub finger: Finger,
    pub trials: Vec<TrialData>,
}

impl FingerData {
    pub fn trial(&self, t: u32) -> Option<&TrialData> {
        self.trials.iter().find(|d| d.trial == t)
    }
}

/// Sort trains into channel order: by grid, then unit id.
pub fn sort_channels(trains: &mut [MuSpikeTrain]) {
    trains.sort_by_key(|t| (t.grid, t.mu_id));
}

/// Synthesize the session a config implies for one finger.
pub fn synth_finger_data(cfg: &ExperimentConfig, finger: Finger) -> Result<FingerData> {
    let dataset = synth_dataset(&cfg.synth_spec(), finger)?;
    let trials = (1..=cfg.n_trials)
        .map(|t| {
            let mut trains = dataset
                .trial(t)
                .expect("synth emits every trial")
                .to_vec();
            sort_channels(&mut trains);
            TrialData {
                trial: t,
                trains,
                force: dataset.force.clone(),
            }
        })
        .collect();
    Ok(FingerData { finger, trials })
}

/// Check that every trial carries the same channel sequence and that the
/// required trials exist; returns the shared channel list.
fn check_channels(cfg: &ExperimentConfig, data: &FingerData) -> Result<Vec<(u8, u32)>> {
    let train_trial = data.trial(cfg.train_trial).ok_or_else(|| {
        Error::invalid(format!(
            "finger {}: training trial {} missing",
            data.finger, cfg.train_trial
        ))
    })?;
    let channels: Vec<(u8, u32)> = train_trial.trains.iter().map(|t| (t.grid, t.mu_id)).collect();
    if channels.is_empty() {
        return Err(Error::invalid(format!("finger {}: no units", data.finger)));
    }
    let mut required = cfg.test_trials.clone();
    required.push(cfg.train_trial);
    for &t in &required {
        let trial = data
            .trial(t)
            .ok_or_else(|| Error::invalid(format!("finger {}: trial {t} missing", data.finger)))?;
        let got: Vec<(u8, u32)> = trial.trains.iter().map(|d| (d.grid, d.mu_id)).collect();
        if got != channels {
            return Err(Error::invalid(format!(
                "finger {}: trial {t} has a different unit set than trial {}",
                data.finger, cfg.train_trial
            )));
        }
        if trial.force.t0 != 0.0 {
            return Err(Error::invalid(format!(
                "finger {}: trial {t} force must start at t = 0",
                data.finger
            )));
        }
        trial.force.validate()?;
    }
    Ok(channels)
}

// ---------------------------------------------------------------------------
// Inference topology
// ---------------------------------------------------------------------------

/// The deployed decoder: two cores, the trained matrices lowered into one
/// synapse table over the global input space, and the inhibitory overlay.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceSetup {
    pub cores: Vec<CoreConfig>,
    pub table: SynapseTable,
    pub n_flexion_neurons: usize,
    pub n_extension_neurons: usize,
    pub dt: f64,
}

/// Indices (into the sorted channel list) feeding one population.
fn input_map(channels: &[MuSpikeTrain], grids: &[u8]) -> Vec<usize> {
    channels
        .iter()
        .enumerate()
        .filter(|(_, t)| grids.contains(&t.grid))
        .map(|(i, _)| i)
        .collect()
}

/// Assemble the inference wiring from the two trained matrices.
///
/// Flexion neurons take global ids `0..m_flex`, extension neurons follow.
/// Each population's matrix is remapped onto the global input space, then
/// every extension neuron gets a fixed inhibitory synapse onto every
/// flexion neuron (`inhibition_count` 0 drops the overlay). The overlay is
/// deployment wiring on top of the trained fan-in, not part of it.
pub fn build_inference_topology(
    cfg: &ExperimentConfig,
    training: &DecoderTraining,
    trains: &[MuSpikeTrain],
) -> Result<InferenceSetup> {
    let flex_handle_types = (SynapseType::Ampa, SynapseType::GabaB);
    let flex_map = input_map(trains, &cfg.flexion.grids);
    let ext_map = input_map(trains, &cfg.extension.grids);
    if flex_map.len() != training.flexion.w.n_inputs() {
        return Err(Error::invalid(format!(
            "flexion matrix expects {} inputs, the trial provides {}",
            training.flexion.w.n_inputs(),
            flex_map.len()
        )));
    }
    if ext_map.len() != training.extension.w.n_inputs() {
        return Err(Error::invalid(format!(
            "extension matrix expects {} inputs, the trial provides {}",
            training.extension.w.n_inputs(),
            ext_map.len()
        )));
    }
    let m_flex = training.flexion.w.n_outputs();
    let m_ext = training.extension.w.n_outputs();

    let flex_table = compile_connectivity(&training.flexion.w, flex_handle_types.0, flex_handle_types.1)?
        .remapped(&flex_map, 0)?;
    let ext_table = compile_connectivity(&training.extension.w, flex_handle_types.0, flex_handle_types.1)?
        .remapped(&ext_map, m_flex)?;
    let mut overlay = SynapseTable::default();
    if cfg.inhibition_count > 0 {
        for j in 0..m_ext {
            for i in 0..m_flex {
                overlay.entries.push(SynapseEntry {
                    source: EventSource::Neuron(m_flex + j),
                    target: i,
                    kind: SynapseType::GabaB,
                    count: cfg.inhibition_count,
                });
            }
        }
    }
    let table = SynapseTable::merged(&[&flex_table, &ext_table, &overlay]);

    let mut flex_core = cfg.population_core(&cfg.flexion)?;
    let mut ext_core = cfg.population_core(&cfg.extension)?;
    flex_core.n_neurons = m_flex;
    ext_core.n_neurons = m_ext;
    Ok(InferenceSetup {
        cores: vec![flex_core, ext_core],
        table,
        n_flexion_neurons: m_flex,
        n_extension_neurons: m_ext,
        dt: cfg.dt,
    })
}

/// One decoded repetition: predicted force, the two population-mean rate
/// traces it was read from (on the readout grid), and the raw device
/// spikes behind them (flexion neurons first, then extension).
#[derive(Debug, Clone, PartialEq)]
pub struct RepOutcome {
    /// 1-based repetition number.
    pub repetition: u32,
    pub pred: ForceTrace,
    pub rate_flex: RateTrace,
    pub rate_ext: RateTrace,
    pub rmse_pct_mvc: f64,
    pub spikes: Vec<Vec<f64>>,
}

/// Mean across neurons of each neuron's exponential-kernel rate.
fn population_rate(
    spikes: &[Vec<f64>],
    sample_rate: f64,
    duration: f64,
) -> Result<RateTrace> {
    let n = spikes.len().max(1) as f64;
    let mut mean: Option<RateTrace> = None;
    for train in spikes {
        let r = exp_kernel_rate(train, RATE_KERNEL_TAU, sample_rate, duration)?;
        match &mut mean {
            None => mean = Some(r),
            Some(m) => {
                for (a, b) in m.values.iter_mut().zip(&r.values) {
                    *a += b;
                }
            }
        }
    }
    let mut mean = mean.ok_or_else(|| Error::invalid("population has no neurons"))?;
    for v in &mut mean.values {
        *v /= n;
    }
    Ok(mean)
}

/// Stream one trial through the deployed decoder and read out the force.
pub fn decode_trial(
    setup: &InferenceSetup,
    trains: &[MuSpikeTrain],
    truth: &ForceTrace,
    repetition: u32,
    noise_seed: u64,
) -> Result<RepOutcome> {
    let duration = truth.duration();
    let events = merge_event_streams(trains)?;
    let out = simulate(&setup.cores, &setup.table, &events, duration, setup.dt, noise_seed)?;
    let rate_flex = population_rate(
        &out.spikes[..setup.n_flexion_neurons],
        truth.sample_rate,
        duration,
    )?;
    let rate_ext = population_rate(
        &out.spikes[setup.n_flexion_neurons..],
        truth.sample_rate,
        duration,
    )?;
    let samples: Vec<f64> = rate_flex
        .values
        .iter()
        .zip(&rate_ext.values)
        .map(|(f, e)| f - e)
        .collect();
    let pred = ForceTrace {
        sample_rate: truth.sample_rate,
        t0: 0.0,
        samples,
    };
    let rmse_pct_mvc = rmse(&pred, truth)?;
    Ok(RepOutcome {
        repetition,
        pred,
        rate_flex,
        rate_ext,
        rmse_pct_mvc,
        spikes: out.spikes,
    })
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

/// Which decoder produced a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Neuromorphic,
    Baseline,
}

impl DecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Neuromorphic => "neuromorphic",
            DecoderKind::Baseline => "baseline",
        }
    }
}

/// One scored decode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub finger: Finger,
    pub trial: u32,
    pub decoder: DecoderKind,
    pub repetition: u32,
    /// None when the repetition failed.
    pub rmse_pct_mvc: Option<f64>,
    pub mean_rate_flex_hz: Option<f64>,
    pub mean_rate_ext_hz: Option<f64>,
    /// "ok" or the failure description.
    pub status: String,
}

/// Flat table of every scored decode in the experiment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub records: Vec<RunRecord>,
}

impl ResultTable {
    /// Mean, sample std, and count of successful RMSEs for one cell.
    pub fn pooled_rmse(
        &self,
        finger: Finger,
        trial: u32,
        decoder: DecoderKind,
    ) -> Option<(f64, f64, usize)> {
        let values: Vec<f64> = self
            .records
            .iter()
            .filter(|r| {
                r.finger == finger && r.trial == trial && r.decoder == decoder
            })
            .filter_map(|r| r.rmse_pct_mvc)
            .collect();
        if values.is_empty() {
            return None;
        }
        let (mean, std) = crate::signal::mean_std(&values);
        Some((mean, std, values.len()))
    }

    /// CSV serialization; floats use shortest-roundtrip formatting, so the
    /// file is byte-stable across reruns.
    pub fn to_csv_string(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from(
            "finger,trial,decoder,repetition,rmse_pct_mvc,mean_rate_flex_hz,mean_rate_ext_hz,status\n",
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.finger,
                r.trial,
                r.decoder.name(),
                r.repetition,
                opt(r.rmse_pct_mvc),
                opt(r.mean_rate_flex_hz),
                opt(r.mean_rate_ext_hz),
                r.status.replace(',', ";"),
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| io_err(format!("creating {}", parent.display()), e))?;
            }
        }
        std::fs::write(path, self.to_csv_string())
            .map_err(|e| io_err(format!("writing {}", path.display()), e))
    }
}

/// Everything measured on one test trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub finger: Finger,
    pub trial: u32,
    /// Truth resampled onto the readout grid.
    pub truth: ForceTrace,
    /// Successful repetitions, in repetition order.
    pub reps: Vec<RepOutcome>,
    /// (repetition, error) for the failed ones.
    pub failures: Vec<(u32, String)>,
    pub baseline_pred: ForceTrace,
    pub baseline_rmse: f64,
}

/// One finger's full evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerReport {
    pub finger: Finger,
    pub training: DecoderTraining,
    pub rate_gain_flex: f64,
    pub rate_gain_ext: f64,
    pub trials: Vec<TrialOutcome>,
}

/// The whole experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub fingers: Vec<FingerReport>,
    pub table: ResultTable,
}

impl ExperimentReport {
    /// Human-readable per-trial summary.
    pub fn summary_string(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        for fr in &self.fingers {
            let _ = writeln!(
                out,
                "finger {}: rate gain {:.4} (flexion) / {:.4} (extension)",
                fr.finger, fr.rate_gain_flex, fr.rate_gain_ext
            );
            if let (Some(first), Some(last)) = (
                fr.training.flexion.loss_history().first(),
                fr.training.flexion.loss_history().last(),
            ) {
                let _ = writeln!(out, "  flexion loss {first:.2} -> {last:.2}");
            }
            if let (Some(first), Some(last)) = (
                fr.training.extension.loss_history().first(),
                fr.training.extension.loss_history().last(),
            ) {
                let _ = writeln!(out, "  extension loss {first:.2} -> {last:.2}");
            }
            for t in &fr.trials {
                let pooled = self.table.pooled_rmse(fr.finger, t.trial, DecoderKind::Neuromorphic);
                match pooled {
                    Some((mean, std, n)) => {
                        let _ = writeln!(
                            out,
                            "  trial {}: rmse {mean:.2} +/- {std:.2} %MVC over {n} repetitions, baseline {:.2} %MVC",
                            t.trial, t.baseline_rmse
                        );
                    }
                    None => {
                        let _ = writeln!(out, "  trial {}: all repetitions failed", t.trial);
                    }
                }
                for (rep, err) in &t.failures {
                    let _ = writeln!(out, "    repetition {rep} failed: {err}");
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// The experiment itself
// ---------------------------------------------------------------------------

/// Train and evaluate the decoder on provided session data.
pub fn run_experiment_with_data(
    cfg: &ExperimentConfig,
    data: &[FingerData],
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut fingers = Vec::new();
    let mut table = ResultTable::default();
    for fd in data {
        check_channels(cfg, fd)?;
        let train_data = fd.trial(cfg.train_trial).expect("checked above");

        let flex_handle = cfg.handle_for(&cfg.flexion)?;
        let ext_handle = cfg.handle_for(&cfg.extension)?;
        let opts = cfg.train_options(fd.finger);
        let training = train_decoder(
            &train_data.trains,
            &train_data.force,
            &cfg.flexion,
            &cfg.extension,
            &flex_handle,
            &ext_handle,
            &opts,
        )?;
        let setup = build_inference_topology(cfg, &training, &train_data.trains)?;
        let baseline = LinearModel::fit(
            &train_data.trains,
            &train_data.force,
            cfg.baseline_window_len,
            cfg.baseline_hop,
        )?;

        let mut trials = Vec::new();
        for &t in &cfg.test_trials {
            let trial_data = fd.trial(t).expect("checked above");
            let duration = trial_data.force.duration();
            // Truth on the readout grid; bit-identical when already there.
            let n_readout = (RATE_SAMPLE_RATE * duration).round() as usize;
            let truth = if trial_data.force.sample_rate == RATE_SAMPLE_RATE
                && trial_data.force.t0 == 0.0
                && trial_data.force.samples.len() == n_readout
            {
                trial_data.force.clone()
            } else {
                resample_linear(&trial_data.force, RATE_SAMPLE_RATE, 0.0, n_readout)?
            };

            let mut reps = Vec::new();
            let mut failures = Vec::new();
            for rep in 1..=cfg.n_repetitions {
                let noise_seed = derive_seed(
                    cfg.seed,
                    &[tag::REPETITION, fd.finger.index(), t as u64, rep as u64],
                );
                match decode_trial(&setup, &trial_data.trains, &truth, rep, noise_seed) {
                    Ok(outcome) => {
                        table.records.push(RunRecord {
                            finger: fd.finger,
                            trial: t,
                            decoder: DecoderKind::Neuromorphic,
                            repetition: rep,
                            rmse_pct_mvc: Some(outcome.rmse_pct_mvc),
                            mean_rate_flex_hz: Some(trace_mean(&outcome.rate_flex)),
                            mean_rate_ext_hz: Some(trace_mean(&outcome.rate_ext)),
                            status: "ok".into(),
                        });
                        reps.push(outcome);
                    }
                    Err(e) => {
                        table.records.push(RunRecord {
                            finger: fd.finger,
                            trial: t,
                            decoder: DecoderKind::Neuromorphic,
                            repetition: rep,
                            rmse_pct_mvc: None,
                            mean_rate_flex_hz: None,
                            mean_rate_ext_hz: None,
                            status: e.to_string(),
                        });
                        failures.push((rep, e.to_string()));
                    }
                }
            }
            if reps.is_empty() {
                return Err(Error::invalid(format!(
                    "finger {}, trial {t}: every repetition failed; first error: {}",
                    fd.finger,
                    failures
                        .first()
                        .map(|(_, e)| e.as_str())
                        .unwrap_or("unknown")
                )));
            }

            let baseline_pred = baseline.predict(&trial_data.trains, duration)?;
            let baseline_truth = resample_linear(
                &trial_data.force,
                baseline_pred.sample_rate,
                baseline_pred.t0,
                baseline_pred.samples.len(),
            )?;
            let baseline_rmse = rmse(&baseline_pred, &baseline_truth)?;
            table.records.push(RunRecord {
                finger: fd.finger,
                trial: t,
                decoder: DecoderKind::Baseline,
                repetition: 1,
                rmse_pct_mvc: Some(baseline_rmse),
                mean_rate_flex_hz: None,
                mean_rate_ext_hz: None,
                status: "ok".into(),
            });

            trials.push(TrialOutcome {
                finger: fd.finger,
                trial: t,
                truth,
                reps,
                failures,
                baseline_pred,
                baseline_rmse,
            });
        }
        fingers.push(FingerReport {
            finger: fd.finger,
            training,
            rate_gain_flex: flex_handle.rate_gain,
            rate_gain_ext: ext_handle.rate_gain,
            trials,
        });
    }
    Ok(ExperimentReport { fingers, table })
}

/// Synthesize the configured sessions and run the experiment on them.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = cfg
        .fingers
        .iter()
        .map(|&f| synth_finger_data(cfg, f))
        .collect::<Result<Vec<_>>>()?;
    run_experiment_with_data(cfg, &data)
}

fn trace_mean(trace: &RateTrace) -> f64 {
    if trace.values.is_empty() {
        return 0.0;
    }
    trace.values.iter().sum::<f64>() / trace.values.len() as f64
}

// ---------------------------------------------------------------------------
// Plot export
// ---------------------------------------------------------------------------

/// Write one repetition's traces as a plottable CSV: time, truth, both
/// decoders, and the two population rates (extension also sign-flipped,
/// which is how it enters the readout).
pub fn plot_csv_string(outcome: &TrialOutcome, repetition: u32) -> Result<String> {
    use std::fmt::Write as _;
    let rep = outcome
        .reps
        .iter()
        .find(|r| r.repetition == repetition)
        .ok_or_else(|| {
            Error::invalid(format!(
                "repetition {repetition} is not among the successful ones"
            ))
        })?;
    let truth = &outcome.truth;
    let mut out = String::from(
        "time_s,truth_pct_mvc,neuromorphic_pct_mvc,baseline_pct_mvc,rate_flex_hz,rate_ext_hz,rate_ext_inverted_hz\n",
    );
    for i in 0..truth.samples.len() {
        let t = truth.time_at(i);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            t,
            truth.samples[i],
            rep.pred.samples[i],
            outcome.baseline_pred.value_at(t),
            rep.rate_flex.values[i],
            rep.rate_ext.values[i],
            -rep.rate_ext.values[i],
        );
    }
    Ok(out)
}

pub fn export_plot_data(outcome: &TrialOutcome, repetition: u32, path: &Path) -> Result<()> {
    let content = plot_csv_string(outcome, repetition)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| io_err(format!("creating {}", parent.display()), e))?;
        }
    }
    std::fs::write(path, content).map_err(|e| io_err(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Tiny but complete experiment: a few units, short trial, two epochs.
    fn toy_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.duration = 4.0;
        cfg.n_flexion_units = 4;
        cfg.n_extension_units = 2;
        cfg.n_trials = 2;
        cfg.test_trials = vec![2];
        cfg.n_repetitions = 2;
        cfg.epochs = 2;
        cfg.flexion.n_neurons = 3;
        cfg.extension.n_neurons = 3;
        cfg.cores = default_cores(cfg.seed, 5.0);
        cfg
    }

    #[test]
    fn config_roundtrips_through_kv() {
        let cfg = toy_config();
        let text = cfg.to_kv().to_config_string();
        let back = ExperimentConfig::from_kv(&KvConfig::parse_str(&text, "mem").unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn config_validation_catches_bad_trials() {
        let mut cfg = toy_config();
        cfg.test_trials = vec![1];
        assert!(cfg.validate().is_err(), "test trial equal to train trial");
        cfg.test_trials = vec![5];
        assert!(cfg.validate().is_err(), "test trial out of range");
        let mut cfg = toy_config();
        cfg.extension.grids = vec![2, 3];
        assert!(cfg.validate().is_err(), "overlapping grids");
        let mut cfg = toy_config();
        cfg.flexion.core_id = 9;
        assert!(cfg.validate().is_err(), "unconfigured core");
    }

    #[test]
    fn kv_overrides_apply() {
        let kv = KvConfig::parse_str(
            "fingers = middle,ring\nepochs = 7\ninhibition_count = 0\nextension_grids = 4\n",
            "mem",
        )
        .unwrap();
        let cfg = ExperimentConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.fingers, vec![Finger::Middle, Finger::Ring]);
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.inhibition_count, 0);
        assert_eq!(cfg.extension.grids, vec![4]);
        assert_eq!(cfg.duration, 25.0, "unnamed keys keep defaults");
    }

    #[test]
    fn channel_check_rejects_mismatched_trials() {
        let cfg = toy_config();
        let mut data = synth_finger_data(&cfg, Finger::Index).unwrap();
        assert!(check_channels(&cfg, &data).is_ok());
        data.trials[1].trains.remove(0);
        assert!(check_channels(&cfg, &data).is_err());
    }

    #[test]
    fn topology_places_populations_and_overlay() {
        let cfg = toy_config();
        let data = synth_finger_data(&cfg, Finger::Index).unwrap();
        let train_data = data.trial(1).unwrap();
        let flex_handle = cfg.handle_for(&cfg.flexion).unwrap();
        let ext_handle = cfg.handle_for(&cfg.extension).unwrap();
        let training = train_decoder(
            &train_data.trains,
            &train_data.force,
            &cfg.flexion,
            &cfg.extension,
            &flex_handle,
            &ext_handle,
            &cfg.train_options(Finger::Index),
        )
        .unwrap();
        let setup = build_inference_topology(&cfg, &training, &train_data.trains).unwrap();
        assert_eq!(setup.cores.len(), 2);
        assert_eq!(setup.cores[0].n_neurons, 3);
        assert_eq!(setup.cores[1].n_neurons, 3);
        // Overlay: 3 extension neurons x 3 flexion targets, recurrent GABA_B.
        let overlay: Vec<_> = setup
            .table
            .entries
            .iter()
            .filter(|e| matches!(e.source, EventSource::Neuron(_)))
            .collect();
        assert_eq!(overlay.len(), 9);
        for e in &overlay {
            assert!(e.target < 3);
            assert_eq!(e.kind, SynapseType::GabaB);
            assert_eq!(e.count, 1);
            match e.source {
                EventSource::Neuron(n) => assert!((3..6).contains(&n)),
                _ => unreachable!(),
            }
        }
        // Trained entries target their own population's global range and
        // read the global input space.
        let n_channels = train_data.trains.len();
        for e in &setup.table.entries {
            if let EventSource::Input(i) = e.source {
                assert!(i < n_channels);
            }
            assert!(e.target < 6);
        }
        // Inhibition 0 drops the overlay.
        let mut cfg0 = cfg.clone();
        cfg0.inhibition_count = 0;
        let setup0 = build_inference_topology(&cfg0, &training, &train_data.trains).unwrap();
        assert!(setup0
            .table
            .entries
            .iter()
            .all(|e| matches!(e.source, EventSource::Input(_))));
    }

    #[test]
    fn experiment_is_deterministic_and_scored() {
        let cfg = toy_config();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.table.to_csv_string(), b.table.to_csv_string());
        // 2 repetitions + 1 baseline row on one test trial.
        assert_eq!(a.table.records.len(), 3);
        let (mean, _, n) = a
            .table
            .pooled_rmse(Finger::Index, 2, DecoderKind::Neuromorphic)
            .unwrap();
        assert_eq!(n, 2);
        assert!(mean.is_finite() && mean >= 0.0);
        assert!(a
            .table
            .pooled_rmse(Finger::Index, 2, DecoderKind::Baseline)
            .is_some());
        let report = &a.fingers[0];
        assert_eq!(report.trials.len(), 1);
        let trial = &report.trials[0];
        assert_eq!(trial.reps.len(), 2);
        assert!(trial.failures.is_empty());
        // Prediction is exactly the rate difference.
        let rep = &trial.reps[0];
        for i in 0..rep.pred.samples.len() {
            let expect = rep.rate_flex.values[i] - rep.rate_ext.values[i];
            assert!((rep.pred.samples[i] - expect).abs() < 1e-12);
        }
        // Different noise seeds separate repetitions.
        assert_ne!(trial.reps[0].pred.samples, trial.reps[1].pred.samples);
        // Plot export covers the readout grid with 7 columns.
        let csv = plot_csv_string(trial, 1).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap().split(',').count(),
            7,
        );
        assert_eq!(csv.lines().count() - 1, trial.truth.samples.len());
        assert!(plot_csv_string(trial, 99).is_err());
    }

    #[test]
    fn pooled_stats_match_hand_calculation() {
        let mut table = ResultTable::default();
        for (rep, rmse) in [(1, 4.0), (2, 6.0), (3, 8.0)] {
            table.records.push(RunRecord {
                finger: Finger::Index,
                trial: 2,
                decoder: DecoderKind::Neuromorphic,
                repetition: rep,
                rmse_pct_mvc: Some(rmse),
                mean_rate_flex_hz: None,
                mean_rate_ext_hz: None,
                status: "ok".into(),
            });
        }
        table.records.push(RunRecord {
            finger: Finger::Index,
            trial: 2,
            decoder: DecoderKind::Neuromorphic,
            repetition: 4,
            rmse_pct_mvc: None,
            mean_rate_flex_hz: None,
            mean_rate_ext_hz: None,
            status: "neuron 3 diverged".into(),
        });
        let (mean, std, n) = table
            .pooled_rmse(Finger::Index, 2, DecoderKind::Neuromorphic)
            .unwrap();
        assert_eq!(n, 3, "failed repetition is excluded");
        assert!((mean - 6.0).abs() < 1e-12);
        assert!((std - 2.0).abs() < 1e-12);
        // Failure rows serialize with an empty rmse field.
        let csv = table.to_csv_string();
        assert!(csv.contains("index,2,neuromorphic,4,,,,neuron 3 diverged"));
    }
}
