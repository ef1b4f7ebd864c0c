//! Synthetic motor-unit data for the isometric force-tracking task.
//!
//! A session is built in three layers:
//!
//! 1. [`triangular_profile`]: the target force, alternating flexion (+) and
//!    extension (-) triangular ramps, zero at every segment boundary.
//! 2. [`synth_mu_population`]: a pool of motor-unit profiles with recruitment
//!    thresholds, rate ranges, and a direction bias (flexor-grid units
//!    respond weakly to extension and vice versa, mimicking crosstalk
//!    between muscles).
//! 3. [`synth_spike_trains`]: spike times drawn from an inhomogeneous
//!    renewal process by time rescaling: the rate-hazard integral is
//!    accumulated sample by sample and a spike fires whenever it crosses a
//!    lognormal-jittered unit target. `jitter_cv = 0` degenerates to a
//!    deterministic integrate-and-fire sampler.
//!
//! The firing-rate model of a unit with threshold `th` under drive `d`
//! (its own direction's rectified force plus `direction_bias` times the
//! opposite one) is zero below threshold and otherwise ramps linearly from
//! `min_rate_hz` at recruitment to `peak_rate_hz` at the profile peak.
//!
//! [`synth_dataset`] ties the layers together for a whole session and
//! regenerates units whose expected mean rate over the trial would fall
//! below the physiological acceptance band.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use crate::error::{Error, Result};
use crate::seeds::{derive_seed, tag};
use crate::signal::{
    validate_train, Finger, ForceTrace, MuSpikeTrain, MAX_MEAN_RATE_HZ, MIN_MEAN_RATE_HZ,
};

// ---------------------------------------------------------------------------
// Task profile
// ---------------------------------------------------------------------------

/// Geometry of one trial of the tracking task.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSpec {
    /// Trial length, seconds.
    pub duration: f64,
    /// Apex amplitude of every ramp, %MVC.
    pub peak_pct_mvc: f64,
    /// Force sampling rate, Hz.
    pub sample_rate: f64,
    /// Number of flexion-extension ramp pairs.
    pub n_ramps: u32,
}

impl Default for TrialSpec {
    fn default() -> Self {
        TrialSpec {
            duration: 25.0,
            peak_pct_mvc: 30.0,
            sample_rate: 100.0,
            n_ramps: 1,
        }
    }
}

/// Build the target force profile: `2 * n_ramps` equal-length triangular
/// segments alternating flexion (+) and extension (-), each rising linearly
/// from zero to its apex at the segment midpoint and back.
///
/// Apexes are placed on exact sample indices, so the maximum of |f| equals
/// `peak_pct_mvc` exactly and the boundary samples are exactly zero.
pub fn triangular_profile(trial: &TrialSpec) -> Result<ForceTrace> {
    if trial.n_ramps == 0 {
        return Err(Error::invalid("n_ramps must be at least 1"));
    }
    if !(trial.duration > 0.0) || !(trial.sample_rate > 0.0) {
        return Err(Error::invalid("trial duration and sample rate must be positive"));
    }
    if !(0.0..=100.0).contains(&trial.peak_pct_mvc) {
        return Err(Error::invalid(format!(
            "peak must lie in [0, 100] %MVC, got {}",
            trial.peak_pct_mvc
        )));
    }
    let n = (trial.sample_rate * trial.duration).round() as usize;
    let n_seg = 2 * trial.n_ramps as usize;
    let knot = |r: f64| -> usize { (r * n as f64 / n_seg as f64).round() as usize };
    let mut samples = vec![0.0f64; n];
    for seg in 0..n_seg {
        let b0 = knot(seg as f64);
        let b1 = knot(seg as f64 + 1.0);
        let apex = knot(seg as f64 + 0.5);
        if !(b0 < apex && apex < b1) {
            return Err(Error::invalid(format!(
                "sample grid too coarse: segment {seg} spans {b0}..{b1} with apex {apex}"
            )));
        }
        let sign = if seg % 2 == 0 { 1.0 } else { -1.0 };
        let peak = sign * trial.peak_pct_mvc;
        for i in b0..b1.min(n) {
            samples[i] = if i <= apex {
                peak * (i - b0) as f64 / (apex - b0) as f64
            } else {
                peak * (b1 - i) as f64 / (b1 - apex) as f64
            };
        }
    }
    Ok(ForceTrace::new(trial.sample_rate, samples))
}

// ---------------------------------------------------------------------------
// Motor-unit profiles
// ---------------------------------------------------------------------------

/// Generative parameters of one motor unit.
#[derive(Debug, Clone, PartialEq)]
pub struct MuProfile {
    pub mu_id: u32,
    /// Electrode grid 1..=4; grids 1-2 are flexor, 3-4 extensor.
    pub grid: u8,
    /// Force level (%MVC of the unit's own direction) at which the unit
    /// starts firing.
    pub recruitment_threshold: f64,
    /// Firing rate at recruitment, Hz.
    pub min_rate_hz: f64,
    /// Firing rate when the drive reaches the profile peak, Hz.
    pub peak_rate_hz: f64,
    /// Fraction of the opposite direction's force that leaks into this
    /// unit's drive.
    pub direction_bias: f64,
    /// Coefficient of variation of the inter-spike jitter.
    pub jitter_cv: f64,
}

impl MuProfile {
    pub const DEFAULT_MIN_RATE_HZ: f64 = 8.0;
    pub const DEFAULT_PEAK_RATE_HZ: f64 = 35.0;
    pub const DEFAULT_JITTER_CV: f64 = 0.15;

    pub fn is_flexor(&self) -> bool {
        self.grid <= 2
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.grid) {
            return Err(Error::invalid(format!("grid must be 1..=4, got {}", self.grid)));
        }
        if !(self.recruitment_threshold >= 0.0) {
            return Err(Error::invalid("recruitment threshold must be non-negative"));
        }
        if !(self.min_rate_hz >= MIN_MEAN_RATE_HZ)
            || !(self.min_rate_hz < self.peak_rate_hz)
            || !(self.peak_rate_hz <= MAX_MEAN_RATE_HZ)
        {
            return Err(Error::invalid(format!(
                "rates must satisfy {} <= min < peak <= {}, got {} and {}",
                MIN_MEAN_RATE_HZ, MAX_MEAN_RATE_HZ, self.min_rate_hz, self.peak_rate_hz
            )));
        }
        if !(0.0..=1.0).contains(&self.direction_bias) {
            return Err(Error::invalid("direction bias must lie in [0, 1]"));
        }
        if !(self.jitter_cv >= 0.0) || self.jitter_cv > 1.0 {
            return Err(Error::invalid("jitter_cv must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Drive seen by this unit at signed force `f` (%MVC, flexion positive).
    pub fn drive(&self, f: f64) -> f64 {
        let (own, opp) = if self.is_flexor() {
            (f.max(0.0), (-f).max(0.0))
        } else {
            ((-f).max(0.0), f.max(0.0))
        };
        own + self.direction_bias * opp
    }

    /// Instantaneous firing rate under drive `d`, given the profile peak
    /// amplitude `peak` of the task. Zero below threshold, then linear from
    /// `min_rate_hz` up to `peak_rate_hz` at full drive, hard-capped at the
    /// physiological maximum.
    pub fn rate_at(&self, d: f64, peak: f64) -> f64 {
        if d <= self.recruitment_threshold {
            return 0.0;
        }
        let span = (peak - self.recruitment_threshold).max(f64::EPSILON);
        let frac = ((d - self.recruitment_threshold) / span).clamp(0.0, 1.0);
        (self.min_rate_hz + (self.peak_rate_hz - self.min_rate_hz) * frac).min(MAX_MEAN_RATE_HZ)
    }
}

/// Expected mean firing rate of a unit over a force trace: the average of
/// the instantaneous rate across samples.
pub fn expected_mean_rate(profile: &MuProfile, force: &ForceTrace) -> f64 {
    if force.samples.is_empty() {
        return 0.0;
    }
    let peak = force.samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    force
        .samples
        .iter()
        .map(|&f| profile.rate_at(profile.drive(f), peak))
        .sum::<f64>()
        / force.samples.len() as f64
}

/// Draw a motor-unit pool: `n_flexion` units on grids 1/2 and `n_extension`
/// on grids 3/4 (alternating), thresholds uniform in [0, 25) %MVC, rate
/// ranges scattered around the defaults, strong direction bias (~0.2) for
/// flexors and weak (~0.05) for extensors.
pub fn synth_mu_population(n_flexion: usize, n_extension: usize, seed: u64) -> Vec<MuProfile> {
    let mut pool = Vec::with_capacity(n_flexion + n_extension);
    for i in 0..n_flexion + n_extension {
        let flexor = i < n_flexion;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag::MU_POPULATION, i as u64]));
        let grid = if flexor {
            1 + (i % 2) as u8
        } else {
            3 + ((i - n_flexion) % 2) as u8
        };
        let min_rate_hz = rng.random_range(6.0..10.0);
        pool.push(MuProfile {
            mu_id: i as u32,
            grid,
            recruitment_threshold: rng.random_range(0.0..25.0),
            min_rate_hz,
            peak_rate_hz: rng.random_range(30.0..40.0),
            direction_bias: if flexor {
                rng.random_range(0.15..0.25)
            } else {
                rng.random_range(0.0..0.1)
            },
            jitter_cv: MuProfile::DEFAULT_JITTER_CV,
        });
    }
    pool
}

// ---------------------------------------------------------------------------
// Spike synthesis
// ---------------------------------------------------------------------------

/// Lognormal with unit mean and the given coefficient of variation.
fn unit_mean_lognormal(cv: f64) -> LogNormal<f64> {
    let sigma2 = (1.0 + cv * cv).ln();
    // Unwrap is fine: sigma is finite and non-negative for cv in [0, 1].
    LogNormal::new(-0.5 * sigma2, sigma2.sqrt()).expect("valid lognormal parameters")
}

/// Spike times of one unit over one force trace, by time rescaling of an
/// inhomogeneous renewal process: the rate is held constant within each
/// force sample, its integral accumulates as hazard, and a spike fires when
/// the hazard crosses the current jitter target (lognormal, unit mean,
/// CV = `jitter_cv`). Spike times land inside the sample that completes the
/// crossing, so they are strictly increasing and confined to the trial.
fn renewal_spike_times(profile: &MuProfile, force: &ForceTrace, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let peak = force.samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let dt = 1.0 / force.sample_rate;
    let jitter = if profile.jitter_cv > 0.0 {
        Some(unit_mean_lognormal(profile.jitter_cv))
    } else {
        None
    };
    let draw = |rng: &mut ChaCha8Rng| jitter.map_or(1.0, |d| d.sample(rng));

    let mut spikes = Vec::new();
    let mut hazard = 0.0f64;
    let mut target = draw(rng);
    for (k, &f) in force.samples.iter().enumerate() {
        let lambda = profile.rate_at(profile.drive(f), peak);
        if lambda <= 0.0 {
            continue;
        }
        let sample_start = k as f64 * dt;
        let sample_end = sample_start + dt;
        let mut cursor = sample_start;
        loop {
            let time_to_target = (target - hazard) / lambda;
            if cursor + time_to_target < sample_end {
                cursor += time_to_target;
                spikes.push(cursor);
                hazard = 0.0;
                target = draw(rng);
            } else {
                hazard += lambda * (sample_end - cursor);
                break;
            }
        }
    }
    spikes
}

/// Generate one trial's spike trains for a whole population.
///
/// Each unit consumes its own random substream derived from
/// `(seed, unit id)`, so the output is independent of population order and
/// byte-identical for identical inputs.
pub fn synth_spike_trains(
    profiles: &[MuProfile],
    force: &ForceTrace,
    finger: Finger,
    trial: u32,
    seed: u64,
) -> Result<Vec<MuSpikeTrain>> {
    if force.sample_rate < 50.0 {
        return Err(Error::invalid(format!(
            "force sample rate {} Hz is too coarse to place spikes (need >= 50 Hz)",
            force.sample_rate
        )));
    }
    force.validate()?;
    let mut trains = Vec::with_capacity(profiles.len());
    for p in profiles {
        p.validate()?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag::MU_SPIKES, p.mu_id as u64]));
        trains.push(MuSpikeTrain {
            mu_id: p.mu_id,
            grid: p.grid,
            finger,
            trial,
            spike_times: renewal_spike_times(p, force, &mut rng),
        });
    }
    Ok(trains)
}

// ---------------------------------------------------------------------------
// Whole-session generation
// ---------------------------------------------------------------------------

/// Parameters of a full synthetic session for one finger.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_flexion: usize,
    pub n_extension: usize,
    pub n_trials: u32,
    pub trial: TrialSpec,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_flexion: 20,
            n_extension: 6,
            n_trials: 3,
            trial: TrialSpec::default(),
            seed: 0,
        }
    }
}

/// A generated session: one force profile shared by all trials, and the
/// spike trains of every trial (index 0 is trial 1).
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub profiles: Vec<MuProfile>,
    pub force: ForceTrace,
    pub trains_by_trial: Vec<Vec<MuSpikeTrain>>,
}

impl SynthDataset {
    /// Trains of 1-based trial `t`.
    pub fn trial(&self, t: u32) -> Option<&[MuSpikeTrain]> {
        self.trains_by_trial
            .get(t.checked_sub(1)? as usize)
            .map(Vec::as_slice)
    }
}

/// Generate a session: population, force profile, and per-trial spike
/// trains. Profiles whose expected mean rate over the trial falls below the
/// physiological minimum are regenerated (fresh threshold and bias) until
/// they clear it; every emitted train passes [`validate_train`].
pub fn synth_dataset(spec: &SynthSpec, finger: Finger) -> Result<SynthDataset> {
    if spec.n_flexion == 0 {
        return Err(Error::invalid("need at least one flexion motor unit"));
    }
    if spec.n_trials == 0 {
        return Err(Error::invalid("need at least one trial"));
    }
    let force = triangular_profile(&spec.trial)?;
    let pop_seed = derive_seed(spec.seed, &[tag::FINGER, finger.index()]);
    let mut profiles = synth_mu_population(spec.n_flexion, spec.n_extension, pop_seed);

    // Units that would sit silent (high threshold, low duty cycle) are
    // redrawn; they would be rejected at ingestion anyway.
    for p in &mut profiles {
        let mut attempt = 0u64;
        while expected_mean_rate(p, &force) < MIN_MEAN_RATE_HZ {
            attempt += 1;
            if attempt > 1000 {
                return Err(Error::invalid(format!(
                    "unit {} cannot reach {} Hz under this force profile",
                    p.mu_id, MIN_MEAN_RATE_HZ
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                pop_seed,
                &[tag::MU_POPULATION, p.mu_id as u64, attempt],
            ));
            p.recruitment_threshold = rng.random_range(0.0..25.0);
            p.direction_bias = if p.is_flexor() {
                rng.random_range(0.15..0.25)
            } else {
                rng.random_range(0.0..0.1)
            };
        }
    }

    let mut trains_by_trial = Vec::with_capacity(spec.n_trials as usize);
    for t in 1..=spec.n_trials {
        let mut trains =
            synth_spike_trains(&profiles, &force, finger, t, derive_seed(spec.seed, &[tag::TRIAL, t as u64]))?;
        // Expected rates clear the band, but a realized train can still
        // graze the boundary; redraw those few with a bumped substream.
        for (i, p) in profiles.iter().enumerate() {
            let mut attempt = 0u64;
            while !validate_train(&trains[i], force.duration())?.accepted() {
                attempt += 1;
                if attempt > 20 {
                    return Err(Error::invalid(format!(
                        "unit {} failed validation in trial {t} after 20 redraws",
                        p.mu_id
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    spec.seed,
                    &[tag::TRIAL, t as u64, p.mu_id as u64, attempt],
                ));
                trains[i].spike_times = renewal_spike_times(p, &force, &mut rng);
            }
        }
        trains_by_trial.push(trains);
    }
    Ok(SynthDataset {
        profiles,
        force,
        trains_by_trial,
    })
}
