//! Shared domain types and signal numerics.
//!
//! Everything downstream agrees on three representations:
//!
//! * [`MuSpikeTrain`]: sorted spike times of one motor unit in one trial,
//!   tagged with electrode grid, finger, and trial number.
//! * [`ForceTrace`]: uniformly sampled force in %MVC (percent of maximum
//!   voluntary contraction).
//! * [`RateTrace`]: a causal instantaneous firing-rate estimate obtained by
//!   convolving a spike train with a decaying exponential kernel.
//!
//! The conversion between force and firing rate is the fixed identity
//! 30 Hz == 30 %MVC: decoded force is simply the difference of two
//! population rates, with no extra scaling stage.

use crate::error::{Error, Result};

/// Lowest physiologically plausible mean firing rate, Hz. Trains below this
/// are considered decomposition artifacts and rejected at ingestion.
pub const MIN_MEAN_RATE_HZ: f64 = 2.0;
/// Highest physiologically plausible mean firing rate, Hz.
pub const MAX_MEAN_RATE_HZ: f64 = 50.0;

// ---------------------------------------------------------------------------
// Fingers
// ---------------------------------------------------------------------------

/// Finger performing the isometric tracking task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Finger {
    Thumb,
    Index,
    Middle,
    Ring,
    Little,
}

impl Finger {
    pub const ALL: [Finger; 5] = [
        Finger::Thumb,
        Finger::Index,
        Finger::Middle,
        Finger::Ring,
        Finger::Little,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Finger::Thumb => "thumb",
            Finger::Index => "index",
            Finger::Middle => "middle",
            Finger::Ring => "ring",
            Finger::Little => "little",
        }
    }

    /// Stable small integer used when deriving per-finger random streams.
    pub fn index(self) -> u64 {
        match self {
            Finger::Thumb => 0,
            Finger::Index => 1,
            Finger::Middle => 2,
            Finger::Ring => 3,
            Finger::Little => 4,
        }
    }
}

impl std::fmt::Display for Finger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Finger {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "thumb" => Ok(Finger::Thumb),
            "index" => Ok(Finger::Index),
            "middle" => Ok(Finger::Middle),
            "ring" => Ok(Finger::Ring),
            "little" | "pinky" => Ok(Finger::Little),
            other => Err(Error::invalid(format!("unknown finger '{other}'"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Spike trains
// ---------------------------------------------------------------------------

/// Spike times of one motor unit within one trial.
///
/// Grids 1 and 2 sit over the flexor muscle, grids 3 and 4 over the
/// extensor; [`MuSpikeTrain::is_flexor`] encodes that convention.
#[derive(Debug, Clone, PartialEq)]
pub struct MuSpikeTrain {
    pub mu_id: u32,
    /// Electrode grid 1..=4 the unit was decomposed from.
    pub grid: u8,
    pub finger: Finger,
    /// Trial number, 1-based.
    pub trial: u32,
    /// Spike times in seconds, strictly increasing.
    pub spike_times: Vec<f64>,
}

impl MuSpikeTrain {
    pub fn is_flexor(&self) -> bool {
        self.grid <= 2
    }

    /// Mean firing rate over a trial of the given duration, Hz.
    pub fn mean_rate(&self, duration: f64) -> f64 {
        if duration > 0.0 {
            self.spike_times.len() as f64 / duration
        } else {
            0.0
        }
    }
}

/// Why a spike train failed physiological validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// Spike times are not strictly increasing.
    NonMonotonic,
    /// A spike time lies outside [0, trial duration].
    OutOfRange,
    /// Mean rate below [`MIN_MEAN_RATE_HZ`].
    RateTooLow,
    /// Mean rate above [`MAX_MEAN_RATE_HZ`].
    RateTooHigh,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RejectReason::NonMonotonic => "spike times not strictly increasing",
            RejectReason::OutOfRange => "spike time outside trial bounds",
            RejectReason::RateTooLow => "mean rate below physiological minimum",
            RejectReason::RateTooHigh => "mean rate above physiological maximum",
        };
        f.write_str(s)
    }
}

/// Outcome of validating one spike train against one trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationResult {
    pub mean_rate_hz: f64,
    /// `None` when the train passed.
    pub rejection: Option<RejectReason>,
}

impl ValidationResult {
    pub fn accepted(&self) -> bool {
        self.rejection.is_none()
    }
}

/// Validate a spike train against a trial of `duration` seconds.
///
/// Checks, in order of precedence: strict monotonicity, every spike inside
/// [0, duration], then mean rate within the physiological band
/// [[`MIN_MEAN_RATE_HZ`], [`MAX_MEAN_RATE_HZ`]] (inclusive). The mean rate
/// is reported even for rejected trains.
pub fn validate_train(train: &MuSpikeTrain, duration: f64) -> Result<ValidationResult> {
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::invalid(format!(
            "trial duration must be positive and finite, got {duration}"
        )));
    }
    let times = &train.spike_times;
    let mean_rate_hz = times.len() as f64 / duration;
    let rejection = if times.windows(2).any(|w| !(w[1] > w[0])) {
        Some(RejectReason::NonMonotonic)
    } else if times.iter().any(|&t| !t.is_finite() || t < 0.0 || t > duration) {
        Some(RejectReason::OutOfRange)
    } else if mean_rate_hz < MIN_MEAN_RATE_HZ {
        Some(RejectReason::RateTooLow)
    } else if mean_rate_hz > MAX_MEAN_RATE_HZ {
        Some(RejectReason::RateTooHigh)
    } else {
        None
    };
    Ok(ValidationResult {
        mean_rate_hz,
        rejection,
    })
}

/// Evenly spaced spike times at `rate_hz`, first spike one full interval in,
/// last spike at or before `duration`. Handy for probes and calibration.
pub fn regular_spike_times(rate_hz: f64, duration: f64) -> Vec<f64> {
    if !(rate_hz > 0.0) || !(duration > 0.0) {
        return Vec::new();
    }
    let n = (rate_hz * duration * (1.0 + 1e-12)).floor() as usize;
    (1..=n).map(|k| k as f64 / rate_hz).collect()
}

// ---------------------------------------------------------------------------
// Force traces
// ---------------------------------------------------------------------------

/// Uniformly sampled force signal in %MVC.
///
/// Sample `n` sits at time `t0 + n / sample_rate`; `t0` is zero for raw
/// recordings and non-zero for window-centered predictions. Duration is
/// defined as `len / sample_rate`, so the sample count and duration can
/// never disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceTrace {
    pub sample_rate: f64,
    /// Time of sample 0, seconds.
    pub t0: f64,
    pub samples: Vec<f64>,
}

impl ForceTrace {
    pub fn new(sample_rate: f64, samples: Vec<f64>) -> Self {
        ForceTrace {
            sample_rate,
            t0: 0.0,
            samples,
        }
    }

    pub fn with_offset(sample_rate: f64, t0: f64, samples: Vec<f64>) -> Self {
        ForceTrace {
            sample_rate,
            t0,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    /// Time of sample `n`.
    pub fn time_at(&self, n: usize) -> f64 {
        self.t0 + n as f64 / self.sample_rate
    }

    /// Value at time `t` by linear interpolation, clamped to the end
    /// samples outside the recorded span.
    pub fn value_at(&self, t: f64) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let u = (t - self.t0) * self.sample_rate;
        if u <= 0.0 {
            return self.samples[0];
        }
        let last = self.samples.len() - 1;
        if u >= last as f64 {
            return self.samples[last];
        }
        let i = u.floor() as usize;
        let frac = u - i as f64;
        self.samples[i] * (1.0 - frac) + self.samples[i + 1] * frac
    }

    /// Check that the trace is physically meaningful: positive finite
    /// sample rate and every sample finite with |value| <= 100 %MVC.
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0) || !self.sample_rate.is_finite() {
            return Err(Error::invalid(format!(
                "force sample rate must be positive, got {}",
                self.sample_rate
            )));
        }
        if !self.t0.is_finite() {
            return Err(Error::invalid("force trace time origin is not finite"));
        }
        for (i, &v) in self.samples.iter().enumerate() {
            if !v.is_finite() || v.abs() > 100.0 {
                return Err(Error::invalid(format!(
                    "force sample {i} is {v}, outside [-100, 100] %MVC"
                )));
            }
        }
        Ok(())
    }
}

/// Resample a trace onto a new uniform grid (`sample_rate`, `t0`, `len`) by
/// linear interpolation; times outside the source span clamp to its edges.
pub fn resample_linear(src: &ForceTrace, sample_rate: f64, t0: f64, len: usize) -> Result<ForceTrace> {
    if !(sample_rate > 0.0) {
        return Err(Error::invalid("resample target rate must be positive"));
    }
    if src.is_empty() && len > 0 {
        return Err(Error::invalid("cannot resample an empty trace"));
    }
    let samples = (0..len)
        .map(|n| src.value_at(t0 + n as f64 / sample_rate))
        .collect();
    Ok(ForceTrace::with_offset(sample_rate, t0, samples))
}

/// Split a signed force into its rectified flexion and extension targets:
/// flexion = max(f, 0), extension = max(-f, 0). Both share the input grid.
pub fn rectified_targets(force: &ForceTrace) -> (ForceTrace, ForceTrace) {
    let flex = force.samples.iter().map(|&v| v.max(0.0)).collect();
    let ext = force.samples.iter().map(|&v| (-v).max(0.0)).collect();
    (
        ForceTrace::with_offset(force.sample_rate, force.t0, flex),
        ForceTrace::with_offset(force.sample_rate, force.t0, ext),
    )
}

// ---------------------------------------------------------------------------
// Rate estimation
// ---------------------------------------------------------------------------

/// Instantaneous firing-rate estimate on a uniform grid (sample `n` at time
/// `n / sample_rate`), produced by [`exp_kernel_rate`].
#[derive(Debug, Clone, PartialEq)]
pub struct RateTrace {
    pub sample_rate: f64,
    /// Kernel time constant, seconds.
    pub tau: f64,
    pub values: Vec<f64>,
}

impl RateTrace {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Mean of the samples whose times fall in [t_start, t_end).
    pub fn mean_between(&self, t_start: f64, t_end: f64) -> f64 {
        let lo = ((t_start * self.sample_rate).ceil().max(0.0)) as usize;
        let hi = (((t_end * self.sample_rate).ceil()) as usize).min(self.values.len());
        if lo >= hi {
            return 0.0;
        }
        self.values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
    }
}

/// Convolve a spike train with a causal exponential kernel
/// `(1/tau) * exp(-t/tau)` and sample the result on a uniform grid of
/// `round(sample_rate * duration)` points starting at t = 0.
///
/// r(t) = sum over spikes at t_s <= t of (1/tau) exp(-(t - t_s)/tau); a
/// spike exactly on a sample time counts toward that sample. The kernel
/// integrates to one, so r has units of Hz. Evaluation is event-based and
/// exact up to floating point: the decaying sum is carried from spike to
/// spike and decayed analytically to each sample time, with no per-step
/// integration error.
///
/// `spike_times` must be sorted ascending (ties allowed). Spikes after the
/// sampled span simply contribute nothing.
pub fn exp_kernel_rate(
    spike_times: &[f64],
    tau: f64,
    sample_rate: f64,
    duration: f64,
) -> Result<RateTrace> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("kernel tau must be positive, got {tau}")));
    }
    if !(sample_rate > 0.0) || !sample_rate.is_finite() {
        return Err(Error::invalid(format!(
            "rate sample rate must be positive, got {sample_rate}"
        )));
    }
    if !(duration >= 0.0) || !duration.is_finite() {
        return Err(Error::invalid(format!(
            "duration must be non-negative, got {duration}"
        )));
    }
    if spike_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("spike times must be sorted ascending"));
    }
    if spike_times.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("spike times must be finite"));
    }

    let n = (sample_rate * duration).round() as usize;
    let mut values = vec![0.0f64; n];
    // Running kernel sum, valid at time `state_t`.
    let mut state = 0.0f64;
    let mut state_t = 0.0f64;
    let mut si = 0usize;
    for (k, out) in values.iter_mut().enumerate() {
        let t = k as f64 / sample_rate;
        while si < spike_times.len() && spike_times[si] <= t {
            let ts = spike_times[si];
            state = if state > 0.0 {
                state * ((state_t - ts) / tau).exp() + 1.0
            } else {
                1.0
            };
            state_t = ts;
            si += 1;
        }
        *out = if state > 0.0 {
            state * ((state_t - t) / tau).exp() / tau
        } else {
            0.0
        };
    }
    Ok(RateTrace {
        sample_rate,
        tau,
        values,
    })
}

// ---------------------------------------------------------------------------
// Windowed spike counts
// ---------------------------------------------------------------------------

/// Spike counts of several motor units in overlapping windows; the feature
/// representation used by the least-squares baseline decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedCounts {
    /// Window length, seconds.
    pub window_len: f64,
    /// Hop between successive window starts, seconds.
    pub hop: f64,
    /// `counts[w][i]` is the spike count of unit `i` in window `w`.
    pub counts: Vec<Vec<u32>>,
}

impl WindowedCounts {
    pub fn n_windows(&self) -> usize {
        self.counts.len()
    }

    pub fn n_units(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    /// Center time of window `w`, seconds.
    pub fn window_center(&self, w: usize) -> f64 {
        w as f64 * self.hop + self.window_len / 2.0
    }

    /// Sampling rate of the window-center time series, Hz.
    pub fn center_rate(&self) -> f64 {
        1.0 / self.hop
    }
}

/// Count spikes of each train in sliding windows `[w*hop, w*hop + window_len)`.
///
/// The number of windows is `floor((duration - window_len)/hop) + 1`, i.e.
/// every window lies fully inside the trial (a small epsilon guards the
/// floor against floating-point shortfall). Requires
/// `0 < hop <= window_len <= duration` and sorted spike times.
pub fn window_counts(
    trains: &[MuSpikeTrain],
    window_len: f64,
    hop: f64,
    duration: f64,
) -> Result<WindowedCounts> {
    if !(hop > 0.0) || !(window_len > 0.0) {
        return Err(Error::invalid("window length and hop must be positive"));
    }
    if hop > window_len {
        return Err(Error::invalid(format!(
            "hop {hop} exceeds window length {window_len}"
        )));
    }
    if window_len > duration {
        return Err(Error::invalid(format!(
            "window length {window_len} exceeds trial duration {duration}"
        )));
    }
    for tr in trains {
        if tr.spike_times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid(format!(
                "spike times of unit {} are not sorted",
                tr.mu_id
            )));
        }
    }
    let n_windows = ((duration - window_len) / hop + 1e-9).floor() as usize + 1;
    let mut counts = Vec::with_capacity(n_windows);
    for w in 0..n_windows {
        let start = w as f64 * hop;
        let end = start + window_len;
        let row = trains
            .iter()
            .map(|tr| {
                let lo = tr.spike_times.partition_point(|&t| t < start);
                let hi = tr.spike_times.partition_point(|&t| t < end);
                (hi - lo) as u32
            })
            .collect();
        counts.push(row);
    }
    Ok(WindowedCounts {
        window_len,
        hop,
        counts,
    })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Root-mean-square error between two traces on the identical grid.
///
/// The traces must agree exactly in length, sample rate, and time origin;
/// mismatches are an error, never a silent truncation.
pub fn rmse(pred: &ForceTrace, truth: &ForceTrace) -> Result<f64> {
    if pred.samples.len() != truth.samples.len() {
        return Err(Error::invalid(format!(
            "rmse length mismatch: {} vs {}",
            pred.samples.len(),
            truth.samples.len()
        )));
    }
    if pred.sample_rate != truth.sample_rate || pred.t0 != truth.t0 {
        return Err(Error::invalid(
            "rmse requires identical sample grids (rate and origin)",
        ));
    }
    if pred.samples.is_empty() {
        return Err(Error::invalid("rmse of empty traces is undefined"));
    }
    let ss: f64 = pred
        .samples
        .iter()
        .zip(&truth.samples)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok((ss / pred.samples.len() as f64).sqrt())
}

/// Sample mean and sample standard deviation (n-1 denominator; std is 0
/// for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn train(times: Vec<f64>) -> MuSpikeTrain {
        MuSpikeTrain {
            mu_id: 0,
            grid: 1,
            finger: Finger::Index,
            trial: 1,
            spike_times: times,
        }
    }

    // -- validation ---------------------------------------------------------

    #[test]
    fn validate_accepts_physiological_train() {
        let t = train((1..=100).map(|k| k as f64 * 0.25).collect());
        let v = validate_train(&t, 25.0).unwrap();
        assert!(v.accepted());
        assert!((v.mean_rate_hz - 4.0).abs() < 1e-12);
    }

    #[test]
    fn validate_rejects_out_of_range_spike() {
        // 25 s trial, spike at 26 s: rejected but the rate is still reported.
        let mut times: Vec<f64> = (1..=100).map(|k| k as f64 * 0.2).collect();
        times.push(26.0);
        let v = validate_train(&train(times), 25.0).unwrap();
        assert_eq!(v.rejection, Some(RejectReason::OutOfRange));
        assert!((v.mean_rate_hz - 101.0 / 25.0).abs() < 1e-12);
    }

    #[test]
    fn validate_rejects_rate_extremes() {
        let slow = train(vec![1.0, 5.0, 9.0]);
        assert_eq!(
            validate_train(&slow, 25.0).unwrap().rejection,
            Some(RejectReason::RateTooLow)
        );
        let fast = train((1..=2000).map(|k| k as f64 * 0.01).collect());
        assert_eq!(
            validate_train(&fast, 20.0).unwrap().rejection,
            Some(RejectReason::RateTooHigh)
        );
    }

    #[test]
    fn validate_rejects_non_monotonic_first() {
        let v = validate_train(&train(vec![0.5, 0.4, 26.0]), 25.0).unwrap();
        assert_eq!(v.rejection, Some(RejectReason::NonMonotonic));
    }

    #[test]
    fn validate_boundary_spikes_are_in_range() {
        let mut times: Vec<f64> = (0..100).map(|k| k as f64 * 0.25).collect();
        times.push(25.0);
        let v = validate_train(&train(times), 25.0).unwrap();
        assert!(v.accepted());
    }

    // -- exponential kernel -------------------------------------------------

    #[test]
    fn kernel_single_spike_closed_form() {
        // One spike at t=0, tau = 200 ms: r(0.2) = (1/0.2) e^{-1}.
        let r = exp_kernel_rate(&[0.0], 0.2, 100.0, 25.0).unwrap();
        let expect = 5.0 * (-1.0f64).exp();
        assert!((r.values[20] - expect).abs() < 1e-9, "got {}", r.values[20]);
        // And at t = 0 the kernel is at its peak 1/tau.
        assert!((r.values[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_two_spikes_superpose() {
        let r = exp_kernel_rate(&[0.0, 0.1], 0.2, 1000.0, 1.0).unwrap();
        let t = 0.35;
        let expect = 5.0 * ((-t / 0.2f64).exp() + (-(t - 0.1) / 0.2f64).exp());
        assert!((r.values[350] - expect).abs() < 1e-9);
    }

    #[test]
    fn kernel_spike_on_sample_counts() {
        // Spike exactly at a sample time contributes 1/tau at that sample.
        let r = exp_kernel_rate(&[0.5], 0.1, 100.0, 1.0).unwrap();
        assert!((r.values[50] - 10.0).abs() < 1e-12);
        assert_eq!(r.values[49], 0.0);
    }

    #[test]
    fn kernel_regular_train_time_average() {
        // 10 Hz regular train: after settling, the time-averaged rate is
        // the true rate to within 1%. Sampled at 1 kHz so the discrete
        // average of the decaying sawtooth approximates the continuous
        // time integral well below the tolerance.
        let spikes = regular_spike_times(10.0, 25.0);
        assert_eq!(spikes.len(), 250);
        let r = exp_kernel_rate(&spikes, 0.2, 1000.0, 25.0).unwrap();
        let avg = r.mean_between(5.0, 25.0);
        assert!(
            (avg - 10.0).abs() / 10.0 < 0.01,
            "settled average {avg} not within 1% of 10 Hz"
        );
    }

    #[test]
    fn kernel_empty_train_is_zero() {
        let r = exp_kernel_rate(&[], 0.2, 100.0, 2.0).unwrap();
        assert_eq!(r.values.len(), 200);
        assert!(r.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_rejects_bad_args() {
        assert!(exp_kernel_rate(&[0.1], 0.0, 100.0, 1.0).is_err());
        assert!(exp_kernel_rate(&[0.1], 0.2, 0.0, 1.0).is_err());
        assert!(exp_kernel_rate(&[0.3, 0.1], 0.2, 100.0, 1.0).is_err());
    }

    #[test]
    fn kernel_integral_is_one_per_spike() {
        // Quadrature over 10 tau at 1 kHz: integral within 0.1% of 1.
        let tau = 0.2;
        let fs = 1000.0;
        let r = exp_kernel_rate(&[0.0], tau, fs, 10.0 * tau).unwrap();
        // Trapezoid rule over the sampled span.
        let mut integral = 0.0;
        for w in r.values.windows(2) {
            integral += 0.5 * (w[0] + w[1]) / fs;
        }
        assert!(
            (integral - 1.0).abs() < 1e-3,
            "kernel mass {integral} not within 0.1% of 1"
        );
    }

    proptest! {
        #[test]
        fn kernel_is_nonnegative_and_linear(
            times1 in proptest::collection::vec(0.0f64..5.0, 0..40),
            times2 in proptest::collection::vec(0.0f64..5.0, 0..40),
        ) {
            let mut a = times1.clone();
            a.sort_by(f64::total_cmp);
            let mut b = times2.clone();
            b.sort_by(f64::total_cmp);
            let mut ab = [a.clone(), b.clone()].concat();
            ab.sort_by(f64::total_cmp);

            let ra = exp_kernel_rate(&a, 0.2, 50.0, 5.0).unwrap();
            let rb = exp_kernel_rate(&b, 0.2, 50.0, 5.0).unwrap();
            let rab = exp_kernel_rate(&ab, 0.2, 50.0, 5.0).unwrap();
            for i in 0..ra.values.len() {
                prop_assert!(ra.values[i] >= 0.0);
                // Superposition: rate of the merged train equals the sum.
                prop_assert!((ra.values[i] + rb.values[i] - rab.values[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn kernel_monotone_decay_between_spikes(t_spike in 0.0f64..1.0) {
            let r = exp_kernel_rate(&[t_spike], 0.1, 200.0, 3.0).unwrap();
            let first = (t_spike * 200.0).ceil() as usize;
            for w in r.values[first..].windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-15);
            }
        }
    }

    // -- windowed counts -----------------------------------------------------

    #[test]
    fn window_count_shape_default_task() {
        // 25 s trial, 100 ms windows, 50 ms hop: 499 windows.
        let t = train((1..=100).map(|k| k as f64 * 0.25).collect());
        let wc = window_counts(&[t], 0.1, 0.05, 25.0).unwrap();
        assert_eq!(wc.n_windows(), 499);
        assert_eq!(wc.n_units(), 1);
        assert!((wc.window_center(0) - 0.05).abs() < 1e-12);
        assert!((wc.window_center(498) - 24.95).abs() < 1e-12);
    }

    #[test]
    fn window_membership_half_open() {
        // Spike at 0.07 s falls in windows 0 and 1 but not 2.
        let t = train(vec![0.07]);
        let wc = window_counts(&[t], 0.1, 0.05, 25.0).unwrap();
        assert_eq!(wc.counts[0][0], 1);
        assert_eq!(wc.counts[1][0], 1);
        assert_eq!(wc.counts[2][0], 0);
    }

    #[test]
    fn window_rejects_bad_geometry() {
        let t = train(vec![0.5]);
        assert!(window_counts(&[t.clone()], 0.1, 0.2, 25.0).is_err());
        assert!(window_counts(&[t.clone()], 30.0, 0.05, 25.0).is_err());
        assert!(window_counts(&[t], 0.1, 0.0, 25.0).is_err());
    }

    proptest! {
        #[test]
        fn window_totals_bound_spike_count(
            times in proptest::collection::vec(0.0f64..25.0, 0..200),
        ) {
            let mut ts = times.clone();
            ts.sort_by(f64::total_cmp);
            let n_spikes = ts.len() as u32;
            let t = train(ts);
            // Non-overlapping windows (hop == len): every spike in
            // [0, n_windows * len) is counted exactly once.
            let wc = window_counts(&[t.clone()], 0.5, 0.5, 25.0).unwrap();
            let total: u32 = wc.counts.iter().map(|r| r[0]).sum();
            prop_assert_eq!(wc.n_windows(), 50);
            prop_assert_eq!(total, n_spikes - t.spike_times.iter().filter(|&&x| x >= 25.0).count() as u32);

            // 50% overlap: each spike is counted at most twice.
            let wc2 = window_counts(&[t], 0.5, 0.25, 25.0).unwrap();
            let total2: u32 = wc2.counts.iter().map(|r| r[0]).sum();
            prop_assert!(total2 <= 2 * n_spikes);
        }
    }

    // -- force traces and metrics --------------------------------------------

    #[test]
    fn rectification_splits_and_reconstructs() {
        let f = ForceTrace::new(100.0, vec![0.0, 10.0, -5.0, 30.0, -30.0]);
        let (flex, ext) = rectified_targets(&f);
        assert_eq!(flex.samples, vec![0.0, 10.0, 0.0, 30.0, 0.0]);
        assert_eq!(ext.samples, vec![0.0, 0.0, 5.0, 0.0, 30.0]);
        for i in 0..f.len() {
            assert_eq!(flex.samples[i] - ext.samples[i], f.samples[i]);
            assert!(flex.samples[i] * ext.samples[i] == 0.0);
        }
    }

    #[test]
    fn rmse_hand_computed() {
        let p = ForceTrace::new(10.0, vec![1.0, 2.0, 3.0]);
        let t = ForceTrace::new(10.0, vec![0.0, 2.0, 5.0]);
        // errors 1, 0, -2 -> rmse = sqrt(5/3)
        let e = rmse(&p, &t).unwrap();
        assert!((e - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rmse_rejects_grid_mismatch() {
        let p = ForceTrace::new(10.0, vec![1.0, 2.0]);
        let t = ForceTrace::new(10.0, vec![1.0]);
        assert!(rmse(&p, &t).is_err());
        let t2 = ForceTrace::new(20.0, vec![1.0, 2.0]);
        assert!(rmse(&p, &t2).is_err());
        let t3 = ForceTrace::with_offset(10.0, 0.5, vec![1.0, 2.0]);
        assert!(rmse(&p, &t3).is_err());
    }

    #[test]
    fn rmse_zero_iff_identical() {
        let p = ForceTrace::new(10.0, vec![0.25, -1.5, 7.0]);
        assert_eq!(rmse(&p, &p.clone()).unwrap(), 0.0);
    }

    #[test]
    fn resample_identity_and_interpolation() {
        let src = ForceTrace::new(10.0, vec![0.0, 1.0, 2.0, 3.0]);
        let same = resample_linear(&src, 10.0, 0.0, 4).unwrap();
        assert_eq!(same.samples, src.samples);
        // Double rate: midpoints appear.
        let up = resample_linear(&src, 20.0, 0.0, 7).unwrap();
        assert!((up.samples[1] - 0.5).abs() < 1e-12);
        assert!((up.samples[5] - 2.5).abs() < 1e-12);
        // Outside the span clamps to the edges.
        let shifted = resample_linear(&src, 10.0, -0.2, 2).unwrap();
        assert_eq!(shifted.samples, vec![0.0, 0.0]);
    }

    #[test]
    fn force_validate_bounds() {
        let ok = ForceTrace::new(100.0, vec![-100.0, 0.0, 100.0]);
        assert!(ok.validate().is_ok());
        let bad = ForceTrace::new(100.0, vec![0.0, 101.0]);
        assert!(bad.validate().is_err());
        let nan = ForceTrace::new(100.0, vec![f64::NAN]);
        assert!(nan.validate().is_err());
    }

    #[test]
    fn duration_matches_sample_count() {
        let f = ForceTrace::new(100.0, vec![0.0; 2500]);
        assert!((f.duration() - 25.0).abs() < 1e-12);
        assert_eq!((f.sample_rate * f.duration()).round() as usize, f.len());
    }

    #[test]
    fn mean_std_matches_hand_calc() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert!((m - 5.0).abs() < 1e-12);
        // Sample variance with n-1: 32/7.
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        let (m1, s1) = mean_std(&[3.25]);
        assert_eq!((m1, s1), (3.25, 0.0));
    }
}
