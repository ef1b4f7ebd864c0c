//! Continuous finger-force regression from motor-unit spike trains, run
//! end to end on an emulated mixed-signal spiking substrate.
//!
//! The pipeline has three legs:
//!
//! ```text
//!   MU spike trains ──► substrate (two spiking populations) ──► rate decode ──► force
//!        │                                                               ▲
//!        └──► windowed spike counts ──► ordinary least squares ──────────┘ (baseline)
//! ```
//!
//! * [`signal`] holds the shared domain types (spike trains, force traces)
//!   and the numerics everything else leans on: exponential-kernel rate
//!   estimation, windowed spike counting, RMSE.
//! * [`synth`] generates physiologically plausible motor-unit populations
//!   and spike trains for a triangular force-tracking task.
//! * [`substrate`] emulates the mixed-signal neuromorphic chip: adaptive
//!   exponential integrate-and-fire neurons, four synapse types, per-neuron
//!   device mismatch, and address-event routing.
//! * [`trainer`] runs the chip-in-the-loop learning rule that programs
//!   integer synaptic connectivity from recorded output rates.
//! * [`baseline`] is the conventional comparison decoder: ordinary least
//!   squares on windowed spike counts.
//! * [`harness`] wires the above into the full experiment protocol and
//!   produces the result tables and plot data.
//!
//! All randomness flows from explicit 64-bit seeds through counter-derived
//! substreams ([`seeds`]), so every public entry point is reproducible
//! bit for bit.

pub mod baseline;
pub mod error;
pub mod harness;
pub mod io;
pub mod seeds;
pub mod signal;
pub mod substrate;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
