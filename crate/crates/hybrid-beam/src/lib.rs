//! Substructured testing of a cantilever beam, split into a simulated
//! numerical half and a virtually "physical" half that talk to each other
//! through a two-DOF interface (deflection + rotation).
//!
//! Everything internal runs in a consistent kilogram / millimetre /
//! millisecond system: stiffness moduli in kN/mm² (= GPa), forces in kN,
//! frequencies in kHz (cycles per ms), Laplace variables in rad/ms.
//! Frequencies are converted to Hz only at reporting boundaries.
//!
//! The crate is organised around five building blocks:
//!
//! * [`beam`] — Euler-Bernoulli finite elements with Rayleigh damping,
//! * [`substructure`] — partitioning and interface condensation,
//! * [`stability`] — delay-differential characteristic roots and charts,
//! * [`rig`] — a time-domain two-actuator test bench with sensors and noise,
//! * [`coupler`] — the per-harmonic Broyden loop that couples the two sides.
//!
//! Start from the `examples/` directory for runnable walkthroughs of each
//! block; the `hybrid-beam` binary wraps the same entry points behind
//! `modes`, `stability`, `sweep` and `verify` subcommands.

pub mod beam;
pub mod config;
pub mod coupler;
pub mod error;
pub mod report;
pub mod rig;
pub mod stability;
pub mod substructure;
pub mod verify;

pub use error::{HybridError, Result};

/// Cycles per millisecond to cycles per second.
pub const KHZ_TO_HZ: f64 = 1.0e3;

/// Consistent-unit force (kg·mm/ms² = kN) to newtons.
pub const KN_TO_N: f64 = 1.0e3;
