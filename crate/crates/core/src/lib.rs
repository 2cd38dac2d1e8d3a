//! Numerical laboratory for channel-specific EMI coupling and dual-stage
//! active noise cancellation in unshielded ultra-low-field MRI.
//!
//! The crate models the interference field inside a single-side-open metal
//! cavity, computes coil couplings via Biot-Savart quadrature, simulates
//! dual-channel (saddle + solenoid) k-space acquisition under composite EMI,
//! and implements the two suppression stages:
//!
//! - spatial-domain active cancellation (detection coil -> phase/amplitude
//!   chain -> cancellation coil pair), and
//! - frequency-banded least-squares post-processing against reference
//!   channels,
//!
//! followed by inverse-variance weighted image fusion.
//!
//! With the default `parallel` feature, grid and per-row loops run on rayon;
//! building with `--no-default-features` gives a sequential fallback with
//! identical outputs.

pub mod acquire;
pub mod anc;
pub mod cavity;
pub mod coil;
pub mod error;
pub mod fusion;
pub mod geom;
pub mod grid;
pub mod kspace;
pub mod par;
pub mod post;
pub mod scenario;
pub mod seeding;

pub use error::CoreError;

/// Complex scalar used throughout (field phasors, k-space samples).
pub type C64 = num_complex::Complex64;

/// Vacuum permeability, H/m.
pub const MU_0: f64 = 4.0e-7 * std::f64::consts::PI;

/// Speed of light used for the cutoff formula, m/s.
pub const C_LIGHT: f64 = 2.998e8;
