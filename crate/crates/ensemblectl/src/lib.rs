//! Pseudospectral optimal control of inhomogeneous ensembles.
//!
//! The library discretizes ensemble optimal control problems on
//! Legendre-Gauss-Lobatto (LGL) collocation grids, transcribes them into
//! algebraic nonlinear programs, and solves them with an augmented-Lagrangian
//! / L-BFGS scheme. The main application is broadband NMR pulse design on
//! the dimensionless Bloch equations: robust inversion pulses, pulse
//! sequences robust to initial-condition variation, and pulses compensating
//! a time-varying frequency.

pub mod bloch;
pub mod cli;
pub mod config;
pub mod solver;
pub mod spectral;
pub mod studies;
pub mod transcription;

/// Scalar type used by the concrete pulse-design pipeline.
pub type Scalar = f64;

/// LGL grid at the pipeline scalar type.
pub type LglGrid = spectral::LglGrid<Scalar>;
/// Affine interval map at the pipeline scalar type.
pub type AffineMap = spectral::AffineMap<Scalar>;
