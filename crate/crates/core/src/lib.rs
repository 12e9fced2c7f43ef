//! Discrete laboratory for local increasing regularity estimates.
//!
//! The crate builds metric data for flat and perturbed tori on periodic
//! grids, computes admissible radius fields, assembles Vitali covers with
//! bounded overlap, runs an exact rational Sobolev exponent calculus, and
//! solves elliptic systems spectrally so that local and global weighted
//! estimates can be verified numerically with fitted constants.
//!
//! Modules mirror the pipeline: [`geometry`] (metric, distance, admissible
//! radius), [`covering`] (greedy ball selection, overlap statistics),
//! [`exponents`] (exact exponent arithmetic and weight bookkeeping),
//! [`fields`] (sections, quadrature norms, scaling checks), [`elliptic`]
//! (operators, harmonic bases, minimum-norm solves), [`lir`] (estimate
//! verification and bootstrap), and [`doubling`] (flat cylinder doubling).

pub mod covering;
pub mod doubling;
pub mod elliptic;
pub mod export;
pub mod exponents;
pub mod fft;
pub mod fields;
pub mod geometry;
pub mod grid;
pub mod lir;

pub use grid::Grid;

/// Complex scalar used for all section data.
pub type C64 = num_complex::Complex<f64>;
