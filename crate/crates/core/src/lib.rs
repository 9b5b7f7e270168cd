//! Numerical laboratory for Sorkin-type measurement scenarios in relativistic
//! quantum theory.
//!
//! The crate is organised bottom-up:
//!
//! * [`causal`] - regions of 1+1D Minkowski spacetime, light cones and the
//!   precedence order between regions.
//! * [`qops`] - dense finite-dimensional quantum kernel (states, operators,
//!   spectral resolutions, Lüders updates, partial traces).
//! * [`scenarios`] - kick / measure / observe scenarios and the operator-level
//!   no-signalling condition.
//! * [`field`] - free lattice scalar field kernels and a truncated Fock backend.
//! * [`detectors`] - Unruh-DeWitt detector perturbation theory, scattering
//!   operators and detector-based update rules.
//! * [`fv`] - finite-dimensional measurement scheme on brickwork circuits.
//! * [`histories`] - class operators, decoherence functional and consistency.
//! * [`cli`] - scenario files, reports and the `causalq` command line.

pub mod causal;
pub mod cli;
pub mod detectors;
pub mod field;
pub mod fv;
pub mod histories;
pub mod linalg;
pub mod qops;
pub mod scenarios;

pub use num_complex::Complex64 as C64;
