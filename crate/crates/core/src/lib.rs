//! Spherical-deconvolution fiber separation: split a multi-fiber orientation
//! distribution function (ODF) expressed in even-order spherical harmonics
//! into single-fiber components.
//!
//! The crate provides three separators over a shared set of primitives:
//!
//! * [`fissile`] — constrained nonlinear least-squares separation driven by a
//!   seeded multistart simplex search over per-fiber rotation frames.
//! * [`lobes`] — a watershed baseline that segments the ODF sampled on an
//!   equal-area hemisphere mesh into lobes and converts them to fixels.
//! * [`mlp`] — a mesh-to-mesh multilayer perceptron trained against von
//!   Mises–Fisher mixture targets.
//!
//! Supporting modules: [`sh`] (harmonic basis, rotations), [`mesh`]
//! (equal-area hemisphere grid), [`simulate`] (synthetic crossing-fiber
//! ODFs), [`vmf`] (target densities), and [`metrics`] (evaluation).
//!
//! The crate is `no_std` + `alloc`; all floating-point transcendentals come
//! from `libm` so results are reproducible across platforms.

#![cfg_attr(not(test), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod error;
pub mod fissile;
pub mod lobes;
pub mod mesh;
pub mod metrics;
pub mod mlp;
pub mod sh;
pub mod simulate;
pub mod vmf;

pub use error::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = core::result::Result<T, Error>;
