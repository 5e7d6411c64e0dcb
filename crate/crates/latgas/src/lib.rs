//! Simulation and exact-verification laboratory for weakly asymmetric,
//! mass-conservative particle systems on a one-dimensional ring.
//!
//! The crate has three layers:
//!
//! * exact structure: rate families ([`model`]), invariant and tilted
//!   measures ([`measures`]), finite generator matrices, spectral gaps and
//!   equivalence-of-ensembles error curves ([`exactlab`]);
//! * stochastic dynamics: an event-driven continuous-time engine with a
//!   Fenwick-tree rate index ([`engine`]), fluctuation-field probes
//!   ([`fields`]) and martingale-decomposition analysis ([`martingale`]);
//! * reference limits: Ornstein-Uhlenbeck and stochastic-heat-equation
//!   solvers ([`spde`]) and a Hermite-space toolkit ([`hermite`]).

pub mod engine;
pub mod exactlab;
pub mod fields;
pub mod hermite;
pub mod lattice;
pub mod martingale;
pub mod measures;
pub mod model;
pub mod runner;
pub mod spde;
pub mod stats;

pub use lattice::Configuration;
pub use model::{Asymmetry, Family, ModelSpec};
