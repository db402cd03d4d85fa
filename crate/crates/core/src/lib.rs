//! Broadcast Markov processes on b-ary trees and the linear root-state
//! estimator `S_n = (b lambda)^{-n} sum_{leaves} sigma_x`.
//!
//! The crate has five public layers:
//!
//! - [`spectral`]: channel validation, stationary distribution, second
//!   eigenpair, Kesten-Stigum phase classification.
//! - [`sim`]: streaming Monte Carlo for `S_n`, `Q_n` and the leaf census,
//!   reproducible and data-parallel (rayon behind the `parallel` feature,
//!   with a bit-identical sequential fallback).
//! - [`oracles`]: exact log-MGF and moment recursions, brute-force
//!   enumeration of tiny trees, Gauss-Hermite quadrature for the MGF of
//!   `S_n^2`.
//! - [`bounds`]: empirical exponential-moment constants, pointwise bound
//!   checks, squared-estimator probes, and sub-critical CLT diagnostics.
//! - [`phylo`]: the deep-covariance estimator between internal nodes and
//!   its inversion to a tree-distance estimate.

pub mod bounds;
pub mod numeric;
pub mod oracles;
pub mod phylo;
pub mod quadrature;
pub mod rng;
pub mod sim;
pub mod spectral;

pub use spectral::{analyze, classify_phase, validate_channel, ChannelMatrix, Phase, SpectralData};
