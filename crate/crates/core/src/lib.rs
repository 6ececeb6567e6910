//! Numerics for a lithium-ion cell digital twin.
//!
//! - [`sim`]: single-particle electrochemical model with a lumped thermal node
//! - [`protocol`]: cycler schedules and telemetry
//! - [`degrade`]: parameter-level aging and synthetic fleets
//! - [`calib`]: Gaussian-process Bayesian calibration
//! - [`dataio`]: telemetry ingestion and per-cycle features
//! - [`pinn`]: physics-regularised SOH regressor
//! - [`dagmm`]: autoencoder + Gaussian mixture energy scores
//! - [`report`]: prediction and score tables, metrics and noise sweeps
//! - [`nn`], [`metrics`], [`provenance`]: shared building blocks

pub mod calib;
pub mod dagmm;
pub mod dataio;
pub mod degrade;
pub mod metrics;
pub mod nn;
pub mod pinn;
pub mod protocol;
pub mod provenance;
pub mod report;
pub mod sim;
