//! Ensemble Kalman filter variants for joint estimation of log-permeability
//! and dynamic states (hydraulic head, tracer concentration) on small 2D
//! groundwater models, together with the machinery to run many paired
//! synthetic experiments and compare the resulting RMSE distributions.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`]: cell-centred grids, log-permeability fields and the
//!   MultiGaussian field sampler.
//! * [`linsolve`] and [`forward`]: implicit finite-difference flow and
//!   transport.
//! * [`enkf`]: augmented ensembles, measurement batches and the stochastic
//!   EnKF analysis.
//! * [`variants`]: damped, localized, hybrid, dual, normal-score and iterative
//!   policies wrapped around the classical analysis.
//! * [`scenario`]: the tracer and well set-ups and their synthetic truth.
//! * [`harness`]: experiment runner, RMSE records and persistent tables.
//! * [`stats`]: subset-resampling comparison of RMSE distributions.
//! * [`config`] and [`io`]: run configuration and file formats.

// `!(x > 0.0)` style checks deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod enkf;
pub mod error;
pub mod forward;
pub mod grid;
pub mod harness;
pub mod io;
pub mod linsolve;
pub mod rng;
pub mod scenario;
pub mod stats;
pub mod variants;

pub use enkf::{Ensemble, Gain, MeasurementBatch, ObsKind, PerturbedObservations};
pub use error::{Error, Result};
pub use forward::{DynamicState, FlowSolver, FluidProps, RockProps, SolverSettings, TransportPreconditioner};
pub use grid::{CorrelationModel, FieldStats, Grid2D, LogPermField};
pub use harness::{ExperimentPlan, RmseRecord, RmseTable};
pub use scenario::{ScenarioName, ScenarioSpec, SyntheticTruth};
pub use variants::{VariantConfig, VariantKind};
