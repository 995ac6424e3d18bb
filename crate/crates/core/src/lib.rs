//! Secure state estimation for linear dynamical systems under sparse sensor
//! attacks.
//!
//! An adversary arbitrarily corrupts a fixed, unknown set of k out of p
//! sensors of a noisy linear plant. This crate provides:
//!
//! - [`system`]: the plant model and a reproducible trajectory simulator;
//! - [`adversary`]: attack strategies under an explicit causal-knowledge
//!   contract;
//! - [`observability`]: observability indices, the sparse observability
//!   index theta, attack-tolerance bounds, and an exact noiseless decoder
//!   with a coding-theoretic flavor;
//! - [`kalman`]: steady-state Kalman filters (prediction and filtering) for
//!   arbitrary sensor subsets;
//! - [`estimator`]: the secure estimators — a bank of filters over all
//!   (p - k)-sensor sets, residue tests that certify consistency, and set
//!   selection;
//! - [`harness`]: a config-driven Monte Carlo harness that checks the
//!   achievable error bounds empirically and emits CSV/JSON.

pub mod adversary;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod kalman;
pub mod linalg;
pub mod observability;
pub mod stats;
pub mod system;

pub use adversary::{AttackPlan, AttackStrategy, CausalityMode};
pub use error::{Error, Result};
pub use estimator::{
    secure_filter, secure_predict, secure_predict_scalar, EpsilonSpec, EstimationMode,
    ResidueReport, WindowConfig,
};
pub use harness::{emit_results, oracle_comparison, run_experiment, ExperimentConfig, ExperimentResult, OutputFormat};
pub use kalman::{solve_steady_state, SteadyStateFilter};
pub use observability::{
    check_sparse_condition, hamming_witness, noiseless_secure_decode, sparse_observability_index,
    DecodeStatus, ObservabilityAnalysis, SubsetObservabilityData,
};
pub use system::{simulate, LinearSystem, SimulationTrace};
