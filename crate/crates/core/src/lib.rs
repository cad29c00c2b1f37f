//! Proxy-based mediation analysis.
//!
//! Estimates the mediation functional `psi = E[Y{1, M(0)}]` and natural
//! direct/indirect effects when treatment-side (`Z`) and outcome-side (`W`)
//! proxy variables stand in for an unmeasured confounder. Four confounding
//! bridge functions are fitted from exactly identified moment systems and
//! combined into outcome-bridge, hybrid, weighting-based, and multiply
//! robust estimators, with sandwich and bootstrap inference.
//!
//! The crate also ships a seeded simulation harness reproducing a nine-part
//! misspecification study, randomized-trial specializations, and an exact
//! finite-law module that verifies the identification identities by brute
//! force on discrete distributions.
//!
//! Monte Carlo loops (experiment replicates, bootstrap resamples) run on
//! rayon when the default `parallel` feature is enabled and sequentially
//! otherwise; outputs are bit-identical either way.

pub mod bridge;
pub mod data;
pub mod discrete;
pub mod error;
pub mod estimate;
pub mod inference;
pub mod linalg;
pub mod par;
pub mod rng;
pub mod sim;
pub mod solve;

pub use bridge::{BridgeKind, BridgeParams, BridgeSpec};
pub use data::{
    build_features, load_csv, validate, write_csv, ColumnSchema, FeatureMap, MediationDataset,
    Role, ValidationReport,
};
pub use error::{Error, Result};
pub use estimate::{
    delta_pdr, effects, naive_ols, psi_estimate, psi_phybrid, psi_pipw, psi_pmr, psi_por, Estimand,
    EstimateResult, FittedBridges, Method,
};
pub use inference::{bootstrap_se, sandwich_psi, sandwich_theta, BootstrapConfig, Inference};
pub use sim::{
    closed_form_truth, generate, oracle_truth, run_experiment, DgpConfig, ExperimentSpec,
    MonteCarloReport, OracleTruth,
};
pub use solve::{newton_solve, MomentSystem, SolveReport};
