//! Power-grid state estimation and measurement-attack analysis.
//!
//! `gridse` bundles the pieces needed to study how a weighted-least-squares
//! state estimator with residual-based bad-data detection reacts to
//! coordinated false-data injection on its telemetry:
//!
//! - [`netmodel`] — case-file parsing and nodal admittance assembly
//! - [`measurement`] — measurement sets, the nonlinear measurement function
//!   `h(x)`, its Jacobian, the flat-start DC Jacobian, and telemetry simulation
//! - [`estimator`] — Gauss-Newton WLS estimation and the fast-decoupled variant
//! - [`bdd`] — residual sensitivity, normalized residuals, and the
//!   largest-normalized-residual test
//! - [`attack`] — stealthy attack synthesis from the DC model, per-measurement
//!   security metrics with minimum-cardinality witnesses, and structural checks
//! - [`harness`] — experiment plans (bias sweeps, metric scans) and
//!   machine-readable reports
//!
//! Electrical quantities are per-unit on the case MVA base throughout; reports
//! convert to MW where useful. Measurement indices are 0-based in the API and
//! 1-based in every file format and report.
//!
//! Runnable walkthroughs live in `examples/`; the `gridse` binary exposes the
//! same workflows as `estimate`, `sweep`, `metrics`, and `verify` subcommands.

pub mod attack;
pub mod bdd;
pub mod estimator;
pub mod harness;
pub mod measurement;
pub mod netmodel;

pub use attack::{
    apply_attack, check_model_invariance, check_saturation, security_metric_exact,
    security_metric_relaxation, synth_attack, verify_rank_lemma, AttackError, AttackSpec,
    AttackVector, MetricEntry, MetricMethod, SecurityMetrics,
};
pub use bdd::{
    lnr_test, normalized_residuals, residual_sensitivity, threshold_from_false_alarm, BddError,
    LnrOutcome, ResidualAnalysis,
};
pub use estimator::{
    fast_decoupled_estimate, observability_check, wls_estimate, EstimationResult, EstimatorConfig,
    EstimatorError, EstimatorMode, StartPoint,
};
pub use measurement::{
    DcModel, JacobianBlocks, Measurement, MeasurementKind, MeasurementSet, SetError, StateVector,
};
pub use netmodel::{parse_case, Branch, Bus, Case, ModelError, Network};
