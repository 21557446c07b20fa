//! Experiment plans and machine-readable reports (in progress).
