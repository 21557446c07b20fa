//! Weighted-least-squares state estimation.
//!
//! [`wls_estimate`] iterates the Gauss-Newton normal equations
//! `(H' W H) dx = H' W r(x)` with `W = R^-1` (pseudo rows scaled by a large
//! multiplier); [`fast_decoupled_estimate`] alternates the angle and
//! magnitude half-problems with gain matrices fixed at flat start, series
//! resistances dropped from the angle half.
//!
//! Runs are re-entrant: nothing is shared between concurrent estimations.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::measurement::{MeasurementSet, SetError, StateVector};
use crate::netmodel::Network;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("not observable: measurement Jacobian rank {rank} < {needed} states{detail}")]
    NotObservable { rank: usize, needed: usize, detail: String },
    #[error("diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },
    #[error(transparent)]
    Set(#[from] SetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorMode {
    FullNewton,
    FastDecoupled,
}

#[derive(Debug, Clone)]
pub enum StartPoint {
    Flat,
    Given(StateVector),
}

#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub max_iterations: usize,
    /// Convergence test on the infinity norm of the state update.
    pub convergence_tol: f64,
    /// Weight multiplier for pseudo-measurement (equality-constraint) rows.
    pub pseudo_weight: f64,
    pub mode: EstimatorMode,
    pub start: StartPoint,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            max_iterations: 50,
            convergence_tol: 1e-6,
            pseudo_weight: 1e6,
            mode: EstimatorMode::FullNewton,
            start: StartPoint::Flat,
        }
    }
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// Infinity norm of the state update.
    pub step_inf: f64,
    /// Directional derivative of the objective along the step; negative for
    /// a descent direction.
    pub grad_dot_step: f64,
}

#[derive(Debug, Clone)]
pub struct EstimationResult {
    /// Whether the update norm fell below the tolerance within the
    /// iteration cap. Iteration-cap exhaustion is reported here (not as an
    /// error) so sweeps can log the row and continue; numerical escape
    /// (non-finite values, voltage outside (0, 5]) is an error.
    pub converged: bool,
    pub iterations: usize,
    pub x_hat: StateVector,
    /// Residual `z - h(x_hat)`.
    pub residual: DVector<f64>,
    /// Objective `0.5 r' W r` at the estimate.
    pub objective: f64,
    /// Estimated measurements `h(x_hat)`.
    pub estimated: DVector<f64>,
    pub trace: Vec<IterationRecord>,
}

/// Numerical rank/observability of a measurement set at flat start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservabilityReport {
    pub observable: bool,
    pub rank: usize,
    pub needed: usize,
}

/// Numerical rank of the measurement Jacobian at flat start; observable iff
/// it equals the state dimension.
pub fn observability_check(network: &Network, set: &MeasurementSet) -> ObservabilityReport {
    let flat = StateVector::flat(network.n_buses(), network.reference());
    let h = set.jacobian(network, &flat);
    let rank = numerical_rank(h.full());
    let needed = network.n_states();
    ObservabilityReport { observable: rank == needed, rank, needed }
}

pub(crate) fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > max * 1e-8).count()
}

fn check_state(x: &StateVector, iteration: usize) -> Result<(), EstimatorError> {
    for &t in &x.theta {
        if !t.is_finite() {
            return Err(EstimatorError::Diverged {
                iteration,
                reason: "non-finite angle".into(),
            });
        }
    }
    for &v in &x.v {
        if !v.is_finite() || v <= 0.0 || v > 5.0 {
            return Err(EstimatorError::Diverged {
                iteration,
                reason: format!("voltage magnitude {v} left (0, 5]"),
            });
        }
    }
    Ok(())
}

fn solve_normal(
    h: &DMatrix<f64>,
    w: &DVector<f64>,
    r: &DVector<f64>,
    needed: usize,
) -> Result<(DVector<f64>, DVector<f64>), EstimatorError> {
    // (H'WH) dx = H'W r via Cholesky on the weighted gain matrix
    let sw = w.map(f64::sqrt);
    let mut hw = h.clone();
    for i in 0..hw.nrows() {
        for j in 0..hw.ncols() {
            hw[(i, j)] *= sw[i];
        }
    }
    let gain = hw.transpose() * &hw;
    let rhs = hw.transpose() * DVector::from_iterator(r.len(), r.iter().zip(sw.iter()).map(|(a, b)| a * b));
    match Cholesky::new(gain) {
        Some(chol) => {
            let dx = chol.solve(&rhs);
            Ok((dx, rhs))
        }
        None => Err(EstimatorError::NotObservable {
            rank: numerical_rank(h),
            needed,
            detail: String::new(),
        }),
    }
}

/// Gauss-Newton WLS estimate on the full coupled model.
pub fn wls_estimate(
    network: &Network,
    set: &MeasurementSet,
    config: &EstimatorConfig,
) -> Result<EstimationResult, EstimatorError> {
    if config.mode == EstimatorMode::FastDecoupled {
        return fast_decoupled_estimate(network, set, config);
    }
    let z = set.values()?;
    let w = set.weights(config.pseudo_weight);
    let n = network.n_states();
    if set.len() < n {
        let flat = StateVector::flat(network.n_buses(), network.reference());
        let h = set.jacobian(network, &flat);
        return Err(EstimatorError::NotObservable {
            rank: numerical_rank(h.full()),
            needed: n,
            detail: format!(" ({} measurements)", set.len()),
        });
    }

    let mut x = match &config.start {
        StartPoint::Flat => StateVector::flat(network.n_buses(), network.reference()),
        StartPoint::Given(s) => s.clone(),
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..config.max_iterations {
        let h = set.eval_h(network, &x);
        let r = &z - &h;
        let jac = set.jacobian(network, &x);
        let (dx, rhs) = solve_normal(jac.full(), &w, &r, n)?;

        let mut xv = x.pack();
        xv += &dx;
        x = StateVector::unpack(&xv, network.n_buses(), network.reference());
        check_state(&x, it + 1)?;

        let step_inf = dx.amax();
        trace.push(IterationRecord { step_inf, grad_dot_step: -rhs.dot(&dx) });
        iterations = it + 1;
        if step_inf <= config.convergence_tol {
            converged = true;
            break;
        }
    }

    finalize(network, set, &z, &w, x, converged, iterations, trace)
}

/// Fast-decoupled WLS estimate: alternating angle/magnitude half-problems
/// with flat-start gain matrices, resistances ignored in the angle half.
pub fn fast_decoupled_estimate(
    network: &Network,
    set: &MeasurementSet,
    config: &EstimatorConfig,
) -> Result<EstimationResult, EstimatorError> {
    let z = set.values()?;
    let w = set.weights(config.pseudo_weight);
    let n_buses = network.n_buses();

    let active = set.active_rows();
    let reactive: Vec<usize> =
        (0..set.len()).filter(|&k| !set.items()[k].kind.is_active()).collect();
    if active.is_empty() {
        return Err(EstimatorError::NotObservable {
            rank: 0,
            needed: n_buses - 1,
            detail: " (angle half-problem: no active measurements)".into(),
        });
    }
    if reactive.is_empty() {
        return Err(EstimatorError::NotObservable {
            rank: 0,
            needed: n_buses,
            detail: " (magnitude half-problem: no reactive or voltage measurements)".into(),
        });
    }

    // H_Ptheta at flat start with resistances ignored is exactly the DC model
    let dc = set.dc_model(network)?;
    let h_p = dc.matrix().clone();
    let flat = StateVector::flat(n_buses, network.reference());
    let h_q = set.jacobian(network, &flat).h_qv();

    let w_p = DVector::from_iterator(active.len(), active.iter().map(|&k| w[k]));
    let w_q = DVector::from_iterator(reactive.len(), reactive.iter().map(|&k| w[k]));

    let gain = |h: &DMatrix<f64>, wv: &DVector<f64>, needed: usize, half: &str| {
        let mut hw = h.clone();
        for i in 0..hw.nrows() {
            let s = wv[i].sqrt();
            for j in 0..hw.ncols() {
                hw[(i, j)] *= s;
            }
        }
        Cholesky::new(hw.transpose() * &hw).ok_or_else(|| EstimatorError::NotObservable {
            rank: numerical_rank(h),
            needed,
            detail: format!(" ({half} half-problem)"),
        })
    };
    let chol_p = gain(&h_p, &w_p, n_buses - 1, "angle")?;
    let chol_q = gain(&h_q, &w_q, n_buses, "magnitude")?;

    let mut x = match &config.start {
        StartPoint::Flat => flat,
        StartPoint::Given(s) => s.clone(),
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..config.max_iterations {
        // angle half at the latest estimate
        let h_now = set.eval_h(network, &x);
        let rp = DVector::from_iterator(active.len(), active.iter().map(|&k| z[k] - h_now[k]));
        let rhs_p = h_p.transpose()
            * DVector::from_iterator(active.len(), rp.iter().zip(w_p.iter()).map(|(a, b)| a * b));
        let dtheta = chol_p.solve(&rhs_p);
        let mut c = 0;
        for i in 0..n_buses {
            if i != network.reference() {
                x.theta[i] += dtheta[c];
                c += 1;
            }
        }
        check_state(&x, it + 1)?;

        // magnitude half with mismatches re-evaluated after the angle update
        let h_now = set.eval_h(network, &x);
        let rq = DVector::from_iterator(reactive.len(), reactive.iter().map(|&k| z[k] - h_now[k]));
        let rhs_q = h_q.transpose()
            * DVector::from_iterator(reactive.len(), rq.iter().zip(w_q.iter()).map(|(a, b)| a * b));
        let dv = chol_q.solve(&rhs_q);
        for i in 0..n_buses {
            x.v[i] += dv[i];
        }
        check_state(&x, it + 1)?;

        let step_inf = dtheta.amax().max(dv.amax());
        trace.push(IterationRecord {
            step_inf,
            grad_dot_step: -(rhs_p.dot(&dtheta) + rhs_q.dot(&dv)),
        });
        iterations = it + 1;
        if dtheta.amax() <= config.convergence_tol && dv.amax() <= config.convergence_tol {
            converged = true;
            break;
        }
    }

    finalize(network, set, &z, &w, x, converged, iterations, trace)
}

#[allow(clippy::too_many_arguments)]
fn finalize(
    network: &Network,
    set: &MeasurementSet,
    z: &DVector<f64>,
    w: &DVector<f64>,
    x: StateVector,
    converged: bool,
    iterations: usize,
    trace: Vec<IterationRecord>,
) -> Result<EstimationResult, EstimatorError> {
    let estimated = set.eval_h(network, &x);
    let residual = z - &estimated;
    let objective = 0.5 * residual.iter().zip(w.iter()).map(|(r, w)| w * r * r).sum::<f64>();
    Ok(EstimationResult {
        converged,
        iterations,
        x_hat: x,
        residual,
        objective,
        estimated,
        trace,
    })
}
