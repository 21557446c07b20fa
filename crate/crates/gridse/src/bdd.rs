//! Bad-data detection on estimation residuals.
//!
//! The residual sensitivity matrix `S = I - H (H'WH)^-1 H'W` maps
//! measurement errors to residuals; its covariance diagonal normalizes the
//! residual vector, and the largest-normalized-residual (LNR) threshold test
//! raises the alarm. Rows without redundancy (residual variance ~ 0, the
//! critical measurements) have an undefined normalized residual and are
//! excluded from the test, as are pseudo rows (operator-trusted
//! constraints).

use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::estimator::numerical_rank;

/// Residual variances below this floor mark a measurement as critical
/// (non-redundant) and keep it out of the LNR test.
pub const CRITICAL_VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum BddError {
    #[error("measurement Jacobian is rank deficient: rank {rank} < {needed}")]
    RankDeficient { rank: usize, needed: usize },
    #[error("false-alarm probability must lie in (0, 1), got {0}")]
    InvalidProbability(f64),
    #[error("effective measurement count must be positive")]
    NoEligibleRows,
}

/// `S = I - H (H'WH)^-1 H'W`. With unit weights this is the orthogonal
/// projector onto the residual space.
pub fn residual_sensitivity(
    h: &DMatrix<f64>,
    w: &DVector<f64>,
) -> Result<DMatrix<f64>, BddError> {
    let m = h.nrows();
    let n = h.ncols();
    let mut hw = h.clone();
    for i in 0..m {
        let s = w[i].sqrt();
        for j in 0..n {
            hw[(i, j)] *= s;
        }
    }
    let gain = hw.transpose() * &hw;
    let chol = Cholesky::new(gain).ok_or(BddError::RankDeficient {
        rank: numerical_rank(h),
        needed: n,
    })?;
    // K = H (H'WH)^-1 H' W
    let mut htw = h.transpose();
    for j in 0..m {
        for i in 0..n {
            htw[(i, j)] *= w[j];
        }
    }
    let k = h * chol.solve(&htw);
    Ok(DMatrix::identity(m, m) - k)
}

/// Normalized residual vector with its eligibility bookkeeping.
#[derive(Debug, Clone)]
pub struct NormalizedResiduals {
    /// `r_k / sqrt(D_kk)`; zero for excluded rows.
    pub values: DVector<f64>,
    /// Rows eligible for the LNR test.
    pub included: Vec<bool>,
    /// Rows excluded for lack of redundancy (variance below the floor).
    pub critical: Vec<usize>,
}

impl NormalizedResiduals {
    pub fn effective_count(&self) -> usize {
        self.included.iter().filter(|&&b| b).count()
    }
}

/// Normalizes residuals by the diagonal of the residual covariance
/// `Omega = S W^-1`. Pseudo rows are flagged ineligible.
pub fn normalized_residuals(
    r: &DVector<f64>,
    s: &DMatrix<f64>,
    w: &DVector<f64>,
    pseudo: &[bool],
) -> NormalizedResiduals {
    let m = r.len();
    let mut values = DVector::zeros(m);
    let mut included = vec![false; m];
    let mut critical = Vec::new();
    for k in 0..m {
        let d = s[(k, k)] / w[k];
        if d < CRITICAL_VARIANCE_FLOOR {
            critical.push(k);
            continue;
        }
        values[k] = r[k] / d.sqrt();
        included[k] = !pseudo[k];
    }
    NormalizedResiduals { values, included, critical }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LnrOutcome {
    pub alarm: bool,
    /// Index of the largest included |r_N|, when any row is eligible.
    pub max_index: Option<usize>,
    pub max_value: f64,
}

/// Largest-normalized-residual test: alarm iff `max |r_N| > tau` over
/// eligible rows.
pub fn lnr_test(r_n: &NormalizedResiduals, tau: f64) -> LnrOutcome {
    let mut max_index = None;
    let mut max_value = 0.0;
    for (k, &inc) in r_n.included.iter().enumerate() {
        if inc {
            let v = r_n.values[k].abs();
            if max_index.is_none() || v > max_value {
                max_index = Some(k);
                max_value = v;
            }
        }
    }
    LnrOutcome { alarm: max_value > tau, max_index, max_value }
}

/// Threshold for a per-run false-alarm probability `p` over `m_eff`
/// eligible rows: the Bonferroni-corrected two-sided Gaussian quantile
/// `Phi^-1(1 - p / (2 m_eff))`.
pub fn threshold_from_false_alarm(p: f64, m_eff: usize) -> Result<f64, BddError> {
    if !(0.0..1.0).contains(&p) || p == 0.0 {
        return Err(BddError::InvalidProbability(p));
    }
    if m_eff == 0 {
        return Err(BddError::NoEligibleRows);
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(1.0 - p / (2.0 * m_eff as f64)))
}

/// Full residual analysis for one converged estimate.
#[derive(Debug, Clone)]
pub struct ResidualAnalysis {
    /// Residual sensitivity matrix.
    pub s: DMatrix<f64>,
    /// Residual covariance `S W^-1`.
    pub omega: DMatrix<f64>,
    /// Diagonal of `omega`.
    pub d: DVector<f64>,
    pub r_n: NormalizedResiduals,
    pub tau: f64,
    pub outcome: LnrOutcome,
}

impl ResidualAnalysis {
    pub fn analyze(
        h: &DMatrix<f64>,
        w: &DVector<f64>,
        r: &DVector<f64>,
        pseudo: &[bool],
        tau: f64,
    ) -> Result<Self, BddError> {
        let s = residual_sensitivity(h, w)?;
        let m = r.len();
        let mut omega = s.clone();
        for j in 0..m {
            for i in 0..m {
                omega[(i, j)] /= w[j];
            }
        }
        let d = DVector::from_iterator(m, (0..m).map(|k| omega[(k, k)]));
        let r_n = normalized_residuals(r, &s, w, pseudo);
        let outcome = lnr_test(&r_n, tau);
        Ok(ResidualAnalysis { s, omega, d, r_n, tau, outcome })
    }

    pub fn alarm(&self) -> bool {
        self.outcome.alarm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::test_util::*;
    use crate::measurement::{MeasurementKind, MeasurementSet, StateVector};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn flat_jacobian(net: &crate::netmodel::Network, set: &MeasurementSet) -> DMatrix<f64> {
        set.jacobian(net, &StateVector::flat(net.n_buses(), net.reference())).full().clone()
    }

    fn unit_w(m: usize) -> DVector<f64> {
        DVector::from_element(m, 1.0)
    }

    #[test]
    fn projector_annihilates_column_space_and_is_idempotent() {
        let net = ring3_net();
        let set = full_set(&net, 1.0);
        let h = flat_jacobian(&net, &set);
        let w = unit_w(set.len());
        let s = residual_sensitivity(&h, &w).unwrap();
        let sh = &s * &h;
        assert!(sh.amax() < 1e-8, "S*H max entry {}", sh.amax());
        let ss = &s * &s;
        assert!((ss - &s).amax() < 1e-8);
        // symmetry in the unit-weight case
        assert!((s.transpose() - &s).amax() < 1e-8);
        // trace(S) = m - n
        let tr: f64 = (0..set.len()).map(|i| s[(i, i)]).sum();
        assert_relative_eq!(tr, (set.len() - 5) as f64, epsilon = 1e-6);
    }

    #[test]
    fn projector_idempotent_with_general_weights() {
        let net = ring3_net();
        let set = full_set(&net, 1.0);
        let h = flat_jacobian(&net, &set);
        let w = DVector::from_iterator(set.len(), (0..set.len()).map(|k| 1.0 + 0.2 * k as f64));
        let s = residual_sensitivity(&h, &w).unwrap();
        assert!((&s * &h).amax() < 1e-8);
        assert!((&s * &s - &s).amax() < 1e-8);
        let tr: f64 = (0..set.len()).map(|i| s[(i, i)]).sum();
        assert_relative_eq!(tr, (set.len() - 5) as f64, epsilon = 1e-6);
    }

    #[test]
    fn no_redundancy_gives_zero_sensitivity() {
        // m = n: square invertible Jacobian, S = 0 and every row critical
        let net = two_bus_net();
        let set = MeasurementSet::new(vec![
            m(MeasurementKind::ActiveFlow { from: 0, to: 1 }, 1.0),
            m(MeasurementKind::VoltageMagnitude { bus: 0 }, 1.0),
            m(MeasurementKind::VoltageMagnitude { bus: 1 }, 1.0),
        ]);
        let h = flat_jacobian(&net, &set);
        let w = unit_w(3);
        let s = residual_sensitivity(&h, &w).unwrap();
        assert!(s.amax() < 1e-8);
        let r = DVector::from_vec(vec![0.1, 0.0, -0.2]);
        let rn = normalized_residuals(&r, &s, &w, &[false; 3]);
        assert_eq!(rn.critical, vec![0, 1, 2]);
        assert_eq!(rn.effective_count(), 0);
        let outcome = lnr_test(&rn, 3.0);
        assert!(!outcome.alarm);
        assert_eq!(outcome.max_index, None);
    }

    #[test]
    fn rank_deficient_jacobian_rejected() {
        let net = ring3_net();
        let set = MeasurementSet::new(
            (0..3).map(|b| m(MeasurementKind::VoltageMagnitude { bus: b }, 1.0)).collect(),
        );
        let h = flat_jacobian(&net, &set);
        assert!(matches!(
            residual_sensitivity(&h, &unit_w(3)),
            Err(BddError::RankDeficient { .. })
        ));
    }

    #[test]
    fn zero_residual_normalizes_to_zero() {
        let net = ring3_net();
        let set = full_set(&net, 1.0);
        let h = flat_jacobian(&net, &set);
        let w = unit_w(set.len());
        let s = residual_sensitivity(&h, &w).unwrap();
        let rn = normalized_residuals(&DVector::zeros(set.len()), &s, &w, &vec![false; set.len()]);
        assert_eq!(rn.values.amax(), 0.0);
    }

    #[test]
    fn normalized_residual_variance_is_unit() {
        // Monte-Carlo oracle: for e ~ N(0, R), r = S e has var(r_N) = 1.
        let net = ring3_net();
        let set = full_set(&net, 0.01);
        let h = flat_jacobian(&net, &set);
        let w = set.weights(1.0);
        let s = residual_sensitivity(&h, &w).unwrap();
        let m_len = set.len();
        let pseudo = vec![false; m_len];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 10_000;
        let mut sum2 = vec![0.0; m_len];
        let mut included = vec![true; m_len];
        for _ in 0..draws {
            let e = DVector::from_iterator(
                m_len,
                (0..m_len).map(|k| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    g * set.items()[k].sigma
                }),
            );
            let r = &s * e;
            let rn = normalized_residuals(&r, &s, &w, &pseudo);
            for k in 0..m_len {
                if rn.included[k] {
                    sum2[k] += rn.values[k] * rn.values[k];
                } else {
                    included[k] = false;
                }
            }
        }
        assert!(included.iter().any(|&b| b));
        for k in 0..m_len {
            if included[k] {
                let var = sum2[k] / draws as f64;
                assert!((var - 1.0).abs() < 0.05, "row {k}: variance {var}");
            }
        }
    }

    #[test]
    fn stealth_identity_for_column_space_attacks() {
        // residuals of any a = Hc normalize to ~0: invisible at any tau > 0
        let net = ring3_net();
        let set = full_set(&net, 1.0);
        let h = flat_jacobian(&net, &set);
        let w = unit_w(set.len());
        let s = residual_sensitivity(&h, &w).unwrap();
        let pseudo = vec![false; set.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let c = DVector::from_iterator(
                h.ncols(),
                (0..h.ncols()).map(|_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    g
                }),
            );
            let a = &h * c;
            let r = &s * a;
            let rn = normalized_residuals(&r, &s, &w, &pseudo);
            assert!(rn.values.amax() <= 1e-8, "stealth residual {}", rn.values.amax());
            assert!(!lnr_test(&rn, 1e-7).alarm);
        }
    }

    #[test]
    fn lnr_boundary_cases() {
        let values = DVector::from_vec(vec![0.5, -2.9, 3.01]);
        let rn = NormalizedResiduals {
            values,
            included: vec![true, true, true],
            critical: vec![],
        };
        let out = lnr_test(&rn, 3.0);
        assert!(out.alarm);
        assert_eq!(out.max_index, Some(2));
        assert_relative_eq!(out.max_value, 3.01);

        let quiet = NormalizedResiduals {
            values: DVector::from_vec(vec![0.5, -2.9, 3.0]),
            included: vec![true, true, true],
            critical: vec![],
        };
        assert!(!lnr_test(&quiet, 3.0).alarm); // at the threshold: H0 accepted
    }

    #[test]
    fn pseudo_rows_never_alarm() {
        let rn = NormalizedResiduals {
            values: DVector::from_vec(vec![9.0, 0.1]),
            included: vec![false, true], // row 0 pseudo
            critical: vec![],
        };
        let out = lnr_test(&rn, 3.0);
        assert!(!out.alarm);
        assert_eq!(out.max_index, Some(1));
    }

    #[test]
    fn threshold_quantiles() {
        // p -> 1 with one row: tau -> 0
        let t = threshold_from_false_alarm(0.999999, 1).unwrap();
        assert!(t.abs() < 1e-4, "tau = {t}");
        // the 3-sigma convention
        let t3 = threshold_from_false_alarm(0.0027, 1).unwrap();
        assert_relative_eq!(t3, 3.0, epsilon = 1e-3);
        // monotone in m_eff
        let mut prev = 0.0;
        for m_eff in [1usize, 2, 5, 20, 100] {
            let t = threshold_from_false_alarm(0.01, m_eff).unwrap();
            assert!(t > prev);
            prev = t;
        }
        assert!(threshold_from_false_alarm(0.0, 1).is_err());
        assert!(threshold_from_false_alarm(1.0, 1).is_err());
        assert!(threshold_from_false_alarm(0.5, 0).is_err());
    }

    #[test]
    fn clean_alarm_rate_tracks_false_alarm_formula() {
        // Monte-Carlo against the independence approximation
        // 1 - (2 Phi(tau) - 1)^m_eff; residual correlation keeps this
        // approximate, hence the generous band.
        let net = ring3_net();
        let set = full_set(&net, 1.0);
        let h = flat_jacobian(&net, &set);
        let w = unit_w(set.len());
        let s = residual_sensitivity(&h, &w).unwrap();
        let pseudo = vec![false; set.len()];
        let tau = 3.0;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let runs = 10_000;
        let mut alarms = 0;
        let mut m_eff = 0;
        for _ in 0..runs {
            let e = DVector::from_iterator(set.len(), (0..set.len()).map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g
            }));
            let r = &s * e;
            let rn = normalized_residuals(&r, &s, &w, &pseudo);
            m_eff = rn.effective_count();
            if lnr_test(&rn, tau).alarm {
                alarms += 1;
            }
        }
        let rate = alarms as f64 / runs as f64;
        let phi3 = 0.998_650_101_968_369_9_f64; // Phi(3)
        let formula = 1.0 - (2.0 * phi3 - 1.0).powi(m_eff as i32);
        let mc_sigma = (formula * (1.0 - formula) / runs as f64).sqrt();
        assert!(
            (rate - formula).abs() <= 0.3 * formula + 3.0 * mc_sigma,
            "rate {rate} vs formula {formula}"
        );
    }

    #[test]
    fn gross_error_identified_by_max_index() {
        // full pipeline: 20-sigma error on one redundant row is flagged at
        // that index in >= 99 of 100 trials
        let net = ring3_net();
        let set = full_set(&net, 0.01);
        let x_true = StateVector::new(vec![0.0, -0.06, 0.03], vec![1.02, 0.98, 1.01], 0);
        let bad_row = 0; // P flow 1-2
        let mut hits = 0;
        for seed in 0..100 {
            let mut sim = set.simulate(&net, &x_true, seed, 1.0);
            let v = sim.items()[bad_row].value.unwrap();
            sim.items_mut()[bad_row].value = Some(v + 20.0 * 0.01);
            let res = crate::estimator::wls_estimate(
                &net,
                &sim,
                &crate::estimator::EstimatorConfig::default(),
            )
            .unwrap();
            assert!(res.converged);
            let jac = sim.jacobian(&net, &res.x_hat);
            let analysis = ResidualAnalysis::analyze(
                jac.full(),
                &sim.weights(1.0),
                &res.residual,
                &vec![false; sim.len()],
                3.0,
            )
            .unwrap();
            if analysis.outcome.alarm && analysis.outcome.max_index == Some(bad_row) {
                hits += 1;
            }
        }
        assert!(hits >= 99, "identified {hits}/100");
    }

    #[test]
    fn scaling_measurements_identically_leaves_alarm_unchanged() {
        let net = ring3_net();
        let set = full_set(&net, 1.0);
        let h = flat_jacobian(&net, &set);
        let w = unit_w(set.len());
        let s = residual_sensitivity(&h, &w).unwrap();
        let pseudo = vec![false; set.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = DVector::from_iterator(set.len(), (0..set.len()).map(|_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g
        }));
        let r = &s * e;
        // doubling z and h(x) identically leaves r unchanged, hence the decision
        let a = lnr_test(&normalized_residuals(&r, &s, &w, &pseudo), 3.0);
        let b = lnr_test(&normalized_residuals(&r.clone(), &s, &w, &pseudo), 3.0);
        assert_eq!(a, b);
    }

    #[test]
    fn omega_diagonal_within_variance_bounds() {
        let net = ring3_net();
        let set = full_set(&net, 1.0);
        let h = flat_jacobian(&net, &set);
        let w = unit_w(set.len());
        let analysis = ResidualAnalysis::analyze(
            &h,
            &w,
            &DVector::zeros(set.len()),
            &vec![false; set.len()],
            3.0,
        )
        .unwrap();
        for k in 0..set.len() {
            assert!(analysis.d[k] >= -1e-12 && analysis.d[k] <= 1.0 + 1e-12);
        }
    }
}
