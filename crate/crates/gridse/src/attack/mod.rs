//! Stealthy attack synthesis and per-measurement security metrics.
//!
//! Attacks live in the range of the flat-start DC model: `a = H_dc c` is
//! invisible to residual-based detection in the linear model, so the cost of
//! stealthily biasing measurement `k` is the minimum number of measurements
//! that must be corrupted together with it. [`security_metric_exact`]
//! computes that cardinality (with a witness) for every unprotected
//! active-power row; [`security_metric_relaxation`] upper-bounds it with an
//! iteratively reweighted least-squares heuristic. Structural checks verify
//! the witness rank certificate, invariance of an attack under perturbation
//! of untouched lines, and saturation limits on attacked flow values.
//!
//! Metric computations for distinct targets are independent pure
//! computations; results are always ordered by measurement index.

mod search;

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::estimator::numerical_rank;
use crate::measurement::{DcModel, MeasurementKind, MeasurementSet};
use crate::netmodel::Network;

/// Entries with magnitude below this count as zero when computing attack
/// cardinality and support.
pub const SPARSITY_ZERO: f64 = 1e-9;

/// Exact search is refused above this many DC rows unless overridden.
pub const DEFAULT_SIZE_GUARD: usize = 60;

#[derive(Debug, Error, PartialEq)]
pub enum AttackError {
    #[error("target measurement {target} is structurally protected (no stealthy attack exists)")]
    Infeasible { target: usize },
    #[error("target measurement {target} is in the protected set")]
    TargetProtected { target: usize },
    #[error("target measurement {target} is not an active-power row of the DC model")]
    TargetNotActive { target: usize },
    #[error("exact search guard exceeded: {rows} DC rows > {guard} (raise the guard or use the relaxation)")]
    SizeGuardExceeded { rows: usize, guard: usize },
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("attack vector is empty")]
    EmptyAttack,
    #[error("attack touches pseudo-measurement row {index}")]
    PseudoRowTouched { index: usize },
    #[error("dimension mismatch: attack over {attack} rows, set has {set}")]
    DimensionMismatch { attack: usize, set: usize },
}

/// What to inject and what must stay untouched.
#[derive(Debug, Clone)]
pub struct AttackSpec {
    /// Target measurement index (must be an active-power row).
    pub target: usize,
    /// Bias to place on the target, per-unit.
    pub magnitude: f64,
    /// Measurement indices that must remain zero: pseudo rows plus any
    /// operator-secured sensors.
    pub protected: BTreeSet<usize>,
}

/// A synthesized additive attack with its state-perturbation certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackVector {
    /// Additive corruption over the measurement index space; zero outside
    /// the support.
    pub a: DVector<f64>,
    /// Certificate: `a` equals `H_dc c` on the active rows.
    pub c: DVector<f64>,
    /// Indices with `|a_k| >= SPARSITY_ZERO`, ascending.
    pub support: Vec<usize>,
    /// The targeted measurement index.
    pub target: usize,
}

impl AttackVector {
    pub fn cardinality(&self) -> usize {
        self.support.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricMethod {
    Exact,
    Relaxation,
}

/// Security metric for one measurement.
#[derive(Debug, Clone)]
pub struct MetricEntry {
    /// Measurement index.
    pub index: usize,
    /// Minimum attack cardinality; `None` when no stealthy attack exists.
    pub alpha: Option<usize>,
    /// Minimum-cardinality witness normalized to a unit bias at the target
    /// (exact method), or the sparsified heuristic witness (relaxation).
    pub witness: Option<AttackVector>,
}

/// Per-measurement metrics over the unprotected active rows of one model.
#[derive(Debug, Clone)]
pub struct SecurityMetrics {
    pub method: MetricMethod,
    pub entries: Vec<MetricEntry>,
}

impl SecurityMetrics {
    pub fn entry(&self, index: usize) -> Option<&MetricEntry> {
        self.entries.iter().find(|e| e.index == index)
    }
}

fn dc_row_protected(dc: &DcModel, protected: &BTreeSet<usize>) -> Vec<usize> {
    dc.rows()
        .iter()
        .enumerate()
        .filter(|(_, label)| protected.contains(label))
        .map(|(row, _)| row)
        .collect()
}

fn expand_witness(
    dc: &DcModel,
    c: DVector<f64>,
    magnitude: f64,
    target: usize,
) -> AttackVector {
    let c = c * magnitude;
    let a_dc = dc.matrix() * &c;
    let mut a = DVector::zeros(dc.label_space());
    let mut support = Vec::new();
    for (row, &label) in dc.rows().iter().enumerate() {
        let v = a_dc[row];
        if v.abs() >= SPARSITY_ZERO {
            a[label] = v;
            support.push(label);
        }
    }
    AttackVector { a, c, support, target }
}

/// Synthesizes the minimum-cardinality stealthy attack biasing the target
/// by `magnitude`.
pub fn synth_attack(dc: &DcModel, spec: &AttackSpec) -> Result<AttackVector, AttackError> {
    if spec.protected.contains(&spec.target) {
        return Err(AttackError::TargetProtected { target: spec.target });
    }
    let target_row = dc
        .row_of(spec.target)
        .ok_or(AttackError::TargetNotActive { target: spec.target })?;
    let protected_rows = dc_row_protected(dc, &spec.protected);
    let outcome = search::min_cardinality_attack(dc.matrix(), target_row, &protected_rows)
        .ok_or(AttackError::Infeasible { target: spec.target })?;
    Ok(expand_witness(dc, outcome.c, spec.magnitude, spec.target))
}

/// Exact minimum cardinality for every unprotected active row, by
/// exhaustive support search with rank-certificate pruning.
pub fn security_metric_exact(
    dc: &DcModel,
    protected: &BTreeSet<usize>,
    guard: usize,
) -> Result<SecurityMetrics, AttackError> {
    if dc.n_rows() > guard {
        return Err(AttackError::SizeGuardExceeded { rows: dc.n_rows(), guard });
    }
    let protected_rows = dc_row_protected(dc, protected);
    let mut entries = Vec::new();
    for (row, &label) in dc.rows().iter().enumerate() {
        if protected.contains(&label) {
            continue;
        }
        let entry = match search::min_cardinality_attack(dc.matrix(), row, &protected_rows) {
            Some(out) => {
                let witness = expand_witness(dc, out.c, 1.0, label);
                debug_assert_eq!(witness.cardinality(), out.support.len());
                MetricEntry { index: label, alpha: Some(witness.cardinality()), witness: Some(witness) }
            }
            None => MetricEntry { index: label, alpha: None, witness: None },
        };
        entries.push(entry);
    }
    Ok(SecurityMetrics { method: MetricMethod::Exact, entries })
}

/// Upper bound on every metric by minimizing the weighted 1-norm of `H c`
/// (iteratively reweighted least squares), then sparsifying. The witness is
/// feasible by construction, so its cardinality can never undershoot the
/// exact minimum, and the finite/infinite classification is shared with the
/// exact method.
pub fn security_metric_relaxation(
    dc: &DcModel,
    protected: &BTreeSet<usize>,
) -> Result<SecurityMetrics, AttackError> {
    let protected_rows = dc_row_protected(dc, protected);
    let mut entries = Vec::new();
    for (row, &label) in dc.rows().iter().enumerate() {
        if protected.contains(&label) {
            continue;
        }
        let entry = match l1_witness(dc.matrix(), row, &protected_rows) {
            Some(c) => {
                let polished = polish(dc.matrix(), row, &protected_rows, &c).unwrap_or(c);
                let witness = expand_witness(dc, polished, 1.0, label);
                MetricEntry { index: label, alpha: Some(witness.cardinality()), witness: Some(witness) }
            }
            None => MetricEntry { index: label, alpha: None, witness: None },
        };
        entries.push(entry);
    }
    Ok(SecurityMetrics { method: MetricMethod::Relaxation, entries })
}

/// IRLS approximation of `min ||H c||_1` s.t. the target row is 1 and
/// protected rows are 0. Returns `None` when the constraints are
/// incompatible.
fn l1_witness(h: &DMatrix<f64>, target: usize, protected: &[usize]) -> Option<DVector<f64>> {
    let d = h.ncols();
    let m = h.nrows();
    let row_vec = |i: usize| -> DVector<f64> { h.row(i).transpose() };
    // parametrize the affine feasible set: kernel of protected rows, then
    // the unit-target slice
    let mut k = DMatrix::identity(d, d);
    for &p in protected {
        let hp = row_vec(p);
        let u = k.transpose() * &hp;
        if u.norm() <= 1e-12 * hp.norm().max(1e-300) {
            continue;
        }
        k = householder_complement(&k, &u);
    }
    if k.ncols() == 0 {
        return None;
    }
    let t = row_vec(target);
    let v = k.transpose() * &t;
    if v.norm() <= 1e-9 * t.norm() {
        return None;
    }
    let c0 = &k * &v / v.norm_squared();
    let p = if k.ncols() > 1 {
        householder_complement(&k, &v)
    } else {
        DMatrix::zeros(d, 0)
    };
    if p.ncols() == 0 {
        return Some(c0);
    }

    let rows: Vec<usize> = (0..m)
        .filter(|&i| i != target && !protected.contains(&i))
        .collect();
    let h_free = DMatrix::from_fn(rows.len(), d, |r, c| h[(rows[r], c)]);
    let hp = &h_free * &p;
    let h0 = &h_free * &c0;

    let mut beta = DVector::zeros(p.ncols());
    let mut eps = 0.1;
    for _ in 0..80 {
        let a = &hp * &beta + &h0;
        let w = DVector::from_iterator(rows.len(), a.iter().map(|&v: &f64| 1.0 / (v.abs() + eps)));
        // weighted normal equations with a small ridge
        let mut hw = hp.clone();
        for i in 0..hw.nrows() {
            let s = w[i].sqrt();
            for j in 0..hw.ncols() {
                hw[(i, j)] *= s;
            }
        }
        let mut gain = hw.transpose() * &hw;
        for i in 0..gain.nrows() {
            gain[(i, i)] += 1e-12;
        }
        let rhs = -hw.transpose()
            * DVector::from_iterator(rows.len(), h0.iter().zip(w.iter()).map(|(a, b)| a * b.sqrt()));
        match nalgebra::Cholesky::new(gain) {
            Some(chol) => beta = chol.solve(&rhs),
            None => break,
        }
        eps = (eps * 0.75).max(1e-10);
    }
    Some(c0 + p * beta)
}

/// Re-solves the certificate exactly on the zero set implied by the
/// sparsified IRLS solution, giving clean zeros when the support is
/// feasible.
fn polish(
    h: &DMatrix<f64>,
    target: usize,
    protected: &[usize],
    c: &DVector<f64>,
) -> Option<DVector<f64>> {
    let a = h * c;
    let scale = a.amax().max(1.0);
    let mut zero_rows: Vec<usize> = protected.to_vec();
    for i in 0..h.nrows() {
        if i != target && !protected.contains(&i) && a[i].abs() < SPARSITY_ZERO * scale {
            zero_rows.push(i);
        }
    }
    let out = search_feasible(h, target, &zero_rows)?;
    Some(out)
}

fn search_feasible(h: &DMatrix<f64>, target: usize, zero_rows: &[usize]) -> Option<DVector<f64>> {
    let d = h.ncols();
    let mut k = DMatrix::identity(d, d);
    for &p in zero_rows {
        let hp: DVector<f64> = h.row(p).transpose();
        let u = k.transpose() * &hp;
        if u.norm() <= 1e-12 * hp.norm().max(1e-300) {
            continue;
        }
        k = householder_complement(&k, &u);
        if k.ncols() == 0 {
            return None;
        }
    }
    let t: DVector<f64> = h.row(target).transpose();
    let v = k.transpose() * &t;
    if v.norm() <= 1e-9 * t.norm() {
        return None;
    }
    Some(&k * &v / v.norm_squared())
}

fn householder_complement(k: &DMatrix<f64>, u: &DVector<f64>) -> DMatrix<f64> {
    let dim = u.len();
    if dim == 1 {
        return DMatrix::zeros(k.nrows(), 0);
    }
    let mut w = u.clone();
    let norm = w.norm();
    w[0] += if u[0] >= 0.0 { norm } else { -norm };
    let wn2 = w.norm_squared();
    let mut basis = DMatrix::zeros(dim, dim - 1);
    for c in 1..dim {
        let mut col = DVector::zeros(dim);
        col[c] = 1.0;
        let proj = 2.0 * w[c] / wn2;
        for r in 0..dim {
            col[r] -= proj * w[r];
        }
        basis.set_column(c - 1, &col);
    }
    k * basis
}

/// Rank certificate of a minimum-cardinality witness.
#[derive(Debug, Clone, PartialEq)]
pub struct RankLemmaReport {
    pub holds: bool,
    /// Rank of the untouched-row block; must be one less than the state
    /// dimension.
    pub rank_untouched: usize,
    pub expected_untouched: usize,
    /// Support rows whose re-insertion fails to restore full rank.
    pub failing_rows: Vec<usize>,
}

/// Checks the structural certificate of minimality: the rows untouched by
/// the attack have rank `n - 1`, and adding back any support row restores
/// rank `n` (on the DC model, `n` being the angle-state count).
pub fn verify_rank_lemma(dc: &DcModel, attack: &AttackVector) -> Result<RankLemmaReport, AttackError> {
    if attack.support.is_empty() {
        return Err(AttackError::EmptyAttack);
    }
    let n = dc.n_cols();
    let full_rank = numerical_rank(dc.matrix());
    if full_rank != n {
        return Err(AttackError::PreconditionViolated(format!(
            "DC model rank {full_rank} < {n}; the certificate presumes an observable active model"
        )));
    }
    let support_rows: Vec<usize> = attack
        .support
        .iter()
        .filter_map(|&label| dc.row_of(label))
        .collect();
    if support_rows.len() != attack.support.len() {
        return Err(AttackError::PreconditionViolated(
            "attack support contains rows outside the DC model".into(),
        ));
    }
    let in_support = {
        let mut f = vec![false; dc.n_rows()];
        for &r in &support_rows {
            f[r] = true;
        }
        f
    };
    let untouched: Vec<usize> = (0..dc.n_rows()).filter(|&r| !in_support[r]).collect();
    let submatrix = |rows: &[usize]| {
        DMatrix::from_fn(rows.len(), n, |r, c| dc.matrix()[(rows[r], c)])
    };
    let rank_untouched = numerical_rank(&submatrix(&untouched));
    let mut failing = Vec::new();
    for &r in &support_rows {
        let mut rows = untouched.clone();
        rows.push(r);
        if numerical_rank(&submatrix(&rows)) != n {
            failing.push(dc.rows()[r]);
        }
    }
    let holds = rank_untouched == n - 1 && failing.is_empty();
    Ok(RankLemmaReport {
        holds,
        rank_untouched,
        expected_untouched: n - 1,
        failing_rows: failing,
    })
}

/// Checks that an attack synthesized against `dc` stays in the range of a
/// perturbed model `dc_tilde` (line-parameter change on untouched lines):
/// the least-squares projection residual of `a` onto `Im(H~)` must vanish.
///
/// Errors if a flow row of the perturbed line sits in the attack support —
/// outside that hypothesis the invariance is not guaranteed and silence
/// would be misleading.
pub fn check_model_invariance(
    dc: &DcModel,
    dc_tilde: &DcModel,
    attack: &AttackVector,
) -> Result<bool, AttackError> {
    if dc.n_rows() != dc_tilde.n_rows() || dc.n_cols() != dc_tilde.n_cols() {
        return Err(AttackError::DimensionMismatch {
            attack: dc.n_rows(),
            set: dc_tilde.n_rows(),
        });
    }
    let h = dc.matrix();
    let ht = dc_tilde.matrix();
    let scale = h.amax().max(ht.amax());
    let flow_branches = dc.flow_branches();
    for r in 0..dc.n_rows() {
        let changed = (0..dc.n_cols()).any(|c| (h[(r, c)] - ht[(r, c)]).abs() > 1e-12 * scale);
        if changed && flow_branches[r].is_some() && attack.support.contains(&dc.rows()[r]) {
            return Err(AttackError::PreconditionViolated(format!(
                "perturbed line's flow measurement {} is in the attack support",
                dc.rows()[r]
            )));
        }
    }
    let a_dc = DVector::from_iterator(
        dc.n_rows(),
        dc.rows().iter().map(|&label| attack.a[label]),
    );
    let svd = ht.clone().svd(true, true);
    let c = svd.solve(&a_dc, 1e-12).map_err(|e| AttackError::PreconditionViolated(e.to_string()))?;
    let residual = ht * c - &a_dc;
    Ok(residual.amax() <= 1e-8 * a_dc.amax().max(1.0))
}

/// A flow value exceeding its theoretical transfer limit.
#[derive(Debug, Clone, PartialEq)]
pub struct SaturationViolation {
    /// Measurement index of the offending active flow.
    pub index: usize,
    /// `|V_i V_j b_ij|` at nominal voltage.
    pub limit: f64,
    pub value: f64,
    /// `limit - |value|`; negative by construction for a violation.
    pub headroom: f64,
}

/// Screens attacked values against the transfer limit `|V_i V_j b_ij|` of
/// each measured active flow (nominal voltages): values beyond the limit
/// cannot be produced by any physical state, so an estimator will never
/// track them.
pub fn check_saturation(
    network: &Network,
    set: &MeasurementSet,
    z_attacked: &DVector<f64>,
) -> Vec<SaturationViolation> {
    let mut out = Vec::new();
    for (k, item) in set.items().iter().enumerate() {
        if let MeasurementKind::ActiveFlow { from, to } = item.kind {
            let branch = network
                .branch_between(from, to)
                .expect("validated measurement references an in-service branch");
            let limit = branch.series_b.abs();
            let value = z_attacked[k];
            if value.abs() > limit {
                out.push(SaturationViolation { index: k, limit, value, headroom: limit - value.abs() });
            }
        }
    }
    out
}

/// Adds the attack onto telemetered values. Pseudo rows must carry exact
/// zeros in `a`; a nonzero there is an invariant breach and is rejected.
pub fn apply_attack(set: &MeasurementSet, attack: &AttackVector) -> Result<MeasurementSet, AttackError> {
    if attack.a.len() != set.len() {
        return Err(AttackError::DimensionMismatch { attack: attack.a.len(), set: set.len() });
    }
    for (k, item) in set.items().iter().enumerate() {
        if item.is_pseudo && attack.a[k].abs() > SPARSITY_ZERO {
            return Err(AttackError::PseudoRowTouched { index: k });
        }
    }
    let mut out = set.clone();
    for (k, item) in out.items_mut().iter_mut().enumerate() {
        if attack.a[k] != 0.0 {
            if let Some(v) = item.value {
                item.value = Some(v + attack.a[k]);
            }
        }
    }
    Ok(out)
}
