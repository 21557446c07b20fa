//! Measurement sets and the nonlinear measurement model.
//!
//! A [`MeasurementSet`] is an ordered list of telemetered and pseudo
//! measurements; the position of a measurement in the list is its index `k`,
//! used everywhere downstream (residuals, attacks, reports). The set
//! evaluates the measurement function `h(x)`, its analytic Jacobian, and the
//! flat-start lossless DC Jacobian used for attack synthesis.
//!
//! All operations are pure functions of immutable inputs.
//!
//! Measurement-set files are line oriented, one measurement per line, and
//! the 1-based line number is the measurement index:
//!
//! ```text
//! PFLOW 1 2 1.0
//! QFLOW 1 2 1.0
//! PINJ 4 1.0 PSEUDO
//! VMAG 2 1.0
//! ```

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::netmodel::Network;

#[derive(Debug, Error, PartialEq)]
pub enum SetError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown bus {bus}")]
    UnknownBus { line: usize, bus: usize },
    #[error("line {line}: no in-service branch between buses {from} and {to}")]
    NoBranch { line: usize, from: usize, to: usize },
    #[error("line {line}: sigma must be positive")]
    NonPositiveSigma { line: usize },
    #[error("measurement set has no active-power rows")]
    EmptyActiveSet,
    #[error("branch between buses {0} and {1} has non-inductive series impedance; lossless susceptance undefined")]
    NonInductiveBranch(usize, usize),
    #[error("measurement {0} has no value; simulate or load values first")]
    MissingValue(usize),
}

/// State of the network: phase angles (reference fixed at zero) and voltage
/// magnitudes, both full-length over the buses.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub theta: Vec<f64>,
    pub v: Vec<f64>,
    reference: usize,
}

impl StateVector {
    /// Builds a state; the reference angle must already be zero.
    pub fn new(theta: Vec<f64>, v: Vec<f64>, reference: usize) -> Self {
        assert_eq!(theta.len(), v.len());
        assert!(
            theta[reference] == 0.0,
            "reference angle must be zero, got {}",
            theta[reference]
        );
        StateVector { theta, v, reference }
    }

    /// All magnitudes 1 pu, all angles zero.
    pub fn flat(n_buses: usize, reference: usize) -> Self {
        StateVector { theta: vec![0.0; n_buses], v: vec![1.0; n_buses], reference }
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn n_buses(&self) -> usize {
        self.v.len()
    }

    /// Solver dimension `2N - 1`.
    pub fn dim(&self) -> usize {
        2 * self.v.len() - 1
    }

    /// Packs into solver ordering: angles of non-reference buses in bus
    /// order, then all magnitudes.
    pub fn pack(&self) -> DVector<f64> {
        let n = self.v.len();
        let mut x = DVector::zeros(self.dim());
        let mut c = 0;
        for i in 0..n {
            if i != self.reference {
                x[c] = self.theta[i];
                c += 1;
            }
        }
        for i in 0..n {
            x[c + i] = self.v[i];
        }
        x
    }

    /// Inverse of [`pack`](Self::pack).
    pub fn unpack(x: &DVector<f64>, n_buses: usize, reference: usize) -> Self {
        let mut theta = vec![0.0; n_buses];
        let mut c = 0;
        for (i, t) in theta.iter_mut().enumerate() {
            if i != reference {
                *t = x[c];
                c += 1;
            }
        }
        let v = (0..n_buses).map(|i| x[c + i]).collect();
        StateVector { theta, v, reference }
    }
}

/// What a measurement meters. Bus references are network indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MeasurementKind {
    /// Active power flow metered at `from`, towards `to`.
    ActiveFlow { from: usize, to: usize },
    /// Reactive power flow metered at `from`, towards `to`.
    ReactiveFlow { from: usize, to: usize },
    /// Net active power injection at a bus.
    ActiveInjection { bus: usize },
    /// Net reactive power injection at a bus.
    ReactiveInjection { bus: usize },
    /// Voltage magnitude at a bus.
    VoltageMagnitude { bus: usize },
}

impl MeasurementKind {
    /// Active-power rows form the DC-model scope.
    pub fn is_active(&self) -> bool {
        matches!(
            self,
            MeasurementKind::ActiveFlow { .. } | MeasurementKind::ActiveInjection { .. }
        )
    }

    /// Short human label with external bus ids.
    pub fn label(&self, network: &Network) -> String {
        let id = |i: usize| network.buses()[i].id;
        match *self {
            MeasurementKind::ActiveFlow { from, to } => format!("P{}-{}", id(from), id(to)),
            MeasurementKind::ReactiveFlow { from, to } => format!("Q{}-{}", id(from), id(to)),
            MeasurementKind::ActiveInjection { bus } => format!("P{}", id(bus)),
            MeasurementKind::ReactiveInjection { bus } => format!("Q{}", id(bus)),
            MeasurementKind::VoltageMagnitude { bus } => format!("V{}", id(bus)),
        }
    }
}

/// One telemetered or pseudo measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub kind: MeasurementKind,
    /// Standard deviation assumed by the estimator, per-unit.
    pub sigma: f64,
    /// Pseudo measurements are operator-trusted equality constraints: exact
    /// values, high estimation weight, never attackable, never alarmed.
    pub is_pseudo: bool,
    /// Telemetered value, per-unit. `None` until simulated or loaded.
    pub value: Option<f64>,
}

/// Ordered measurement list; the index in the list is the measurement index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeasurementSet {
    items: Vec<Measurement>,
}

impl MeasurementSet {
    pub fn new(items: Vec<Measurement>) -> Self {
        MeasurementSet { items }
    }

    /// Parses the line-oriented definition format. Every line must hold a
    /// measurement (`KIND i [j] sigma [PSEUDO]`) so that the 1-based line
    /// number equals the measurement index. Bus numbers are external ids,
    /// resolved against `network`.
    pub fn parse(text: &str, network: &Network) -> Result<Self, SetError> {
        let mut items = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let mut tokens = raw.split_whitespace();
            let kind_tok = tokens.next().ok_or(SetError::Syntax {
                line,
                msg: "empty line (comments are not allowed; the line number is the index)".into(),
            })?;
            let mut next_num = |what: &str| -> Result<f64, SetError> {
                let tok = tokens.next().ok_or(SetError::Syntax {
                    line,
                    msg: format!("missing {what}"),
                })?;
                tok.parse().map_err(|_| SetError::Syntax {
                    line,
                    msg: format!("expected {what}, found '{tok}'"),
                })
            };
            let resolve = |id: f64| -> Result<usize, SetError> {
                network
                    .bus_index(id as usize)
                    .map_err(|_| SetError::UnknownBus { line, bus: id as usize })
            };
            let (kind, sigma) = match kind_tok {
                "PFLOW" | "QFLOW" => {
                    let fi = next_num("from bus")?;
                    let ti = next_num("to bus")?;
                    let sigma = next_num("sigma")?;
                    let from = resolve(fi)?;
                    let to = resolve(ti)?;
                    if network.branch_between(from, to).is_none() {
                        return Err(SetError::NoBranch {
                            line,
                            from: fi as usize,
                            to: ti as usize,
                        });
                    }
                    let kind = if kind_tok == "PFLOW" {
                        MeasurementKind::ActiveFlow { from, to }
                    } else {
                        MeasurementKind::ReactiveFlow { from, to }
                    };
                    (kind, sigma)
                }
                "PINJ" | "QINJ" | "VMAG" => {
                    let bi = next_num("bus")?;
                    let sigma = next_num("sigma")?;
                    let bus = resolve(bi)?;
                    let kind = match kind_tok {
                        "PINJ" => MeasurementKind::ActiveInjection { bus },
                        "QINJ" => MeasurementKind::ReactiveInjection { bus },
                        _ => MeasurementKind::VoltageMagnitude { bus },
                    };
                    (kind, sigma)
                }
                other => {
                    return Err(SetError::Syntax {
                        line,
                        msg: format!("unknown measurement kind '{other}'"),
                    })
                }
            };
            let is_pseudo = match tokens.next() {
                None => false,
                Some("PSEUDO") => true,
                Some(other) => {
                    return Err(SetError::Syntax {
                        line,
                        msg: format!("unexpected trailing token '{other}'"),
                    })
                }
            };
            if sigma <= 0.0 {
                return Err(SetError::NonPositiveSigma { line });
            }
            items.push(Measurement { kind, sigma, is_pseudo, value: None });
        }
        Ok(MeasurementSet { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Measurement] {
        &self.items
    }

    pub fn items_mut(&mut self) -> &mut [Measurement] {
        &mut self.items
    }

    /// Indices of active-power rows, in set order.
    pub fn active_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.items[k].kind.is_active()).collect()
    }

    /// Indices of pseudo rows.
    pub fn pseudo_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.items[k].is_pseudo).collect()
    }

    /// Telemetered values as a vector; requires every row to hold a value.
    pub fn values(&self) -> Result<DVector<f64>, SetError> {
        let mut z = DVector::zeros(self.len());
        for (k, m) in self.items.iter().enumerate() {
            z[k] = m.value.ok_or(SetError::MissingValue(k))?;
        }
        Ok(z)
    }

    /// Estimation weights `1/sigma^2`, with pseudo rows multiplied by
    /// `pseudo_weight`.
    pub fn weights(&self, pseudo_weight: f64) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.items.iter().map(|m| {
                let w = 1.0 / (m.sigma * m.sigma);
                if m.is_pseudo {
                    w * pseudo_weight
                } else {
                    w
                }
            }),
        )
    }

    /// Evaluates the measurement function `h(x)` row by row.
    pub fn eval_h(&self, network: &Network, x: &StateVector) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.items.iter().map(|m| eval_one(network, x, m.kind)),
        )
    }

    /// Analytic Jacobian `dh/dx` at `x`, columns ordered as
    /// `[theta (non-reference buses), V (all buses)]`.
    pub fn jacobian(&self, network: &Network, x: &StateVector) -> JacobianBlocks {
        let n_buses = network.n_buses();
        let reference = network.reference();
        let col_theta = theta_columns(n_buses, reference);
        let n_theta = n_buses - 1;
        let mut h = DMatrix::zeros(self.len(), 2 * n_buses - 1);
        for (row, m) in self.items.iter().enumerate() {
            fill_jacobian_row(network, x, m.kind, &col_theta, n_theta, &mut h, row);
        }
        JacobianBlocks {
            h,
            active_rows: self.active_rows(),
            reactive_rows: (0..self.len())
                .filter(|&k| !self.items[k].kind.is_active())
                .collect(),
            n_theta,
        }
    }

    /// Flat-start lossless DC Jacobian over the active-power rows.
    pub fn dc_model(&self, network: &Network) -> Result<DcModel, SetError> {
        let rows = self.active_rows();
        if rows.is_empty() {
            return Err(SetError::EmptyActiveSet);
        }
        let kinds: Vec<MeasurementKind> = rows.iter().map(|&k| self.items[k].kind).collect();
        DcModel::assemble(network, rows, kinds, self.len())
    }

    /// Simulates telemetry: `value_k = h_k(x_true) + e_k` with `e_k` drawn
    /// from a zero-mean Gaussian of standard deviation
    /// `noise_scale * sigma_k`. Pseudo rows get the exact value.
    pub fn simulate(
        &self,
        network: &Network,
        x_true: &StateVector,
        noise_seed: u64,
        noise_scale: f64,
    ) -> MeasurementSet {
        let h = self.eval_h(network, x_true);
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut items = self.items.clone();
        for (k, m) in items.iter_mut().enumerate() {
            if m.is_pseudo {
                m.value = Some(h[k]);
            } else {
                let e: f64 = StandardNormal.sample(&mut rng);
                m.value = Some(h[k] + noise_scale * m.sigma * e);
            }
        }
        MeasurementSet { items }
    }
}

/// Jacobian with the active/reactive × angle/magnitude partition.
#[derive(Debug, Clone)]
pub struct JacobianBlocks {
    h: DMatrix<f64>,
    active_rows: Vec<usize>,
    reactive_rows: Vec<usize>,
    n_theta: usize,
}

impl JacobianBlocks {
    /// Full `m x n` Jacobian in measurement order.
    pub fn full(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    pub fn active_rows(&self) -> &[usize] {
        &self.active_rows
    }

    pub fn reactive_rows(&self) -> &[usize] {
        &self.reactive_rows
    }

    fn block(&self, rows: &[usize], col0: usize, ncols: usize) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(rows.len(), ncols);
        for (r, &row) in rows.iter().enumerate() {
            for c in 0..ncols {
                b[(r, c)] = self.h[(row, col0 + c)];
            }
        }
        b
    }

    pub fn h_p_theta(&self) -> DMatrix<f64> {
        self.block(&self.active_rows, 0, self.n_theta)
    }

    pub fn h_pv(&self) -> DMatrix<f64> {
        let nv = self.h.ncols() - self.n_theta;
        self.block(&self.active_rows, self.n_theta, nv)
    }

    pub fn h_q_theta(&self) -> DMatrix<f64> {
        self.block(&self.reactive_rows, 0, self.n_theta)
    }

    pub fn h_qv(&self) -> DMatrix<f64> {
        let nv = self.h.ncols() - self.n_theta;
        self.block(&self.reactive_rows, self.n_theta, nv)
    }
}

/// Row recipe of a DC model, kept so perturbed models can be reassembled.
#[derive(Debug, Clone)]
enum DcRecipe {
    Flow { from: usize, to: usize, branch: usize },
    Injection { bus: usize, incident: Vec<(usize, usize)> }, // (neighbor, branch)
}

/// Flat-start active-power Jacobian with resistances and shunts dropped:
/// the linear model `a = H_dc c` behind attack synthesis and security
/// metrics. Columns are angles of non-reference buses in bus order.
#[derive(Debug, Clone)]
pub struct DcModel {
    h: DMatrix<f64>,
    rows: Vec<usize>,
    kinds: Vec<MeasurementKind>,
    recipes: Vec<DcRecipe>,
    susceptances: Vec<f64>,
    col_of_bus: Vec<Option<usize>>,
    n_buses: usize,
    label_space: usize,
}

impl DcModel {
    fn assemble(
        network: &Network,
        rows: Vec<usize>,
        kinds: Vec<MeasurementKind>,
        label_space: usize,
    ) -> Result<Self, SetError> {
        let mut susceptances = vec![0.0; network.branches().len()];
        for (b, branch) in network.branches().iter().enumerate() {
            if branch.in_service {
                susceptances[b] = branch.susceptance_lossless().ok_or(
                    SetError::NonInductiveBranch(branch.from_bus, branch.to_bus),
                )?;
            }
        }
        let branch_index = |i: usize, j: usize| -> usize {
            network
                .branches()
                .iter()
                .position(|br| {
                    br.in_service && {
                        let fi = network.bus_index(br.from_bus).unwrap();
                        let ti = network.bus_index(br.to_bus).unwrap();
                        (fi == i && ti == j) || (fi == j && ti == i)
                    }
                })
                .expect("validated measurement references an in-service branch")
        };
        let mut recipes = Vec::with_capacity(kinds.len());
        for kind in &kinds {
            match *kind {
                MeasurementKind::ActiveFlow { from, to } => {
                    recipes.push(DcRecipe::Flow { from, to, branch: branch_index(from, to) });
                }
                MeasurementKind::ActiveInjection { bus } => {
                    let incident = network
                        .neighbors(bus)
                        .iter()
                        .map(|&j| (j, branch_index(bus, j)))
                        .collect();
                    recipes.push(DcRecipe::Injection { bus, incident });
                }
                _ => unreachable!("DC rows are active-power kinds"),
            }
        }
        let n_buses = network.n_buses();
        let reference = network.reference();
        let col_of_bus = theta_columns(n_buses, reference);
        let mut model = DcModel {
            h: DMatrix::zeros(rows.len(), n_buses - 1),
            rows,
            kinds,
            recipes,
            susceptances,
            col_of_bus,
            n_buses,
            label_space,
        };
        model.refill();
        Ok(model)
    }

    /// DC model of the full measurement universe for a network: both
    /// flow directions on every in-service branch, then an injection at
    /// every bus. Row labels are ordinals in that enumeration.
    pub fn all_possible(network: &Network) -> Result<Self, SetError> {
        let mut kinds = Vec::new();
        for branch in network.branches().iter().filter(|b| b.in_service) {
            let fi = network.bus_index(branch.from_bus).unwrap();
            let ti = network.bus_index(branch.to_bus).unwrap();
            kinds.push(MeasurementKind::ActiveFlow { from: fi, to: ti });
            kinds.push(MeasurementKind::ActiveFlow { from: ti, to: fi });
        }
        for bus in 0..network.n_buses() {
            kinds.push(MeasurementKind::ActiveInjection { bus });
        }
        let rows = (0..kinds.len()).collect();
        let label_space = kinds.len();
        DcModel::assemble(network, rows, kinds, label_space)
    }

    fn refill(&mut self) {
        self.h.fill(0.0);
        for (r, recipe) in self.recipes.iter().enumerate() {
            match recipe {
                DcRecipe::Flow { from, to, branch } => {
                    let b = self.susceptances[*branch];
                    if let Some(c) = self.col_of_bus[*from] {
                        self.h[(r, c)] = -b;
                    }
                    if let Some(c) = self.col_of_bus[*to] {
                        self.h[(r, c)] = b;
                    }
                }
                DcRecipe::Injection { bus, incident } => {
                    for &(j, branch) in incident {
                        let b = self.susceptances[branch];
                        if let Some(c) = self.col_of_bus[*bus] {
                            self.h[(r, c)] += -b;
                        }
                        if let Some(c) = self.col_of_bus[j] {
                            self.h[(r, c)] = b;
                        }
                    }
                }
            }
        }
    }

    /// A copy with one branch's lossless susceptance scaled by `factor`.
    /// Flow rows on that branch scale by `factor` and incident injection
    /// rows shift accordingly, mirroring a line-parameter change.
    pub fn with_scaled_branch(&self, branch: usize, factor: f64) -> Self {
        let mut out = self.clone();
        out.susceptances[branch] *= factor;
        out.refill();
        out
    }

    /// Matrix `H_dc`, one row per active measurement, one column per
    /// non-reference bus angle.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// External row labels: for set-derived models, the measurement index
    /// of each DC row.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn kinds(&self) -> &[MeasurementKind] {
        &self.kinds
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.h.ncols()
    }

    pub fn n_buses(&self) -> usize {
        self.n_buses
    }

    /// Size of the external label space (the measurement-set length for
    /// set-derived models, the row count for the full universe).
    pub fn label_space(&self) -> usize {
        self.label_space
    }

    /// DC row holding a given external row label.
    pub fn row_of(&self, label: usize) -> Option<usize> {
        self.rows.iter().position(|&r| r == label)
    }

    /// DC row measuring `kind`, if present.
    pub fn row_of_kind(&self, kind: MeasurementKind) -> Option<usize> {
        self.kinds.iter().position(|&k| k == kind)
    }

    /// Branches of the flow rows that `with_scaled_branch` would touch,
    /// i.e. the branch index of every flow row.
    pub fn flow_branches(&self) -> Vec<Option<usize>> {
        self.recipes
            .iter()
            .map(|r| match r {
                DcRecipe::Flow { branch, .. } => Some(*branch),
                DcRecipe::Injection { .. } => None,
            })
            .collect()
    }
}

fn theta_columns(n_buses: usize, reference: usize) -> Vec<Option<usize>> {
    let mut cols = vec![None; n_buses];
    let mut c = 0;
    for (i, slot) in cols.iter_mut().enumerate() {
        if i != reference {
            *slot = Some(c);
            c += 1;
        }
    }
    cols
}

fn eval_one(network: &Network, x: &StateVector, kind: MeasurementKind) -> f64 {
    let y = network.admittance();
    match kind {
        MeasurementKind::VoltageMagnitude { bus } => x.v[bus],
        MeasurementKind::ActiveInjection { bus } => {
            let i = bus;
            let mut p = x.v[i] * x.v[i] * y[(i, i)].re;
            for &j in network.neighbors(i) {
                let tij = x.theta[i] - x.theta[j];
                p += x.v[i] * x.v[j] * (y[(i, j)].re * tij.cos() + y[(i, j)].im * tij.sin());
            }
            p
        }
        MeasurementKind::ReactiveInjection { bus } => {
            let i = bus;
            let mut q = -x.v[i] * x.v[i] * y[(i, i)].im;
            for &j in network.neighbors(i) {
                let tij = x.theta[i] - x.theta[j];
                q += x.v[i] * x.v[j] * (y[(i, j)].re * tij.sin() - y[(i, j)].im * tij.cos());
            }
            q
        }
        MeasurementKind::ActiveFlow { from, to } => {
            let branch = network
                .branch_between(from, to)
                .expect("validated measurement references an in-service branch");
            let (g, b) = (branch.series_g, branch.series_b);
            let bus = &network.buses()[from];
            let tij = x.theta[from] - x.theta[to];
            x.v[from] * x.v[from] * (bus.shunt_g + g)
                - x.v[from] * x.v[to] * (g * tij.cos() + b * tij.sin())
        }
        MeasurementKind::ReactiveFlow { from, to } => {
            let branch = network
                .branch_between(from, to)
                .expect("validated measurement references an in-service branch");
            let (g, b) = (branch.series_g, branch.series_b);
            let bus = &network.buses()[from];
            let tij = x.theta[from] - x.theta[to];
            -x.v[from] * x.v[from] * (bus.shunt_b + b)
                - x.v[from] * x.v[to] * (g * tij.sin() - b * tij.cos())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn fill_jacobian_row(
    network: &Network,
    x: &StateVector,
    kind: MeasurementKind,
    col_theta: &[Option<usize>],
    n_theta: usize,
    h: &mut DMatrix<f64>,
    row: usize,
) {
    let y = network.admittance();
    let vcol = |i: usize| n_theta + i;
    let set_theta = |h: &mut DMatrix<f64>, i: usize, val: f64| {
        if let Some(c) = col_theta[i] {
            h[(row, c)] += val;
        }
    };
    match kind {
        MeasurementKind::VoltageMagnitude { bus } => {
            h[(row, vcol(bus))] = 1.0;
        }
        MeasurementKind::ActiveInjection { bus } => {
            let i = bus;
            let mut dp_dti = 0.0;
            let mut dp_dvi = 2.0 * x.v[i] * y[(i, i)].re;
            for &j in network.neighbors(i) {
                let (gij, bij) = (y[(i, j)].re, y[(i, j)].im);
                let tij = x.theta[i] - x.theta[j];
                let (s, c) = tij.sin_cos();
                dp_dti += x.v[i] * x.v[j] * (-gij * s + bij * c);
                dp_dvi += x.v[j] * (gij * c + bij * s);
                set_theta(h, j, x.v[i] * x.v[j] * (gij * s - bij * c));
                h[(row, vcol(j))] = x.v[i] * (gij * c + bij * s);
            }
            set_theta(h, i, dp_dti);
            h[(row, vcol(i))] = dp_dvi;
        }
        MeasurementKind::ReactiveInjection { bus } => {
            let i = bus;
            let mut dq_dti = 0.0;
            let mut dq_dvi = -2.0 * x.v[i] * y[(i, i)].im;
            for &j in network.neighbors(i) {
                let (gij, bij) = (y[(i, j)].re, y[(i, j)].im);
                let tij = x.theta[i] - x.theta[j];
                let (s, c) = tij.sin_cos();
                dq_dti += x.v[i] * x.v[j] * (gij * c + bij * s);
                dq_dvi += x.v[j] * (gij * s - bij * c);
                set_theta(h, j, -x.v[i] * x.v[j] * (gij * c + bij * s));
                h[(row, vcol(j))] = x.v[i] * (gij * s - bij * c);
            }
            set_theta(h, i, dq_dti);
            h[(row, vcol(i))] = dq_dvi;
        }
        MeasurementKind::ActiveFlow { from, to } => {
            let branch = network.branch_between(from, to).unwrap();
            let (g, b) = (branch.series_g, branch.series_b);
            let gs = network.buses()[from].shunt_g;
            let tij = x.theta[from] - x.theta[to];
            let (s, c) = tij.sin_cos();
            let dtheta = x.v[from] * x.v[to] * (g * s - b * c);
            set_theta(h, from, dtheta);
            set_theta(h, to, -dtheta);
            h[(row, vcol(from))] = 2.0 * x.v[from] * (gs + g) - x.v[to] * (g * c + b * s);
            h[(row, vcol(to))] = -x.v[from] * (g * c + b * s);
        }
        MeasurementKind::ReactiveFlow { from, to } => {
            let branch = network.branch_between(from, to).unwrap();
            let (g, b) = (branch.series_g, branch.series_b);
            let bs = network.buses()[from].shunt_b;
            let tij = x.theta[from] - x.theta[to];
            let (s, c) = tij.sin_cos();
            let dtheta = -x.v[from] * x.v[to] * (g * c + b * s);
            set_theta(h, from, dtheta);
            set_theta(h, to, -dtheta);
            h[(row, vcol(from))] = -2.0 * x.v[from] * (bs + b) - x.v[to] * (g * s - b * c);
            h[(row, vcol(to))] = -x.v[from] * (g * s - b * c);
        }
    }
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;
    use crate::netmodel::{Branch, Bus, Network};

    pub fn bus(id: usize, is_reference: bool) -> Bus {
        Bus { id, shunt_g: 0.0, shunt_b: 0.0, is_reference }
    }

    pub fn branch(from: usize, to: usize, g: f64, b: f64) -> Branch {
        Branch { from_bus: from, to_bus: to, series_g: g, series_b: b, in_service: true }
    }

    /// Two buses joined by a single lossless branch with b = -10.
    pub fn two_bus_net() -> Network {
        Network::from_parts(
            vec![bus(1, true), bus(2, false)],
            vec![branch(1, 2, 0.0, -10.0)],
        )
        .unwrap()
    }

    /// Three-bus ring, mildly lossy.
    pub fn ring3_net() -> Network {
        Network::from_parts(
            vec![bus(1, true), bus(2, false), bus(3, false)],
            vec![
                branch(1, 2, 0.5, -8.0),
                branch(2, 3, 0.4, -5.0),
                branch(1, 3, 0.2, -4.0),
            ],
        )
        .unwrap()
    }

    /// Lossless three-bus ring.
    pub fn ring3_lossless() -> Network {
        Network::from_parts(
            vec![bus(1, true), bus(2, false), bus(3, false)],
            vec![
                branch(1, 2, 0.0, -8.0),
                branch(2, 3, 0.0, -5.0),
                branch(1, 3, 0.0, -4.0),
            ],
        )
        .unwrap()
    }

    pub fn m(kind: MeasurementKind, sigma: f64) -> Measurement {
        Measurement { kind, sigma, is_pseudo: false, value: None }
    }

    /// Flows on every branch (from->to), P/Q injections and a voltage
    /// magnitude at every bus.
    pub fn full_set(network: &Network, sigma: f64) -> MeasurementSet {
        let mut items = Vec::new();
        for branch in network.branches().iter().filter(|b| b.in_service) {
            let from = network.bus_index(branch.from_bus).unwrap();
            let to = network.bus_index(branch.to_bus).unwrap();
            items.push(m(MeasurementKind::ActiveFlow { from, to }, sigma));
            items.push(m(MeasurementKind::ReactiveFlow { from, to }, sigma));
        }
        for bus in 0..network.n_buses() {
            items.push(m(MeasurementKind::ActiveInjection { bus }, sigma));
            items.push(m(MeasurementKind::ReactiveInjection { bus }, sigma));
        }
        for bus in 0..network.n_buses() {
            items.push(m(MeasurementKind::VoltageMagnitude { bus }, sigma));
        }
        MeasurementSet::new(items)
    }

    /// Central-difference Jacobian of `eval_h`, the independent oracle for
    /// the analytic one.
    pub fn fd_jacobian(
        network: &Network,
        set: &MeasurementSet,
        x: &StateVector,
        step: f64,
    ) -> DMatrix<f64> {
        let n = x.dim();
        let mut j = DMatrix::zeros(set.len(), n);
        let base = x.pack();
        for c in 0..n {
            let mut xp = base.clone();
            let mut xm = base.clone();
            xp[c] += step;
            xm[c] -= step;
            let hp = set.eval_h(network, &StateVector::unpack(&xp, x.n_buses(), x.reference()));
            let hm = set.eval_h(network, &StateVector::unpack(&xm, x.n_buses(), x.reference()));
            for r in 0..set.len() {
                j[(r, c)] = (hp[r] - hm[r]) / (2.0 * step);
            }
        }
        j
    }
}
