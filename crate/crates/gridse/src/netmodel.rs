//! Grid case files and the in-memory network model.
//!
//! A [`Case`] is parsed from MATPOWER-style text: an `mpc.baseMVA` scalar,
//! an `mpc.bus` table and an `mpc.branch` table (see [`parse_case`] for the
//! accepted grammar). Parsing validates the topology, folds line-charging
//! susceptance onto the end buses, converts everything to per-unit on the
//! case base, and assembles the nodal admittance matrix.
//!
//! [`Network`] is immutable after construction and safe to share across
//! threads; derived models (perturbed branches, removed branches) are built
//! as new values from [`Network::to_parts`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Complex, DMatrix};
use thiserror::Error;

use crate::measurement::StateVector;

/// Complex nodal admittance entry type.
pub type Cx = Complex<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("duplicate bus id {0}")]
    DuplicateBusId(usize),
    #[error("branch references bus {0} absent from the bus table")]
    UnknownBus(usize),
    #[error("branch connects bus {0} to itself")]
    SelfLoop(usize),
    #[error("no reference bus (exactly one bus must have type 3)")]
    NoReferenceBus,
    #[error("more than one reference bus")]
    MultipleReferenceBuses,
    #[error("parallel in-service branches between buses {0} and {1} are not supported")]
    ParallelBranch(usize, usize),
    #[error("network is not connected over in-service branches (bus {0} unreachable)")]
    Disconnected(usize),
    #[error("branch between buses {0} and {1} has zero series impedance")]
    ZeroImpedance(usize, usize),
    #[error("line {0}: transformer tap ratios and phase shifters are not supported")]
    UnsupportedTransformer(usize),
    #[error("line {0}: unsupported bus type {1} (expected 1, 2 or 3)")]
    UnsupportedBusType(usize, usize),
}

/// A network bus with its (folded) shunt admittance.
///
/// `shunt_b` accumulates both the case-file bus shunt and half of the
/// charging susceptance of every in-service branch incident to the bus.
#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    /// External bus id (≥ 1, unique within a network).
    pub id: usize,
    /// Shunt conductance, per-unit.
    pub shunt_g: f64,
    /// Shunt susceptance, per-unit.
    pub shunt_b: f64,
    /// Whether this bus fixes the angle reference.
    pub is_reference: bool,
}

/// A series branch between two buses.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    /// External id of the from bus.
    pub from_bus: usize,
    /// External id of the to bus.
    pub to_bus: usize,
    /// Series conductance, per-unit.
    pub series_g: f64,
    /// Series susceptance, per-unit (negative for inductive branches).
    pub series_b: f64,
    /// Out-of-service branches are kept but excluded from the model.
    pub in_service: bool,
}

impl Branch {
    /// Series susceptance with the resistance dropped from the impedance,
    /// i.e. `-1/x`. This is the branch stiffness seen by flat-start
    /// decoupled models; it is independent of the series resistance.
    pub fn susceptance_lossless(&self) -> Option<f64> {
        if self.series_b >= 0.0 {
            return None; // non-inductive series branch, no meaningful -1/x
        }
        let y2 = self.series_g * self.series_g + self.series_b * self.series_b;
        Some(y2 / self.series_b)
    }
}

/// Validated, immutable network model.
#[derive(Debug, Clone)]
pub struct Network {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    admittance: DMatrix<Cx>,
    neighbors: Vec<Vec<usize>>,
    reference: usize,
    index_of: BTreeMap<usize, usize>,
    branch_between: BTreeMap<(usize, usize), usize>,
}

impl Network {
    /// Validates bus/branch tables and assembles the admittance matrix.
    pub fn from_parts(buses: Vec<Bus>, branches: Vec<Branch>) -> Result<Self, ModelError> {
        let mut index_of = BTreeMap::new();
        let mut reference = None;
        for (i, bus) in buses.iter().enumerate() {
            if index_of.insert(bus.id, i).is_some() {
                return Err(ModelError::DuplicateBusId(bus.id));
            }
            if bus.is_reference {
                if reference.is_some() {
                    return Err(ModelError::MultipleReferenceBuses);
                }
                reference = Some(i);
            }
        }
        let reference = reference.ok_or(ModelError::NoReferenceBus)?;

        let mut branch_between = BTreeMap::new();
        for (b, branch) in branches.iter().enumerate() {
            let fi = *index_of
                .get(&branch.from_bus)
                .ok_or(ModelError::UnknownBus(branch.from_bus))?;
            let ti = *index_of
                .get(&branch.to_bus)
                .ok_or(ModelError::UnknownBus(branch.to_bus))?;
            if fi == ti {
                return Err(ModelError::SelfLoop(branch.from_bus));
            }
            if branch.series_g == 0.0 && branch.series_b == 0.0 {
                return Err(ModelError::ZeroImpedance(branch.from_bus, branch.to_bus));
            }
            if branch.in_service {
                let key = (fi.min(ti), fi.max(ti));
                if branch_between.insert(key, b).is_some() {
                    return Err(ModelError::ParallelBranch(branch.from_bus, branch.to_bus));
                }
            }
        }

        let mut net = Network {
            buses,
            branches,
            admittance: DMatrix::zeros(0, 0),
            neighbors: Vec::new(),
            reference,
            index_of,
            branch_between,
        };
        net.build_admittance();
        net.check_connected()?;
        Ok(net)
    }

    /// Rebuilds the nodal admittance matrix and adjacency from the branch
    /// list: `Y_ii = (g_si + j b_si) + Σ_neighbors (g_ij + j b_ij)` and
    /// `Y_ij = -(g_ij + j b_ij)` for connected pairs.
    fn build_admittance(&mut self) {
        let n = self.buses.len();
        let mut y = DMatrix::from_element(n, n, Cx::new(0.0, 0.0));
        let mut neighbors = vec![Vec::new(); n];
        for (i, bus) in self.buses.iter().enumerate() {
            y[(i, i)] = Cx::new(bus.shunt_g, bus.shunt_b);
        }
        for branch in self.branches.iter().filter(|b| b.in_service) {
            let i = self.index_of[&branch.from_bus];
            let j = self.index_of[&branch.to_bus];
            let ys = Cx::new(branch.series_g, branch.series_b);
            y[(i, i)] += ys;
            y[(j, j)] += ys;
            y[(i, j)] -= ys;
            y[(j, i)] -= ys;
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        self.admittance = y;
        self.neighbors = neighbors;
    }

    fn check_connected(&self) -> Result<(), ModelError> {
        let n = self.buses.len();
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(ModelError::Disconnected(self.buses[i].id)),
            None => Ok(()),
        }
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// State dimension `2N - 1` (angles at non-reference buses plus all magnitudes).
    pub fn n_states(&self) -> usize {
        2 * self.buses.len() - 1
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn admittance(&self) -> &DMatrix<Cx> {
        &self.admittance
    }

    /// Index of the reference bus.
    pub fn reference(&self) -> usize {
        self.reference
    }

    /// Resolves an external bus id to its index.
    pub fn bus_index(&self, id: usize) -> Result<usize, ModelError> {
        self.index_of.get(&id).copied().ok_or(ModelError::UnknownBus(id))
    }

    /// Buses sharing an in-service branch with bus `i` (by index, sorted).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Neighborhood of a bus given by external id, as external ids.
    pub fn neighborhood(&self, id: usize) -> Result<Vec<usize>, ModelError> {
        let i = self.bus_index(id)?;
        Ok(self.neighbors[i].iter().map(|&j| self.buses[j].id).collect())
    }

    /// In-service branch between two bus indices, if any.
    pub fn branch_between(&self, i: usize, j: usize) -> Option<&Branch> {
        let key = (i.min(j), i.max(j));
        self.branch_between.get(&key).map(|&b| &self.branches[b])
    }

    /// Clones out the bus/branch tables, e.g. to build a modified network.
    pub fn to_parts(&self) -> (Vec<Bus>, Vec<Branch>) {
        (self.buses.clone(), self.branches.clone())
    }
}

/// A parsed case: the network plus the MVA base and the solved operating
/// point recorded in the file's voltage columns.
#[derive(Debug, Clone)]
pub struct Case {
    pub network: Network,
    pub base_mva: f64,
    /// State from the case Vm/Va columns, angles re-referenced so the
    /// reference bus sits at zero.
    pub solution: StateVector,
}

impl Case {
    /// Serializes back to case text. Charging susceptance stays folded on
    /// the buses, so the emitted branch `b` column is zero.
    pub fn to_case_text(&self) -> String {
        let net = &self.network;
        let mut out = String::new();
        out.push_str("function mpc = gridse_case\n");
        out.push_str("mpc.version = '2';\n");
        let _ = writeln!(out, "mpc.baseMVA = {};", self.base_mva);
        out.push_str("mpc.bus = [\n");
        for (i, bus) in net.buses().iter().enumerate() {
            let bus_type = if bus.is_reference { 3 } else { 1 };
            let _ = writeln!(
                out,
                "\t{}\t{}\t0\t0\t{:.17e}\t{:.17e}\t1\t{:.17e}\t{:.17e}\t0\t1\t1.1\t0.9;",
                bus.id,
                bus_type,
                bus.shunt_g * self.base_mva,
                bus.shunt_b * self.base_mva,
                self.solution.v[i],
                self.solution.theta[i].to_degrees(),
            );
        }
        out.push_str("];\n");
        out.push_str("mpc.branch = [\n");
        for branch in net.branches() {
            let y2 = branch.series_g * branch.series_g + branch.series_b * branch.series_b;
            let r = branch.series_g / y2;
            let x = -branch.series_b / y2;
            let _ = writeln!(
                out,
                "\t{}\t{}\t{:.17e}\t{:.17e}\t0\t0\t0\t0\t0\t0\t{};",
                branch.from_bus,
                branch.to_bus,
                r,
                x,
                if branch.in_service { 1 } else { 0 },
            );
        }
        out.push_str("];\n");
        out
    }
}

/// Parses MATPOWER-style case text.
///
/// Accepted grammar (UTF-8, `%` starts a comment):
///
/// ```text
/// mpc.baseMVA = 100;
/// mpc.bus = [
///   bus_i  type  Pd  Qd  Gs  Bs  area  Vm  Va  baseKV  zone  Vmax  Vmin;
///   ...
/// ];
/// mpc.branch = [
///   fbus  tbus  r  x  b  rateA  rateB  rateC  ratio  angle  status  [angmin angmax];
///   ...
/// ];
/// ```
///
/// Bus type 3 marks the reference bus; `Gs`/`Bs` are MW/MVAr at 1 pu and the
/// branch charging `b` is split half onto each end bus. Tap ratios other
/// than 0/1 and nonzero phase shifts are rejected. Other `mpc.*` blocks
/// (generators, costs, ...) are skipped.
pub fn parse_case(text: &str) -> Result<Case, ModelError> {
    let raw = RawCase::parse(text)?;
    let base = raw.base_mva;

    let mut buses = Vec::with_capacity(raw.bus_rows.len());
    let mut vm = Vec::with_capacity(raw.bus_rows.len());
    let mut va = Vec::with_capacity(raw.bus_rows.len());
    for row in &raw.bus_rows {
        let get = |k: usize| row.num(k);
        let id = get(0)? as usize;
        let bus_type = get(1)? as usize;
        match bus_type {
            1 | 2 | 3 => {}
            other => return Err(ModelError::UnsupportedBusType(row.line, other)),
        }
        buses.push(Bus {
            id,
            shunt_g: get(4)? / base,
            shunt_b: get(5)? / base,
            is_reference: bus_type == 3,
        });
        vm.push(get(7)?);
        va.push(get(8)?.to_radians());
    }

    let mut branches = Vec::with_capacity(raw.branch_rows.len());
    let mut charge = vec![0.0f64; buses.len()];
    let id_to_pos: BTreeMap<usize, usize> =
        buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
    for row in &raw.branch_rows {
        let get = |k: usize| row.num(k);
        let from = get(0)? as usize;
        let to = get(1)? as usize;
        let r = get(2)?;
        let x = get(3)?;
        let b_charge = get(4)?;
        let ratio = get(8)?;
        let angle = get(9)?;
        let status = get(10)? != 0.0;
        if (ratio != 0.0 && ratio != 1.0) || angle != 0.0 {
            return Err(ModelError::UnsupportedTransformer(row.line));
        }
        if r == 0.0 && x == 0.0 {
            return Err(ModelError::ZeroImpedance(from, to));
        }
        let z2 = r * r + x * x;
        branches.push(Branch {
            from_bus: from,
            to_bus: to,
            series_g: r / z2,
            series_b: -x / z2,
            in_service: status,
        });
        if status {
            for id in [from, to] {
                let pos = *id_to_pos.get(&id).ok_or(ModelError::UnknownBus(id))?;
                charge[pos] += b_charge / 2.0;
            }
        }
    }
    for (bus, extra) in buses.iter_mut().zip(&charge) {
        bus.shunt_b += extra;
    }

    let network = Network::from_parts(buses, branches)?;
    let ref_va = va[network.reference()];
    let theta: Vec<f64> = va.iter().map(|a| a - ref_va).collect();
    let solution = StateVector::new(theta, vm, network.reference());
    Ok(Case { network, base_mva: base, solution })
}

struct RawRow {
    line: usize,
    cells: Vec<(usize, f64)>, // (column, value)
}

impl RawRow {
    fn num(&self, k: usize) -> Result<f64, ModelError> {
        self.cells.get(k).map(|&(_, v)| v).ok_or_else(|| ModelError::Syntax {
            line: self.line,
            col: self.cells.last().map(|&(c, _)| c).unwrap_or(1),
            msg: format!("expected at least {} columns, found {}", k + 1, self.cells.len()),
        })
    }
}

struct RawCase {
    base_mva: f64,
    bus_rows: Vec<RawRow>,
    branch_rows: Vec<RawRow>,
}

impl RawCase {
    fn parse(text: &str) -> Result<Self, ModelError> {
        enum Block {
            None,
            Bus,
            Branch,
            Skip,
        }
        let mut base_mva = None;
        let mut bus_rows = Vec::new();
        let mut branch_rows = Vec::new();
        let mut block = Block::None;

        for (lineno, raw_line) in text.lines().enumerate() {
            let line = lineno + 1;
            let content = match raw_line.find('%') {
                Some(p) => &raw_line[..p],
                None => raw_line,
            };
            let trimmed = content.trim();
            if trimmed.is_empty() {
                continue;
            }

            if matches!(block, Block::None) {
                if let Some(rest) = trimmed.strip_prefix("mpc.baseMVA") {
                    let rhs = rest.trim_start().strip_prefix('=').ok_or(ModelError::Syntax {
                        line,
                        col: 1,
                        msg: "expected '=' after mpc.baseMVA".into(),
                    })?;
                    let rhs = rhs.trim().trim_end_matches(';').trim();
                    let v: f64 = rhs.parse().map_err(|_| ModelError::Syntax {
                        line,
                        col: content.find(rhs).map(|p| p + 1).unwrap_or(1),
                        msg: format!("expected number, found '{rhs}'"),
                    })?;
                    base_mva = Some(v);
                    continue;
                }
                if let Some(rest) = trimmed.strip_prefix("mpc.") {
                    if let Some(eq) = rest.find('=') {
                        let name = rest[..eq].trim();
                        let rhs = rest[eq + 1..].trim();
                        if rhs.starts_with('[') {
                            let target = match name {
                                "bus" => Block::Bus,
                                "branch" => Block::Branch,
                                _ => Block::Skip,
                            };
                            // Single-line `mpc.x = [ ... ];` blocks are not
                            // produced by exporters; treat as open block only.
                            if rhs.trim_end().ends_with("];") {
                                continue;
                            }
                            block = target;
                            continue;
                        }
                        // scalar or string assignment (version etc.) — ignore
                        continue;
                    }
                }
                if trimmed.starts_with("function") {
                    continue;
                }
                return Err(ModelError::Syntax {
                    line,
                    col: 1,
                    msg: format!("unexpected input '{trimmed}'"),
                });
            }

            // inside a matrix block
            if trimmed.starts_with("];") || trimmed == "]" {
                block = Block::None;
                continue;
            }
            if matches!(block, Block::Skip) {
                continue;
            }
            let row = parse_row(content, line)?;
            if row.cells.is_empty() {
                continue;
            }
            match block {
                Block::Bus => bus_rows.push(row),
                Block::Branch => branch_rows.push(row),
                _ => unreachable!(),
            }
        }

        Ok(RawCase {
            base_mva: base_mva.ok_or(ModelError::Syntax {
                line: text.lines().count().max(1),
                col: 1,
                msg: "missing mpc.baseMVA".into(),
            })?,
            bus_rows,
            branch_rows,
        })
    }
}

fn parse_row(content: &str, line: usize) -> Result<RawRow, ModelError> {
    let mut cells = Vec::new();
    for (start, token) in split_tokens(content) {
        let tok = token.trim_end_matches(';');
        if tok.is_empty() {
            continue;
        }
        let v: f64 = tok.parse().map_err(|_| ModelError::Syntax {
            line,
            col: start + 1,
            msg: format!("expected number, found '{tok}'"),
        })?;
        cells.push((start + 1, v));
    }
    Ok(RawRow { line, cells })
}

fn split_tokens(s: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in s.char_indices() {
        if ch.is_whitespace() || ch == ',' {
            if let Some(st) = start.take() {
                out.push((st, &s[st..i]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(st) = start {
        out.push((st, &s[st..]));
    }
    out
}
