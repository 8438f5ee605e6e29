//! Translation of (network model, measurement set) into the weighted
//! least-absolute-value MILP.
//!
//! Objective: sum of abs-residual variables `a` (pseudo-loads) and `b`
//! (metered flows), each weighted by 1/sigma (rows tagged Eq4/Eq5). Subject
//! to: topology-coupled per-phase flow balance with products y*load replaced
//! by auxiliary `z` under exact big-M envelopes (Eq12/Eq13), capacitor buses
//! using a conjunction variable w = y_section AND y_cap (Eq14); radiality
//! over every simple cycle of the source-merged section meta-graph (Eq15);
//! section-to-switch connectivity (Eq16 single-supply, Eq17 multi-supply);
//! ping implications (Eq18); switch-flow big-M gating (Eq19); the 5-sigma
//! budget on the sum of ping errors (Eq20).
//!
//! Reactive balance rows carry tag Eq13 at buses without capacitors and Eq14
//! at capacitor buses; active balance rows are tagged Eq12 at every
//! non-source bus. The alternative reading (reactive balance only at
//! capacitor buses) would leave plain buses unbalanced in Q and is not used.
//! Source buses carry no balance rows: the feeder head is the slack.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::measurement::MeasurementSet;
use crate::network::{CapId, LineId, LoadId, NetworkModel, Phase, SectionId};
use crate::powerflow::ScenarioTruth;

/// Variable identity: one kind per symbol family of the formulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarRef {
    /// Switch status (binary).
    Switch(LineId),
    /// Section energization status (binary).
    Section(SectionId),
    /// Capacitor phase status (binary).
    Cap(CapId, Phase),
    /// Active line flow, positive from -> to.
    FlowP(LineId, Phase),
    /// Reactive line flow.
    FlowQ(LineId, Phase),
    /// Active load demand.
    LoadP(LoadId),
    /// Reactive load demand.
    LoadQ(LoadId),
    /// Abs residual of the active pseudo-load measurement.
    AbsLoadP(LoadId),
    /// Abs residual of the reactive pseudo-load measurement.
    AbsLoadQ(LoadId),
    /// Abs residual of the active flow measurement.
    AbsFlowP(LineId, Phase),
    /// Abs residual of the reactive flow measurement.
    AbsFlowQ(LineId, Phase),
    /// Product aux z = y_section * LoadP.
    ZLoadP(LoadId),
    /// Product aux z = y_section * LoadQ.
    ZLoadQ(LoadId),
    /// Conjunction aux w = y_section AND y_cap.
    CapAnd(CapId, Phase),
}

impl VarRef {
    /// Two-character kind prefix used in MPS column names.
    pub fn kind_prefix(self) -> &'static str {
        match self {
            VarRef::Switch(_) => "dl",
            VarRef::Section(_) => "yl",
            VarRef::Cap(..) => "yc",
            VarRef::FlowP(..) => "fP",
            VarRef::FlowQ(..) => "fQ",
            VarRef::LoadP(_) => "lp",
            VarRef::LoadQ(_) => "lq",
            VarRef::AbsLoadP(_) => "ap",
            VarRef::AbsLoadQ(_) => "aq",
            VarRef::AbsFlowP(..) => "bp",
            VarRef::AbsFlowQ(..) => "bq",
            VarRef::ZLoadP(_) => "zp",
            VarRef::ZLoadQ(_) => "zq",
            VarRef::CapAnd(..) => "cw",
        }
    }

    /// Human-readable name resolved against the model.
    pub fn describe(self, model: &NetworkModel) -> String {
        match self {
            VarRef::Switch(l) => format!("delta[{}]", model.lines[l.index()].name),
            VarRef::Section(s) => format!("y[sec{}]", s.index()),
            VarRef::Cap(c, p) => format!("ycap[{}:{}]", model.caps[c.index()].name, p),
            VarRef::FlowP(l, p) => format!("P[{}:{}]", model.lines[l.index()].name, p),
            VarRef::FlowQ(l, p) => format!("Q[{}:{}]", model.lines[l.index()].name, p),
            VarRef::LoadP(l) => format!("p[{}]", model.loads[l.index()].name),
            VarRef::LoadQ(l) => format!("q[{}]", model.loads[l.index()].name),
            VarRef::AbsLoadP(l) => format!("a_p[{}]", model.loads[l.index()].name),
            VarRef::AbsLoadQ(l) => format!("a_q[{}]", model.loads[l.index()].name),
            VarRef::AbsFlowP(l, p) => format!("b_P[{}:{}]", model.lines[l.index()].name, p),
            VarRef::AbsFlowQ(l, p) => format!("b_Q[{}:{}]", model.lines[l.index()].name, p),
            VarRef::ZLoadP(l) => format!("z_p[{}]", model.loads[l.index()].name),
            VarRef::ZLoadQ(l) => format!("z_q[{}]", model.loads[l.index()].name),
            VarRef::CapAnd(c, p) => format!("w[{}:{}]", model.caps[c.index()].name, p),
        }
    }
}

/// Constraint family label; used in row names and residual summaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tag {
    Eq4,
    Eq5,
    Eq12,
    Eq13,
    Eq14,
    Eq15,
    Eq16,
    Eq17,
    Eq18,
    Eq19,
    Eq20,
    Bounds,
}

pub const ALL_TAGS: [Tag; 12] = [
    Tag::Eq4,
    Tag::Eq5,
    Tag::Eq12,
    Tag::Eq13,
    Tag::Eq14,
    Tag::Eq15,
    Tag::Eq16,
    Tag::Eq17,
    Tag::Eq18,
    Tag::Eq19,
    Tag::Eq20,
    Tag::Bounds,
];

impl Tag {
    /// Short row-name prefix (<= 3 chars) for MPS export.
    pub fn prefix(self) -> &'static str {
        match self {
            Tag::Eq4 => "E4",
            Tag::Eq5 => "E5",
            Tag::Eq12 => "E12",
            Tag::Eq13 => "E13",
            Tag::Eq14 => "E14",
            Tag::Eq15 => "E15",
            Tag::Eq16 => "E16",
            Tag::Eq17 => "E17",
            Tag::Eq18 => "E18",
            Tag::Eq19 => "E19",
            Tag::Eq20 => "E20",
            Tag::Bounds => "BND",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Le,
    Eq,
    Ge,
}

#[derive(Clone, Debug)]
pub struct LinearConstraint {
    /// (coefficient, column) pairs, canonical: unique columns, ascending.
    pub terms: Vec<(f64, u32)>,
    pub sense: Sense,
    pub rhs: f64,
    pub tag: Tag,
}

#[derive(Clone, Debug)]
pub struct Variable {
    pub var: VarRef,
    pub lower: f64,
    pub upper: f64,
    pub is_integer: bool,
}

/// Solver-agnostic MILP: variables with bounds/integrality, linear
/// constraints, linear minimization objective.
#[derive(Clone, Debug)]
pub struct MilpProblem {
    pub variables: Vec<Variable>,
    pub constraints: Vec<LinearConstraint>,
    /// (coefficient, column) pairs of the minimize objective.
    pub objective: Vec<(f64, u32)>,
    pub big_m: f64,
    pub model_hash: u64,
    pub measurement_hash: u64,
    columns: HashMap<VarRef, u32>,
}

impl MilpProblem {
    pub fn new(
        variables: Vec<Variable>,
        constraints: Vec<LinearConstraint>,
        objective: Vec<(f64, u32)>,
        big_m: f64,
        model_hash: u64,
        measurement_hash: u64,
    ) -> MilpProblem {
        let columns = variables
            .iter()
            .enumerate()
            .map(|(j, v)| (v.var, j as u32))
            .collect();
        MilpProblem {
            variables,
            constraints,
            objective,
            big_m,
            model_hash,
            measurement_hash,
            columns,
        }
    }

    pub fn column(&self, var: VarRef) -> Option<u32> {
        self.columns.get(&var).copied()
    }

    pub fn n_binaries(&self) -> usize {
        self.variables.iter().filter(|v| v.is_integer).count()
    }

    /// Evaluate the linear objective on a full assignment.
    pub fn objective_of(&self, assignment: &[f64]) -> Result<f64, BuildError> {
        if assignment.len() != self.variables.len() {
            return Err(BuildError::MissingValue(assignment.len()));
        }
        Ok(self
            .objective
            .iter()
            .map(|&(c, j)| c * assignment[j as usize])
            .sum())
    }

    /// Signed violation of one constraint (positive = violated by that much).
    pub fn row_violation(&self, row: &LinearConstraint, assignment: &[f64]) -> f64 {
        let lhs: f64 = row.terms.iter().map(|&(c, j)| c * assignment[j as usize]).sum();
        match row.sense {
            Sense::Le => lhs - row.rhs,
            Sense::Ge => row.rhs - lhs,
            Sense::Eq => (lhs - row.rhs).abs(),
        }
    }

    /// Check a full assignment against every row and every bound.
    pub fn check_assignment(&self, assignment: &[f64], tol: f64) -> Vec<Violation> {
        let mut out = Vec::new();
        for (i, row) in self.constraints.iter().enumerate() {
            let v = self.row_violation(row, assignment);
            if v > tol * (1.0 + row.rhs.abs()) {
                out.push(Violation {
                    row: Some(i),
                    tag: row.tag,
                    amount: v,
                });
            }
        }
        for (j, var) in self.variables.iter().enumerate() {
            let x = assignment[j];
            let v = (var.lower - x).max(x - var.upper);
            if v > tol * (1.0 + var.lower.abs().max(var.upper.abs())) {
                out.push(Violation {
                    row: None,
                    tag: Tag::Bounds,
                    amount: v,
                });
            }
        }
        out
    }

    /// Max |violation| per tag for a given assignment (diagnostics).
    pub fn residual_summary(&self, assignment: &[f64]) -> Vec<(Tag, f64)> {
        let mut per_tag: HashMap<Tag, f64> = HashMap::new();
        for row in &self.constraints {
            let v = self.row_violation(row, assignment).max(0.0);
            let e = per_tag.entry(row.tag).or_insert(0.0);
            if v > *e {
                *e = v;
            }
        }
        let mut out: Vec<(Tag, f64)> = per_tag.into_iter().collect();
        out.sort_by_key(|(t, _)| *t);
        out
    }
}

#[derive(Clone, Debug)]
pub struct Violation {
    /// Constraint index, or None for a variable bound.
    pub row: Option<usize>,
    pub tag: Tag,
    pub amount: f64,
}

#[derive(Clone, Debug)]
pub struct BuildConfig {
    /// None = derive 2 * (total forecast load + total capacitor kvar).
    pub big_m: Option<f64>,
    /// Load variables bounded to forecast +/- this many recorded sigmas.
    pub load_bound_sigmas: f64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            big_m: None,
            load_bound_sigmas: 10.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("measurement set is not observable: {0} violations")]
    NotObservable(usize),
    #[error("invalid build config: {0}")]
    BadConfig(String),
    #[error("assignment covers {0} variables, expected full coverage")]
    MissingValue(usize),
}

struct Builder {
    variables: Vec<Variable>,
    constraints: Vec<LinearConstraint>,
    objective: Vec<(f64, u32)>,
    columns: HashMap<VarRef, u32>,
}

impl Builder {
    fn var(&mut self, var: VarRef, lower: f64, upper: f64, is_integer: bool) -> u32 {
        debug_assert!(!self.columns.contains_key(&var));
        let j = self.variables.len() as u32;
        self.variables.push(Variable {
            var,
            lower,
            upper,
            is_integer,
        });
        self.columns.insert(var, j);
        j
    }

    fn col(&self, var: VarRef) -> u32 {
        self.columns[&var]
    }

    fn row(&mut self, tag: Tag, terms: Vec<(f64, u32)>, sense: Sense, rhs: f64) {
        // canonicalize: merge duplicate columns, sort ascending
        let mut merged: HashMap<u32, f64> = HashMap::new();
        for (c, j) in terms {
            *merged.entry(j).or_insert(0.0) += c;
        }
        let mut terms: Vec<(f64, u32)> = merged.into_iter().map(|(j, c)| (c, j)).collect();
        terms.retain(|(c, _)| *c != 0.0);
        terms.sort_by_key(|&(_, j)| j);
        self.constraints.push(LinearConstraint {
            terms,
            sense,
            rhs,
            tag,
        });
    }
}

/// Build the MILP for one (model, measurements) pair. Refuses to build if
/// the placement is not topologically observable.
pub fn build_problem(
    model: &NetworkModel,
    meas: &MeasurementSet,
    config: &BuildConfig,
) -> Result<MilpProblem, BuildError> {
    let violations = crate::measurement::check_observability(model, &meas.placement);
    if !violations.is_empty() {
        return Err(BuildError::NotObservable(violations.len()));
    }
    if config.load_bound_sigmas <= 0.0 {
        return Err(BuildError::BadConfig("load_bound_sigmas must be > 0".into()));
    }
    if let Some(m) = config.big_m {
        if !(m.is_finite() && m > 0.0) {
            return Err(BuildError::BadConfig("big_m must be finite and > 0".into()));
        }
    }

    let total_load: f64 = model
        .loads
        .iter()
        .map(|l| l.forecast_p + l.forecast_q.abs())
        .sum();
    let total_cap: f64 = model
        .cap_phases()
        .iter()
        .map(|&(c, p)| model.caps[c.index()].rated(p))
        .sum();
    let big_m = config.big_m.unwrap_or(2.0 * (total_load + total_cap));
    // sufficiency: M must strictly exceed any physical per-phase flow
    assert!(big_m > total_load, "big-M {big_m} does not cover total demand {total_load}");

    let mut b = Builder {
        variables: Vec::new(),
        constraints: Vec::new(),
        objective: Vec::new(),
        columns: HashMap::new(),
    };

    // --- variables, in a fixed deterministic order ---
    for &sw in model.switches() {
        b.var(VarRef::Switch(sw), 0.0, 1.0, true);
    }
    for section in &model.sections {
        let lower = if section.contains_source { 1.0 } else { 0.0 };
        b.var(VarRef::Section(section.id), lower, 1.0, true);
    }
    for &(cap, phase) in model.cap_phases() {
        b.var(VarRef::Cap(cap, phase), 0.0, 1.0, true);
    }
    for &(line, phase) in model.line_phases() {
        b.var(VarRef::FlowP(line, phase), -big_m, big_m, false);
        b.var(VarRef::FlowQ(line, phase), -big_m, big_m, false);
    }
    let k = config.load_bound_sigmas;
    let mut load_bounds: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(model.loads.len());
    for (i, load) in model.loads.iter().enumerate() {
        let lm = &meas.load[i];
        let (plo, phi) = (load.forecast_p - k * lm.sigma_p, load.forecast_p + k * lm.sigma_p);
        let (qlo, qhi) = (load.forecast_q - k * lm.sigma_q, load.forecast_q + k * lm.sigma_q);
        load_bounds.push((plo, phi, qlo, qhi));
        b.var(VarRef::LoadP(LoadId(i)), plo, phi, false);
        b.var(VarRef::LoadQ(LoadId(i)), qlo, qhi, false);
        b.var(VarRef::ZLoadP(LoadId(i)), plo.min(0.0), phi.max(0.0), false);
        b.var(VarRef::ZLoadQ(LoadId(i)), qlo.min(0.0), qhi.max(0.0), false);
        let amax_p = (phi - lm.p).max(lm.p - plo).max(0.0);
        let amax_q = (qhi - lm.q).max(lm.q - qlo).max(0.0);
        b.var(VarRef::AbsLoadP(LoadId(i)), 0.0, amax_p, false);
        b.var(VarRef::AbsLoadQ(LoadId(i)), 0.0, amax_q, false);
    }
    for (&(line, phase), fm) in &meas.flow {
        b.var(VarRef::AbsFlowP(line, phase), 0.0, big_m + fm.p.abs(), false);
        b.var(VarRef::AbsFlowQ(line, phase), 0.0, big_m + fm.q.abs(), false);
    }
    for &(cap, phase) in model.cap_phases() {
        b.var(VarRef::CapAnd(cap, phase), 0.0, 1.0, false);
    }

    // --- objective: weighted abs residuals of pseudo-loads and metered flows ---
    for (i, lm) in meas.load.iter().enumerate() {
        let ap = b.col(VarRef::AbsLoadP(LoadId(i)));
        let aq = b.col(VarRef::AbsLoadQ(LoadId(i)));
        b.objective.push((1.0 / lm.sigma_p, ap));
        b.objective.push((1.0 / lm.sigma_q, aq));
    }
    for (&(line, phase), fm) in &meas.flow {
        let bp = b.col(VarRef::AbsFlowP(line, phase));
        let bq = b.col(VarRef::AbsFlowQ(line, phase));
        b.objective.push((1.0 / fm.sigma_p, bp));
        b.objective.push((1.0 / fm.sigma_q, bq));
    }

    // --- Eq4: +/-(load - measured) <= a ---
    for (i, lm) in meas.load.iter().enumerate() {
        let p = b.col(VarRef::LoadP(LoadId(i)));
        let q = b.col(VarRef::LoadQ(LoadId(i)));
        let ap = b.col(VarRef::AbsLoadP(LoadId(i)));
        let aq = b.col(VarRef::AbsLoadQ(LoadId(i)));
        b.row(Tag::Eq4, vec![(1.0, p), (-1.0, ap)], Sense::Le, lm.p);
        b.row(Tag::Eq4, vec![(-1.0, p), (-1.0, ap)], Sense::Le, -lm.p);
        b.row(Tag::Eq4, vec![(1.0, q), (-1.0, aq)], Sense::Le, lm.q);
        b.row(Tag::Eq4, vec![(-1.0, q), (-1.0, aq)], Sense::Le, -lm.q);
    }

    // --- Eq5: +/-(flow - measured) <= b ---
    for (&(line, phase), fm) in &meas.flow {
        let fp = b.col(VarRef::FlowP(line, phase));
        let fq = b.col(VarRef::FlowQ(line, phase));
        let bp = b.col(VarRef::AbsFlowP(line, phase));
        let bq = b.col(VarRef::AbsFlowQ(line, phase));
        b.row(Tag::Eq5, vec![(1.0, fp), (-1.0, bp)], Sense::Le, fm.p);
        b.row(Tag::Eq5, vec![(-1.0, fp), (-1.0, bp)], Sense::Le, -fm.p);
        b.row(Tag::Eq5, vec![(1.0, fq), (-1.0, bq)], Sense::Le, fm.q);
        b.row(Tag::Eq5, vec![(-1.0, fq), (-1.0, bq)], Sense::Le, -fm.q);
    }

    // --- Eq12/Eq13/Eq14: per-(bus,phase) balance at non-source buses.
    // inflow - outflow - sum z_load (+ cap w term on Q) = 0
    for (bus_idx, bus) in model.buses.iter().enumerate() {
        if bus.is_source {
            continue;
        }
        for phase in bus.phases.iter() {
            let mut p_terms: Vec<(f64, u32)> = Vec::new();
            let mut q_terms: Vec<(f64, u32)> = Vec::new();
            for &line in model.lines_at(crate::network::BusId(bus_idx)) {
                let seg = &model.lines[line.index()];
                if !seg.phases.contains(phase) {
                    continue;
                }
                let sign = if seg.to.index() == bus_idx { 1.0 } else { -1.0 };
                p_terms.push((sign, b.col(VarRef::FlowP(line, phase))));
                q_terms.push((sign, b.col(VarRef::FlowQ(line, phase))));
            }
            let mut has_load = false;
            for (i, load) in model.loads.iter().enumerate() {
                if load.bus.index() == bus_idx && load.phase == phase {
                    p_terms.push((-1.0, b.col(VarRef::ZLoadP(LoadId(i)))));
                    q_terms.push((-1.0, b.col(VarRef::ZLoadQ(LoadId(i)))));
                    has_load = true;
                }
            }
            let mut has_cap = false;
            for (ci, cap) in model.caps.iter().enumerate() {
                if cap.bus.index() == bus_idx && cap.phases.contains(phase) {
                    q_terms.push((cap.rated(phase), b.col(VarRef::CapAnd(CapId(ci), phase))));
                    has_cap = true;
                }
            }
            if !p_terms.is_empty() || has_load {
                b.row(Tag::Eq12, p_terms, Sense::Eq, 0.0);
            }
            let q_tag = if has_cap { Tag::Eq14 } else { Tag::Eq13 };
            if !q_terms.is_empty() || has_load || has_cap {
                b.row(q_tag, q_terms, Sense::Eq, 0.0);
            }
        }
    }

    // z envelopes: z = y * load for load in [lo,hi], y binary. Exact:
    //   z <= hi*y,  z >= lo*y,  z <= load - lo*(1-y),  z >= load - hi*(1-y)
    for (i, load) in model.loads.iter().enumerate() {
        let y = b.col(VarRef::Section(load.section));
        let (plo, phi, qlo, qhi) = load_bounds[i];
        let has_cap_here = model
            .caps
            .iter()
            .any(|c| c.bus == load.bus && c.phases.contains(load.phase));
        let q_tag = if has_cap_here { Tag::Eq14 } else { Tag::Eq13 };
        for (z, x, lo, hi, tag) in [
            (b.col(VarRef::ZLoadP(LoadId(i))), b.col(VarRef::LoadP(LoadId(i))), plo, phi, Tag::Eq12),
            (b.col(VarRef::ZLoadQ(LoadId(i))), b.col(VarRef::LoadQ(LoadId(i))), qlo, qhi, q_tag),
        ] {
            b.row(tag, vec![(1.0, z), (-hi, y)], Sense::Le, 0.0);
            b.row(tag, vec![(1.0, z), (-lo, y)], Sense::Ge, 0.0);
            b.row(tag, vec![(1.0, z), (-1.0, x), (-lo, y)], Sense::Le, -lo);
            b.row(tag, vec![(1.0, z), (-1.0, x), (-hi, y)], Sense::Ge, -hi);
        }
    }

    // w = y_section AND y_cap
    for &(cap, phase) in model.cap_phases() {
        let w = b.col(VarRef::CapAnd(cap, phase));
        let yc = b.col(VarRef::Cap(cap, phase));
        let section = model.section_of_bus(model.caps[cap.index()].bus);
        let y = b.col(VarRef::Section(section));
        b.row(Tag::Eq14, vec![(1.0, w), (-1.0, y)], Sense::Le, 0.0);
        b.row(Tag::Eq14, vec![(1.0, w), (-1.0, yc)], Sense::Le, 0.0);
        b.row(Tag::Eq14, vec![(1.0, w), (-1.0, y), (-1.0, yc)], Sense::Ge, -1.0);
    }

    // --- Eq15: radiality over every simple cycle of the source-merged meta-graph ---
    for cycle in model.radiality_cycles() {
        let terms: Vec<(f64, u32)> = cycle.iter().map(|&sw| (1.0, b.col(VarRef::Switch(sw)))).collect();
        let n_sw = cycle.len() as f64;
        b.row(Tag::Eq15, terms, Sense::Le, n_sw - 1.0);
    }

    // --- Eq16/Eq17: section energization from supply switches ---
    for section in &model.sections {
        if section.contains_source {
            continue; // y fixed to 1 via bounds
        }
        let y = b.col(VarRef::Section(section.id));
        match section.supply_switches.len() {
            0 => unreachable!("validated: every non-source section has a supply switch"),
            1 => {
                let d = b.col(VarRef::Switch(section.supply_switches[0]));
                b.row(Tag::Eq16, vec![(1.0, y), (-1.0, d)], Sense::Eq, 0.0);
            }
            _ => {
                let sum_terms: Vec<(f64, u32)> = std::iter::once((1.0, y))
                    .chain(
                        section
                            .supply_switches
                            .iter()
                            .map(|&sw| (-1.0, b.col(VarRef::Switch(sw)))),
                    )
                    .collect();
                b.row(Tag::Eq17, sum_terms, Sense::Le, 0.0);
                for &sw in &section.supply_switches {
                    let d = b.col(VarRef::Switch(sw));
                    b.row(Tag::Eq17, vec![(1.0, y), (-1.0, d)], Sense::Ge, 0.0);
                }
            }
        }
    }

    // --- Eq18: a responding ping pins its section energized ---
    for (&lid, &y_hat) in &meas.ping {
        let section = model.loads[lid.index()].section;
        let y = b.col(VarRef::Section(section));
        b.row(Tag::Eq18, vec![(1.0, y)], Sense::Ge, y_hat as f64);
    }

    // --- Eq19: zero flow through open switches ---
    for &sw in model.switches() {
        let d = b.col(VarRef::Switch(sw));
        for phase in model.lines[sw.index()].phases.iter() {
            let fp = b.col(VarRef::FlowP(sw, phase));
            let fq = b.col(VarRef::FlowQ(sw, phase));
            b.row(Tag::Eq19, vec![(1.0, fp), (-big_m, d)], Sense::Le, 0.0);
            b.row(Tag::Eq19, vec![(1.0, fp), (big_m, d)], Sense::Ge, 0.0);
            b.row(Tag::Eq19, vec![(1.0, fq), (-big_m, d)], Sense::Le, 0.0);
            b.row(Tag::Eq19, vec![(1.0, fq), (big_m, d)], Sense::Ge, 0.0);
        }
    }

    // --- Eq20: 5-sigma budget on the sum of ping errors.
    // e_j = (1 - y) for y_hat = 1, else y; the constant part moves to rhs.
    if !meas.ping.is_empty() {
        let n_p = meas.ping.len() as f64;
        let q = meas.noise.ping_error_prob;
        let mu = n_p * q;
        let sigma = (n_p * q * (1.0 - q)).sqrt();
        let mut terms: Vec<(f64, u32)> = Vec::new();
        let mut constant = 0.0;
        for (&lid, &y_hat) in &meas.ping {
            let y = b.col(VarRef::Section(model.loads[lid.index()].section));
            if y_hat == 1 {
                terms.push((-1.0, y));
                constant += 1.0;
            } else {
                terms.push((1.0, y));
            }
        }
        let upper = mu + 5.0 * sigma;
        let lower = (mu - 5.0 * sigma).min(0.0);
        b.row(Tag::Eq20, terms.clone(), Sense::Le, upper - constant);
        b.row(Tag::Eq20, terms, Sense::Ge, lower - constant);
    }

    Ok(MilpProblem {
        variables: b.variables,
        constraints: b.constraints,
        objective: b.objective,
        big_m,
        model_hash: model.fingerprint(),
        measurement_hash: meas.fingerprint(),
        columns: b.columns,
    })
}

/// True assignment for a scenario: statuses and loads from the truth, flows
/// from the truth, abs residuals set to the exact measurement mismatch,
/// z = y*load and w = y AND y_cap.
pub fn truth_assignment(
    problem: &MilpProblem,
    model: &NetworkModel,
    truth: &ScenarioTruth,
    meas: &MeasurementSet,
) -> Vec<f64> {
    let mut x = vec![0.0; problem.variables.len()];
    let set = |x: &mut Vec<f64>, var: VarRef, v: f64| {
        let j = problem.column(var).expect("variable exists");
        x[j as usize] = v;
    };
    for (k, &sw) in model.switches().iter().enumerate() {
        set(&mut x, VarRef::Switch(sw), truth.switch_closed[k] as u8 as f64);
    }
    for (s, &e) in truth.section_energized.iter().enumerate() {
        set(&mut x, VarRef::Section(SectionId(s)), e as u8 as f64);
    }
    for (k, &(cap, phase)) in model.cap_phases().iter().enumerate() {
        let on = truth.cap_on[k] as u8 as f64;
        set(&mut x, VarRef::Cap(cap, phase), on);
        let y = truth.section_energized[model.section_of_bus(model.caps[cap.index()].bus).index()];
        set(&mut x, VarRef::CapAnd(cap, phase), if y { on } else { 0.0 });
    }
    for (k, &(line, phase)) in model.line_phases().iter().enumerate() {
        set(&mut x, VarRef::FlowP(line, phase), truth.true_flow[k].0);
        set(&mut x, VarRef::FlowQ(line, phase), truth.true_flow[k].1);
    }
    for (i, &(p, q)) in truth.true_load.iter().enumerate() {
        let lid = LoadId(i);
        set(&mut x, VarRef::LoadP(lid), p);
        set(&mut x, VarRef::LoadQ(lid), q);
        let y = truth.section_energized[model.loads[i].section.index()];
        set(&mut x, VarRef::ZLoadP(lid), if y { p } else { 0.0 });
        set(&mut x, VarRef::ZLoadQ(lid), if y { q } else { 0.0 });
        let lm = &meas.load[i];
        set(&mut x, VarRef::AbsLoadP(lid), (p - lm.p).abs());
        set(&mut x, VarRef::AbsLoadQ(lid), (q - lm.q).abs());
    }
    for (&(line, phase), fm) in &meas.flow {
        let ord = model.line_phase_ordinal(line, phase).unwrap();
        let (tp, tq) = truth.true_flow[ord];
        set(&mut x, VarRef::AbsFlowP(line, phase), (tp - fm.p).abs());
        set(&mut x, VarRef::AbsFlowQ(line, phase), (tq - fm.q).abs());
    }
    x
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::measurement::{corrupt_measurements, NoiseSpec, Placement};
    use crate::network::parse_network;

    pub const FOUR_BUS: &str = "\
bus src phases=A source
bus b1 phases=A
bus b2 phases=A
bus b3 phases=A
line l1 src b1 phases=A
line sw1 b1 b2 phases=A switch normal=closed
line l2 b2 b3 phases=A
load d1 b1 A p=100 q=30 sigp=5 sigq=2 meter
load d2 b3 A p=50 q=20 sigp=5 sigq=2 meter
";

    pub fn four_bus_setup(
        noise: NoiseSpec,
        switch_closed: bool,
    ) -> (crate::network::NetworkModel, ScenarioTruth, MeasurementSet) {
        let m = parse_network(FOUR_BUS).unwrap();
        let section_energized = m.section_energization(&[switch_closed]).unwrap();
        let true_load: Vec<(f64, f64)> =
            m.loads.iter().map(|l| (l.forecast_p, l.forecast_q)).collect();
        let true_flow = crate::powerflow::solve_linear_flows(
            &m,
            &[switch_closed],
            &section_energized,
            &[],
            &true_load,
        )
        .unwrap();
        let truth = ScenarioTruth {
            switch_closed: vec![switch_closed],
            section_energized: section_energized.clone(),
            cap_on: vec![],
            true_load,
            true_flow,
            outaged_sections: section_energized
                .iter()
                .enumerate()
                .filter(|(_, &e)| !e)
                .map(|(i, _)| SectionId(i))
                .collect(),
        };
        let placement = Placement {
            metered_lines: vec![m.line_by_name("l1").unwrap()],
            pinged_loads: vec![LoadId(0), LoadId(1)],
        };
        let meas = corrupt_measurements(&m, &truth, &placement, &noise).unwrap();
        (m, truth, meas)
    }

    fn zero_noise(seed: u64) -> NoiseSpec {
        NoiseSpec {
            load_error_pct: 0.0,
            flow_error_pct: 0.0,
            ping_error_prob: 0.0,
            seed,
        }
    }

    #[test]
    fn cycle_constraint_instantiates_directly() {
        // one source, a loop of 3 switches
        let text = "\
bus s phases=A source
bus a phases=A
bus b phases=A
line w1 s a phases=A switch normal=closed
line w2 a b phases=A switch normal=closed
line w3 b s phases=A switch normal=open
load d1 a A p=10 q=1 sigp=1 sigq=1 meter
load d2 b A p=20 q=2 sigp=1 sigq=1 meter
";
        let m = parse_network(text).unwrap();
        let section_energized = m.section_energization(&[true, true, false]).unwrap();
        let true_load: Vec<(f64, f64)> =
            m.loads.iter().map(|l| (l.forecast_p, l.forecast_q)).collect();
        let true_flow = crate::powerflow::solve_linear_flows(
            &m,
            &[true, true, false],
            &section_energized,
            &[],
            &true_load,
        )
        .unwrap();
        let truth = ScenarioTruth {
            switch_closed: vec![true, true, false],
            section_energized,
            cap_on: vec![],
            true_load,
            true_flow,
            outaged_sections: vec![],
        };
        let placement = Placement {
            metered_lines: vec![m.line_by_name("w1").unwrap()],
            pinged_loads: vec![LoadId(0), LoadId(1)],
        };
        let meas = corrupt_measurements(&m, &truth, &placement, &zero_noise(3)).unwrap();
        let p = build_problem(&m, &meas, &BuildConfig::default()).unwrap();
        let eq15: Vec<&LinearConstraint> =
            p.constraints.iter().filter(|c| c.tag == Tag::Eq15).collect();
        assert_eq!(eq15.len(), 1);
        assert_eq!(eq15[0].terms.len(), 3);
        assert!(eq15[0].terms.iter().all(|&(c, _)| c == 1.0));
        assert_eq!(eq15[0].sense, Sense::Le);
        assert_eq!(eq15[0].rhs, 2.0);
    }

    #[test]
    fn ping_budget_bounds_match_hand_computation() {
        // 100 pinged loads in one section, q = 0.05
        let mut text = String::from("bus s phases=A source\nbus b phases=A\nline l s b phases=A\n");
        for i in 0..100 {
            text.push_str(&format!("load d{i} b A p=1 q=1 sigp=1 sigq=1 meter\n"));
        }
        let m = parse_network(&text).unwrap();
        let section_energized = vec![true];
        let true_load: Vec<(f64, f64)> = m.loads.iter().map(|_| (1.0, 1.0)).collect();
        let true_flow =
            crate::powerflow::solve_linear_flows(&m, &[], &section_energized, &[], &true_load)
                .unwrap();
        let truth = ScenarioTruth {
            switch_closed: vec![],
            section_energized,
            cap_on: vec![],
            true_load,
            true_flow,
            outaged_sections: vec![],
        };
        let placement = Placement {
            metered_lines: vec![],
            pinged_loads: (0..100).map(LoadId).collect(),
        };
        let noise = NoiseSpec {
            load_error_pct: 0.0,
            flow_error_pct: 0.0,
            ping_error_prob: 0.05,
            seed: 1,
        };
        let meas = corrupt_measurements(&m, &truth, &placement, &noise).unwrap();
        let p = build_problem(&m, &meas, &BuildConfig::default()).unwrap();
        let eq20: Vec<&LinearConstraint> =
            p.constraints.iter().filter(|c| c.tag == Tag::Eq20).collect();
        assert_eq!(eq20.len(), 2);
        let mu = 100.0 * 0.05;
        let sigma = (100.0 * 0.05 * 0.95_f64).sqrt();
        let upper = mu + 5.0 * sigma;
        let lower = (mu - 5.0 * sigma).min(0.0);
        assert!((upper - 15.897_247_358_851_683).abs() < 1e-9);
        assert!((lower + 5.897_247_358_851_683).abs() < 1e-9);
        // constant part: number of y_hat = 1 pings moves to the rhs
        let ones = meas.ping.values().filter(|&&y| y == 1).count() as f64;
        let le = eq20.iter().find(|c| c.sense == Sense::Le).unwrap();
        let ge = eq20.iter().find(|c| c.sense == Sense::Ge).unwrap();
        assert!((le.rhs - (upper - ones)).abs() < 1e-9);
        assert!((ge.rhs - (lower - ones)).abs() < 1e-9);
        // single section: terms merge into one column
        assert_eq!(le.terms.len(), 1);
    }

    #[test]
    fn four_bus_variable_count_matches_hand_enumeration() {
        let (_, _, meas) = {
            let n = zero_noise(2);
            let (m, t, meas) = four_bus_setup(n, true);
            (m, t, meas)
        };
        let m = parse_network(FOUR_BUS).unwrap();
        let p = build_problem(&m, &meas, &BuildConfig::default()).unwrap();
        // hand count: 1 switch + 2 sections + 0 caps
        //   flows: 3 lines x 1 phase x {P,Q} = 6
        //   loads: 2 x {p,q,zp,zq,ap,aq} = 12
        //   metered flows: 1 line x 1 phase x {bP,bQ} = 2
        let expected = 1 + 2 + 6 + 12 + 2;
        assert_eq!(p.variables.len(), expected);
        // independent symbolic walker: count per kind prefix
        let mut by_kind: std::collections::BTreeMap<&str, usize> = Default::default();
        for v in &p.variables {
            *by_kind.entry(v.var.kind_prefix()).or_insert(0) += 1;
        }
        assert_eq!(by_kind["dl"], 1);
        assert_eq!(by_kind["yl"], 2);
        assert_eq!(by_kind["fP"], 3);
        assert_eq!(by_kind["fQ"], 3);
        assert_eq!(by_kind["lp"], 2);
        assert_eq!(by_kind["zp"], 2);
        assert_eq!(by_kind["ap"], 2);
        assert_eq!(by_kind["bp"], 1);
        assert_eq!(by_kind.get("yc"), None);
    }

    #[test]
    fn truth_is_feasible_and_objective_zero_at_zero_noise() {
        let (m, truth, meas) = four_bus_setup(zero_noise(4), true);
        let p = build_problem(&m, &meas, &BuildConfig::default()).unwrap();
        let x = truth_assignment(&p, &m, &truth, &meas);
        let violations = p.check_assignment(&x, 1e-9);
        assert!(violations.is_empty(), "{violations:?}");
        assert_eq!(p.objective_of(&x).unwrap(), 0.0);
    }

    #[test]
    fn truth_is_feasible_for_outage_scenario() {
        let (m, truth, meas) = four_bus_setup(zero_noise(5), false);
        let p = build_problem(&m, &meas, &BuildConfig::default()).unwrap();
        let x = truth_assignment(&p, &m, &truth, &meas);
        let violations = p.check_assignment(&x, 1e-9);
        assert!(violations.is_empty(), "{violations:?}");
    }

    #[test]
    fn perturbing_a_metered_flow_by_sigma_raises_objective_by_one() {
        let (m, truth, meas) = four_bus_setup(zero_noise(6), true);
        let p = build_problem(&m, &meas, &BuildConfig::default()).unwrap();
        let mut x = truth_assignment(&p, &m, &truth, &meas);
        let line = m.line_by_name("l1").unwrap();
        let fm = meas.flow[&(line, Phase::A)];
        let fp = p.column(VarRef::FlowP(line, Phase::A)).unwrap() as usize;
        let bp = p.column(VarRef::AbsFlowP(line, Phase::A)).unwrap() as usize;
        let base = p.objective_of(&x).unwrap();
        x[fp] += fm.sigma_p;
        x[bp] = (x[fp] - fm.p).abs();
        let bumped = p.objective_of(&x).unwrap();
        assert!((bumped - base - 1.0).abs() < 1e-12);
    }

    #[test]
    fn objective_matches_naive_dot_product_oracle() {
        let noise = NoiseSpec {
            load_error_pct: 10.0,
            flow_error_pct: 1.0,
            ping_error_prob: 0.02,
            seed: 7,
        };
        let (m, truth, meas) = four_bus_setup(noise, true);
        let p = build_problem(&m, &meas, &BuildConfig::default()).unwrap();
        let mut x = truth_assignment(&p, &m, &truth, &meas);
        // random-ish assignment: scramble continuous entries deterministically
        for (j, v) in x.iter_mut().enumerate() {
            *v += (j as f64 * 0.37).sin();
        }
        let naive: f64 = p
            .objective
            .iter()
            .map(|&(c, j)| c * x[j as usize])
            .sum();
        assert!((p.objective_of(&x).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn every_constraint_is_tagged_and_big_m_is_sufficient() {
        let (m, _, meas) = four_bus_setup(zero_noise(8), true);
        let p = build_problem(&m, &meas, &BuildConfig::default()).unwrap();
        for c in &p.constraints {
            assert!(ALL_TAGS.contains(&c.tag));
            assert!(!c.terms.is_empty());
            let mut cols: Vec<u32> = c.terms.iter().map(|&(_, j)| j).collect();
            cols.dedup();
            assert_eq!(cols.len(), c.terms.len(), "duplicate column in a row");
        }
        let total: f64 = m.loads.iter().map(|l| l.forecast_p + l.forecast_q.abs()).sum();
        assert!(p.big_m > 2.0 * total - 1e-12);
        // every binary appears in at least one constraint
        for (j, v) in p.variables.iter().enumerate() {
            if v.is_integer {
                assert!(
                    p.constraints.iter().any(|c| c.terms.iter().any(|&(_, jj)| jj == j as u32)),
                    "binary {:?} unused",
                    v.var
                );
            }
        }
    }

    #[test]
    fn unobservable_measurement_set_is_refused() {
        let (m, truth, _) = four_bus_setup(zero_noise(9), true);
        let placement = Placement {
            metered_lines: vec![],
            pinged_loads: vec![LoadId(0)], // section of b2/b3 unpinged
        };
        let meas = corrupt_measurements(&m, &truth, &placement, &zero_noise(9)).unwrap();
        assert!(matches!(
            build_problem(&m, &meas, &BuildConfig::default()),
            Err(BuildError::NotObservable(_))
        ));
    }
}
