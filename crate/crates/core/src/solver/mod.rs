//! Branch-and-bound MILP solver over the bounded simplex in [`simplex`],
//! plus MPS export and solution-file import in [`mps`].
//!
//! Presolve eliminates fixed columns and folds singleton rows into bounds
//! (iterated to a fixpoint), branch-and-bound explores most-fractional
//! branches in best-bound order with a LIFO tie-break, and node LPs warm
//! start from the parent's optimal basis whenever the cached inverse
//! matches (the common case while diving).

pub mod mps;
mod simplex;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use thiserror::Error;

use crate::milp::{MilpProblem, Sense, VarRef};
use simplex::{Basis, LpData, LpOutcome, LpStatus, Workspace};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branching {
    MostFractional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeSelection {
    BestBound,
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub integrality_tol: f64,
    /// Feasibility tolerance, relative to row magnitude.
    pub lp_feas_tol: f64,
    pub rel_gap_tol: f64,
    pub node_limit: usize,
    pub time_limit_seconds: Option<f64>,
    pub branching: Branching,
    pub node_selection: NodeSelection,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            integrality_tol: 1e-6,
            lp_feas_tol: 1e-9,
            rel_gap_tol: 1e-6,
            node_limit: 200_000,
            time_limit_seconds: None,
            branching: Branching::MostFractional,
            node_selection: NodeSelection::BestBound,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NodeLimit,
    TimeLimit,
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub objective: f64,
    /// Value per problem column; empty when no incumbent exists.
    pub values: Vec<f64>,
    pub nodes_explored: usize,
    pub wall_seconds: f64,
}

impl SolveResult {
    pub fn value(&self, problem: &MilpProblem, var: VarRef) -> Option<f64> {
        let j = problem.column(var)? as usize;
        self.values.get(j).copied()
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("LP relaxation is unbounded (missing variable bounds)")]
    Unbounded,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("malformed problem: {0}")]
    BadProblem(String),
    #[error("fixed-binary assignment does not cover {0:?}")]
    UncoveredBinary(VarRef),
}

// ---------------------------------------------------------------------------
// Presolve: fixed-column elimination + singleton-row bound folding.

struct Reduced {
    /// reduced column -> original column
    keep: Vec<u32>,
    /// original column -> Some(fixed value)
    fixed: Vec<Option<f64>>,
    rows: Vec<(Vec<(f64, u32)>, Sense, f64)>,
    cost: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    is_integer: Vec<bool>,
    obj_offset: f64,
    infeasible: bool,
}

fn presolve(problem: &MilpProblem, overrides: &[(u32, f64, f64)]) -> Reduced {
    let n = problem.variables.len();
    let mut lo: Vec<f64> = problem.variables.iter().map(|v| v.lower).collect();
    let mut hi: Vec<f64> = problem.variables.iter().map(|v| v.upper).collect();
    for &(j, l, h) in overrides {
        lo[j as usize] = lo[j as usize].max(l);
        hi[j as usize] = hi[j as usize].min(h);
    }

    let feas = |l: f64, h: f64| l <= h + 1e-9 * (1.0 + l.abs().max(h.abs()));
    let mut infeasible = false;
    let mut active: Vec<bool> = vec![true; problem.constraints.len()];

    // iterate: fixed columns vanish into rhs, singleton rows become bounds
    for _pass in 0..16 {
        let mut changed = false;
        for (ri, row) in problem.constraints.iter().enumerate() {
            if !active[ri] || infeasible {
                continue;
            }
            let mut rhs = row.rhs;
            let mut live: Vec<(f64, u32)> = Vec::new();
            for &(c, j) in &row.terms {
                let (l, h) = (lo[j as usize], hi[j as usize]);
                if l == h {
                    rhs -= c * l;
                } else {
                    live.push((c, j));
                }
            }
            match live.len() {
                0 => {
                    let ok = match row.sense {
                        Sense::Le => 0.0 <= rhs + 1e-7 * (1.0 + rhs.abs()),
                        Sense::Ge => 0.0 >= rhs - 1e-7 * (1.0 + rhs.abs()),
                        Sense::Eq => rhs.abs() <= 1e-7 * (1.0 + row.rhs.abs()),
                    };
                    if !ok {
                        infeasible = true;
                    }
                    active[ri] = false;
                    changed = true;
                }
                1 => {
                    let (c, j) = live[0];
                    let v = rhs / c;
                    let j = j as usize;
                    match (row.sense, c > 0.0) {
                        (Sense::Eq, _) => {
                            lo[j] = lo[j].max(v);
                            hi[j] = hi[j].min(v);
                        }
                        (Sense::Le, true) | (Sense::Ge, false) => hi[j] = hi[j].min(v),
                        (Sense::Le, false) | (Sense::Ge, true) => lo[j] = lo[j].max(v),
                    }
                    if !feas(lo[j], hi[j]) {
                        infeasible = true;
                    } else if lo[j] > hi[j] {
                        let mid = 0.5 * (lo[j] + hi[j]);
                        lo[j] = mid;
                        hi[j] = mid;
                    }
                    active[ri] = false;
                    changed = true;
                }
                _ => {}
            }
        }
        if !changed || infeasible {
            break;
        }
    }

    let mut fixed: Vec<Option<f64>> = vec![None; n];
    let mut keep: Vec<u32> = Vec::new();
    let mut index_map: Vec<u32> = vec![u32::MAX; n];
    for j in 0..n {
        if lo[j] == hi[j] {
            fixed[j] = Some(lo[j]);
        } else {
            index_map[j] = keep.len() as u32;
            keep.push(j as u32);
        }
    }

    let mut rows = Vec::new();
    if !infeasible {
        for (ri, row) in problem.constraints.iter().enumerate() {
            if !active[ri] {
                continue;
            }
            let mut rhs = row.rhs;
            let mut terms: Vec<(f64, u32)> = Vec::new();
            for &(c, j) in &row.terms {
                match fixed[j as usize] {
                    Some(v) => rhs -= c * v,
                    None => terms.push((c, index_map[j as usize])),
                }
            }
            if terms.is_empty() {
                let ok = match row.sense {
                    Sense::Le => 0.0 <= rhs + 1e-7 * (1.0 + rhs.abs()),
                    Sense::Ge => 0.0 >= rhs - 1e-7 * (1.0 + rhs.abs()),
                    Sense::Eq => rhs.abs() <= 1e-7 * (1.0 + row.rhs.abs()),
                };
                if !ok {
                    infeasible = true;
                    break;
                }
                continue;
            }
            rows.push((terms, row.sense, rhs));
        }
    }

    let mut cost = vec![0.0; keep.len()];
    let mut obj_offset = 0.0;
    for &(c, j) in &problem.objective {
        match fixed[j as usize] {
            Some(v) => obj_offset += c * v,
            None => cost[index_map[j as usize] as usize] += c,
        }
    }

    Reduced {
        lo: keep.iter().map(|&j| lo[j as usize]).collect(),
        hi: keep.iter().map(|&j| hi[j as usize]).collect(),
        is_integer: keep
            .iter()
            .map(|&j| problem.variables[j as usize].is_integer)
            .collect(),
        keep,
        fixed,
        rows,
        cost,
        obj_offset,
        infeasible,
    }
}

// ---------------------------------------------------------------------------
// Branch and bound

struct Node {
    overrides: Vec<(u32, f64, f64)>,
    basis: Option<Basis>,
}

struct HeapKey {
    bound: f64,
    id: usize,
}

impl PartialEq for HeapKey {
    fn eq(&self, other: &Self) -> bool {
        self.bound == other.bound && self.id == other.id
    }
}
impl Eq for HeapKey {}
impl PartialOrd for HeapKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapKey {
    // max-heap: best = lowest bound, then newest node (dive on ties)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .partial_cmp(&self.bound)
            .unwrap_or(Ordering::Equal)
            .then(self.id.cmp(&other.id))
    }
}

/// Solve a MILP to proven optimality (within `rel_gap_tol`).
pub fn solve(problem: &MilpProblem, config: &SolverConfig) -> Result<SolveResult, SolveError> {
    solve_with_overrides(problem, &[], config)
}

/// LP over the continuous variables with every binary pinned by `assignment`.
pub fn solve_with_fixed_binaries(
    problem: &MilpProblem,
    assignment: &[(VarRef, f64)],
    config: &SolverConfig,
) -> Result<SolveResult, SolveError> {
    let mut overrides = Vec::new();
    let mut covered = vec![false; problem.variables.len()];
    for &(var, v) in assignment {
        if let Some(j) = problem.column(var) {
            overrides.push((j, v, v));
            covered[j as usize] = true;
        }
    }
    for (j, var) in problem.variables.iter().enumerate() {
        if var.is_integer && !covered[j] {
            return Err(SolveError::UncoveredBinary(var.var));
        }
    }
    solve_with_overrides(problem, &overrides, config)
}

fn solve_with_overrides(
    problem: &MilpProblem,
    overrides: &[(u32, f64, f64)],
    config: &SolverConfig,
) -> Result<SolveResult, SolveError> {
    let t0 = Instant::now();
    for v in &problem.variables {
        if !(v.lower.is_finite() && v.upper.is_finite()) {
            return Err(SolveError::BadProblem(format!(
                "variable {:?} has non-finite bounds",
                v.var
            )));
        }
        if v.lower > v.upper {
            return Err(SolveError::BadProblem(format!(
                "variable {:?} has empty bounds",
                v.var
            )));
        }
    }

    let red = presolve(problem, overrides);
    if red.infeasible {
        return Ok(SolveResult {
            status: SolveStatus::Infeasible,
            objective: f64::INFINITY,
            values: Vec::new(),
            nodes_explored: 0,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
    }

    let data = LpData::new(red.keep.len(), &red.rows, &red.cost);
    // proven lower bound of the objective over the box
    let floor: f64 = red
        .cost
        .iter()
        .zip(red.lo.iter().zip(&red.hi))
        .map(|(&c, (&l, &h))| (c * l).min(c * h))
        .sum();

    let mut ws = Workspace::new();
    let mut nodes: Vec<Node> = vec![Node {
        overrides: Vec::new(),
        basis: None,
    }];
    let mut heap = BinaryHeap::new();
    heap.push(HeapKey { bound: floor, id: 0 });

    let mut incumbent: Option<(f64, Vec<f64>)> = None;
    let mut explored = 0usize;
    let mut status = SolveStatus::Optimal;

    let gap_ok = |bound: f64, inc: f64| -> bool {
        inc - bound <= config.rel_gap_tol * inc.abs().max(1.0)
    };

    while let Some(key) = heap.pop() {
        if let Some((inc_obj, _)) = &incumbent {
            if gap_ok(key.bound, *inc_obj) {
                break; // best bound proves the incumbent
            }
        }
        if explored >= config.node_limit {
            status = SolveStatus::NodeLimit;
            break;
        }
        if let Some(limit) = config.time_limit_seconds {
            if t0.elapsed().as_secs_f64() > limit {
                status = SolveStatus::TimeLimit;
                break;
            }
        }

        let node = &nodes[key.id];
        let (lo_n, hi_n) = node_bounds(&red, &node.overrides);
        if lo_n.iter().zip(&hi_n).any(|(l, h)| l > h) {
            continue;
        }
        let (flo, fhi) = data.full_bounds(&lo_n, &hi_n);
        let warm = node.basis.clone();
        let mut out = simplex::solve_lp(
            &data,
            &flo,
            &fhi,
            warm.as_ref(),
            &mut ws,
            config.lp_feas_tol,
            Some(floor),
        );
        if out.status == LpStatus::Numerical {
            ws.invalidate();
            out = simplex::solve_lp(&data, &flo, &fhi, None, &mut ws, config.lp_feas_tol, Some(floor));
        }
        explored += 1;

        match out.status {
            LpStatus::Infeasible => continue,
            LpStatus::Unbounded => return Err(SolveError::Unbounded),
            LpStatus::Numerical => {
                return Err(SolveError::Numerical(format!(
                    "node LP failed after {} iterations",
                    out.iterations
                )))
            }
            LpStatus::Optimal => {}
        }
        let node_obj = out.obj.max(key.bound);
        if let Some((inc_obj, _)) = &incumbent {
            if node_obj >= *inc_obj - 1e-12 {
                continue;
            }
        }

        match most_fractional(&red, &out, config.integrality_tol) {
            None => {
                let x_red = out.x[..red.keep.len()].to_vec();
                let better = incumbent
                    .as_ref()
                    .map_or(true, |(inc_obj, _)| node_obj < *inc_obj - 1e-12);
                if better {
                    incumbent = Some((node_obj, x_red));
                }
            }
            Some(j) => {
                let xj = out.x[j];
                let lo_child = xj.floor();
                for (l, h) in [(lo_child + 1.0, hi_n[j]), (lo_n[j], lo_child)] {
                    let mut ov = nodes[key.id].overrides.clone();
                    ov.push((j as u32, l, h));
                    let id = nodes.len();
                    nodes.push(Node {
                        overrides: ov,
                        basis: Some(out.basis.clone()),
                    });
                    heap.push(HeapKey {
                        bound: node_obj,
                        id,
                    });
                }
            }
        }
    }

    let wall = t0.elapsed().as_secs_f64();
    match incumbent {
        None => Ok(SolveResult {
            status: if status == SolveStatus::Optimal {
                SolveStatus::Infeasible
            } else {
                status
            },
            objective: f64::INFINITY,
            values: Vec::new(),
            nodes_explored: explored,
            wall_seconds: wall,
        }),
        Some((obj, x_red)) => {
            let values = reconstruct(&red, &x_red);
            if status == SolveStatus::Optimal {
                let bad = problem.check_assignment(&values, config.lp_feas_tol * 1e3);
                if !bad.is_empty() {
                    return Err(SolveError::Numerical(format!(
                        "optimal solution violates {} constraints (worst {:?})",
                        bad.len(),
                        bad.first()
                    )));
                }
            }
            Ok(SolveResult {
                status,
                objective: obj + red.obj_offset,
                values,
                nodes_explored: explored,
                wall_seconds: wall,
            })
        }
    }
}

fn node_bounds(red: &Reduced, overrides: &[(u32, f64, f64)]) -> (Vec<f64>, Vec<f64>) {
    let mut lo = red.lo.clone();
    let mut hi = red.hi.clone();
    for &(j, l, h) in overrides {
        let j = j as usize;
        lo[j] = lo[j].max(l);
        hi[j] = hi[j].min(h);
    }
    (lo, hi)
}

fn most_fractional(red: &Reduced, out: &LpOutcome, int_tol: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for j in 0..red.keep.len() {
        if !red.is_integer[j] {
            continue;
        }
        let x = out.x[j];
        let frac = (x - x.round()).abs();
        if frac <= int_tol {
            continue;
        }
        let score = 0.5 - (x - x.floor() - 0.5).abs();
        if best.map_or(true, |(_, s)| score > s) {
            best = Some((j, score));
        }
    }
    best.map(|(j, _)| j)
}

fn reconstruct(red: &Reduced, x_red: &[f64]) -> Vec<f64> {
    let mut full = vec![0.0; red.fixed.len()];
    for (j, f) in red.fixed.iter().enumerate() {
        if let Some(v) = f {
            full[j] = *v;
        }
    }
    for (rj, &j) in red.keep.iter().enumerate() {
        full[j as usize] = x_red[rj];
    }
    full
}
