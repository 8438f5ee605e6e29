//! High-level estimation: one call from (model, measurements) to a rounded,
//! radiality-validated topology estimate, plus the exhaustive-enumeration
//! oracle used for validation and objective-table analysis.

use thiserror::Error;

use crate::measurement::MeasurementSet;
use crate::milp::{build_problem, BuildConfig, BuildError, MilpProblem, VarRef};
use crate::network::{NetworkModel, SectionId, Topology};
use crate::solver::{
    solve, solve_with_fixed_binaries, SolveError, SolveResult, SolveStatus, SolverConfig,
};

#[derive(Clone, Debug, Default)]
pub struct EstimateConfig {
    pub build: BuildConfig,
    pub solver: SolverConfig,
}

/// Estimated discrete statuses plus the recovered continuous state.
#[derive(Clone, Debug)]
pub struct TopologyEstimate {
    /// Indexed by switch ordinal.
    pub switch_closed: Vec<bool>,
    /// Indexed by section id.
    pub section_energized: Vec<bool>,
    /// Indexed by cap-phase ordinal.
    pub cap_on: Vec<bool>,
    /// (p, q) per load.
    pub estimated_loads: Vec<(f64, f64)>,
    /// (P, Q) per line-phase ordinal.
    pub estimated_flows: Vec<(f64, f64)>,
    pub objective: f64,
    pub nodes_explored: usize,
    pub wall_seconds: f64,
}

impl TopologyEstimate {
    pub fn fingerprint(&self) -> u64 {
        let mut text = String::new();
        for &c in &self.switch_closed {
            text.push(if c { '1' } else { '0' });
        }
        text.push('|');
        for &e in &self.section_energized {
            text.push(if e { '1' } else { '0' });
        }
        text.push('|');
        for &c in &self.cap_on {
            text.push(if c { '1' } else { '0' });
        }
        crate::fnv1a64(text.as_bytes())
    }
}

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("solver returned {0:?} without a usable incumbent")]
    NotOptimal(SolveStatus),
    #[error("binary {name} = {value} is not within integrality tolerance")]
    NotIntegral { name: String, value: f64 },
    #[error("post-round radiality violation: {0}")]
    RadialityViolation(String),
    #[error("enumeration exceeded {0} topologies")]
    EnumerationOverflow(usize),
}

fn round_binary(
    model: &NetworkModel,
    problem: &MilpProblem,
    result: &SolveResult,
    var: VarRef,
    tol: f64,
) -> Result<bool, EstimateError> {
    let v = result.value(problem, var).expect("variable exists");
    if (v - v.round()).abs() > tol {
        return Err(EstimateError::NotIntegral {
            name: var.describe(model),
            value: v,
        });
    }
    Ok(v.round() == 1.0)
}

/// Build the MILP, solve it, round the binaries, and validate radiality of
/// the rounded topology with the independent union-find route.
pub fn estimate(
    model: &NetworkModel,
    meas: &MeasurementSet,
    config: &EstimateConfig,
) -> Result<TopologyEstimate, EstimateError> {
    let problem = build_problem(model, meas, &config.build)?;
    let result = solve(&problem, &config.solver)?;
    if result.status != SolveStatus::Optimal {
        return Err(EstimateError::NotOptimal(result.status));
    }
    extract_estimate(model, &problem, &result, config.solver.integrality_tol)
}

pub fn extract_estimate(
    model: &NetworkModel,
    problem: &MilpProblem,
    result: &SolveResult,
    integrality_tol: f64,
) -> Result<TopologyEstimate, EstimateError> {
    let tol = integrality_tol;
    let mut switch_closed = Vec::with_capacity(model.switches().len());
    for &sw in model.switches() {
        switch_closed.push(round_binary(model, problem, result, VarRef::Switch(sw), tol)?);
    }
    let mut section_energized = Vec::with_capacity(model.sections.len());
    for s in &model.sections {
        section_energized.push(round_binary(model, problem, result, VarRef::Section(s.id), tol)?);
    }
    let mut cap_on = Vec::with_capacity(model.cap_phases().len());
    for &(c, p) in model.cap_phases() {
        cap_on.push(round_binary(model, problem, result, VarRef::Cap(c, p), tol)?);
    }

    // independent radiality check on the rounded statuses
    let implied = model
        .section_energization(&switch_closed)
        .map_err(|e| EstimateError::RadialityViolation(e.to_string()))?;
    if implied != section_energized {
        return Err(EstimateError::RadialityViolation(
            "estimated section statuses disagree with switch connectivity".into(),
        ));
    }

    let estimated_loads = (0..model.loads.len())
        .map(|i| {
            let p = result
                .value(problem, VarRef::LoadP(crate::network::LoadId(i)))
                .unwrap();
            let q = result
                .value(problem, VarRef::LoadQ(crate::network::LoadId(i)))
                .unwrap();
            (p, q)
        })
        .collect();
    let estimated_flows = model
        .line_phases()
        .iter()
        .map(|&(l, ph)| {
            let p = result.value(problem, VarRef::FlowP(l, ph)).unwrap();
            let q = result.value(problem, VarRef::FlowQ(l, ph)).unwrap();
            (p, q)
        })
        .collect();

    Ok(TopologyEstimate {
        switch_closed,
        section_energized,
        cap_on,
        estimated_loads,
        estimated_flows,
        objective: result.objective,
        nodes_explored: result.nodes_explored,
        wall_seconds: result.wall_seconds,
    })
}

/// One row of the oracle's objective table.
#[derive(Clone, Debug)]
pub struct OracleEntry {
    pub topology: Topology,
    pub cap_on: Vec<bool>,
    /// Best fixed-binary LP objective over the capacitor sweep, or None when
    /// every sweep member is infeasible.
    pub objective: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct OracleReport {
    /// Index into `table` of the arg-min entry.
    pub best: usize,
    pub table: Vec<OracleEntry>,
    /// Entries within 1e-9 of the minimum (ties flagged for reporting).
    pub ties: Vec<usize>,
}

/// Enumerate all feasible (spanning + outage) configurations, solve the
/// fixed-binary LP for each (capacitor binaries swept 0/1 when the bank
/// phase count is at most 8), and return the arg-min plus the full table.
pub fn oracle_estimate(
    model: &NetworkModel,
    meas: &MeasurementSet,
    config: &EstimateConfig,
    max_count: usize,
) -> Result<OracleReport, EstimateError> {
    let problem = build_problem(model, meas, &config.build)?;
    let topologies = model
        .enumerate_operational_topologies(true, max_count)
        .map_err(|_| EstimateError::EnumerationOverflow(max_count))?;

    let n_cap = model.cap_phases().len();
    if n_cap > 8 {
        return Err(EstimateError::EnumerationOverflow(max_count));
    }

    let mut table = Vec::with_capacity(topologies.len());
    for topology in topologies {
        let mut best: Option<(f64, Vec<bool>)> = None;
        for cap_mask in 0u32..(1 << n_cap) {
            let cap_on: Vec<bool> = (0..n_cap).map(|k| cap_mask & (1 << k) != 0).collect();
            let assignment = binary_assignment(model, &topology, &cap_on);
            let r = solve_with_fixed_binaries(&problem, &assignment, &config.solver)?;
            if r.status == SolveStatus::Optimal
                && best.as_ref().map_or(true, |(b, _)| r.objective < *b - 1e-12)
            {
                best = Some((r.objective, cap_on));
            }
        }
        let (objective, cap_on) = match best {
            Some((o, c)) => (Some(o), c),
            None => (None, vec![false; n_cap]),
        };
        table.push(OracleEntry {
            topology,
            cap_on,
            objective,
        });
    }

    let mut best = None;
    for (i, e) in table.iter().enumerate() {
        if let Some(obj) = e.objective {
            if best.map_or(true, |(_, b)| obj < b) {
                best = Some((i, obj));
            }
        }
    }
    let (best, best_obj) =
        best.ok_or_else(|| EstimateError::RadialityViolation("no feasible topology".into()))?;
    let ties = table
        .iter()
        .enumerate()
        .filter(|(i, e)| {
            *i != best && e.objective.map_or(false, |o| (o - best_obj).abs() < 1e-9)
        })
        .map(|(i, _)| i)
        .collect();
    Ok(OracleReport { best, table, ties })
}

/// Full binary assignment (switches, sections, caps) for a fixed topology.
pub fn binary_assignment(
    model: &NetworkModel,
    topology: &Topology,
    cap_on: &[bool],
) -> Vec<(VarRef, f64)> {
    let mut assignment = Vec::new();
    for (k, &sw) in model.switches().iter().enumerate() {
        assignment.push((VarRef::Switch(sw), topology.switch_closed[k] as u8 as f64));
    }
    for (s, &e) in topology.section_energized.iter().enumerate() {
        assignment.push((VarRef::Section(SectionId(s)), e as u8 as f64));
    }
    for (k, &(c, p)) in model.cap_phases().iter().enumerate() {
        assignment.push((VarRef::Cap(c, p), cap_on[k] as u8 as f64));
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::{corrupt_measurements, NoiseSpec, Placement};
    use crate::milp::tests::{four_bus_setup, FOUR_BUS};
    use crate::network::parse_network;

    fn zero_noise(seed: u64) -> NoiseSpec {
        NoiseSpec {
            load_error_pct: 0.0,
            flow_error_pct: 0.0,
            ping_error_prob: 0.0,
            seed,
        }
    }

    #[test]
    fn zero_noise_normal_scenario_recovers_exactly() {
        let (m, truth, meas) = four_bus_setup(zero_noise(100), true);
        let est = estimate(&m, &meas, &EstimateConfig::default()).unwrap();
        assert!(est.objective.abs() < 1e-7);
        assert_eq!(est.switch_closed, truth.switch_closed);
        assert_eq!(est.section_energized, truth.section_energized);
        for (i, &(p, q)) in est.estimated_loads.iter().enumerate() {
            assert!((p - truth.true_load[i].0).abs() < 1e-6);
            assert!((q - truth.true_load[i].1).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_noise_outage_scenario_identifies_dead_section() {
        let (m, truth, meas) = four_bus_setup(zero_noise(101), false);
        let est = estimate(&m, &meas, &EstimateConfig::default()).unwrap();
        assert_eq!(est.switch_closed, truth.switch_closed);
        assert_eq!(est.section_energized, truth.section_energized);
        let dead = m.section_of_bus(m.bus_by_name("b3").unwrap());
        assert!(!est.section_energized[dead.index()]);
    }

    #[test]
    fn oracle_agrees_with_milp_on_noisy_four_bus() {
        for seed in 0..10u64 {
            let noise = NoiseSpec {
                load_error_pct: 10.0,
                flow_error_pct: 1.0,
                ping_error_prob: 0.02,
                seed: 200 + seed,
            };
            let (m, _truth, meas) = four_bus_setup(noise, seed % 2 == 0);
            let cfg = EstimateConfig::default();
            let est = estimate(&m, &meas, &cfg).unwrap();
            let oracle = oracle_estimate(&m, &meas, &cfg, 10_000).unwrap();
            let best = &oracle.table[oracle.best];
            let best_obj = best.objective.unwrap();
            assert!(
                (est.objective - best_obj).abs() <= 1e-6 * (1.0 + best_obj.abs()),
                "seed {seed}: milp {} oracle {}",
                est.objective,
                best_obj
            );
            // unique minimizer -> discrete agreement
            let margin = oracle
                .table
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != oracle.best)
                .filter_map(|(_, e)| e.objective)
                .fold(f64::INFINITY, f64::min)
                - best_obj;
            if margin > 1e-4 {
                assert_eq!(est.switch_closed, best.topology.switch_closed);
                assert_eq!(est.section_energized, best.topology.section_energized);
            }
        }
    }

    #[test]
    fn all_sections_outaged_fit_is_much_worse_on_normal_data() {
        // With q = 0 a responding ping pins its section energized, so the
        // all-out assignment is infeasible outright. To expose the flow
        // mismatch, use a draw where every ping reads 0 (q close to 1), which
        // leaves the dead interpretation feasible but badly fitting.
        let mut checked = false;
        for seed in 0..40u64 {
            let noise = NoiseSpec {
                load_error_pct: 0.0,
                flow_error_pct: 0.0,
                ping_error_prob: 0.9,
                seed,
            };
            let (m, _truth, meas) = four_bus_setup(noise, true);
            if meas.ping.values().any(|&y| y == 1) {
                continue;
            }
            let cfg = EstimateConfig::default();
            let oracle = oracle_estimate(&m, &meas, &cfg, 10_000).unwrap();
            let all_out = oracle
                .table
                .iter()
                .find(|e| !e.topology.switch_closed[0])
                .unwrap();
            let best = oracle.table[oracle.best].objective.unwrap();
            // metered flow is 150 kW but the dead-section model can carry at
            // most the source-section load, so the mismatch dominates
            assert!(all_out.objective.unwrap() > best + 100.0);
            checked = true;
            break;
        }
        assert!(checked, "no seed produced all-zero pings");
    }

    #[test]
    fn responding_ping_excludes_outage_assignments() {
        let (m, _truth, meas) = four_bus_setup(zero_noise(103), true);
        let cfg = EstimateConfig::default();
        let oracle = oracle_estimate(&m, &meas, &cfg, 10_000).unwrap();
        let all_out = oracle
            .table
            .iter()
            .find(|e| !e.topology.switch_closed[0])
            .unwrap();
        assert!(all_out.objective.is_none(), "y >= ping must forbid the outage fit");
    }

    #[test]
    fn estimates_pass_independent_forest_check() {
        let (m, _truth, meas) = four_bus_setup(
            NoiseSpec {
                load_error_pct: 20.0,
                flow_error_pct: 1.0,
                ping_error_prob: 0.05,
                seed: 321,
            },
            true,
        );
        let est = estimate(&m, &meas, &EstimateConfig::default()).unwrap();
        // union-find forest check over buses
        let mut parent: Vec<usize> = (0..m.buses.len()).collect();
        fn find(p: &mut Vec<usize>, mut x: usize) -> usize {
            while p[x] != x {
                x = p[x];
            }
            x
        }
        for (i, l) in m.lines.iter().enumerate() {
            let closed = if l.is_switch {
                est.switch_closed[m.switch_ordinal(crate::network::LineId(i)).unwrap()]
            } else {
                true
            };
            if closed {
                let (a, b) = (find(&mut parent, l.from.index()), find(&mut parent, l.to.index()));
                assert_ne!(a, b, "estimate contains a cycle");
                parent[a] = b;
            }
        }
    }

    /// Two sections with near-identical demand behind one shared meter can
    /// swap under heavy noise; the estimator must still return a radial,
    /// optimal assignment rather than fail.
    #[test]
    fn ambiguous_twin_sections_stay_radial_under_noise() {
        let text = "\
bus s phases=A source
bus a phases=A
bus b phases=A
bus c phases=A
line trunk s a phases=A
line w1 a b phases=A switch normal=closed
line w2 a c phases=A switch normal=closed
load d1 b A p=100 q=20 sigp=5 sigq=2 meter
load d2 c A p=100 q=20 sigp=5 sigq=2 meter
";
        let m = parse_network(text).unwrap();
        let _ = FOUR_BUS;
        let mut swapped = 0;
        for seed in 0..12u64 {
            // truth: w1 open (section b outaged)
            let switch_closed = vec![false, true];
            let energized = m.section_energization(&switch_closed).unwrap();
            let loads: Vec<(f64, f64)> =
                m.loads.iter().map(|l| (l.forecast_p, l.forecast_q)).collect();
            let flows =
                crate::powerflow::solve_linear_flows(&m, &switch_closed, &energized, &[], &loads)
                    .unwrap();
            let truth = crate::powerflow::ScenarioTruth {
                switch_closed: switch_closed.clone(),
                section_energized: energized.clone(),
                cap_on: vec![],
                true_load: loads,
                true_flow: flows,
                outaged_sections: vec![],
            };
            let placement = Placement {
                metered_lines: vec![m.line_by_name("trunk").unwrap()],
                pinged_loads: vec![crate::network::LoadId(0), crate::network::LoadId(1)],
            };
            let noise = NoiseSpec {
                load_error_pct: 20.0,
                flow_error_pct: 5.0,
                ping_error_prob: 0.4,
                seed,
            };
            let meas = corrupt_measurements(&m, &truth, &placement, &noise).unwrap();
            let est = estimate(&m, &meas, &EstimateConfig::default()).unwrap();
            // always radial and exactly one of the twins fed when one switch closed
            let implied = m.section_energization(&est.switch_closed).unwrap();
            assert_eq!(implied, est.section_energized);
            if est.switch_closed != truth.switch_closed {
                swapped += 1;
            }
        }
        // the documented failure mode: with 40% ping error the twins are
        // sometimes confused (seeds pre-checked; at least one swap occurs)
        assert!(swapped > 0, "expected at least one twin swap across seeds");
    }
}
