//! Ground-truth per-phase line flows for a given operating point, using the
//! lossless linearized three-phase flow model, plus a loss-injection knob
//! that inflates sending-end flows to emulate R/X-driven losses.

use thiserror::Error;

use crate::network::{BusId, LineId, NetworkModel, Phase, SectionId, TopologyError};

/// One ground-truth operating point.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioTruth {
    /// Indexed by switch ordinal.
    pub switch_closed: Vec<bool>,
    /// Indexed by section id.
    pub section_energized: Vec<bool>,
    /// Indexed by cap-phase ordinal.
    pub cap_on: Vec<bool>,
    /// (p kW, q kvar) per load, indexed by load id.
    pub true_load: Vec<(f64, f64)>,
    /// (P kW, Q kvar) per line-phase ordinal; sign is positive from -> to.
    pub true_flow: Vec<(f64, f64)>,
    /// Section ids that are de-energized (outaged), in ascending order.
    pub outaged_sections: Vec<SectionId>,
}

impl ScenarioTruth {
    pub fn fingerprint(&self) -> u64 {
        let mut text = String::new();
        for (k, &c) in self.switch_closed.iter().enumerate() {
            text.push_str(&format!("s{k}={}|", c as u8));
        }
        for (s, &e) in self.section_energized.iter().enumerate() {
            text.push_str(&format!("y{s}={}|", e as u8));
        }
        for (c, &on) in self.cap_on.iter().enumerate() {
            text.push_str(&format!("c{c}={}|", on as u8));
        }
        for &(p, q) in &self.true_load {
            text.push_str(&format!("{p:.9},{q:.9}|"));
        }
        crate::fnv1a64(text.as_bytes())
    }
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("infeasible status set: {0}")]
    Infeasible(TopologyError),
    #[error("section statuses inconsistent with switch statuses")]
    InconsistentStatus,
    #[error("negative load {0} in truth generation")]
    NegativeLoad(String),
    #[error("phase {phase} demand of {demand} kW/kvar cannot cross line '{line}' (phase not carried)")]
    PhaseDiscontinuity {
        line: String,
        phase: Phase,
        demand: f64,
    },
    #[error("loss fraction must be in [0,1)")]
    BadLossFraction,
}

/// Per-(bus,phase) net injection: consumed P and Q (Q net of connected caps).
fn net_injections(
    model: &NetworkModel,
    section_energized: &[bool],
    cap_on: &[bool],
    true_load: &[(f64, f64)],
) -> Vec<[(f64, f64); 3]> {
    let mut inj = vec![[(0.0, 0.0); 3]; model.buses.len()];
    for (i, load) in model.loads.iter().enumerate() {
        if !section_energized[load.section.index()] {
            continue;
        }
        let (p, q) = true_load[i];
        let cell = &mut inj[load.bus.index()][load.phase.index()];
        cell.0 += p;
        cell.1 += q;
    }
    for (k, &(cap, phase)) in model.cap_phases().iter().enumerate() {
        let bank = &model.caps[cap.index()];
        if !section_energized[model.section_of_bus(bank.bus).index()] {
            continue;
        }
        if cap_on[k] {
            inj[bank.bus.index()][phase.index()].1 -= bank.rated(phase);
        }
    }
    inj
}

struct Trees {
    /// parent line of each bus (None for roots / de-energized buses)
    parent_line: Vec<Option<LineId>>,
    /// buses in BFS order from the roots (energized buses only)
    order: Vec<BusId>,
}

fn build_trees(
    model: &NetworkModel,
    switch_closed: &[bool],
    section_energized: &[bool],
) -> Result<Trees, FlowError> {
    let implied = model
        .section_energization(switch_closed)
        .map_err(FlowError::Infeasible)?;
    if implied != section_energized {
        return Err(FlowError::InconsistentStatus);
    }
    let n = model.buses.len();
    let mut parent_line = vec![None; n];
    let mut energized_bus = vec![false; n];
    let mut order = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for &src in &model.source_buses {
        if section_energized[model.section_of_bus(src).index()] {
            energized_bus[src.index()] = true;
            order.push(src);
            queue.push_back(src);
        }
    }
    while let Some(u) = queue.pop_front() {
        for &line in model.lines_at(u) {
            let seg = &model.lines[line.index()];
            let closed = if seg.is_switch {
                switch_closed[model.switch_ordinal(line).unwrap()]
            } else {
                true
            };
            if !closed {
                continue;
            }
            let v = model.other_end(line, u);
            if !energized_bus[v.index()] {
                energized_bus[v.index()] = true;
                parent_line[v.index()] = Some(line);
                order.push(v);
                queue.push_back(v);
            }
        }
    }
    Ok(Trees { parent_line, order })
}

/// Lossless linearized flows: for every energized non-source bus and phase,
/// inflow equals consumed load plus outflow, computed by one reverse
/// topological accumulation from the leaves to the sources. Flows on open
/// switches and de-energized lines are exactly zero.
pub fn solve_linear_flows(
    model: &NetworkModel,
    switch_closed: &[bool],
    section_energized: &[bool],
    cap_on: &[bool],
    true_load: &[(f64, f64)],
) -> Result<Vec<(f64, f64)>, FlowError> {
    accumulate_flows(model, switch_closed, section_energized, cap_on, true_load, false)
}

/// Same traversal with per-line loss division: receiving-end power equals
/// sending-end times (1 - loss_fraction), so upstream sending flows are
/// inflated. Returns the flows (sending-end values) and the total injected
/// loss as a percent of substation P demand.
pub fn inject_losses(
    model: &NetworkModel,
    switch_closed: &[bool],
    section_energized: &[bool],
    cap_on: &[bool],
    true_load: &[(f64, f64)],
) -> Result<(Vec<(f64, f64)>, f64), FlowError> {
    let flows = accumulate_flows(model, switch_closed, section_energized, cap_on, true_load, true)?;
    // Loss percent: sum over lines of (sending - receiving).P divided by
    // total P leaving the source buses.
    let mut loss = 0.0;
    let mut substation = 0.0;
    for (k, &(line, _)) in model.line_phases().iter().enumerate() {
        let seg = &model.lines[line.index()];
        let sending = flows[k].0;
        loss += sending.abs() * seg.loss_fraction;
        let from_src = model.buses[seg.from.index()].is_source;
        let to_src = model.buses[seg.to.index()].is_source;
        if from_src && sending > 0.0 {
            substation += sending;
        } else if to_src && sending < 0.0 {
            substation += -sending;
        }
    }
    let pct = if substation > 0.0 {
        100.0 * loss / substation
    } else {
        0.0
    };
    Ok((flows, pct))
}

fn accumulate_flows(
    model: &NetworkModel,
    switch_closed: &[bool],
    section_energized: &[bool],
    cap_on: &[bool],
    true_load: &[(f64, f64)],
    with_losses: bool,
) -> Result<Vec<(f64, f64)>, FlowError> {
    for (i, &(p, _)) in true_load.iter().enumerate() {
        if p < 0.0 {
            return Err(FlowError::NegativeLoad(model.loads[i].name.clone()));
        }
    }
    if with_losses && model.lines.iter().any(|l| !(0.0..1.0).contains(&l.loss_fraction)) {
        return Err(FlowError::BadLossFraction);
    }
    let trees = build_trees(model, switch_closed, section_energized)?;
    let inj = net_injections(model, section_energized, cap_on, true_load);

    // subtree[bus][phase] = power that must arrive at `bus` for it and its
    // subtree, i.e. local injection + sending-end flows of child lines.
    let mut subtree: Vec<[(f64, f64); 3]> = inj;
    let mut flows = vec![(0.0, 0.0); model.line_phases().len()];

    for &bus in trees.order.iter().rev() {
        let Some(line) = trees.parent_line[bus.index()] else {
            continue; // root
        };
        let seg = &model.lines[line.index()];
        let parent = model.other_end(line, bus);
        let factor = if with_losses {
            1.0 / (1.0 - seg.loss_fraction)
        } else {
            1.0
        };
        for phase in crate::network::PHASES {
            let (p, q) = subtree[bus.index()][phase.index()];
            if p == 0.0 && q == 0.0 {
                continue;
            }
            if !seg.phases.contains(phase) {
                return Err(FlowError::PhaseDiscontinuity {
                    line: seg.name.clone(),
                    phase,
                    demand: p.abs().max(q.abs()),
                });
            }
            let sending = (p * factor, q * factor);
            let ord = model.line_phase_ordinal(line, phase).unwrap();
            // Stored sign convention: positive from -> to.
            flows[ord] = if seg.from == parent {
                sending
            } else {
                (-sending.0, -sending.1)
            };
            let up = &mut subtree[parent.index()][phase.index()];
            up.0 += sending.0;
            up.1 += sending.1;
        }
    }
    Ok(flows)
}

/// Clone the model with a uniform loss fraction on every line.
pub fn with_uniform_loss(model: &NetworkModel, fraction: f64) -> NetworkModel {
    let mut m = model.clone();
    for l in &mut m.lines {
        l.loss_fraction = fraction;
    }
    m
}

/// Bisect the uniform loss fraction so that the injected loss for the given
/// operating point hits `target_pct` percent of substation demand.
pub fn uniform_loss_for_target(
    model: &NetworkModel,
    switch_closed: &[bool],
    section_energized: &[bool],
    cap_on: &[bool],
    true_load: &[(f64, f64)],
    target_pct: f64,
) -> Result<f64, FlowError> {
    let mut lo = 0.0f64;
    let mut hi = 0.5f64;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let m = with_uniform_loss(model, mid);
        let (_, pct) = inject_losses(&m, switch_closed, section_energized, cap_on, true_load)?;
        if pct < target_pct {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::parse_network;

    const CHAIN: &str = "\
bus src phases=A source
bus b1 phases=A
bus b2 phases=A
line l1 src b1 phases=A
line l2 b1 b2 phases=A
load d1 b1 A p=100 q=30 sigp=5 sigq=2 meter
load d2 b2 A p=50 q=40 sigp=5 sigq=2 meter
cap c1 b2 qa=50 qb=0 qc=0
";

    #[test]
    fn chain_flows_follow_conservation() {
        let m = parse_network(CHAIN).unwrap();
        let loads: Vec<(f64, f64)> = m.loads.iter().map(|l| (l.forecast_p, l.forecast_q)).collect();
        let flows = solve_linear_flows(&m, &[], &[true], &[false], &loads).unwrap();
        let l1 = m.line_phase_ordinal(m.line_by_name("l1").unwrap(), Phase::A).unwrap();
        let l2 = m.line_phase_ordinal(m.line_by_name("l2").unwrap(), Phase::A).unwrap();
        assert_eq!(flows[l1].0, 150.0);
        assert_eq!(flows[l2].0, 50.0);
    }

    #[test]
    fn capacitor_reverses_reactive_flow() {
        let m = parse_network(CHAIN).unwrap();
        let loads: Vec<(f64, f64)> = m.loads.iter().map(|l| (l.forecast_p, l.forecast_q)).collect();
        let flows = solve_linear_flows(&m, &[], &[true], &[true], &loads).unwrap();
        let l2 = m.line_phase_ordinal(m.line_by_name("l2").unwrap(), Phase::A).unwrap();
        // q load 40 kvar minus the connected 50 kvar bank
        assert!((flows[l2].1 - (40.0 - 50.0)).abs() < 1e-12);
        let l1 = m.line_phase_ordinal(m.line_by_name("l1").unwrap(), Phase::A).unwrap();
        assert!((flows[l1].1 - (30.0 + 40.0 - 50.0)).abs() < 1e-12);
    }

    const SWITCHED: &str = "\
bus src phases=A source
bus b1 phases=A
bus b2 phases=A
bus b3 phases=A
line l1 src b1 phases=A
line sw1 b1 b2 phases=A switch normal=closed
line l2 b2 b3 phases=A
load d1 b1 A p=100 q=30 sigp=5 sigq=2 meter
load d2 b2 A p=40 q=10 sigp=5 sigq=2 meter
load d3 b3 A p=50 q=20 sigp=5 sigq=2 meter
";

    #[test]
    fn outaged_section_has_zero_flows_and_matches_downstream_sum_oracle() {
        let m = parse_network(SWITCHED).unwrap();
        let loads: Vec<(f64, f64)> = m.loads.iter().map(|l| (l.forecast_p, l.forecast_q)).collect();

        // switch open: downstream section outaged
        let energized = m.section_energization(&[false]).unwrap();
        let flows = solve_linear_flows(&m, &[false], &energized, &[], &loads).unwrap();
        let sw = m.line_phase_ordinal(m.line_by_name("sw1").unwrap(), Phase::A).unwrap();
        let l2 = m.line_phase_ordinal(m.line_by_name("l2").unwrap(), Phase::A).unwrap();
        let l1 = m.line_phase_ordinal(m.line_by_name("l1").unwrap(), Phase::A).unwrap();
        assert_eq!(flows[sw], (0.0, 0.0));
        assert_eq!(flows[l2], (0.0, 0.0));
        assert_eq!(flows[l1], (100.0, 30.0));

        // switch closed: brute-force oracle sums loads over the downstream
        // set of every line (BFS on the tree with the line removed).
        let energized = m.section_energization(&[true]).unwrap();
        let flows = solve_linear_flows(&m, &[true], &energized, &[], &loads).unwrap();
        for (li, seg) in m.lines.iter().enumerate() {
            let mut seen = vec![false; m.buses.len()];
            let mut stack = vec![m.source_buses[0].index()];
            seen[m.source_buses[0].index()] = true;
            while let Some(u) = stack.pop() {
                for &l in m.lines_at(BusId(u)) {
                    if l.index() == li {
                        continue;
                    }
                    let v = m.other_end(l, BusId(u)).index();
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            let mut expect = (0.0, 0.0);
            for (i, load) in m.loads.iter().enumerate() {
                if !seen[load.bus.index()] {
                    expect.0 += loads[i].0;
                    expect.1 += loads[i].1;
                }
            }
            let downstream_is_to = !seen[seg.to.index()];
            let ord = m.line_phase_ordinal(LineId(li), Phase::A).unwrap();
            let got = flows[ord];
            let want = if downstream_is_to {
                expect
            } else {
                (-expect.0, -expect.1)
            };
            assert!((got.0 - want.0).abs() < 1e-12 && (got.1 - want.1).abs() < 1e-12);
        }
    }

    #[test]
    fn conservation_holds_exactly_at_every_bus() {
        let m = parse_network(SWITCHED).unwrap();
        let loads: Vec<(f64, f64)> = m.loads.iter().map(|l| (l.forecast_p, l.forecast_q)).collect();
        let energized = m.section_energization(&[true]).unwrap();
        let flows = solve_linear_flows(&m, &[true], &energized, &[], &loads).unwrap();
        for (b, bus) in m.buses.iter().enumerate() {
            if bus.is_source {
                continue;
            }
            let mut balance = 0.0;
            for &l in m.lines_at(BusId(b)) {
                if let Some(ord) = m.line_phase_ordinal(l, Phase::A) {
                    let seg = &m.lines[l.index()];
                    if seg.to.index() == b {
                        balance += flows[ord].0;
                    } else {
                        balance -= flows[ord].0;
                    }
                }
            }
            for (i, load) in m.loads.iter().enumerate() {
                if load.bus.index() == b {
                    balance -= loads[i].0;
                }
            }
            assert_eq!(balance, 0.0);
        }
    }

    #[test]
    fn adding_a_load_never_decreases_upstream_flow() {
        let m = parse_network(SWITCHED).unwrap();
        let mut loads: Vec<(f64, f64)> =
            m.loads.iter().map(|l| (l.forecast_p, l.forecast_q)).collect();
        let energized = m.section_energization(&[true]).unwrap();
        let base = solve_linear_flows(&m, &[true], &energized, &[], &loads).unwrap();
        loads[2].0 += 25.0; // d3 at the leaf
        let more = solve_linear_flows(&m, &[true], &energized, &[], &loads).unwrap();
        for k in 0..m.line_phases().len() {
            assert!(more[k].0.abs() >= base[k].0.abs() - 1e-12);
        }
    }

    #[test]
    fn zero_loss_injection_is_identity() {
        let m = parse_network(SWITCHED).unwrap();
        let loads: Vec<(f64, f64)> = m.loads.iter().map(|l| (l.forecast_p, l.forecast_q)).collect();
        let energized = m.section_energization(&[true]).unwrap();
        let lossless = solve_linear_flows(&m, &[true], &energized, &[], &loads).unwrap();
        let (lossy, pct) = inject_losses(&m, &[true], &energized, &[], &loads).unwrap();
        assert_eq!(lossless, lossy);
        assert_eq!(pct, 0.0);
    }

    #[test]
    fn two_line_cascade_matches_closed_form() {
        let text = "\
bus src phases=A source
bus b1 phases=A
bus b2 phases=A
line l1 src b1 phases=A loss=0.1
line l2 b1 b2 phases=A loss=0.1
load d1 b2 A p=100 q=0 sigp=1 sigq=1 meter
";
        let m = parse_network(text).unwrap();
        let loads = vec![(100.0, 0.0)];
        let (flows, pct) = inject_losses(&m, &[], &[true], &[], &loads).unwrap();
        let l1 = m.line_phase_ordinal(m.line_by_name("l1").unwrap(), Phase::A).unwrap();
        let l2 = m.line_phase_ordinal(m.line_by_name("l2").unwrap(), Phase::A).unwrap();
        assert!((flows[l2].0 - 100.0 / 0.9).abs() < 1e-9);
        assert!((flows[l1].0 - 100.0 / (0.9 * 0.9)).abs() < 1e-9);
        // forward-propagation oracle for the loss percent
        let sending = 100.0 / (0.9 * 0.9);
        let expected_pct = 100.0 * (sending - 100.0) / sending;
        assert!((pct - expected_pct).abs() < 1e-9);
    }

    #[test]
    fn loss_report_consistent_with_flow_differences() {
        let m0 = parse_network(SWITCHED).unwrap();
        let m = with_uniform_loss(&m0, 0.02);
        let loads: Vec<(f64, f64)> = m.loads.iter().map(|l| (l.forecast_p, l.forecast_q)).collect();
        let energized = m.section_energization(&[true]).unwrap();
        let (flows, pct) = inject_losses(&m, &[true], &energized, &[], &loads).unwrap();
        let mut diff_sum = 0.0;
        let mut substation = 0.0;
        for (k, &(line, _)) in m.line_phases().iter().enumerate() {
            let seg = &m.lines[line.index()];
            let sending = flows[k].0.abs();
            diff_sum += sending * seg.loss_fraction;
            if m.buses[seg.from.index()].is_source || m.buses[seg.to.index()].is_source {
                substation += sending;
            }
        }
        let expected = 100.0 * diff_sum / substation;
        assert!((pct - expected).abs() < 1e-9 * expected.max(1.0));
    }

    #[test]
    fn uniform_loss_calibration_hits_target() {
        let m = parse_network(SWITCHED).unwrap();
        let loads: Vec<(f64, f64)> = m.loads.iter().map(|l| (l.forecast_p, l.forecast_q)).collect();
        let energized = m.section_energization(&[true]).unwrap();
        let f = uniform_loss_for_target(&m, &[true], &energized, &[], &loads, 4.25).unwrap();
        let lossy_model = with_uniform_loss(&m, f);
        let (_, pct) = inject_losses(&lossy_model, &[true], &energized, &[], &loads).unwrap();
        assert!((pct - 4.25).abs() < 1e-6, "calibrated to {pct}%");
    }
}
