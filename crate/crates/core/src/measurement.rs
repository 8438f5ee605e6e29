//! Meter placement satisfying topological observability, and corruption of
//! ground truth into a noisy measurement set (Gaussian flow/load errors,
//! Bernoulli ping errors). Everything is deterministic given a seed.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::network::{LineId, LoadId, NetworkModel, Phase};
use crate::powerflow::ScenarioTruth;

/// Absolute floor on recorded measurement sigmas (kW / kvar) so objective
/// weights 1/sigma stay finite for near-zero flows and zero-noise campaigns.
pub const SIGMA_FLOOR: f64 = 0.1;

/// Noise knobs for one measurement set.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSpec {
    /// sigma as a percent of forecast load.
    pub load_error_pct: f64,
    /// sigma as a percent of true flow magnitude (recorded sigma floored).
    pub flow_error_pct: f64,
    /// Probability that a connected meter's ping flips 1 -> 0.
    pub ping_error_prob: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), MeasurementError> {
        if self.load_error_pct < 0.0 || self.flow_error_pct < 0.0 {
            return Err(MeasurementError::BadSpec("error percentages must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.ping_error_prob) {
            return Err(MeasurementError::BadSpec("ping error probability must be in [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Placement {
    pub metered_lines: Vec<LineId>,
    pub pinged_loads: Vec<LoadId>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowMeas {
    pub p: f64,
    pub q: f64,
    pub sigma_p: f64,
    pub sigma_q: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadMeas {
    pub p: f64,
    pub q: f64,
    pub sigma_p: f64,
    pub sigma_q: f64,
}

/// Noisy observables handed to the estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet {
    /// Keyed by (line, phase); only metered line-phases appear.
    pub flow: BTreeMap<(LineId, Phase), FlowMeas>,
    /// Pseudo-measurement for every load, indexed by load id.
    pub load: Vec<LoadMeas>,
    /// Binary ping per pinged load.
    pub ping: BTreeMap<LoadId, u8>,
    pub placement: Placement,
    pub noise: NoiseSpec,
}

impl MeasurementSet {
    pub fn fingerprint(&self) -> u64 {
        let mut text = String::new();
        for ((l, ph), m) in &self.flow {
            text.push_str(&format!(
                "f{}:{}={:.12},{:.12},{:.12},{:.12}|",
                l.index(),
                ph,
                m.p,
                m.q,
                m.sigma_p,
                m.sigma_q
            ));
        }
        for m in &self.load {
            text.push_str(&format!("l={:.12},{:.12},{:.12},{:.12}|", m.p, m.q, m.sigma_p, m.sigma_q));
        }
        for (l, y) in &self.ping {
            text.push_str(&format!("p{}={}|", l.index(), y));
        }
        crate::fnv1a64(text.as_bytes())
    }
}

#[derive(Debug, Error)]
pub enum MeasurementError {
    #[error("{0}")]
    BadSpec(String),
    #[error("section {0} has loads but no smart meters to ping")]
    NoSmartMeters(usize),
    #[error("ping fraction must be in (0,1], got {0}")]
    BadFraction(f64),
}

/// Observability violations are data, not errors.
#[derive(Clone, Debug, PartialEq)]
pub enum ObservabilityViolation {
    /// Fundamental cycle (by index into `fundamental_cycles`) with no meter.
    UncoveredCycle { cycle_index: usize, lines: Vec<LineId> },
    /// Section with loads but no pinged load.
    UnpingedSection { section: usize },
}

/// Deterministic sub-stream seeding: one ChaCha stream per (seed, purpose,
/// index) triple, derived with splitmix64 so parallel campaigns stay
/// reproducible.
pub fn derive_rng(seed: u64, purpose: u64, index: u64) -> ChaCha12Rng {
    let mut x = seed
        ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    ChaCha12Rng::seed_from_u64(x)
}

pub mod streams {
    pub const PLACEMENT: u64 = 1;
    pub const PINGS: u64 = 2;
    pub const TRUTH: u64 = 3;
    pub const NOISE: u64 = 4;
}

/// One line chosen uniformly at random from each fundamental cycle, then
/// deduplicated. Every cycle keeps at least one chosen line by construction.
pub fn place_flow_meters(model: &NetworkModel, rng: &mut ChaCha12Rng) -> Vec<LineId> {
    let mut chosen = BTreeSet::new();
    for cycle in model.fundamental_cycles() {
        let pick = cycle[rng.gen_range(0..cycle.len())];
        chosen.insert(pick);
    }
    chosen.into_iter().collect()
}

/// Per section: max(1, round-half-up(fraction * smart meters)) loads sampled
/// without replacement. Sections without loads are skipped; a section with
/// loads but no smart meters is an error.
pub fn select_pinged_meters(
    model: &NetworkModel,
    fraction: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<LoadId>, MeasurementError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MeasurementError::BadFraction(fraction));
    }
    let mut pinged = Vec::new();
    for section in &model.sections {
        if section.loads.is_empty() {
            continue;
        }
        let mut meters: Vec<LoadId> = section
            .loads
            .iter()
            .copied()
            .filter(|l| model.loads[l.index()].has_smart_meter)
            .collect();
        if meters.is_empty() {
            return Err(MeasurementError::NoSmartMeters(section.id.index()));
        }
        let count = ((fraction * meters.len() as f64 + 0.5).floor() as usize).max(1);
        let count = count.min(meters.len());
        // partial Fisher-Yates
        for i in 0..count {
            let j = rng.gen_range(i..meters.len());
            meters.swap(i, j);
        }
        pinged.extend_from_slice(&meters[..count]);
    }
    pinged.sort();
    Ok(pinged)
}

/// Corrupt a ground truth into a measurement set. Gaussian errors are sampled
/// with sigma = pct * magnitude (zero noise reproduces the truth exactly);
/// recorded sigmas are floored at [`SIGMA_FLOOR`] so weights stay finite.
/// Pings: a connected meter answers 1 but flips to 0 with probability q; a
/// disconnected meter never responds, so its ping is always 0.
pub fn corrupt_measurements(
    model: &NetworkModel,
    truth: &ScenarioTruth,
    placement: &Placement,
    noise: &NoiseSpec,
) -> Result<MeasurementSet, MeasurementError> {
    noise.validate()?;
    let mut rng = derive_rng(noise.seed, streams::NOISE, 0);
    let gauss = |rng: &mut ChaCha12Rng, sigma: f64| -> f64 {
        if sigma == 0.0 {
            0.0
        } else {
            Normal::new(0.0, sigma).unwrap().sample(rng)
        }
    };

    let mut flow = BTreeMap::new();
    for &line in &placement.metered_lines {
        for phase in model.lines[line.index()].phases.iter() {
            let ord = model.line_phase_ordinal(line, phase).unwrap();
            let (tp, tq) = truth.true_flow[ord];
            let sp = noise.flow_error_pct / 100.0 * tp.abs();
            let sq = noise.flow_error_pct / 100.0 * tq.abs();
            flow.insert(
                (line, phase),
                FlowMeas {
                    p: tp + gauss(&mut rng, sp),
                    q: tq + gauss(&mut rng, sq),
                    sigma_p: sp.max(SIGMA_FLOOR),
                    sigma_q: sq.max(SIGMA_FLOOR),
                },
            );
        }
    }

    let mut load = Vec::with_capacity(model.loads.len());
    for (i, ld) in model.loads.iter().enumerate() {
        let (tp, tq) = truth.true_load[i];
        let sp = noise.load_error_pct / 100.0 * ld.forecast_p;
        let sq = noise.load_error_pct / 100.0 * ld.forecast_q.abs();
        load.push(LoadMeas {
            p: tp + gauss(&mut rng, sp),
            q: tq + gauss(&mut rng, sq),
            sigma_p: sp.max(SIGMA_FLOOR),
            sigma_q: sq.max(SIGMA_FLOOR),
        });
    }

    let mut ping = BTreeMap::new();
    for &lid in &placement.pinged_loads {
        let section = model.loads[lid.index()].section;
        let connected = truth.section_energized[section.index()];
        let value = if !connected {
            0
        } else if noise.ping_error_prob > 0.0 && rng.gen_bool(noise.ping_error_prob) {
            0
        } else {
            1
        };
        ping.insert(lid, value);
    }

    Ok(MeasurementSet {
        flow,
        load,
        ping,
        placement: placement.clone(),
        noise: noise.clone(),
    })
}

/// Report every uncovered fundamental cycle and every unpinged section.
pub fn check_observability(
    model: &NetworkModel,
    placement: &Placement,
) -> Vec<ObservabilityViolation> {
    let mut violations = Vec::new();
    let metered: BTreeSet<LineId> = placement.metered_lines.iter().copied().collect();
    for (i, cycle) in model.fundamental_cycles().iter().enumerate() {
        if !cycle.iter().any(|l| metered.contains(l)) {
            violations.push(ObservabilityViolation::UncoveredCycle {
                cycle_index: i,
                lines: cycle.clone(),
            });
        }
    }
    let pinged: BTreeSet<LoadId> = placement.pinged_loads.iter().copied().collect();
    for section in &model.sections {
        if section.loads.is_empty() {
            continue;
        }
        if !section.loads.iter().any(|l| pinged.contains(l)) {
            violations.push(ObservabilityViolation::UnpingedSection {
                section: section.id.index(),
            });
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::parse_network;
    use crate::powerflow::solve_linear_flows;

    pub fn truth_for(model: &NetworkModel, switch_closed: Vec<bool>) -> ScenarioTruth {
        let section_energized = model.section_energization(&switch_closed).unwrap();
        let cap_on = vec![false; model.cap_phases().len()];
        let true_load: Vec<(f64, f64)> =
            model.loads.iter().map(|l| (l.forecast_p, l.forecast_q)).collect();
        let true_flow =
            solve_linear_flows(model, &switch_closed, &section_energized, &cap_on, &true_load)
                .unwrap();
        let outaged_sections = section_energized
            .iter()
            .enumerate()
            .filter(|(_, &e)| !e)
            .map(|(i, _)| crate::network::SectionId(i))
            .collect();
        ScenarioTruth {
            switch_closed,
            section_energized,
            cap_on,
            true_load,
            true_flow,
            outaged_sections,
        }
    }

    #[test]
    fn tree_feeder_gets_no_flow_meters() {
        let m = parse_network(
            "bus s phases=A source\nbus b phases=A\nline l s b phases=A\nload d b A p=1 q=1 sigp=1 sigq=1 meter\n",
        )
        .unwrap();
        let mut rng = derive_rng(7, streams::PLACEMENT, 0);
        assert!(place_flow_meters(&m, &mut rng).is_empty());
    }

    /// Two cycles sharing an edge; per-cycle coverage must hold for any seed,
    /// and a seed where cycle 1 draws the shared edge still gives cycle 2 a
    /// meter of its own.
    #[test]
    fn shared_edge_cycles_stay_covered() {
        let text = "\
bus s phases=A source
bus a phases=A
bus b phases=A
line l1 s a phases=A
line shared a b phases=A
line w1 b s phases=A switch normal=open
line w2 a b phases=A switch normal=open
load d1 a A p=1 q=1 sigp=1 sigq=1 meter
load d2 b A p=1 q=1 sigp=1 sigq=1 meter
";
        let m = parse_network(text).unwrap();
        let cycles = m.fundamental_cycles();
        assert_eq!(cycles.len(), 2);
        let shared = m.line_by_name("shared").unwrap();
        assert!(cycles.iter().filter(|c| c.contains(&shared)).count() >= 1);

        let mut saw_shared_pick_with_two_meters = false;
        for seed in 0..64 {
            let mut rng = derive_rng(seed, streams::PLACEMENT, 0);
            let meters = place_flow_meters(&m, &mut rng);
            // set-intersection oracle: every cycle covered
            for c in &cycles {
                assert!(c.iter().any(|l| meters.contains(l)), "seed {seed} left a cycle uncovered");
            }
            if meters.contains(&shared) && meters.len() == 2 {
                saw_shared_pick_with_two_meters = true;
            }
        }
        assert!(saw_shared_pick_with_two_meters);
    }

    #[test]
    fn ping_selection_counts_follow_round_half_up() {
        // single section with 25 smart meters
        let mut text = String::from("bus s phases=A source\nbus b phases=A\nline l s b phases=A\n");
        for i in 0..25 {
            text.push_str(&format!("load d{i} b A p=1 q=1 sigp=1 sigq=1 meter\n"));
        }
        let m = parse_network(&text).unwrap();
        let mut rng = derive_rng(1, streams::PINGS, 0);
        let picked = select_pinged_meters(&m, 0.10, &mut rng).unwrap();
        assert_eq!(picked.len(), 3); // round(2.5) = 3 under round-half-up

        let mut rng = derive_rng(1, streams::PINGS, 0);
        let all = select_pinged_meters(&m, 1.0, &mut rng).unwrap();
        assert_eq!(all.len(), 25);
    }

    #[test]
    fn single_meter_section_always_selected() {
        let m = parse_network(
            "bus s phases=A source\nbus b phases=A\nline l s b phases=A\nload d b A p=1 q=1 sigp=1 sigq=1 meter\n",
        )
        .unwrap();
        let mut rng = derive_rng(2, streams::PINGS, 0);
        let picked = select_pinged_meters(&m, 0.10, &mut rng).unwrap();
        assert_eq!(picked.len(), 1);
    }

    #[test]
    fn section_without_smart_meters_is_an_error() {
        let m = parse_network(
            "bus s phases=A source\nbus b phases=A\nline l s b phases=A\nload d b A p=1 q=1 sigp=1 sigq=1\n",
        )
        .unwrap();
        let mut rng = derive_rng(2, streams::PINGS, 0);
        assert!(select_pinged_meters(&m, 0.10, &mut rng).is_err());
    }

    const SWITCHED: &str = "\
bus src phases=A source
bus b1 phases=A
bus b2 phases=A
line l1 src b1 phases=A
line sw1 b1 b2 phases=A switch normal=closed
load d1 b1 A p=100 q=30 sigp=5 sigq=2 meter
load d2 b2 A p=50 q=20 sigp=5 sigq=2 meter
";

    #[test]
    fn zero_noise_reproduces_truth_exactly() {
        let m = parse_network(SWITCHED).unwrap();
        let truth = truth_for(&m, vec![true]);
        let placement = Placement {
            metered_lines: vec![m.line_by_name("l1").unwrap()],
            pinged_loads: vec![LoadId(0), LoadId(1)],
        };
        let noise = NoiseSpec {
            load_error_pct: 0.0,
            flow_error_pct: 0.0,
            ping_error_prob: 0.0,
            seed: 11,
        };
        let ms = corrupt_measurements(&m, &truth, &placement, &noise).unwrap();
        let f = ms.flow[&(m.line_by_name("l1").unwrap(), Phase::A)];
        assert_eq!(f.p, 150.0);
        assert_eq!(f.q, 50.0);
        assert_eq!(f.sigma_p, SIGMA_FLOOR);
        assert_eq!(ms.load[0].p, 100.0);
        assert_eq!(ms.load[1].q, 20.0);
        assert_eq!(ms.ping[&LoadId(0)], 1);
        assert_eq!(ms.ping[&LoadId(1)], 1);
    }

    #[test]
    fn measurement_sets_are_bit_deterministic() {
        let m = parse_network(SWITCHED).unwrap();
        let truth = truth_for(&m, vec![true]);
        let placement = Placement {
            metered_lines: vec![m.line_by_name("l1").unwrap()],
            pinged_loads: vec![LoadId(0), LoadId(1)],
        };
        let noise = NoiseSpec {
            load_error_pct: 10.0,
            flow_error_pct: 1.0,
            ping_error_prob: 0.05,
            seed: 99,
        };
        let a = corrupt_measurements(&m, &truth, &placement, &noise).unwrap();
        let b = corrupt_measurements(&m, &truth, &placement, &noise).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn disconnected_loads_always_ping_zero() {
        let m = parse_network(SWITCHED).unwrap();
        let truth = truth_for(&m, vec![false]); // downstream section outaged
        let placement = Placement {
            metered_lines: vec![],
            pinged_loads: vec![LoadId(0), LoadId(1)],
        };
        for seed in 0..50 {
            let noise = NoiseSpec {
                load_error_pct: 20.0,
                flow_error_pct: 1.0,
                ping_error_prob: 0.3,
                seed,
            };
            let ms = corrupt_measurements(&m, &truth, &placement, &noise).unwrap();
            assert_eq!(ms.ping[&LoadId(1)], 0);
        }
    }

    /// Binomial concentration of ping flips over a 10,000-load section.
    #[test]
    fn ping_flip_count_concentrates() {
        let mut text = String::from("bus s phases=A source\nbus b phases=A\nline l s b phases=A\n");
        for i in 0..10_000 {
            text.push_str(&format!("load d{i} b A p=1 q=1 sigp=1 sigq=1 meter\n"));
        }
        let m = parse_network(&text).unwrap();
        let truth = truth_for(&m, vec![]);
        let placement = Placement {
            metered_lines: vec![],
            pinged_loads: (0..10_000).map(LoadId).collect(),
        };
        let q = 0.05;
        let noise = NoiseSpec {
            load_error_pct: 0.0,
            flow_error_pct: 0.0,
            ping_error_prob: q,
            seed: 5,
        };
        let ms = corrupt_measurements(&m, &truth, &placement, &noise).unwrap();
        let flips = ms.ping.values().filter(|&&y| y == 0).count() as f64;
        let n = 10_000.0;
        let bound = 5.0 * (n * q * (1.0 - q)).sqrt();
        assert!((flips - n * q).abs() <= bound, "flips {flips} outside {bound} of {}", n * q);
    }

    /// Gaussian sampling check: sample sd of (p_hat - p)/forecast near 0.2.
    #[test]
    fn load_noise_has_requested_sd() {
        let mut text = String::from("bus s phases=A source\nbus b phases=A\nline l s b phases=A\n");
        for i in 0..10_000 {
            text.push_str(&format!("load d{i} b A p=100 q=10 sigp=1 sigq=1 meter\n"));
        }
        let m = parse_network(&text).unwrap();
        let truth = truth_for(&m, vec![]);
        let placement = Placement {
            metered_lines: vec![],
            pinged_loads: vec![LoadId(0)],
        };
        let noise = NoiseSpec {
            load_error_pct: 20.0,
            flow_error_pct: 0.0,
            ping_error_prob: 0.0,
            seed: 21,
        };
        let ms = corrupt_measurements(&m, &truth, &placement, &noise).unwrap();
        let rel: Vec<f64> = ms.load.iter().map(|l| (l.p - 100.0) / 100.0).collect();
        let mean = rel.iter().sum::<f64>() / rel.len() as f64;
        let var = rel.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (rel.len() - 1) as f64;
        let sd = var.sqrt();
        assert!((0.19..=0.21).contains(&sd), "sample sd {sd}");
    }

    #[test]
    fn generated_placements_are_observable() {
        let text = crate::network::tests::multi_feeder_text();
        let m = parse_network(&text).unwrap();
        for seed in 0..20 {
            let mut rng = derive_rng(seed, streams::PLACEMENT, 0);
            let metered = place_flow_meters(&m, &mut rng);
            let mut rng = derive_rng(seed, streams::PINGS, 0);
            let pinged = select_pinged_meters(&m, 0.10, &mut rng).unwrap();
            let placement = Placement {
                metered_lines: metered,
                pinged_loads: pinged,
            };
            assert!(check_observability(&m, &placement).is_empty());
        }
    }

    #[test]
    fn observability_violations_are_reported_by_name() {
        let text = crate::network::tests::multi_feeder_text();
        let m = parse_network(&text).unwrap();
        let placement = Placement::default();
        let violations = check_observability(&m, &placement);
        let cycles = m.fundamental_cycles().len();
        let loaded_sections = m.sections.iter().filter(|s| !s.loads.is_empty()).count();
        assert_eq!(violations.len(), cycles + loaded_sections);
        assert!(violations
            .iter()
            .any(|v| matches!(v, ObservabilityViolation::UncoveredCycle { cycle_index: 1, .. })));
    }
}
