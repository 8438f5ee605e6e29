//! Name-based JSON and CSV serialization of the core types: scenario truths,
//! measurement sets, estimates, and experiment reports. Keys use bus / line /
//! load / cap names from the network file so documents survive reparsing;
//! section ids are positional (their derivation from the file is canonical).
//!
//! All output is byte-deterministic: ordered maps, shortest float repr.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::TopologyEstimate;
use crate::experiment::ExperimentReport;
use crate::measurement::{FlowMeas, LoadMeas, MeasurementSet, NoiseSpec, Placement};
use crate::milp::Tag;
use crate::network::{NetworkModel, Phase, SectionId};
use crate::powerflow::ScenarioTruth;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown {kind} '{name}'")]
    UnknownName { kind: &'static str, name: String },
    #[error("document does not match the model: {0}")]
    Inconsistent(String),
}

fn phase_key(name: &str, phase: Phase) -> String {
    format!("{name}:{phase}")
}

fn split_phase_key<'a>(key: &'a str) -> Result<(&'a str, Phase), IoError> {
    let (name, ph) = key.rsplit_once(':').ok_or_else(|| IoError::Inconsistent(
        format!("key '{key}' is not of the form name:phase"),
    ))?;
    let phase = (ph.len() == 1)
        .then(|| Phase::from_letter(ph.chars().next().unwrap()))
        .flatten()
        .ok_or_else(|| IoError::Inconsistent(format!("bad phase in key '{key}'")))?;
    Ok((name, phase))
}

#[derive(Serialize, Deserialize)]
struct PqDto {
    p: f64,
    q: f64,
}

#[derive(Serialize, Deserialize)]
struct TruthDto {
    switches: BTreeMap<String, u8>,
    sections: Vec<u8>,
    caps: BTreeMap<String, u8>,
    loads: BTreeMap<String, PqDto>,
    flows: BTreeMap<String, PqDto>,
    outaged_sections: Vec<usize>,
}

pub fn truth_to_json(model: &NetworkModel, truth: &ScenarioTruth) -> String {
    let dto = TruthDto {
        switches: model
            .switches()
            .iter()
            .enumerate()
            .map(|(k, &sw)| (model.lines[sw.index()].name.clone(), truth.switch_closed[k] as u8))
            .collect(),
        sections: truth.section_energized.iter().map(|&e| e as u8).collect(),
        caps: model
            .cap_phases()
            .iter()
            .enumerate()
            .map(|(k, &(c, p))| {
                (
                    phase_key(&model.caps[c.index()].name, p),
                    truth.cap_on[k] as u8,
                )
            })
            .collect(),
        loads: model
            .loads
            .iter()
            .enumerate()
            .map(|(i, l)| {
                (
                    l.name.clone(),
                    PqDto {
                        p: truth.true_load[i].0,
                        q: truth.true_load[i].1,
                    },
                )
            })
            .collect(),
        flows: model
            .line_phases()
            .iter()
            .enumerate()
            .map(|(k, &(l, p))| {
                (
                    phase_key(&model.lines[l.index()].name, p),
                    PqDto {
                        p: truth.true_flow[k].0,
                        q: truth.true_flow[k].1,
                    },
                )
            })
            .collect(),
        outaged_sections: truth.outaged_sections.iter().map(|s| s.index()).collect(),
    };
    serde_json::to_string_pretty(&dto).expect("serializable") + "\n"
}

pub fn truth_from_json(model: &NetworkModel, text: &str) -> Result<ScenarioTruth, IoError> {
    let dto: TruthDto = serde_json::from_str(text)?;
    let mut switch_closed = vec![false; model.switches().len()];
    for (name, v) in &dto.switches {
        let line = model.line_by_name(name).ok_or_else(|| IoError::UnknownName {
            kind: "switch",
            name: name.clone(),
        })?;
        let ord = model
            .switch_ordinal(line)
            .ok_or_else(|| IoError::Inconsistent(format!("line '{name}' is not a switch")))?;
        switch_closed[ord] = *v != 0;
    }
    if dto.sections.len() != model.sections.len() {
        return Err(IoError::Inconsistent(format!(
            "{} sections in document, {} in model",
            dto.sections.len(),
            model.sections.len()
        )));
    }
    let section_energized: Vec<bool> = dto.sections.iter().map(|&e| e != 0).collect();
    let mut cap_on = vec![false; model.cap_phases().len()];
    for (key, v) in &dto.caps {
        let (name, phase) = split_phase_key(key)?;
        let idx = model
            .cap_phases()
            .iter()
            .position(|&(c, p)| model.caps[c.index()].name == name && p == phase)
            .ok_or_else(|| IoError::UnknownName {
                kind: "cap phase",
                name: key.clone(),
            })?;
        cap_on[idx] = *v != 0;
    }
    let mut true_load = vec![(0.0, 0.0); model.loads.len()];
    for (name, pq) in &dto.loads {
        let lid = model.load_by_name(name).ok_or_else(|| IoError::UnknownName {
            kind: "load",
            name: name.clone(),
        })?;
        true_load[lid.index()] = (pq.p, pq.q);
    }
    let mut true_flow = vec![(0.0, 0.0); model.line_phases().len()];
    for (key, pq) in &dto.flows {
        let (name, phase) = split_phase_key(key)?;
        let line = model.line_by_name(name).ok_or_else(|| IoError::UnknownName {
            kind: "line",
            name: name.to_string(),
        })?;
        let ord = model
            .line_phase_ordinal(line, phase)
            .ok_or_else(|| IoError::Inconsistent(format!("line '{name}' lacks phase {phase}")))?;
        true_flow[ord] = (pq.p, pq.q);
    }
    Ok(ScenarioTruth {
        switch_closed,
        section_energized,
        cap_on,
        true_load,
        true_flow,
        outaged_sections: dto.outaged_sections.into_iter().map(SectionId).collect(),
    })
}

#[derive(Serialize, Deserialize)]
struct MeasDto {
    flows: BTreeMap<String, FlowDto>,
    loads: BTreeMap<String, FlowDto>,
    pings: BTreeMap<String, u8>,
    placement: PlacementDto,
    noise_spec: NoiseSpec,
}

#[derive(Serialize, Deserialize)]
struct FlowDto {
    p: f64,
    q: f64,
    sigma_p: f64,
    sigma_q: f64,
}

#[derive(Serialize, Deserialize)]
struct PlacementDto {
    metered_lines: Vec<String>,
    pinged_loads: Vec<String>,
}

pub fn measurements_to_json(model: &NetworkModel, meas: &MeasurementSet) -> String {
    let dto = MeasDto {
        flows: meas
            .flow
            .iter()
            .map(|(&(l, p), fm)| {
                (
                    phase_key(&model.lines[l.index()].name, p),
                    FlowDto {
                        p: fm.p,
                        q: fm.q,
                        sigma_p: fm.sigma_p,
                        sigma_q: fm.sigma_q,
                    },
                )
            })
            .collect(),
        loads: meas
            .load
            .iter()
            .enumerate()
            .map(|(i, lm)| {
                (
                    model.loads[i].name.clone(),
                    FlowDto {
                        p: lm.p,
                        q: lm.q,
                        sigma_p: lm.sigma_p,
                        sigma_q: lm.sigma_q,
                    },
                )
            })
            .collect(),
        pings: meas
            .ping
            .iter()
            .map(|(&l, &y)| (model.loads[l.index()].name.clone(), y))
            .collect(),
        placement: PlacementDto {
            metered_lines: meas
                .placement
                .metered_lines
                .iter()
                .map(|l| model.lines[l.index()].name.clone())
                .collect(),
            pinged_loads: meas
                .placement
                .pinged_loads
                .iter()
                .map(|l| model.loads[l.index()].name.clone())
                .collect(),
        },
        noise_spec: meas.noise.clone(),
    };
    serde_json::to_string_pretty(&dto).expect("serializable") + "\n"
}

pub fn measurements_from_json(model: &NetworkModel, text: &str) -> Result<MeasurementSet, IoError> {
    let dto: MeasDto = serde_json::from_str(text)?;
    let mut flow = BTreeMap::new();
    for (key, fm) in &dto.flows {
        let (name, phase) = split_phase_key(key)?;
        let line = model.line_by_name(name).ok_or_else(|| IoError::UnknownName {
            kind: "line",
            name: name.to_string(),
        })?;
        if model.line_phase_ordinal(line, phase).is_none() {
            return Err(IoError::Inconsistent(format!("line '{name}' lacks phase {phase}")));
        }
        flow.insert(
            (line, phase),
            FlowMeas {
                p: fm.p,
                q: fm.q,
                sigma_p: fm.sigma_p,
                sigma_q: fm.sigma_q,
            },
        );
    }
    if dto.loads.len() != model.loads.len() {
        return Err(IoError::Inconsistent(format!(
            "{} load measurements for {} loads",
            dto.loads.len(),
            model.loads.len()
        )));
    }
    let mut load = vec![
        LoadMeas {
            p: 0.0,
            q: 0.0,
            sigma_p: 1.0,
            sigma_q: 1.0
        };
        model.loads.len()
    ];
    for (name, lm) in &dto.loads {
        let lid = model.load_by_name(name).ok_or_else(|| IoError::UnknownName {
            kind: "load",
            name: name.clone(),
        })?;
        load[lid.index()] = LoadMeas {
            p: lm.p,
            q: lm.q,
            sigma_p: lm.sigma_p,
            sigma_q: lm.sigma_q,
        };
    }
    let mut ping = BTreeMap::new();
    for (name, y) in &dto.pings {
        let lid = model.load_by_name(name).ok_or_else(|| IoError::UnknownName {
            kind: "load",
            name: name.clone(),
        })?;
        ping.insert(lid, *y);
    }
    let mut metered_lines = Vec::new();
    for name in &dto.placement.metered_lines {
        metered_lines.push(model.line_by_name(name).ok_or_else(|| IoError::UnknownName {
            kind: "line",
            name: name.clone(),
        })?);
    }
    let mut pinged_loads = Vec::new();
    for name in &dto.placement.pinged_loads {
        pinged_loads.push(model.load_by_name(name).ok_or_else(|| IoError::UnknownName {
            kind: "load",
            name: name.clone(),
        })?);
    }
    Ok(MeasurementSet {
        flow,
        load,
        ping,
        placement: Placement {
            metered_lines,
            pinged_loads,
        },
        noise: dto.noise_spec,
    })
}

#[derive(Serialize)]
struct EstimateDto {
    switches: BTreeMap<String, u8>,
    sections: Vec<u8>,
    caps: BTreeMap<String, u8>,
    loads: BTreeMap<String, PqDto>,
    flows: BTreeMap<String, PqDto>,
    objective: f64,
    nodes_explored: usize,
    residuals: BTreeMap<String, f64>,
}

/// Estimate JSON: statuses, recovered state, objective, and the max
/// constraint residual per tag family as a solution-quality summary.
pub fn estimate_to_json(
    model: &NetworkModel,
    est: &TopologyEstimate,
    residuals: &[(Tag, f64)],
) -> String {
    let dto = EstimateDto {
        switches: model
            .switches()
            .iter()
            .enumerate()
            .map(|(k, &sw)| (model.lines[sw.index()].name.clone(), est.switch_closed[k] as u8))
            .collect(),
        sections: est.section_energized.iter().map(|&e| e as u8).collect(),
        caps: model
            .cap_phases()
            .iter()
            .enumerate()
            .map(|(k, &(c, p))| {
                (phase_key(&model.caps[c.index()].name, p), est.cap_on[k] as u8)
            })
            .collect(),
        loads: model
            .loads
            .iter()
            .enumerate()
            .map(|(i, l)| {
                (
                    l.name.clone(),
                    PqDto {
                        p: est.estimated_loads[i].0,
                        q: est.estimated_loads[i].1,
                    },
                )
            })
            .collect(),
        flows: model
            .line_phases()
            .iter()
            .enumerate()
            .map(|(k, &(l, p))| {
                (
                    phase_key(&model.lines[l.index()].name, p),
                    PqDto {
                        p: est.estimated_flows[k].0,
                        q: est.estimated_flows[k].1,
                    },
                )
            })
            .collect(),
        objective: est.objective,
        nodes_explored: est.nodes_explored,
        residuals: residuals
            .iter()
            .map(|(t, v)| (t.to_string(), *v))
            .collect(),
    };
    serde_json::to_string_pretty(&dto).expect("serializable") + "\n"
}

// ---------------------------------------------------------------------------
// Experiment report artifacts (wall times intentionally omitted so the
// bytes are identical across runs and worker counts)

pub fn report_cells_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("load_error_pct,ping_error_prob,n,mdr_pct,mms_pct,mmo_pct,failures\n");
    for c in &report.cells {
        let mmo = c
            .metrics
            .mmo
            .map(|v| v.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.load_error_pct, c.ping_error_prob, c.n, c.metrics.mdr, c.metrics.mms, mmo, c.failures
        ));
    }
    out
}

pub fn report_records_json(model: &NetworkModel, report: &ExperimentReport) -> String {
    #[derive(Serialize)]
    struct RecordDto {
        cell: usize,
        scenario: usize,
        truth_hash: String,
        estimate_hash: String,
        wrong_switches: Vec<String>,
        wrong_sections: Vec<usize>,
        wrong_outaged: usize,
        n_outaged: usize,
        failure: Option<String>,
    }
    let records: Vec<RecordDto> = report
        .records
        .iter()
        .map(|r| RecordDto {
            cell: r.cell,
            scenario: r.scenario,
            truth_hash: format!("{:016x}", r.truth_hash),
            estimate_hash: format!("{:016x}", r.estimate_hash),
            wrong_switches: r
                .wrong_switches
                .iter()
                .map(|&k| model.lines[model.switches()[k].index()].name.clone())
                .collect(),
            wrong_sections: r.wrong_sections.clone(),
            wrong_outaged: r.wrong_outaged,
            n_outaged: r.n_outaged,
            failure: r.failure.clone(),
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("serializable") + "\n"
}

pub fn report_convergence_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("cell,scenario,running_mdr_pct\n");
    for (cell, series) in report.convergence.iter().enumerate() {
        for (i, v) in series.iter().enumerate() {
            out.push_str(&format!("{cell},{i},{v}\n"));
        }
    }
    out
}

pub fn report_sections_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("cell,section,misdetections\n");
    for (cell, counts) in report.section_misdetections.iter().enumerate() {
        for (section, c) in counts.iter().enumerate() {
            out.push_str(&format!("{cell},{section},{c}\n"));
        }
    }
    out
}

/// Oracle objective table: one row per enumerated topology.
pub fn oracle_table_csv(model: &NetworkModel, report: &crate::estimator::OracleReport) -> String {
    let mut out = String::from("index,is_best,objective,switches_closed,sections_energized\n");
    for (i, entry) in report.table.iter().enumerate() {
        let switches: Vec<String> = model
            .switches()
            .iter()
            .enumerate()
            .filter(|(k, _)| entry.topology.switch_closed[*k])
            .map(|(_, &sw)| model.lines[sw.index()].name.clone())
            .collect();
        let sections: String = entry
            .topology
            .section_energized
            .iter()
            .map(|&e| if e { '1' } else { '0' })
            .collect();
        let obj = entry
            .objective
            .map(|o| o.to_string())
            .unwrap_or_else(|| "infeasible".into());
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            i,
            (i == report.best) as u8,
            obj,
            switches.join("|"),
            sections
        ));
    }
    out
}
