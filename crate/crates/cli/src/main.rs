//! Command-line entry point wiring the toolkit into user workflows.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 solver failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gridtop_core::estimator::{extract_estimate, oracle_estimate, EstimateConfig};
use gridtop_core::experiment::{run_campaign, sample_scenario, ScenarioSpec};
use gridtop_core::measurement::{
    check_observability, corrupt_measurements, derive_rng, place_flow_meters,
    select_pinged_meters, streams, NoiseSpec, Placement,
};
use gridtop_core::milp::build_problem;
use gridtop_core::network::{parse_network, NetworkModel};
use gridtop_core::solver::{mps, solve, SolveStatus};
use gridtop_core::{io as gio};

/// Default master seed; override with --seed or the GRIDTOP_SEED env var.
const DEFAULT_SEED: u64 = 20240;

#[derive(Parser)]
#[command(name = "gridtop", version, about = "Distribution-feeder topology and outage estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a network file and print its invariant report.
    Validate { net: PathBuf },
    /// Sample a ground-truth operating point and emit it as JSON.
    Simulate {
        net: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Allow outages (1 to 3 random faults unless --faults is given).
        #[arg(long)]
        outages: bool,
        /// Fault count range as `min:max`.
        #[arg(long, default_value = "1:3")]
        faults: String,
        /// Scenario index within the seed's stream.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corrupt a truth into a measurement set and emit it as JSON.
    Measure {
        net: PathBuf,
        truth: PathBuf,
        #[arg(long = "load-err", default_value_t = 10.0)]
        load_err: f64,
        #[arg(long = "flow-err", default_value_t = 1.0)]
        flow_err: f64,
        #[arg(long = "ping-err", default_value_t = 0.02)]
        ping_err: f64,
        #[arg(long = "ping-frac", default_value_t = 0.10)]
        ping_frac: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the operational topology from a measurement set.
    Estimate {
        net: PathBuf,
        meas: PathBuf,
        #[arg(long = "big-m")]
        big_m: Option<f64>,
        #[arg(long = "node-limit")]
        node_limit: Option<usize>,
        /// Solver time limit in seconds.
        #[arg(long = "time-limit")]
        time_limit: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Enumerate all feasible topologies and emit the objective table CSV.
    Oracle {
        net: PathBuf,
        meas: PathBuf,
        #[arg(long = "max-count", default_value_t = 100_000)]
        max_count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit the MILP as a fixed-format MPS file.
    #[command(name = "export-mps")]
    ExportMps {
        net: PathBuf,
        meas: PathBuf,
        #[arg(long = "big-m")]
        big_m: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte Carlo campaign and write report artifacts.
    Experiment {
        net: PathBuf,
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Args)]
struct Nothing {}

enum CliError {
    Usage(String),
    Data(String),
    Solver(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Solver(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Solver(m) => m,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not errors
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gridtop: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    if let Some(s) = flag {
        return s;
    }
    if let Ok(text) = std::env::var("GRIDTOP_SEED") {
        if let Ok(s) = text.parse() {
            return s;
        }
    }
    DEFAULT_SEED
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<NetworkModel, CliError> {
    let text = read_file(path)?;
    parse_network(&text).map_err(data)
}

fn emit(out: Option<&Path>, content: &str) -> Result<(), CliError> {
    match out {
        None => {
            print!("{content}");
            Ok(())
        }
        Some(path) => std::fs::write(path, content)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display()))),
    }
}

fn parse_fault_range(text: &str) -> Result<(usize, usize), CliError> {
    let (a, b) = text
        .split_once(':')
        .ok_or_else(|| CliError::Usage(format!("--faults expects min:max, got '{text}'")))?;
    let lo = a
        .parse()
        .map_err(|_| CliError::Usage(format!("bad fault count '{a}'")))?;
    let hi = b
        .parse()
        .map_err(|_| CliError::Usage(format!("bad fault count '{b}'")))?;
    if lo > hi {
        return Err(CliError::Usage(format!("fault range {lo}:{hi} is inverted")));
    }
    Ok((lo, hi))
}

fn scenario_spec(model_seed: u64, outages: bool, faults: (usize, usize), ping_frac: f64) -> ScenarioSpec {
    ScenarioSpec {
        include_outages: outages,
        fault_count_range: faults,
        noise_grid: vec![gridtop_core::experiment::GridCell {
            load_error_pct: 0.0,
            ping_error_prob: 0.0,
        }],
        n_scenarios: 1,
        master_seed: model_seed,
        ping_fraction: ping_frac,
        flow_error_pct: 0.0,
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Validate { net } => {
            let m = load_model(&net)?;
            let cycles = m.fundamental_cycles();
            println!(
                "{}: {} buses, {} lines ({} switches), {} loads, {} capacitor banks",
                net.display(),
                m.buses.len(),
                m.lines.len(),
                m.switches().len(),
                m.loads.len(),
                m.caps.len()
            );
            println!("{} load sections:", m.sections.len());
            for s in &m.sections {
                println!(
                    "  section {}: {} buses, {} loads, boundary switches [{}]{}",
                    s.id.index(),
                    s.buses.len(),
                    s.loads.len(),
                    s.boundary_switches
                        .iter()
                        .map(|l| m.lines[l.index()].name.clone())
                        .collect::<Vec<_>>()
                        .join(", "),
                    if s.contains_source { " (source)" } else { "" }
                );
            }
            println!("{} fundamental cycles:", cycles.len());
            for (i, c) in cycles.iter().enumerate() {
                println!(
                    "  cycle {i}: {}",
                    c.iter()
                        .map(|l| m.lines[l.index()].name.clone())
                        .collect::<Vec<_>>()
                        .join(" ")
                );
            }
            for w in &m.warnings {
                println!("warning: {w}");
            }
            Ok(())
        }
        Command::Simulate {
            net,
            seed,
            outages,
            faults,
            index,
            out,
        } => {
            let m = load_model(&net)?;
            let faults = parse_fault_range(&faults)?;
            let spec = scenario_spec(resolve_seed(seed), outages, faults, 0.10);
            let truth = sample_scenario(&m, &spec, index).map_err(data)?;
            emit(out.as_deref(), &gio::truth_to_json(&m, &truth))
        }
        Command::Measure {
            net,
            truth,
            load_err,
            flow_err,
            ping_err,
            ping_frac,
            seed,
            out,
        } => {
            let m = load_model(&net)?;
            let truth = gio::truth_from_json(&m, &read_file(&truth)?).map_err(data)?;
            let seed = resolve_seed(seed);
            let mut rng = derive_rng(seed, streams::PLACEMENT, 0);
            let metered_lines = place_flow_meters(&m, &mut rng);
            let mut rng = derive_rng(seed, streams::PINGS, 0);
            let pinged_loads = select_pinged_meters(&m, ping_frac, &mut rng).map_err(data)?;
            let placement = Placement {
                metered_lines,
                pinged_loads,
            };
            let violations = check_observability(&m, &placement);
            if !violations.is_empty() {
                return Err(CliError::Data(format!(
                    "placement is not observable ({} violations)",
                    violations.len()
                )));
            }
            let noise = NoiseSpec {
                load_error_pct: load_err,
                flow_error_pct: flow_err,
                ping_error_prob: ping_err,
                seed,
            };
            let meas = corrupt_measurements(&m, &truth, &placement, &noise).map_err(data)?;
            emit(out.as_deref(), &gio::measurements_to_json(&m, &meas))
        }
        Command::Estimate {
            net,
            meas,
            big_m,
            node_limit,
            time_limit,
            out,
        } => {
            let m = load_model(&net)?;
            let meas = gio::measurements_from_json(&m, &read_file(&meas)?).map_err(data)?;
            let mut config = EstimateConfig::default();
            config.build.big_m = big_m;
            if let Some(n) = node_limit {
                config.solver.node_limit = n;
            }
            config.solver.time_limit_seconds = time_limit;
            let problem = build_problem(&m, &meas, &config.build).map_err(data)?;
            let result = solve(&problem, &config.solver)
                .map_err(|e| CliError::Solver(e.to_string()))?;
            if result.status != SolveStatus::Optimal {
                return Err(CliError::Solver(format!(
                    "solver finished with status {:?}",
                    result.status
                )));
            }
            let est = extract_estimate(&m, &problem, &result, config.solver.integrality_tol)
                .map_err(|e| CliError::Solver(e.to_string()))?;
            let residuals = problem.residual_summary(&result.values);
            eprintln!(
                "solved in {:.3} s over {} nodes, objective {}",
                result.wall_seconds, result.nodes_explored, result.objective
            );
            emit(out.as_deref(), &gio::estimate_to_json(&m, &est, &residuals))
        }
        Command::Oracle {
            net,
            meas,
            max_count,
            out,
        } => {
            let m = load_model(&net)?;
            let meas = gio::measurements_from_json(&m, &read_file(&meas)?).map_err(data)?;
            let config = EstimateConfig::default();
            let report = oracle_estimate(&m, &meas, &config, max_count)
                .map_err(|e| CliError::Solver(e.to_string()))?;
            emit(out.as_deref(), &gio::oracle_table_csv(&m, &report))
        }
        Command::ExportMps { net, meas, big_m, out } => {
            let m = load_model(&net)?;
            let meas = gio::measurements_from_json(&m, &read_file(&meas)?).map_err(data)?;
            let mut build = gridtop_core::milp::BuildConfig::default();
            build.big_m = big_m;
            let problem = build_problem(&m, &meas, &build).map_err(data)?;
            emit(out.as_deref(), &mps::export_mps(&problem))
        }
        Command::Experiment {
            net,
            spec,
            out,
            workers,
        } => {
            let m = load_model(&net)?;
            let spec: ScenarioSpec = serde_json::from_str(&read_file(&spec)?).map_err(data)?;
            spec.validate(&m).map_err(data)?;
            let workers = workers
                .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
                .unwrap_or(1);
            let report = run_campaign(&m, &spec, &EstimateConfig::default(), workers)
                .map_err(|e| CliError::Solver(e.to_string()))?;
            std::fs::create_dir_all(&out)
                .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))?;
            let write = |name: &str, content: String| -> Result<(), CliError> {
                let path = out.join(name);
                std::fs::write(&path, content)
                    .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
            };
            write("cells.csv", gio::report_cells_csv(&report))?;
            write("records.json", gio::report_records_json(&m, &report))?;
            write("convergence.csv", gio::report_convergence_csv(&report))?;
            write("sections.csv", gio::report_sections_csv(&report))?;
            eprintln!(
                "campaign finished in {:.1} s ({} workers); artifacts in {}",
                report.total_wall_seconds,
                workers,
                out.display()
            );
            for c in &report.cells {
                eprintln!(
                    "  cell ({}% load, {} ping): MDR {:.3}% MMS {:.3}%{}",
                    c.load_error_pct,
                    c.ping_error_prob,
                    c.metrics.mdr,
                    c.metrics.mms,
                    c.metrics
                        .mmo
                        .map(|v| format!(" MMO {v:.3}%"))
                        .unwrap_or_default()
                );
            }
            Ok(())
        }
    }
}
