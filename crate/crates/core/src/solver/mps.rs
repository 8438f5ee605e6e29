//! Fixed-format MPS export and solution-file import.
//!
//! Row names are `<tag>_<row ordinal>` (e.g. `E12_0042`), column names
//! `<kind>_<column ordinal>` (e.g. `fP_00017`); both are deterministic, at
//! most 8 characters, and collision-free by construction. The solution file
//! format is whitespace-separated `name value` lines with `#` comments.

use std::collections::HashMap;

use thiserror::Error;

use crate::milp::{MilpProblem, Sense};
use crate::solver::{SolveResult, SolveStatus};

#[derive(Debug, Error)]
pub enum MpsError {
    #[error("solution line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("solution is missing a value for column '{0}'")]
    MissingColumn(String),
    #[error("imported solution violates {count} constraints (worst {worst:.3e})")]
    Infeasible { count: usize, worst: f64 },
}

pub fn row_name(problem: &MilpProblem, row: usize) -> String {
    format!("{}_{:04}", problem.constraints[row].tag.prefix(), row)
}

pub fn column_name(problem: &MilpProblem, col: usize) -> String {
    format!("{}_{:05}", problem.variables[col].var.kind_prefix(), col)
}

/// Format a number into the fixed 12-character MPS value field: integers
/// verbatim, other values by shortest representation when it fits, else
/// 5-digit scientific.
fn fmt_value(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e11 {
        return format!("{}", v);
    }
    let short = format!("{}", v);
    if short.len() <= 12 {
        short
    } else {
        format!("{:.5e}", v)
    }
}

pub fn export_mps(problem: &MilpProblem) -> String {
    let mut out = String::new();
    out.push_str("NAME          GRIDTOP\n");
    out.push_str("ROWS\n");
    out.push_str(" N  COST\n");
    for (i, row) in problem.constraints.iter().enumerate() {
        let sense = match row.sense {
            Sense::Le => 'L',
            Sense::Ge => 'G',
            Sense::Eq => 'E',
        };
        out.push_str(&format!(" {}  {}\n", sense, row_name(problem, i)));
    }

    // entries grouped by column
    let mut col_entries: Vec<Vec<(String, f64)>> = vec![Vec::new(); problem.variables.len()];
    for (j, &(c, col)) in problem.objective.iter().enumerate() {
        let _ = j;
        col_entries[col as usize].push(("COST".to_string(), c));
    }
    for (i, row) in problem.constraints.iter().enumerate() {
        let name = row_name(problem, i);
        for &(c, col) in &row.terms {
            col_entries[col as usize].push((name.clone(), c));
        }
    }

    out.push_str("COLUMNS\n");
    let mut in_integer_block = false;
    let mut marker = 0usize;
    for (j, entries) in col_entries.iter().enumerate() {
        let integral = problem.variables[j].is_integer;
        if integral && !in_integer_block {
            out.push_str(&format!(
                "    MARKER{marker:04}  'MARKER'                 'INTORG'\n"
            ));
            marker += 1;
            in_integer_block = true;
        }
        if !integral && in_integer_block {
            out.push_str(&format!(
                "    MARKER{marker:04}  'MARKER'                 'INTEND'\n"
            ));
            marker += 1;
            in_integer_block = false;
        }
        let cname = column_name(problem, j);
        for (rname, c) in entries {
            out.push_str(&format!(
                "    {:<8}  {:<8}  {}\n",
                cname,
                rname,
                fmt_value(*c)
            ));
        }
    }
    if in_integer_block {
        out.push_str(&format!(
            "    MARKER{marker:04}  'MARKER'                 'INTEND'\n"
        ));
    }

    out.push_str("RHS\n");
    for (i, row) in problem.constraints.iter().enumerate() {
        if row.rhs != 0.0 {
            out.push_str(&format!(
                "    RHS       {:<8}  {}\n",
                row_name(problem, i),
                fmt_value(row.rhs)
            ));
        }
    }

    out.push_str("BOUNDS\n");
    for (j, var) in problem.variables.iter().enumerate() {
        let cname = column_name(problem, j);
        if var.lower == var.upper {
            out.push_str(&format!(
                " FX BND       {:<8}  {}\n",
                cname,
                fmt_value(var.lower)
            ));
        } else {
            out.push_str(&format!(
                " LO BND       {:<8}  {}\n",
                cname,
                fmt_value(var.lower)
            ));
            out.push_str(&format!(
                " UP BND       {:<8}  {}\n",
                cname,
                fmt_value(var.upper)
            ));
        }
    }
    out.push_str("ENDATA\n");
    out
}

/// Parse a `name value` solution file against the problem's canonical
/// column names and rebuild a [`SolveResult`]. The imported point must
/// satisfy every constraint within a loose 1e-6 relative tolerance.
pub fn import_result(problem: &MilpProblem, text: &str) -> Result<SolveResult, MpsError> {
    let names: HashMap<String, usize> = (0..problem.variables.len())
        .map(|j| (column_name(problem, j), j))
        .collect();
    let mut values = vec![f64::NAN; problem.variables.len()];
    for (lineno, raw) in text.lines().enumerate() {
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut parts = body.split_whitespace();
        let name = parts.next().unwrap();
        let value = parts
            .next()
            .ok_or_else(|| MpsError::Malformed {
                line: lineno + 1,
                msg: "expected `name value`".into(),
            })?
            .parse::<f64>()
            .map_err(|e| MpsError::Malformed {
                line: lineno + 1,
                msg: format!("bad number: {e}"),
            })?;
        if parts.next().is_some() {
            return Err(MpsError::Malformed {
                line: lineno + 1,
                msg: "trailing tokens".into(),
            });
        }
        let j = *names.get(name).ok_or_else(|| MpsError::Malformed {
            line: lineno + 1,
            msg: format!("unknown column '{name}'"),
        })?;
        values[j] = value;
    }
    for (j, v) in values.iter().enumerate() {
        if v.is_nan() {
            return Err(MpsError::MissingColumn(column_name(problem, j)));
        }
    }
    let violations = problem.check_assignment(&values, 1e-6);
    if !violations.is_empty() {
        let worst = violations
            .iter()
            .map(|v| v.amount)
            .fold(0.0f64, f64::max);
        return Err(MpsError::Infeasible {
            count: violations.len(),
            worst,
        });
    }
    let objective = problem.objective_of(&values).expect("full assignment");
    Ok(SolveResult {
        status: SolveStatus::Optimal,
        objective,
        values,
        nodes_explored: 0,
        wall_seconds: 0.0,
    })
}

/// Render a solution file for a result (the inverse of [`import_result`]).
pub fn format_solution(problem: &MilpProblem, result: &SolveResult) -> String {
    let mut out = String::from("# gridtop solution file\n");
    for (j, v) in result.values.iter().enumerate() {
        out.push_str(&format!("{} {}\n", column_name(problem, j), v));
    }
    out
}
