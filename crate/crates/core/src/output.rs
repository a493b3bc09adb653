//! CSV and JSON artifacts. Floats are printed like C's `%.12g`, lines end in
//! LF, and nothing depends on locale.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::belief::Solution;
use crate::error::{Error, Result};
use crate::sim::{PolicyTable, SimTrace};
use crate::stopping::ThresholdFunction;

pub const Q_VALUES_CSV: &str = "q_values.csv";
pub const VALUE_POLICY_CSV: &str = "value_policy.csv";
pub const THRESHOLDS_CSV: &str = "thresholds.csv";
pub const SOLVE_SUMMARY_JSON: &str = "solve_summary.json";
pub const VERIFY_REPORT_JSON: &str = "verify_report.json";

/// Traces written per batch when traces are enabled.
pub const MAX_TRACES: usize = 100;

/// `%.12g`: 12 significant digits, trailing zeros dropped, exponent form
/// outside `[1e-4, 1e12)`.
pub fn fmt_g12(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..12).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        trim_zeros(&format!("{x:.*}", (11 - exp) as usize)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io(format!("{}: {e}", path.display()))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Io(format!("{}: {e}", path.display()))
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_q_values(sol: &Solution, path: &Path) -> Result<()> {
    let g = sol.grid();
    let rows = (0..=g.tau_max).flat_map(move |tau| {
        (0..=g.grid_n).flat_map(move |i| {
            (0..g.n_actions).map(move |a| {
                vec![
                    tau.to_string(),
                    fmt_g12(g.belief(i)),
                    a.to_string(),
                    fmt_g12(sol.q(tau, i, a)),
                ]
            })
        })
    });
    write_csv(path, &["tau", "belief", "action", "q_value"], rows)
}

pub fn write_value_policy(sol: &Solution, path: &Path) -> Result<()> {
    let g = sol.grid();
    let rows = (0..=g.tau_max).flat_map(move |tau| {
        (0..=g.grid_n).map(move |i| {
            vec![
                tau.to_string(),
                fmt_g12(g.belief(i)),
                fmt_g12(sol.v(tau, i)),
                sol.policy(tau, i).to_string(),
            ]
        })
    });
    write_csv(path, &["tau", "belief", "value", "policy"], rows)
}

pub fn write_thresholds(th: &ThresholdFunction, path: &Path) -> Result<()> {
    let rows = th.thresholds.iter().enumerate().map(|(tau, t)| {
        vec![
            tau.to_string(),
            fmt_g12(t.value()),
            u8::from(t.is_sentinel()).to_string(),
        ]
    });
    write_csv(path, &["tau", "b_th", "is_sentinel"], rows)
}

/// Reads a `value_policy.csv` back into a policy table. Rows must be the
/// full `τ`-major lattice as written by [`write_value_policy`].
pub fn read_policy_table(path: &Path) -> Result<PolicyTable> {
    let mut r = csv::ReaderBuilder::new().from_path(path).map_err(csv_err(path))?;
    let bad = |line: usize, msg: &str| Error::Io(format!("{}: row {line}: {msg}", path.display()));
    let mut rows: Vec<(usize, f64, usize)> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        if rec.len() != 4 {
            return Err(bad(line + 2, "expected 4 columns"));
        }
        let tau = rec[0].parse().map_err(|_| bad(line + 2, "bad tau"))?;
        let b = rec[1].parse().map_err(|_| bad(line + 2, "bad belief"))?;
        let a = rec[3].parse().map_err(|_| bad(line + 2, "bad policy"))?;
        rows.push((tau, b, a));
    }
    let tau_max = rows.last().map(|r| r.0).ok_or_else(|| bad(1, "empty policy file"))?;
    let per_tau = rows.iter().take_while(|r| r.0 == 0).count();
    if per_tau < 3 || rows.len() != per_tau * (tau_max + 1) {
        return Err(bad(1, "policy rows do not form a full lattice"));
    }
    let grid_n = per_tau - 1;
    for (k, &(tau, b, _)) in rows.iter().enumerate() {
        let (want_tau, i) = (k / per_tau, k % per_tau);
        if tau != want_tau || (b - i as f64 / grid_n as f64).abs() > 1e-9 {
            return Err(bad(k + 2, "row out of lattice order"));
        }
    }
    PolicyTable::new(tau_max, grid_n, rows.into_iter().map(|r| r.2).collect())
}

pub fn write_traces(traces: &[SimTrace], path: &Path) -> Result<()> {
    let rows = traces.iter().enumerate().flat_map(|(run, tr)| {
        tr.steps.iter().map(move |s| {
            vec![
                run.to_string(),
                s.t.to_string(),
                s.theta.index().to_string(),
                s.action.to_string(),
                s.delivered.map_or(String::new(), |d| u8::from(d).to_string()),
                s.tau.to_string(),
                fmt_g12(s.belief),
                fmt_g12(s.cost),
            ]
        })
    });
    write_csv(path, &["run", "t", "theta", "action", "gamma_t", "tau", "belief", "cost"], rows)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g12_matches_printf() {
        let cases = [
            (0.17626317104063075, "0.176263171041"),
            (1.0, "1"),
            (0.5, "0.5"),
            (10.0, "10"),
            (0.005, "0.005"),
            (1.5e-5, "1.5e-05"),
            (123456789012.0, "123456789012"),
            (1234567890123.0, "1.23456789012e+12"),
            (-2.25, "-2.25"),
            (0.1 + 0.2, "0.3"),
            (21.61623, "21.61623"),
            (f64::INFINITY, "inf"),
            (0.0, "0"),
        ];
        for (x, want) in cases {
            assert_eq!(fmt_g12(x), want, "{x}");
        }
    }

    #[test]
    fn g12_rounding_carries_into_exponent() {
        assert_eq!(fmt_g12(9.9999999999999e-5), "0.0001");
        assert_eq!(fmt_g12(999999999999.9), "1e+12");
    }
}
