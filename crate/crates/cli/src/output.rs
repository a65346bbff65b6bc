//! CSV encoding shared by the grid runner and the `fit` command.
//!
//! Floats are written with Rust's shortest round-trip formatting, missing
//! values as empty fields, and rows end in `\n`.

use std::fs::File;
use std::path::Path;

use csv::{Terminator, Writer, WriterBuilder};
use sustain_core::driver::TrajectoryRecord;

use crate::error::{CliError, Result};

/// Bumped whenever a column is added, removed or renamed.
pub const SCHEMA_VERSION: u32 = 1;

/// One column per field of [`TrajectoryRecord`].
pub const TRAJECTORY_COLUMNS: [&str; 13] = [
    "t",
    "alpha",
    "beta",
    "eta_f",
    "eta_g",
    "grad_ell_sq",
    "ell_gap",
    "tracking_sq",
    "e_f_norm",
    "e_g_norm",
    "upper_loss",
    "cumulative_samples",
    "cumulative_hvps",
];

/// Sentinel for a threshold that was never reached.
pub const NOT_REACHED: &str = "NotReached";

pub fn float(v: f64) -> String {
    format!("{v:?}")
}

pub fn opt_float(v: Option<f64>) -> String {
    v.map(float).unwrap_or_default()
}

pub fn writer(path: &Path) -> Result<Writer<File>> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(WriterBuilder::new()
        .terminator(Terminator::Any(b'\n'))
        .from_writer(file))
}

pub fn trajectory_row(r: &TrajectoryRecord) -> [String; 13] {
    [
        r.t.to_string(),
        float(r.alpha),
        float(r.beta),
        float(r.eta_f),
        float(r.eta_g),
        opt_float(r.grad_ell_sq),
        opt_float(r.ell_gap),
        opt_float(r.tracking_sq),
        opt_float(r.e_f_norm),
        opt_float(r.e_g_norm),
        opt_float(r.upper_loss),
        r.cumulative_samples.to_string(),
        r.cumulative_hvps.to_string(),
    ]
}

pub fn write_trajectory(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(TRAJECTORY_COLUMNS)?;
    for r in records {
        w.write_record(trajectory_row(r))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

/// Reads `(t, value)` pairs for `column` from a CSV with a `t` column,
/// skipping rows where the value is empty.
pub fn read_series(path: &Path, column: &str) -> Result<Vec<(f64, f64)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Invalid(format!("{} has no `{name}` column", path.display())))
    };
    let t_col = find("t")?;
    let v_col = find(column)?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let (t, v) = (&row[t_col], &row[v_col]);
        if v.is_empty() {
            continue;
        }
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|e| {
                CliError::Invalid(format!("bad number {s:?} in {}: {e}", path.display()))
            })
        };
        out.push((parse(t)?, parse(v)?));
    }
    Ok(out)
}
