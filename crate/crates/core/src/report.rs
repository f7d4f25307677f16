//! CSV serialization of traces and aggregates.
//!
//! Numbers are written in plain decimal with 15 significant digits; values
//! too large or too small for a readable fixed-point form switch to
//! exponent notation with the same precision.

use std::io::{self, Write};

use crate::engine::{AggregateRow, ConvergenceTrace};

pub const CSV_HEADER: &str =
    "experiment,method,seed,iteration,x,observed_y,squared_error,aleatoric_var,e_min,acq_value";

pub const AGGREGATE_HEADER: &str =
    "experiment,method,iteration,runs,e_min_mean,e_min_std,incumbent_error_mean,incumbent_error_std";

pub const LONG_HEADER: &str =
    "panel,experiment,method,iteration,runs,e_min_mean,e_min_std,incumbent_error_mean,incumbent_error_std";

const SIG_DIGITS: i32 = 15;

/// Formats `v` with 15 significant digits.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..15).contains(&exp) {
        let decimals = (SIG_DIGITS - 1 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.prec$e}", prec = (SIG_DIGITS - 1) as usize)
    }
}

pub fn format_point(x: &[f64]) -> String {
    x.iter().map(|v| format_number(*v)).collect::<Vec<_>>().join(";")
}

/// Header plus one row per (seed, iteration).
pub fn write_traces<W: Write>(mut w: W, traces: &[ConvergenceTrace]) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for t in traces {
        for r in &t.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                t.experiment.name(),
                t.method,
                t.seed,
                r.iteration,
                format_point(&r.x),
                format_number(r.observed_y),
                format_number(r.squared_error),
                format_number(r.aleatoric_var),
                format_number(r.e_min),
                format_number(r.acq_value),
            )?;
        }
    }
    Ok(())
}

pub fn write_aggregate<W: Write>(mut w: W, experiment: &str, method: &str, rows: &[AggregateRow]) -> io::Result<()> {
    writeln!(w, "{AGGREGATE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{experiment},{method},{},{},{},{},{},{}",
            r.iteration,
            r.runs,
            format_number(r.e_min_mean),
            format_number(r.e_min_std),
            format_number(r.incumbent_error_mean),
            format_number(r.incumbent_error_std)
        )?;
    }
    Ok(())
}

/// Rows of a long-format plot file; the caller writes [`LONG_HEADER`] once.
pub fn write_long_rows<W: Write>(
    mut w: W,
    panel: &str,
    experiment: &str,
    method: &str,
    rows: &[AggregateRow],
) -> io::Result<()> {
    for r in rows {
        writeln!(
            w,
            "{panel},{experiment},{method},{},{},{},{},{},{}",
            r.iteration,
            r.runs,
            format_number(r.e_min_mean),
            format_number(r.e_min_std),
            format_number(r.incumbent_error_mean),
            format_number(r.incumbent_error_std)
        )?;
    }
    Ok(())
}
