//! Trace and summary output.

use std::io::{self, Write};

use crate::sim::SimTrace;

pub const CSV_HEADER: &str = "t,h_ref,h_plant,u,du,d_hat,cost,sqp_iters,kkt_residual,solve_time_s";

/// Nine significant digits.
fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{:.8e}", v + 0.0)
    } else {
        format!("{v}")
    }
}

pub fn write_trace_csv<W: Write>(trace: &SimTrace, mut out: W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in &trace.records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            num(r.t),
            num(r.h_ref),
            num(r.h_plant),
            num(r.u),
            num(r.du),
            num(r.d_hat),
            num(r.cost),
            r.iterations,
            num(r.kkt_residual),
            num(r.solve_time),
        )?;
    }
    Ok(())
}

/// Plain-text comparison table, one row per trace.
pub fn summary_table(traces: &[&SimTrace]) -> String {
    let mut s = format!(
        "{:<10}{:>12}{:>12}{:>14}{:>14}{:>12}{:>11}{:>10}\n",
        "controller", "ISE", "IAE", "undershoot", "overshoot", "violations", "fail-safe", "aborted"
    );
    for t in traces {
        let m = &t.metrics;
        s += &format!(
            "{:<10}{:>12.5}{:>12.5}{:>14.6}{:>14.6}{:>12}{:>11}{:>10}\n",
            t.controller,
            m.ise,
            m.iae,
            m.max_undershoot,
            m.max_overshoot,
            m.constraint_violations,
            m.fail_safe_steps,
            match t.abort {
                Some(a) => format!("t={}", a.time),
                None => "no".to_string(),
            }
        );
    }
    s
}
