//! Closed-loop trace CSV: one row per instant with the applied input, the
//! measurement, the reference, the plant state, the optimizer objective, and
//! the step status. Values carry 12 significant digits.

use dmpc::mpc::ClosedLoopTrace;
use dmpc::numerics::Matrix;
use std::io::Write;
use std::path::Path;

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.12e}")
    }
}

pub fn write_trace(path: &Path, trace: &ClosedLoopTrace) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let first = trace
        .steps
        .first()
        .expect("trace has at least one instant");
    let (m, p, n) = (first.u.len(), first.y.len(), first.x.len());
    let mut header = vec!["k".to_string()];
    header.extend((1..=m).map(|i| format!("u_{i}")));
    header.extend((1..=p).map(|i| format!("y_{i}")));
    header.extend((1..=first.reference.len()).map(|i| format!("yr_{i}")));
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.push("cost".to_string());
    header.push("status".to_string());
    writeln!(out, "{}", header.join(","))?;

    for step in &trace.steps {
        let mut row = vec![step.k.to_string()];
        row.extend(step.u.iter().map(|&v| fmt(v)));
        row.extend(step.y.iter().map(|&v| fmt(v)));
        row.extend(step.reference.iter().map(|&v| fmt(v)));
        row.extend(step.x.iter().map(|&v| fmt(v)));
        row.push(fmt(step.cost));
        row.push(step.status.to_string());
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()
}

/// Open-loop comparison CSV: measured vs model-predicted outputs over the
/// record, used by the `simulate` subcommand and the identification-only
/// experiment kinds.
pub fn write_rollout(path: &Path, u: &Matrix, y: &Matrix, yhat: &Matrix) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let (m, p) = (u.nrows(), y.nrows());
    let mut header = vec!["k".to_string()];
    header.extend((1..=m).map(|i| format!("u_{i}")));
    header.extend((1..=p).map(|i| format!("y_{i}")));
    header.extend((1..=p).map(|i| format!("yhat_{i}")));
    writeln!(out, "{}", header.join(","))?;
    for k in 0..y.ncols() {
        let mut row = vec![k.to_string()];
        row.extend((0..m).map(|i| fmt(u[(i, k)])));
        row.extend((0..p).map(|i| fmt(y[(i, k)])));
        row.extend((0..p).map(|i| fmt(yhat[(i, k)])));
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()
}
