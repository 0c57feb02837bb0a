use std::fmt::Write;

use serde_json::Value;

use super::eval::Summary;

/// One row of the value-gain table: an evaluation event.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaQRow {
    pub step: u64,
    pub summary: Summary,
    pub mpc_return: Option<f64>,
    pub network_return: Option<f64>,
}

/// Value-gain summaries of every evaluation in a metrics stream. Events
/// of other kinds are skipped.
pub fn delta_q_rows(events: &[Value]) -> Vec<DeltaQRow> {
    events
        .iter()
        .filter(|e| e["kind"] == "eval")
        .filter_map(|e| {
            let samples: Vec<f64> = e["delta_q_samples"].as_array()?.iter().filter_map(Value::as_f64).collect();
            Some(DeltaQRow {
                step: e["step"].as_u64()?,
                summary: Summary::of(&samples),
                mpc_return: e["mpc"]["mean"].as_f64(),
                network_return: e["network"]["mean"].as_f64(),
            })
        })
        .collect()
}

pub fn render_table(rows: &[DeltaQRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>9} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "step", "n", "mean", "std", "p5", "p50", "p95", "mpc", "network"
    );
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
    for r in rows {
        let s = &r.summary;
        let _ = writeln!(
            out,
            "{:>9} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9} {:>9}",
            r.step,
            s.count,
            s.mean,
            s.std,
            s.p5,
            s.p50,
            s.p95,
            opt(r.mpc_return),
            opt(r.network_return)
        );
    }
    out
}
