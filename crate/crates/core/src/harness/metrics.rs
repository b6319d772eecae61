//! JSON-lines epoch logs and CSV run summaries.

use std::io::Write;

use super::train::RunMetrics;
use super::HarnessError;

/// One JSON object per epoch, tagged with the run label and seed.
pub fn write_jsonl<W: Write>(mut out: W, run: &RunMetrics) -> Result<(), HarnessError> {
    for e in &run.epochs {
        let mut v = serde_json::to_value(e).map_err(|e| HarnessError::Io(e.to_string()))?;
        v["label"] = run.label.clone().into();
        v["seed"] = run.seed.into();
        writeln!(out, "{v}").map_err(|e| HarnessError::Io(e.to_string()))?;
    }
    Ok(())
}

pub const SUMMARY_COLUMNS: [&str; 8] = [
    "label",
    "seed",
    "epochs",
    "final_total_loss",
    "test_accuracy",
    "peak_bytes",
    "peak_bytes_with_red",
    "red_param_count",
];

pub fn write_summary_csv<W: Write>(out: W, runs: &[RunMetrics]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| HarnessError::Io(e.to_string());
    w.write_record(SUMMARY_COLUMNS).map_err(err)?;
    for r in runs {
        let last = r.epochs.last().map(|e| e.total_loss).unwrap_or(f64::NAN);
        w.write_record([
            r.label.clone(),
            r.seed.to_string(),
            r.epochs.len().to_string(),
            format!("{last:.6}"),
            format!("{:.4}", r.test_accuracy),
            r.peak_bytes.to_string(),
            r.peak_bytes_with_red.to_string(),
            r.red_param_count.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| HarnessError::Io(e.to_string()))
}
