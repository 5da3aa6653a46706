//! CSV and JSON report writers. The CSV headers below are a stable interface.

use super::sweep::SweepRow;
use super::train::{ExperimentReport, IterRecord};
use crate::error::{Error, Result};
use std::io::Write;

pub const TRACE_HEADER: [&str; 7] = ["iter", "total_loss", "cls_loss", "real_loss", "fake_loss", "orth_loss", "ksv_loss"];

pub const SWEEP_HEADER: [&str; 17] = [
    "regime",
    "rank",
    "seed_index",
    "seed",
    "trainable_params",
    "seen_auc",
    "seen_acc",
    "unseen_auc",
    "unseen_acc",
    "rank_before",
    "rank_after",
    "logit_slope",
    "logit_residual_rms",
    "collapse",
    "asym_crossing",
    "diverged",
    "error",
];

pub const RANK_HEADER: [&str; 3] = ["component", "ratio", "cumulative"];

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_trace<W: Write>(trace: &[IterRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRACE_HEADER).map_err(csv_err)?;
    for r in trace {
        out.write_record([
            r.iter.to_string(),
            r.total.to_string(),
            r.cls.to_string(),
            r.real.to_string(),
            r.fake.to_string(),
            r.orth.to_string(),
            r.ksv.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn report_fields(r: &ExperimentReport) -> [String; 11] {
    [
        r.trainable_params.to_string(),
        opt(r.seen.as_ref().map(|m| m.auc)),
        opt(r.seen.as_ref().map(|m| m.accuracy)),
        opt(r.unseen.as_ref().map(|m| m.auc)),
        opt(r.unseen.as_ref().map(|m| m.accuracy)),
        r.rank_before.to_string(),
        r.rank_after.to_string(),
        opt(r.logit_fit.as_ref().map(|f| f.slope)),
        opt(r.logit_fit.as_ref().map(|f| f.residual_rms)),
        opt(r.collapse),
        opt(r.asym_crossing),
    ]
}

pub fn write_sweep<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SWEEP_HEADER).map_err(csv_err)?;
    for row in rows {
        let mut rec = vec![row.regime.name().to_string(), row.rank.to_string(), row.seed_index.to_string(), row.seed.to_string()];
        match &row.report {
            Some(r) => {
                rec.extend(report_fields(r));
                rec.push(r.diverged.clone().unwrap_or_default());
            }
            None => rec.extend(std::iter::repeat_n(String::new(), 12)),
        }
        rec.push(row.error.clone().unwrap_or_default());
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_spectrum<W: Write>(ratios: &[f64], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RANK_HEADER).map_err(csv_err)?;
    let mut cum = 0.0;
    for (i, r) in ratios.iter().enumerate() {
        cum += r;
        out.write_record([(i + 1).to_string(), r.to_string(), cum.to_string()]).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Report without the per-iteration trace (that goes to the CSV).
pub fn summary_json(r: &ExperimentReport) -> String {
    let mut v = serde_json::to_value(r).expect("report serializes");
    if let Some(obj) = v.as_object_mut() {
        obj.remove("trace");
        obj.insert("iterations".into(), serde_json::Value::from(r.trace.len()));
    }
    serde_json::to_string_pretty(&v).expect("value serializes")
}
