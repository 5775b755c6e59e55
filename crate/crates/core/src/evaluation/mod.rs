//! Metrics, leave-one-out evaluation and report output.

mod loo;
mod metrics;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub use loo::{
    audit_leakage, build_report, confidence, kappa_points, loo_evaluate, loo_sweep, template_groups, training_set_hash, Cohort, EvaluationReport,
    FoldRecord, KappaPoint, LooConfig, LooOutcome, LooTiming, MetricSpread, RunSpec, DEFAULT_CONFIDENCE_RESAMPLES,
};
pub use metrics::{cohens_kappa, compute_metrics, roc_auc, ConfusionCounts, Metrics, Roc, RocPoint};

use crate::error::{Error, Result};

pub const SUMMARY_HEADER: &str = "method,patch_side,bal_acc,bal_acc_std,sens,spec,prec,auc,f1";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One row per report, fixed six-decimal formatting; absent metrics are empty.
pub fn summary_csv(reports: &[EvaluationReport]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in reports {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.method,
            r.patch_side,
            cell(m.bal_acc),
            cell(r.confidence.bal_acc),
            cell(m.sens),
            cell(m.spec),
            cell(m.prec),
            cell(m.auc),
            cell(m.f1)
        );
    }
    out
}

/// Per-classifier points followed by an `ensemble` row.
pub fn kappa_csv(report: &EvaluationReport) -> String {
    let mut out = String::from("classifier_id,kappa,bal_acc\n");
    for p in &report.kappa_points {
        let _ = writeln!(out, "{},{:.6},{:.6}", p.classifier_id, p.kappa, p.bal_acc);
    }
    let _ = writeln!(out, "ensemble,{},{}", cell(report.ensemble_kappa), cell(report.metrics.bal_acc));
    out
}

pub fn roc_csv(report: &EvaluationReport) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in &report.roc_points {
        let _ = writeln!(out, "{:.6},{:.6},{}", p.fpr, p.tpr, p.threshold);
    }
    out
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `summary.csv` and, per report, `<method>_<side>.json`,
/// `<method>_<side>_kappa.csv` and `<method>_<side>_roc.csv`.
pub fn write_reports(dir: impl AsRef<Path>, reports: &[EvaluationReport]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("summary.csv"), summary_csv(reports))?;
    for r in reports {
        let stem = format!("{}_{}", r.method, r.patch_side);
        write(&dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(r)?)?;
        write(&dir.join(format!("{stem}_kappa.csv")), kappa_csv(r))?;
        write(&dir.join(format!("{stem}_roc.csv")), roc_csv(r))?;
    }
    Ok(())
}
