//! Machine-readable experiment results.
//!
//! JSON output is the full nested document; CSV output is one row per weight
//! record with a stable column order for external plotting. Reports written
//! without timings are byte-deterministic for a fixed config and seed.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use ijack_core::IJCertificate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub theta: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// One weight vector's worth of results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub weight_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_ij: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_exact: Option<Vec<f64>>,
    /// `‖θ̂_IJ(w) − θ̂(w)‖₂` when both sides were computed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_l2: Option<f64>,
    /// Mean held-out loss at the IJ parameters (leave-k-out folds only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_ij: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_exact: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refit_converged: Option<bool>,
}

/// Cross-validation style aggregates for one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cv_ij: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cv_exact: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_loss: Option<f64>,
}

/// Median wall-clock spans in seconds; present only in `bench` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub base_fit_s: f64,
    pub handle_build_s: f64,
    pub ij_batch_s: f64,
    pub exact_batch_s: f64,
    /// handle build + factorize + IJ batch.
    pub ij_total_s: f64,
    pub exact_total_s: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub model: String,
    pub n: usize,
    pub p: usize,
    pub seed: u64,
    pub reps: usize,
    pub base: FitSummary,
    /// Per-weight results for the first replication.
    pub records: Vec<WeightRecord>,
    /// Means of the per-replication aggregates.
    pub aggregate: Aggregates,
    /// One entry per replication.
    pub replications: Vec<Aggregates>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certificate: Option<IJCertificate>,
    /// Measured `max_w ‖θ̂_IJ(w) − θ̂(w)‖₂`, when exact refits were run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_gap_l2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => anyhow::bail!("unknown report format {other:?} (json|csv)"),
        }
    }
}

pub fn report_to_json(report: &ExperimentReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn report_to_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("weight_id,gap_l2,loss_ij,loss_exact,refit_converged\n");
    for r in &report.records {
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.weight_id,
            cell(r.gap_l2),
            cell(r.loss_ij),
            cell(r.loss_exact),
            r.refit_converged.map_or(String::new(), |b| b.to_string()),
        ));
    }
    out
}

/// Write the report in the requested format.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat, path: &Path) -> Result<()> {
    let bytes = match format {
        ReportFormat::Json => report_to_json(report)?,
        ReportFormat::Csv => report_to_csv(report),
    };
    let mut f = std::fs::File::create(path)
        .with_context(|| format!("creating report file {}", path.display()))?;
    f.write_all(bytes.as_bytes())?;
    Ok(())
}
