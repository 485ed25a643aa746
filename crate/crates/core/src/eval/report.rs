//! Benchmark report structure and its CSV, Markdown and JSON renderings.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detectors::DetectorSpec;
use crate::error::{Error, Result};
use crate::store::OodGroup;

pub const REPORT_VERSION: u32 = 1;

/// Mean and sample standard deviation over bundles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Divisor n−1; 0 for a single value.
    pub std: f64,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len();
        if n == 0 {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
                values,
            };
        }
        if values.iter().all(|v| *v == values[0]) {
            // summation rounding would otherwise leave a nonzero spread
            return Stat {
                mean: values[0],
                std: 0.0,
                values,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1) as f64).sqrt()
        };
        Stat { mean, std, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub name: String,
    pub group: OodGroup,
    pub auroc: Stat,
    pub fpr: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub label: String,
    pub spec: DetectorSpec,
    pub datasets: Vec<DatasetReport>,
    /// AUROC averaged over the group's datasets, per bundle.
    pub near: Option<Stat>,
    pub far: Option<Stat>,
    /// λ per bundle, computed on id_train scores.
    pub threshold: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub tpr: f64,
    pub seed: u64,
    pub bundles: Vec<String>,
    pub detectors: Vec<DetectorReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Argument(format!(
                "unknown report format '{other}' (csv, markdown, json)"
            ))),
        }
    }
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Markdown => Ok(render_markdown(report)),
        ReportFormat::Json => {
            let mut text = serde_json::to_string_pretty(report)
                .map_err(|e| Error::Schema(format!("cannot serialize report: {e}")))?;
            text.push('\n');
            Ok(text)
        }
    }
}

pub fn parse_json_report(text: &str) -> Result<EvalReport> {
    serde_json::from_str(text).map_err(|e| Error::Schema(format!("invalid report JSON: {e}")))
}

fn render_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(format!("CSV write failed: {e}"));
    w.write_record([
        "detector",
        "dataset",
        "group",
        "auroc_mean",
        "auroc_std",
        "fpr_mean",
    ])
    .map_err(csv_err)?;
    for det in &report.detectors {
        for ds in &det.datasets {
            w.write_record([
                det.label.clone(),
                ds.name.clone(),
                ds.group.to_string(),
                format!("{:.6}", ds.auroc.mean),
                format!("{:.6}", ds.auroc.std),
                format!("{:.6}", ds.fpr.mean),
            ])
            .map_err(csv_err)?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("CSV flush failed: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn pct(s: &Stat) -> String {
    format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std)
}

fn md_cell(s: &str) -> String {
    s.replace('|', "\\|")
}

fn render_markdown(report: &EvalReport) -> String {
    let tpr = 100.0 * report.tpr;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "| Detector | Dataset | Group | AUROC (%) | FPR@{tpr}% (%) |"
    );
    out.push_str("|---|---|---|---:|---:|\n");
    for det in &report.detectors {
        for (group, summary, title) in [
            (OodGroup::Near, &det.near, "NearOOD"),
            (OodGroup::Far, &det.far, "FarOOD"),
        ] {
            for ds in det.datasets.iter().filter(|ds| ds.group == group) {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {:.2} |",
                    md_cell(&det.label),
                    md_cell(&ds.name),
                    group,
                    pct(&ds.auroc),
                    100.0 * ds.fpr.mean
                );
            }
            if let Some(s) = summary {
                let _ = writeln!(
                    out,
                    "| {} | **{title}** | {group} | **{}** | |",
                    md_cell(&det.label),
                    pct(s)
                );
            }
        }
    }
    out
}
