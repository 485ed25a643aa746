//! AUROC, threshold and FPR metrics, and the multi-bundle benchmark runner.

mod metrics;
mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::{fit_on_bundle, DetectorSpec};
use crate::error::{Error, Result};
use crate::store::{EmbeddingBundle, OodGroup};

pub use metrics::{auroc, fpr_at_threshold, threshold_at_tpr, DEFAULT_TPR};
pub use report::{
    parse_json_report, render_report, DatasetReport, DetectorReport, EvalReport, ReportFormat,
    Stat, REPORT_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub tpr: f64,
    /// Seeds KNN subsampling.
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            tpr: DEFAULT_TPR,
            seed: 0,
        }
    }
}

/// One detector fit on one bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub label: String,
    pub spec: DetectorSpec,
    pub threshold: f64,
    /// Per OOD set, in bundle order.
    pub auroc: Vec<f64>,
    pub fpr: Vec<f64>,
}

/// Fits `spec` on id_train and scores id_test plus every OOD set.
pub fn evaluate_cell(
    bundle: &EmbeddingBundle,
    spec: &DetectorSpec,
    config: &BenchConfig,
) -> Result<CellResult> {
    let det = fit_on_bundle(spec, bundle, config.seed)?;
    let train = det.score_rows(&bundle.id_train.features)?;
    let threshold = threshold_at_tpr(&train, config.tpr)?;
    let id = det.score_rows(&bundle.id_test.features)?;
    let per_set: Vec<(f64, f64)> = bundle
        .ood
        .par_iter()
        .map(|set| {
            let ood = det.score_rows(&set.set.features)?;
            let a = auroc(&id, &ood).map_err(|e| e.context(format!("OOD set '{}'", set.name)))?;
            Ok((a, fpr_at_threshold(&ood, threshold)?))
        })
        .collect::<Result<_>>()?;
    Ok(CellResult {
        label: det.label(),
        spec: det.spec().clone(),
        threshold,
        auroc: per_set.iter().map(|p| p.0).collect(),
        fpr: per_set.iter().map(|p| p.1).collect(),
    })
}

fn ood_layout(bundle: &EmbeddingBundle) -> Vec<(String, OodGroup)> {
    bundle
        .ood
        .iter()
        .map(|s| (s.name.clone(), s.group))
        .collect()
}

/// Runs every spec on every bundle and aggregates across bundles.
///
/// Bundles must list the same OOD sets in the same order.
pub fn run_benchmark(
    bundles: &[EmbeddingBundle],
    specs: &[DetectorSpec],
    config: &BenchConfig,
) -> Result<EvalReport> {
    if bundles.is_empty() {
        return Err(Error::Argument("benchmark needs at least one bundle".into()));
    }
    if specs.is_empty() {
        return Err(Error::Argument("benchmark needs at least one detector".into()));
    }
    if !(config.tpr > 0.0 && config.tpr <= 1.0) {
        return Err(Error::Argument(format!("tpr = {} outside (0, 1]", config.tpr)));
    }
    let layout = ood_layout(&bundles[0]);
    for b in &bundles[1..] {
        if ood_layout(b) != layout {
            return Err(Error::Argument(format!(
                "bundle '{}' lists different OOD sets than '{}'",
                b.name, bundles[0].name
            )));
        }
    }

    let cells: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|s| (0..bundles.len()).map(move |b| (s, b)))
        .collect();
    let results: Vec<CellResult> = cells
        .par_iter()
        .map(|&(s, b)| {
            evaluate_cell(&bundles[b], &specs[s], config).map_err(|e| {
                e.context(format!(
                    "bundle '{}', detector '{}'",
                    bundles[b].name,
                    specs[s].label()
                ))
            })
        })
        .collect::<Result<_>>()?;

    let nb = bundles.len();
    let detectors = specs
        .iter()
        .enumerate()
        .map(|(s, _)| {
            let row = &results[s * nb..(s + 1) * nb];
            let datasets: Vec<DatasetReport> = layout
                .iter()
                .enumerate()
                .map(|(i, (name, group))| DatasetReport {
                    name: name.clone(),
                    group: *group,
                    auroc: Stat::from_values(row.iter().map(|c| c.auroc[i]).collect()),
                    fpr: Stat::from_values(row.iter().map(|c| c.fpr[i]).collect()),
                })
                .collect();
            let group_stat = |g: OodGroup| {
                let members: Vec<usize> = (0..layout.len()).filter(|&i| layout[i].1 == g).collect();
                (!members.is_empty()).then(|| {
                    Stat::from_values(
                        row.iter()
                            .map(|c| {
                                members.iter().map(|&i| c.auroc[i]).sum::<f64>()
                                    / members.len() as f64
                            })
                            .collect(),
                    )
                })
            };
            DetectorReport {
                label: row[0].label.clone(),
                spec: row[0].spec.clone(),
                datasets,
                near: group_stat(OodGroup::Near),
                far: group_stat(OodGroup::Far),
                threshold: Stat::from_values(row.iter().map(|c| c.threshold).collect()),
            }
        })
        .collect();

    Ok(EvalReport {
        version: REPORT_VERSION,
        tpr: config.tpr,
        seed: config.seed,
        bundles: bundles.iter().map(|b| b.name.clone()).collect(),
        detectors,
    })
}
