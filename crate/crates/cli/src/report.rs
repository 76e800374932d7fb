//! Join evaluation outputs into a comparison table and heatmap data.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mirnet_core::io::{read_json, write_atomic, write_json};
use mirnet_core::metrics::HEADLINE_METRICS;

use crate::error::CliError;
use crate::pipeline::{Layout, MetricsFile, BOOSTED_METRICS_FILE, METRICS_FILE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub seed: u64,
    pub example_f1: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_pr_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub label_names: Vec<String>,
    /// Per-label F1, one row per model.
    pub per_label_f1: Vec<Vec<f64>>,
    pub dimension_names: Vec<String>,
    /// Missed detections per label family, one row per model.
    pub missed_by_dimension: Vec<Vec<usize>>,
}

/// Sort key: full model first, then single ablations in C, G, P order.
fn tag_rank(tag: &str) -> (usize, String) {
    let rank = ["", "-C", "-G", "-P"].iter().position(|t| *t == tag).unwrap_or(4);
    (rank, tag.to_string())
}

fn eval_dirs(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(root).map_err(|e| mirnet_core::Error::io(root, e))?;
    let mut dirs: Vec<(String, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(METRICS_FILE).is_file())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let tag = name.strip_prefix("eval")?.to_string();
            let valid = tag.is_empty() || (tag.len() > 1 && tag.starts_with('-') && tag[1..].chars().all(|c| "CGP".contains(c)));
            valid.then_some((tag, e.path()))
        })
        .collect();
    dirs.sort_by_key(|(tag, _)| tag_rank(tag));
    Ok(dirs.into_iter().map(|(_, p)| p).collect())
}

/// Collect every `eval*` directory under the output root.
pub fn report(layout: &Layout) -> Result<Report, CliError> {
    let dirs = if layout.root.is_dir() { eval_dirs(&layout.root)? } else { Vec::new() };
    if dirs.is_empty() {
        return Err(CliError::Missing {
            path: layout.root.join("eval").join(METRICS_FILE),
            verb: "eval",
        });
    }
    let mut files: Vec<MetricsFile> = Vec::new();
    for d in &dirs {
        files.push(read_json(&d.join(METRICS_FILE))?);
        let boosted = d.join(BOOSTED_METRICS_FILE);
        if boosted.is_file() {
            files.push(read_json(&boosted)?);
        }
    }
    let first = &files[0].metrics;
    let label_names: Vec<String> = first.per_label.iter().map(|r| r.label.clone()).collect();
    let dimension_names: Vec<String> = first.missed_by_dimension.iter().map(|d| d.name.clone()).collect();
    for f in &files {
        let labels: Vec<&String> = f.metrics.per_label.iter().map(|r| &r.label).collect();
        if labels != label_names.iter().collect::<Vec<_>>() {
            return Err(CliError::Runtime(mirnet_core::Error::Invalid(format!(
                "{} was evaluated on a different label set",
                f.model
            ))));
        }
    }
    let report = Report {
        rows: files
            .iter()
            .map(|f| {
                let m = &f.metrics;
                ReportRow {
                    model: f.model.clone(),
                    seed: f.seed,
                    example_f1: m.example_f1,
                    micro_f1: m.micro_f1,
                    macro_f1: m.macro_f1,
                    macro_precision: m.macro_precision,
                    macro_recall: m.macro_recall,
                    macro_pr_auc: m.macro_pr_auc,
                }
            })
            .collect(),
        per_label_f1: files.iter().map(|f| f.metrics.per_label.iter().map(|r| r.f1).collect()).collect(),
        missed_by_dimension: files
            .iter()
            .map(|f| f.metrics.missed_by_dimension.iter().map(|d| d.missed).collect())
            .collect(),
        label_names,
        dimension_names,
    };
    write_report(&layout.report_dir(), &report)?;
    Ok(report)
}

fn matrix_csv<T: std::fmt::Display>(columns: &[String], rows: &[ReportRow], values: &[Vec<T>]) -> String {
    let mut out = format!("model,{}\n", columns.join(","));
    for (r, v) in rows.iter().zip(values) {
        let cells: Vec<String> = v.iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "{},{}", r.model, cells.join(","));
    }
    out
}

fn write_report(dir: &Path, report: &Report) -> Result<(), CliError> {
    let mut table = format!("model,seed,{}\n", HEADLINE_METRICS.join(","));
    for r in &report.rows {
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{}",
            r.model, r.seed, r.example_f1, r.micro_f1, r.macro_f1, r.macro_precision, r.macro_recall, r.macro_pr_auc
        );
    }
    write_atomic(&dir.join("table.csv"), table.as_bytes())?;
    write_json(&dir.join("table.json"), report)?;
    write_atomic(
        &dir.join("per_label_f1.csv"),
        matrix_csv(&report.label_names, &report.rows, &report.per_label_f1).as_bytes(),
    )?;
    write_atomic(
        &dir.join("missed_by_dimension.csv"),
        matrix_csv(&report.dimension_names, &report.rows, &report.missed_by_dimension).as_bytes(),
    )?;
    Ok(())
}
