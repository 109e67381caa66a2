//! Charts and a markdown summary rendered from a run directory's persisted
//! files. Nothing is recomputed.

use std::fmt::Write as _;
use std::path::PathBuf;

use log::info;

use aida_core::eval::MetricsReport;
use aida_core::trainer::{parse_metrics_csv, MetricsRow};

use crate::error::{CliError, Result};
use crate::layout::{read_json, require, write_file, Layout, METRICS_FILE};
use crate::plot::training_charts;
use crate::run::{format_report, AdaptReport};

#[derive(Clone, Debug)]
pub struct ReportSummary {
    pub rows: Vec<MetricsRow>,
    pub files: Vec<PathBuf>,
}

fn read_rows(path: &std::path::Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_metrics_csv(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn final_values(s: &mut String, rows: &[MetricsRow]) {
    let Some(last) = rows.last() else {
        let _ = writeln!(s, "No steps recorded.\n");
        return;
    };
    let _ = writeln!(s, "Final step {} ({} stage, epoch {}):\n", last.step, last.stage, last.epoch);
    let _ = writeln!(s, "| quantity | value |\n|---|---|");
    let mut line = |name: &str, v: Option<f64>| {
        if let Some(v) = v {
            let _ = writeln!(s, "| {name} | {v} |");
        }
    };
    line("loss_total", Some(last.loss_total));
    line("loss_id", last.loss_id);
    line("loss_tri", last.loss_tri);
    line("loss_pmr_point", last.loss_pmr_point);
    line("loss_rel", last.loss_rel);
    line("lambda_pmr", last.lambda_pmr);
    for (j, a) in last.alpha.iter().flatten().enumerate() {
        line(&format!("alpha_{}", j + 1), Some(*a));
    }
    s.push('\n');
}

pub fn cmd_report(layout: &Layout) -> Result<ReportSummary> {
    let metrics = layout.train_dir().join(METRICS_FILE);
    require(&metrics, "run train first")?;
    let rows = read_rows(&metrics)?;
    let dir = layout.report_dir();
    let mut files = Vec::new();
    for (name, svg) in training_charts(&rows) {
        let path = dir.join(name);
        write_file(&path, svg)?;
        files.push(path);
    }

    let mut s = String::from("# Run summary\n\n## Training\n\n");
    let _ = writeln!(s, "{} steps logged in `train/{METRICS_FILE}`.\n", rows.len());
    final_values(&mut s, &rows);

    let adapt_metrics = layout.adapt_dir().join(METRICS_FILE);
    if adapt_metrics.exists() {
        let adapt_rows = read_rows(&adapt_metrics)?;
        for (name, svg) in training_charts(&adapt_rows) {
            let path = dir.join(format!("adapt_{name}"));
            write_file(&path, svg)?;
            files.push(path);
        }
        s.push_str("## Source-free adaptation\n\n");
        final_values(&mut s, &adapt_rows);
        let adapt_json = layout.adapt_dir().join("adapt.json");
        if adapt_json.exists() {
            let a: AdaptReport = read_json(&adapt_json)?;
            let _ = writeln!(s, "Target mAP before {:.4}, after {:.4}.\n", a.before.map, a.after.map);
        }
    }

    let eval_json = layout.eval_dir().join("report.json");
    if eval_json.exists() {
        let r: MetricsReport = read_json(&eval_json)?;
        s.push_str("## Evaluation\n\n");
        s.push_str(&format_report(&r));
        s.push('\n');
    }

    let ablation = layout.ablate_dir().join("ablation.md");
    if ablation.exists() {
        let md = std::fs::read_to_string(&ablation).map_err(|e| CliError::io(&ablation, e))?;
        s.push_str("## Ablation\n\n");
        s.push_str(&md);
        s.push('\n');
    }

    let summary = dir.join("summary.md");
    write_file(&summary, s)?;
    files.push(summary);
    info!("report: {} files in {}", files.len(), dir.display());
    Ok(ReportSummary { rows, files })
}
