//! The train, adapt and eval commands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use aida_core::checkpoint;
use aida_core::eval::{evaluate, MetricsReport};
use aida_core::rng::derive_seed;
use aida_core::synth::DomainDataset;
use aida_core::trainer::{sf_refine, stage1_supervised, stage2_aida, train, MetricsRow, TrainState};

use crate::config::RunConfig;
use crate::data::{load_sources, source_paths, target_path};
use crate::error::{CliError, Result};
use crate::layout::{require, write_file, write_json, Layout, CHECKPOINT_FILE, CONTROLLER_FILE, METRICS_FILE};
use crate::plot::training_charts;

/// Which training stages `train` runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StageSelect {
    /// Supervised pre-training only.
    Sup,
    /// Stage 2 only, starting from an existing checkpoint.
    Aida,
    #[default]
    All,
}

/// Evaluation seed for clustering metrics under root seed `seed`.
pub fn eval_seed(seed: u64) -> u64 {
    derive_seed(seed, "eval/kmeans")
}

/// Controller inputs and outputs per step, one row per training step.
pub fn controller_csv(rows: &[MetricsRow], k: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["stage", "step", "entropy", "grad_var", "lambda_pmr"].map(String::from).to_vec();
    header.extend((1..=k).map(|i| format!("alpha_{i}")));
    let err = |e: csv::Error| CliError::Csv { path: PathBuf::from(CONTROLLER_FILE), source: e };
    w.write_record(&header).map_err(err)?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let mut rec = vec![r.stage.to_string(), r.step.to_string(), cell(r.entropy), cell(r.grad_var), cell(r.lambda_pmr)];
        rec.extend((0..k).map(|j| cell(r.alpha.as_ref().and_then(|a| a.get(j).copied()))));
        w.write_record(&rec).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Checkpoint, metrics CSV, controller trace and charts for a finished state.
fn write_run(dir: &Path, state: &TrainState) -> Result<()> {
    checkpoint::save(&state.params, &dir.join(CHECKPOINT_FILE))?;
    write_file(&dir.join(METRICS_FILE), state.metrics_csv()?)?;
    write_file(&dir.join(CONTROLLER_FILE), controller_csv(&state.metrics, state.num_domains())?)?;
    for (name, svg) in training_charts(&state.metrics) {
        write_file(&dir.join(name), svg)?;
    }
    Ok(())
}

fn train_checkpoint(cfg: &RunConfig, layout: &Layout) -> PathBuf {
    cfg.paths.checkpoint.clone().unwrap_or_else(|| layout.train_dir().join(CHECKPOINT_FILE))
}

/// Runs the selected stages on the configured sources and writes the run
/// artifacts under `train/`.
pub fn cmd_train(cfg: &RunConfig, layout: &Layout, stage: StageSelect) -> Result<TrainState> {
    let sources = load_sources(&source_paths(cfg, layout)?)?;
    let tc = cfg.train_config();
    let state = match stage {
        StageSelect::Sup => stage1_supervised(&tc, &sources)?,
        StageSelect::All => train(&tc, &sources)?,
        StageSelect::Aida => {
            let path = train_checkpoint(cfg, layout);
            require(&path, "run train --stage sup first or set paths.checkpoint")?;
            let params = checkpoint::load(&path)?;
            stage2_aida(TrainState::from_params(params, sources.len(), &tc), &tc, &sources)?
        }
    };
    let dir = layout.train_dir();
    crate::layout::ensure_dir(&dir)?;
    write_run(&dir, &state)?;
    info!("train: {} steps, artifacts in {}", state.metrics.len(), dir.display());
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub before: MetricsReport,
    pub after: MetricsReport,
}

/// Source-free refinement of the trained checkpoint on the target alone.
///
/// Refuses to run when the config names any source dataset.
pub fn cmd_adapt(cfg: &RunConfig, layout: &Layout) -> Result<AdaptReport> {
    if !cfg.paths.sources.is_empty() {
        let listed: Vec<String> = cfg.paths.sources.iter().map(|p| p.display().to_string()).collect();
        return Err(CliError::SourceFree(listed.join(", ")));
    }
    let ckpt = train_checkpoint(cfg, layout);
    require(&ckpt, "run train first or set paths.checkpoint")?;
    let params = checkpoint::load(&ckpt)?;
    let target = DomainDataset::load_json(&target_path(cfg, layout)?)?;
    let tc = cfg.train_config();
    let seed = eval_seed(cfg.seed);

    let before = evaluate(&params, &target, seed)?;
    let state = sf_refine(TrainState::from_params(params, 1, &tc), &tc, &target.matrix())?;
    let after = evaluate(&state.params, &target, seed)?;

    let dir = layout.adapt_dir();
    crate::layout::ensure_dir(&dir)?;
    write_run(&dir, &state)?;
    let report = AdaptReport { before, after };
    write_json(&dir.join("adapt.json"), &report)?;
    info!("adapt: target mAP {:.4} -> {:.4}", report.before.map, report.after.map);
    Ok(report)
}

/// `paths.checkpoint`, else the adapted checkpoint if present, else the
/// trained one.
pub fn eval_checkpoint(cfg: &RunConfig, layout: &Layout) -> PathBuf {
    if let Some(p) = &cfg.paths.checkpoint {
        return p.clone();
    }
    let adapted = layout.adapt_dir().join(CHECKPOINT_FILE);
    if adapted.exists() {
        adapted
    } else {
        layout.train_dir().join(CHECKPOINT_FILE)
    }
}

/// Scores a checkpoint on the target dataset and writes `eval/report.json`.
pub fn cmd_eval(cfg: &RunConfig, layout: &Layout) -> Result<MetricsReport> {
    let ckpt = eval_checkpoint(cfg, layout);
    require(&ckpt, "run train first or set paths.checkpoint")?;
    let params = checkpoint::load(&ckpt)?;
    let dataset = DomainDataset::load_json(&target_path(cfg, layout)?)?;
    let report = evaluate(&params, &dataset, eval_seed(cfg.seed))?;
    write_json(&layout.eval_dir().join("report.json"), &report)?;
    info!("eval: {} on {} samples", ckpt.display(), dataset.samples.len());
    Ok(report)
}

/// Fixed-width table of the headline metrics, four decimals.
pub fn format_report(r: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| metric     |  value |");
    let _ = writeln!(s, "|------------|--------|");
    for (name, v) in [
        ("rank1", r.rank1),
        ("rank5", r.rank5),
        ("rank10", r.rank10),
        ("mAP", r.map),
        ("NMI", r.nmi),
        ("silhouette", r.silhouette),
    ] {
        let _ = writeln!(s, "| {name:<10} | {v:.4} |");
    }
    let _ = writeln!(s, "valid queries: {}, skipped: {}", r.valid_queries, r.skipped_queries);
    s
}
