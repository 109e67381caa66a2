//! Component ablation: settings A-D on the same transfers and seeds.

use std::fmt::Write as _;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use aida_core::eval::MetricsReport;
use aida_core::protocol::{train_and_evaluate, Setting};
use aida_core::synth::{generate_domain, make_disjoint, DomainDataset};
use aida_core::trainer::TrainConfig;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::layout::{write_file, write_json, Layout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferScore {
    pub seed: u64,
    pub rank1: f64,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: Setting,
    pub msidg: bool,
    pub pmr: bool,
    pub dfc: bool,
    pub transfers: Vec<TransferScore>,
    pub mean_rank1: f64,
    pub mean_map: f64,
    /// Mean over transfers of this setting's score minus setting A's.
    pub gain_rank1: f64,
    pub gain_map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, s: Setting) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == s)
    }
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len().max(1) as f64;
    v.sum::<f64>() / n
}

fn transfer_data(cfg: &RunConfig, seed: u64) -> Result<(Vec<DomainDataset>, DomainDataset)> {
    let mut all = cfg.domain_specs(seed)?.iter().map(generate_domain).collect::<aida_core::Result<Vec<_>>>()?;
    let target = all.pop().expect("at least two domain specs");
    Ok((make_disjoint(all), target))
}

fn setting_config(cfg: &RunConfig, setting: Setting, seed: u64) -> TrainConfig {
    setting.apply(&TrainConfig { seed, ..cfg.train.clone() })
}

/// Trains and scores every (setting, seed) pair. Returns the table and each
/// setting's per-seed reports.
pub fn run_ablation(cfg: &RunConfig) -> Result<(AblationTable, Vec<(Setting, Vec<MetricsReport>)>)> {
    let seeds = &cfg.ablate.seeds;
    let data = seeds.iter().map(|&s| transfer_data(cfg, s)).collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(Setting, usize)> = Setting::ALL.iter().flat_map(|&s| (0..seeds.len()).map(move |i| (s, i))).collect();
    let reports: Vec<MetricsReport> = jobs
        .par_iter()
        .map(|&(setting, i)| {
            let (sources, target) = &data[i];
            let tc = setting_config(cfg, setting, seeds[i]);
            train_and_evaluate(&tc, sources, target).map(|(_, r)| r).map_err(CliError::from)
        })
        .collect::<Result<_>>()?;

    let per_setting: Vec<(Setting, Vec<MetricsReport>)> =
        Setting::ALL.iter().enumerate().map(|(si, &s)| (s, reports[si * seeds.len()..(si + 1) * seeds.len()].to_vec())).collect();
    let baseline = &per_setting[0].1;
    let rows = per_setting
        .iter()
        .map(|(setting, reps)| {
            let c = setting.components();
            AblationRow {
                setting: *setting,
                msidg: c.msidg,
                pmr: c.pmr,
                dfc: c.dfc,
                transfers: seeds.iter().zip(reps).map(|(&seed, r)| TransferScore { seed, rank1: r.rank1, map: r.map }).collect(),
                mean_rank1: mean(reps.iter().map(|r| r.rank1)),
                mean_map: mean(reps.iter().map(|r| r.map)),
                gain_rank1: mean(reps.iter().zip(baseline).map(|(r, b)| r.rank1 - b.rank1)),
                gain_map: mean(reps.iter().zip(baseline).map(|(r, b)| r.map - b.map)),
            }
        })
        .collect();
    Ok((AblationTable { rows }, per_setting))
}

pub fn table_csv(t: &AblationTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Config(e.to_string());
    let mut header: Vec<String> = ["setting", "msidg", "pmr", "dfc"].map(String::from).to_vec();
    if let Some(first) = t.rows.first() {
        for tr in &first.transfers {
            header.push(format!("rank1_seed{}", tr.seed));
            header.push(format!("map_seed{}", tr.seed));
        }
    }
    header.extend(["mean_rank1", "mean_map", "gain_rank1", "gain_map"].map(String::from));
    w.write_record(&header).map_err(err)?;
    for r in &t.rows {
        let mut rec = vec![format!("{:?}", r.setting), r.msidg.to_string(), r.pmr.to_string(), r.dfc.to_string()];
        for tr in &r.transfers {
            rec.push(tr.rank1.to_string());
            rec.push(tr.map.to_string());
        }
        rec.extend([r.mean_rank1, r.mean_map, r.gain_rank1, r.gain_map].map(|v| v.to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Markdown table in percent: R1/mAP per transfer, then averages and gains.
pub fn table_markdown(t: &AblationTable) -> String {
    let mark = |b: bool| if b { "✓" } else { "" };
    let pct = |v: f64| format!("{:.1}", 100.0 * v);
    let mut s = String::new();
    let seeds: Vec<u64> = t.rows.first().map(|r| r.transfers.iter().map(|x| x.seed).collect()).unwrap_or_default();
    let _ = write!(s, "| Setting | MS-IDG | PMR | DFC |");
    for seed in &seeds {
        let _ = write!(s, " seed {seed} R1 | seed {seed} mAP |");
    }
    let _ = writeln!(s, " Avg R1 | Avg mAP | Avg Gain R1 | Avg Gain mAP |");
    let _ = writeln!(s, "|{}", "---|".repeat(4 + 2 * seeds.len() + 4));
    for r in &t.rows {
        let _ = write!(s, "| {} | {} | {} | {} |", r.setting.label(), mark(r.msidg), mark(r.pmr), mark(r.dfc));
        for tr in &r.transfers {
            let _ = write!(s, " {} | {} |", pct(tr.rank1), pct(tr.map));
        }
        let _ = writeln!(
            s,
            " {} | {} | {:+.1} | {:+.1} |",
            pct(r.mean_rank1),
            pct(r.mean_map),
            100.0 * r.gain_rank1,
            100.0 * r.gain_map
        );
    }
    s
}

/// Runs the ablation and writes `ablate/ablation.{csv,md,json}` plus each
/// setting's reports under its own subdirectory.
pub fn cmd_ablate(cfg: &RunConfig, layout: &Layout) -> Result<AblationTable> {
    let started = std::time::Instant::now();
    let (table, per_setting) = run_ablation(cfg)?;
    let dir = layout.ablate_dir();
    for (setting, reports) in &per_setting {
        write_json(&dir.join(format!("{setting:?}")).join("reports.json"), reports)?;
    }
    write_file(&dir.join("ablation.csv"), table_csv(&table)?)?;
    write_file(&dir.join("ablation.md"), table_markdown(&table))?;
    write_json(&dir.join("ablation.json"), &table)?;
    info!("ablate: {} settings x {} seeds in {:.1?}", Setting::ALL.len(), cfg.ablate.seeds.len(), started.elapsed());
    Ok(table)
}
