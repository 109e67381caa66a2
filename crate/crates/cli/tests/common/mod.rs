#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;

use aida_core::model::ModelParams;
use aida_core::synth::DomainDataset;
use aida_cli::RunConfig;
use aida_oracles::rank::{brute_force_rank, cmc_curve, mean_average_precision, OracleItem};

/// A small, fast run configuration.
pub fn small_config(seed: u64) -> RunConfig {
    RunConfig::from_json(&format!(
        r#"{{"format_version": 1, "seed": {seed},
            "data": {{"benchmark": {{"num_identities": 8, "samples_per_identity": 6, "feature_dim": 12}}}},
            "train": {{"epochs_sup": 3, "epochs_aida": 2, "epochs_sf": 2, "p": 6, "k_inst": 2,
                       "lr_sup": 1e-3, "lr_aida": 1e-3, "lr_sf": 1e-3,
                       "model": {{"hidden": [24], "embed_dim": 8}},
                       "sf": {{"batch_size": 12, "pseudo_clusters": 8}}}},
            "ablate": {{"seeds": [0, 1]}}}}"#
    ))
    .unwrap()
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

/// Rank-1 and mAP computed by the exhaustive ranking oracle, with its own
/// query split: the first sample of every (identity, camera) pair.
pub fn oracle_scores(params: &ModelParams, dataset: &DomainDataset) -> (f64, f64) {
    let emb = params.embed_rows(&dataset.matrix()).unwrap();
    let mut seen = BTreeSet::new();
    let (mut query, mut gallery) = (Vec::new(), Vec::new());
    for (i, s) in dataset.samples.iter().enumerate() {
        let item = OracleItem { embedding: emb.row(i).to_vec(), identity: s.identity, camera: s.camera };
        if seen.insert((s.identity, s.camera)) {
            query.push(item);
        } else {
            gallery.push(item);
        }
    }
    let ranks = brute_force_rank(&query, &gallery);
    (cmc_curve(&ranks, gallery.len())[0], mean_average_precision(&ranks))
}
