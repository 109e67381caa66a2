#![allow(dead_code)]

use aida_core::model::ModelConfig;
use aida_core::synth::{generate_domain, make_disjoint, DomainDataset, DomainSpec, StyleShift};
use aida_core::trainer::TrainConfig;

pub fn spec(domain_id: usize, ids: usize, noise: f64, seed: u64) -> DomainSpec {
    DomainSpec {
        domain_id,
        num_identities: ids,
        samples_per_identity: 6,
        num_cameras: 2,
        feature_dim: 8,
        style_shift: StyleShift::uniform(8, 1.0 + 0.3 * domain_id as f64, 0.5 * domain_id as f64),
        camera_jitter: 0.2,
        noise_sigma: noise,
        seed,
    }
}

/// Three small label-disjoint source domains.
pub fn sources(seed: u64) -> Vec<DomainDataset> {
    make_disjoint((0..3).map(|d| generate_domain(&spec(d, 5, 0.3, seed * 10 + d as u64)).unwrap()).collect())
}

/// A fast configuration for the small domains above.
pub fn quick_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs_sup: 3,
        epochs_aida: 3,
        epochs_sf: 2,
        p: 6,
        k_inst: 2,
        lr_sup: 1e-3,
        lr_aida: 1e-3,
        lr_sf: 1e-3,
        model: ModelConfig { hidden: vec![16, 12], embed_dim: 8, classify_on_raw: false },
        seed,
        ..Default::default()
    };
    cfg.sf.batch_size = 10;
    cfg.sf.pseudo_clusters = 6;
    cfg
}
