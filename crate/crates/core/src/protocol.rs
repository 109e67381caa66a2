//! Experiment protocols: the synthetic multi-source benchmark, the
//! component ablation and leave-one-domain-out evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::rng::{derive_seed, rng_from};
use crate::synth::{generate_domain, make_disjoint, DomainDataset, DomainSpec, StyleShift};
use crate::trainer::{train, Components, TrainConfig, TrainState};

use rand::Rng as _;
use rand_distr::StandardNormal;

/// Shape of the synthetic benchmark: `num_sources` styled source domains and
/// one target whose style lies outside the sources' range on every channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub num_sources: usize,
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub num_cameras: usize,
    pub feature_dim: usize,
    /// Per-channel scales are `exp(N(0, scale_log_sigma²))`.
    pub scale_log_sigma: f64,
    /// Per-channel offsets are `N(0, offset_sigma²)`.
    pub offset_sigma: f64,
    /// How far past the largest source scale (in log space) and offset the
    /// target sits.
    pub target_margin: f64,
    pub camera_jitter: f64,
    pub noise_sigma: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            num_sources: 3,
            num_identities: 20,
            samples_per_identity: 10,
            num_cameras: 2,
            feature_dim: 32,
            scale_log_sigma: 0.3,
            offset_sigma: 1.0,
            target_margin: 0.3,
            camera_jitter: 0.5,
            noise_sigma: 0.5,
        }
    }
}

/// Source specs (domain ids `0..num_sources`) followed by the target spec.
pub fn benchmark_specs(b: &BenchmarkSpec, seed: u64) -> Result<Vec<DomainSpec>> {
    if b.num_sources == 0 {
        return Err(Error::Spec("benchmark needs at least one source".into()));
    }
    let d = b.feature_dim;
    let mut rng = rng_from(derive_seed(seed, "benchmark/styles"));
    let mut styles: Vec<StyleShift> = (0..b.num_sources)
        .map(|_| {
            let scale = (0..d).map(|_| (b.scale_log_sigma * rng.sample::<f64, _>(StandardNormal)).exp()).collect();
            let offset = (0..d).map(|_| b.offset_sigma * rng.sample::<f64, _>(StandardNormal)).collect();
            StyleShift { scale, offset }
        })
        .collect();
    let max_over = |f: &dyn Fn(&StyleShift, usize) -> f64, c: usize| {
        styles.iter().map(|s| f(s, c)).fold(f64::NEG_INFINITY, f64::max)
    };
    let target = StyleShift {
        scale: (0..d).map(|c| max_over(&|s, c| s.scale[c], c) * b.target_margin.exp()).collect(),
        offset: (0..d).map(|c| max_over(&|s, c| s.offset[c], c) + b.target_margin).collect(),
    };
    styles.push(target);
    let specs = styles
        .into_iter()
        .enumerate()
        .map(|(i, style_shift)| DomainSpec {
            domain_id: i,
            num_identities: b.num_identities,
            samples_per_identity: b.samples_per_identity,
            num_cameras: b.num_cameras,
            feature_dim: d,
            style_shift,
            camera_jitter: b.camera_jitter,
            noise_sigma: b.noise_sigma,
            seed: derive_seed(seed, &format!("benchmark/domain/{i}")),
        })
        .collect::<Vec<_>>();
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

/// Generated benchmark: label-disjoint sources and the target.
pub fn benchmark_domains(b: &BenchmarkSpec, seed: u64) -> Result<(Vec<DomainDataset>, DomainDataset)> {
    let mut all = benchmark_specs(b, seed)?.iter().map(generate_domain).collect::<Result<Vec<_>>>()?;
    let target = all.pop().expect("target spec");
    Ok((make_disjoint(all), target))
}

/// Progressive component settings of the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    A,
    B,
    C,
    D,
}

impl Setting {
    pub const ALL: [Setting; 4] = [Setting::A, Setting::B, Setting::C, Setting::D];

    pub fn components(self) -> Components {
        let (msidg, pmr, dfc) = match self {
            Setting::A => (false, false, false),
            Setting::B => (true, false, false),
            Setting::C => (true, true, false),
            Setting::D => (true, true, true),
        };
        Components { msidg, pmr, dfc }
    }

    pub fn label(self) -> &'static str {
        match self {
            Setting::A => "A (baseline)",
            Setting::B => "B (+MS-IDG)",
            Setting::C => "C (+MS-IDG +PMR)",
            Setting::D => "D (full)",
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        TrainConfig { components: self.components(), ..cfg.clone() }
    }
}

/// Trains on `sources` and scores the unseen `target`.
pub fn train_and_evaluate(cfg: &TrainConfig, sources: &[DomainDataset], target: &DomainDataset) -> Result<(TrainState, MetricsReport)> {
    let state = train(cfg, sources)?;
    let mut report = evaluate(&state.params, target, derive_seed(cfg.seed, "eval/kmeans"))?;
    report.loss_trace = state.epochs.clone();
    Ok((state, report))
}

/// Holds each domain out in turn, trains on the rest and evaluates on it.
pub fn leave_one_out(domains: &[DomainDataset], cfg: &TrainConfig) -> Result<Vec<MetricsReport>> {
    if domains.len() < 2 {
        return Err(Error::Protocol(format!("leave-one-domain-out needs >= 2 domains, got {}", domains.len())));
    }
    (0..domains.len())
        .map(|held| {
            let sources: Vec<DomainDataset> =
                domains.iter().enumerate().filter(|&(i, _)| i != held).map(|(_, d)| d.clone()).collect();
            let sources = make_disjoint(sources);
            train_and_evaluate(cfg, &sources, &domains[held]).map(|(_, r)| r)
        })
        .collect()
}
