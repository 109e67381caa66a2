//! Training loops: supervised pre-training, intermediate-domain training with
//! controller feedback, and source-free refinement on unlabeled target rows.
//!
//! Every random draw is seeded from `TrainConfig::seed` through
//! [`derive_seed`] with a tag naming the stage and step, so a run is a pure
//! function of its configuration.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dfc::{batch_entropy, gradient_variance, ControllerConfig, ControllerMode, ControllerState};
use crate::error::{Error, Result};
use crate::eval::{kmeans, EpochLoss};
use crate::losses::{id_loss, pmr_loss, supervised_loss, total_loss, LossConfig};
use crate::model::{forward, head_forward, ModelConfig, ModelParams};
use crate::msidg::{aggregate_stats, channel_stats, statistics_transfer, ChannelStats, DEFAULT_EPS};
use crate::optim::{optimizer_step, AdamConfig, AdamState};
use crate::rng::derive_seed;
use crate::synth::{pk_sample, unlabeled_batches, Batch, DomainDataset};
use crate::tape::{concat_rows, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sup,
    Aida,
    Sf,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Sup => "sup",
            Stage::Aida => "aida",
            Stage::Sf => "sf",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sup" => Ok(Stage::Sup),
            "aida" => Ok(Stage::Aida),
            "sf" => Ok(Stage::Sf),
            other => Err(Error::Format(format!("unknown stage {other:?}"))),
        }
    }
}

/// Which parts of the second stage are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Components {
    pub msidg: bool,
    pub pmr: bool,
    pub dfc: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components { msidg: true, pmr: true, dfc: true }
    }
}

/// Statistics used to normalise content features before restyling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Each domain's rows by that domain's own statistics.
    #[default]
    PerDomain,
    /// The whole mixed-domain batch by its pooled statistics.
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsidgConfig {
    pub eps: f64,
    pub normalization: Normalization,
    /// Weight of the supervised loss evaluated on intermediate-domain
    /// features. Zero leaves the intermediate branch to the consistency loss.
    pub lambda_int: f64,
    /// Leave each domain's own statistics out of the donor for its rows.
    /// Needs per-domain normalization.
    pub exclude_own: bool,
}

impl Default for MsidgConfig {
    fn default() -> Self {
        MsidgConfig { eps: DEFAULT_EPS, normalization: Normalization::PerDomain, lambda_int: 1.0, exclude_own: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfConfig {
    /// Pseudo-domains per target batch.
    pub clusters: usize,
    pub batch_size: usize,
    pub consistency_weight: f64,
    pub pseudo_labels: bool,
    /// Clusters for pseudo-labels, fitted over all target embeddings at the
    /// start of every epoch.
    pub pseudo_clusters: usize,
    pub pseudo_weight: f64,
    /// Temperature of the centroid classifier used for pseudo-labels.
    pub temperature: f64,
}

impl Default for SfConfig {
    fn default() -> Self {
        SfConfig {
            clusters: 2,
            batch_size: 32,
            consistency_weight: 1.0,
            pseudo_labels: true,
            pseudo_clusters: 32,
            pseudo_weight: 1.0,
            temperature: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_sup: usize,
    pub epochs_aida: usize,
    pub epochs_sf: usize,
    /// Identities per batch.
    pub p: usize,
    /// Instances per identity.
    pub k_inst: usize,
    pub lr_sup: f64,
    pub lr_aida: f64,
    pub lr_sf: f64,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub controller: ControllerConfig,
    pub msidg: MsidgConfig,
    pub components: Components,
    pub sf: SfConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_sup: 30,
            epochs_aida: 20,
            epochs_sf: 10,
            p: 12,
            k_inst: 4,
            lr_sup: 3e-4,
            lr_aida: 1e-4,
            lr_sf: 1e-4,
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            controller: ControllerConfig::default(),
            msidg: MsidgConfig::default(),
            components: Components::default(),
            sf: SfConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("lr_sup", self.lr_sup), ("lr_aida", self.lr_aida), ("lr_sf", self.lr_sf)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        if self.p < 2 || self.k_inst < 2 {
            return Err(Error::Config(format!("batch needs p >= 2 and k_inst >= 2, got {} and {}", self.p, self.k_inst)));
        }
        if self.components.pmr && !self.components.msidg {
            return Err(Error::Config("components.pmr needs components.msidg (no mirror features otherwise)".into()));
        }
        if !(self.msidg.eps > 0.0) || !(self.msidg.lambda_int >= 0.0) {
            return Err(Error::Config("msidg.eps must be > 0 and msidg.lambda_int >= 0".into()));
        }
        if self.msidg.exclude_own && self.msidg.normalization == Normalization::Batch {
            return Err(Error::Config("msidg.exclude_own needs per_domain normalization".into()));
        }
        let sf = &self.sf;
        if sf.pseudo_labels && sf.pseudo_clusters == 0 {
            return Err(Error::Config("sf.pseudo_clusters must be >= 1 with pseudo_labels".into()));
        }
        if sf.clusters == 0 || sf.batch_size < 2 || !(sf.temperature > 0.0) {
            return Err(Error::Config("sf needs clusters >= 1, batch_size >= 2 and temperature > 0".into()));
        }
        if !(sf.consistency_weight >= 0.0) || !(sf.pseudo_weight >= 0.0) {
            return Err(Error::Config("sf weights must be >= 0".into()));
        }
        self.loss.validate()?;
        self.controller.validate()
    }
}

/// One logged training step. Values that do not apply to a step are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_id: Option<f64>,
    pub loss_tri: Option<f64>,
    pub loss_pmr_point: Option<f64>,
    pub loss_rel: Option<f64>,
    pub entropy: Option<f64>,
    pub grad_var: Option<f64>,
    pub lambda_pmr: Option<f64>,
    pub alpha: Option<Vec<f64>>,
}

pub const METRICS_COLUMNS: [&str; 11] = [
    "stage",
    "epoch",
    "step",
    "loss_total",
    "loss_id",
    "loss_tri",
    "loss_pmr_point",
    "loss_rel",
    "entropy",
    "grad_var",
    "lambda_pmr",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders rows as CSV with `alpha_1..alpha_k` columns.
pub fn metrics_csv(rows: &[MetricsRow], k: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = METRICS_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((1..=k).map(|i| format!("alpha_{i}")));
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.stage.to_string(),
            r.epoch.to_string(),
            r.step.to_string(),
            r.loss_total.to_string(),
            opt(r.loss_id),
            opt(r.loss_tri),
            opt(r.loss_pmr_point),
            opt(r.loss_rel),
            opt(r.entropy),
            opt(r.grad_var),
            opt(r.lambda_pmr),
        ];
        match &r.alpha {
            Some(a) if a.len() == k => rec.extend(a.iter().map(|x| x.to_string())),
            Some(a) => return Err(Error::Format(format!("step {} has {} mixing weights, header has {k}", r.step, a.len()))),
            None => rec.extend(std::iter::repeat_n(String::new(), k)),
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Parses the output of [`metrics_csv`]; the number of mixing weights is read
/// from the header.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    let fixed: Vec<&str> = header.iter().take(METRICS_COLUMNS.len()).collect();
    if fixed != METRICS_COLUMNS {
        return Err(Error::Format(format!("unexpected metrics header {:?}", header)));
    }
    let k = header.len() - METRICS_COLUMNS.len();
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let bad = |col: &str| Error::Format(format!("metrics row {}: bad {col}", line + 1));
        let num = |i: usize| -> Result<Option<f64>> {
            let s = &rec[i];
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(&header[i]))
            }
        };
        let alpha: Vec<Option<f64>> = (0..k).map(|j| num(METRICS_COLUMNS.len() + j)).collect::<Result<_>>()?;
        out.push(MetricsRow {
            stage: rec[0].parse()?,
            epoch: rec[1].parse().map_err(|_| bad("epoch"))?,
            step: rec[2].parse().map_err(|_| bad("step"))?,
            loss_total: num(3)?.ok_or_else(|| bad("loss_total"))?,
            loss_id: num(4)?,
            loss_tri: num(5)?,
            loss_pmr_point: num(6)?,
            loss_rel: num(7)?,
            entropy: num(8)?,
            grad_var: num(9)?,
            lambda_pmr: num(10)?,
            alpha: if k > 0 && alpha.iter().all(Option::is_some) { Some(alpha.into_iter().flatten().collect()) } else { None },
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub controller: ControllerState,
    /// Completed epochs per stage, in the order they ran.
    pub epoch: usize,
    /// Global step counter across stages.
    pub step: usize,
    pub metrics: Vec<MetricsRow>,
    pub epochs: Vec<EpochLoss>,
}

impl TrainState {
    /// Fresh optimizer moments and controller around existing parameters.
    pub fn from_params(params: ModelParams, num_domains: usize, cfg: &TrainConfig) -> Self {
        let adam = AdamState::new(params.named().into_iter().map(|(_, t)| t));
        TrainState {
            params,
            adam,
            controller: ControllerState::new(num_domains.max(1), &cfg.controller),
            epoch: 0,
            step: 0,
            metrics: Vec::new(),
            epochs: Vec::new(),
        }
    }

    pub fn num_domains(&self) -> usize {
        self.controller.alpha.len()
    }

    pub fn metrics_csv(&self) -> Result<String> {
        metrics_csv(&self.metrics, self.num_domains())
    }

    pub fn write_metrics(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.metrics_csv()?).map_err(|e| Error::io(path, e))
    }
}

fn check_sources(sources: &[DomainDataset]) -> Result<(usize, usize)> {
    if sources.is_empty() {
        return Err(Error::Contract("training needs at least one source domain".into()));
    }
    let dim = sources[0].feature_dim();
    let mut seen = BTreeSet::new();
    for (i, ds) in sources.iter().enumerate() {
        if ds.feature_dim() != dim {
            return Err(Error::Contract(format!("source {i} has feature dim {}, expected {dim}", ds.feature_dim())));
        }
        for id in ds.identities() {
            if !seen.insert(id) {
                return Err(Error::Contract(format!("identity {id} appears in more than one source (labels must be disjoint)")));
            }
        }
    }
    let classes = seen.iter().next_back().map(|m| m + 1).unwrap_or(0);
    Ok((dim, classes))
}

/// Parameters initialised for `sources` with a fresh optimizer and controller.
pub fn init_state(cfg: &TrainConfig, sources: &[DomainDataset]) -> Result<TrainState> {
    cfg.validate()?;
    let (dim, classes) = check_sources(sources)?;
    let params = ModelParams::init(dim, classes, &cfg.model, derive_seed(cfg.seed, "model/init"))?;
    Ok(TrainState::from_params(params, sources.len(), cfg))
}

fn steps_per_epoch(cfg: &TrainConfig, sources: &[DomainDataset]) -> usize {
    let ids: usize = sources.iter().map(|d| d.identities().len()).sum();
    ids.div_ceil(cfg.p).max(1)
}

fn training_error(stage: Stage, step: usize, detail: impl Into<String>) -> Error {
    let stage = stage.as_str();
    Error::Training { stage, step, detail: detail.into() }
}

/// Non-finite values surfacing inside a step are reported as divergence.
fn as_divergence(e: Error, stage: Stage, step: usize) -> Error {
    match e {
        Error::DegenerateEmbedding { row, norm } if !norm.is_finite() => {
            training_error(stage, step, format!("embedding row {row} has norm {norm}"))
        }
        Error::Tensor(t @ crate::error::TensorError::Domain { .. }) => training_error(stage, step, t.to_string()),
        other => other,
    }
}

/// Applies one optimizer step from `loss` and returns the loss value, the
/// gradient variance and the gradients in canonical order.
fn apply_step<'t>(
    state: &mut TrainState,
    tape: &'t Tape,
    params: &[Var<'t>],
    loss: Var<'t>,
    lr: f64,
    hyper: &AdamConfig,
    stage: Stage,
) -> Result<(f64, f64)> {
    let value = loss.value().item();
    if !value.is_finite() {
        return Err(training_error(stage, state.step, format!("loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    let g: Vec<&Tensor> = params.iter().map(|v| grads.wrt(*v)).collect();
    if g.iter().any(|t| !t.is_finite()) {
        return Err(training_error(stage, state.step, "non-finite gradient"));
    }
    let grad_var = gradient_variance(g.iter().copied())?;
    optimizer_step(&mut state.params.tensors_mut(), &g, &mut state.adam, lr, hyper);
    if state.params.check_finite().is_err() {
        return Err(training_error(stage, state.step, "non-finite parameters after update"));
    }
    Ok((value, grad_var))
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
}

/// Mixing weights of the domains present in a batch, renormalised.
fn present_weights(alpha: &[f64], present: &[usize]) -> Vec<f64> {
    let w: Vec<f64> = present.iter().map(|&s| alpha[s]).collect();
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter().map(|x| x / s).collect()
    } else {
        vec![1.0 / present.len() as f64; present.len()]
    }
}

/// Restyles the batch with the α-weighted aggregate of the per-domain
/// statistics. Rows keep their batch order.
fn intermediate_features<'t>(f: Var<'t>, batch: &Batch, alpha: &[f64], cfg: &MsidgConfig) -> Result<Var<'t>> {
    let eps = cfg.eps;
    let groups = batch.groups();
    let order: Vec<usize> = groups.iter().flat_map(|(_, rows)| rows.iter().copied()).collect();
    if order.iter().enumerate().any(|(i, &r)| i != r) {
        return Err(Error::Contract("batch rows must be grouped by source domain".into()));
    }
    let fv = f.value();
    let stats: Vec<ChannelStats> = groups.iter().map(|(_, rows)| channel_stats(&fv.select_rows(rows))).collect::<Result<_>>()?;
    let present: Vec<usize> = groups.iter().map(|(s, _)| *s).collect();
    let donor = aggregate_stats(&stats, &present_weights(alpha, &present))?;
    if cfg.normalization == Normalization::Batch {
        return statistics_transfer(f, &donor, eps);
    }
    let parts: Vec<Var<'t>> = groups
        .iter()
        .enumerate()
        .map(|(g, (_, rows))| {
            let content = f.select_rows(rows)?;
            // With one domain present there is nothing to exclude.
            if !cfg.exclude_own || groups.len() < 2 {
                return statistics_transfer(content, &donor, eps);
            }
            let others: Vec<usize> = (0..groups.len()).filter(|&h| h != g).collect();
            let o_stats: Vec<ChannelStats> = others.iter().map(|&h| stats[h].clone()).collect();
            let o_present: Vec<usize> = others.iter().map(|&h| present[h]).collect();
            statistics_transfer(content, &aggregate_stats(&o_stats, &present_weights(alpha, &o_present))?, eps)
        })
        .collect::<Result<_>>()?;
    Ok(concat_rows(&parts)?)
}

struct StepReport {
    row: MetricsRow,
    correct: usize,
}

fn labeled_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    batch: &Batch,
    stage: Stage,
    lr: f64,
    components: Option<Components>,
) -> Result<StepReport> {
    let seed = derive_seed(cfg.seed, &format!("{stage}/step/{}/loss", state.step));
    let tape = Tape::new();
    let vars = state.params.register(&tape);
    let params = vars.all();
    let fw = forward(&vars, tape.constant(batch.x.clone()))?;
    let sup = supervised_loss(fw.posteriors, fw.normalized, &batch.labels, &cfg.loss, derive_seed(seed, "tri"))?;
    let mut total = sup.total;
    let mut entropy_source = fw.posteriors;
    let (mut pmr_point, mut pmr_rel, mut lambda_used, mut alpha_used) = (None, None, None, None);
    let comps = components.unwrap_or(Components { msidg: false, pmr: false, dfc: false });

    if comps.msidg {
        let alpha = state.controller.alpha.as_slice().to_vec();
        let f_mix = intermediate_features(fw.features, batch, &alpha, &cfg.msidg)?;
        let mirror = head_forward(&vars, f_mix)?;
        let inter =
            supervised_loss(mirror.posteriors, mirror.normalized, &batch.labels, &cfg.loss, derive_seed(seed, "tri/int"))?;
        total = total.add(inter.total.scale(cfg.msidg.lambda_int)?)?;
        if comps.pmr {
            let pairs = cfg.loss.pair_policy.pairs(batch.len(), derive_seed(seed, "pairs"));
            let pmr = pmr_loss(fw.normalized, mirror.normalized, &cfg.loss, &pairs)?;
            let lambda = if comps.dfc { state.controller.lambda_pmr } else { cfg.controller.lambda_init };
            total = total_loss(total, pmr.total, lambda)?;
            pmr_point = Some(pmr.point.value().item());
            pmr_rel = Some(pmr.rel.value().item());
            lambda_used = Some(lambda);
        }
        entropy_source = mirror.posteriors;
        alpha_used = Some(alpha);
    }

    let (loss_total, grad_var) = apply_step(state, &tape, &params, total, lr, &cfg.adam, stage)?;
    let post = entropy_source.value();
    let entropy = batch_entropy(&post)?;

    if comps.dfc {
        let k = state.num_domains();
        let per_domain = match state.controller.mode {
            ControllerMode::Literal => None,
            ControllerMode::PerDomain => {
                let mut ents = vec![entropy; k];
                for (src, rows) in batch.groups() {
                    ents[src] = batch_entropy(&post.select_rows(&rows))?;
                }
                Some(ents)
            }
        };
        state.controller.step(entropy, grad_var, per_domain.as_deref())?;
    }

    let pv = fw.posteriors.value();
    let correct = (0..batch.len()).filter(|&i| argmax(pv.row(i)) == batch.labels[i]).count();
    let row = MetricsRow {
        stage,
        epoch: state.epoch,
        step: state.step,
        loss_total,
        loss_id: Some(sup.id.value().item()),
        loss_tri: Some(sup.tri.value().item()),
        loss_pmr_point: pmr_point,
        loss_rel: pmr_rel,
        entropy: Some(entropy),
        grad_var: Some(grad_var),
        lambda_pmr: lambda_used,
        alpha: alpha_used,
    };
    Ok(StepReport { row, correct })
}

fn labeled_epochs(
    mut state: TrainState,
    cfg: &TrainConfig,
    sources: &[DomainDataset],
    stage: Stage,
    epochs: usize,
    lr: f64,
    components: Option<Components>,
) -> Result<TrainState> {
    if epochs == 0 {
        return Ok(state);
    }
    cfg.validate()?;
    check_sources(sources)?;
    if sources.len() != state.num_domains() {
        return Err(Error::Contract(format!(
            "state tracks {} domains, {} sources given",
            state.num_domains(),
            sources.len()
        )));
    }
    let refs: Vec<&DomainDataset> = sources.iter().collect();
    let steps = steps_per_epoch(cfg, sources);
    for epoch in 0..epochs {
        let (mut loss_sum, mut correct, mut rows) = (0.0, 0usize, 0usize);
        for _ in 0..steps {
            let batch = pk_sample(&refs, cfg.p, cfg.k_inst, derive_seed(cfg.seed, &format!("{stage}/step/{}/batch", state.step)))?;
            let StepReport { row, correct: c } =
                labeled_step(&mut state, cfg, &batch, stage, lr, components).map_err(|e| as_divergence(e, stage, state.step))?;
            loss_sum += row.loss_total;
            correct += c;
            rows += batch.len();
            state.metrics.push(row);
            state.step += 1;
        }
        let entry = EpochLoss {
            stage: stage.to_string(),
            epoch,
            loss: loss_sum / steps as f64,
            train_accuracy: Some(correct as f64 / rows as f64),
        };
        log::debug!("{stage} epoch {epoch}: loss {:.6} acc {:.3}", entry.loss, entry.train_accuracy.unwrap_or(0.0));
        state.epochs.push(entry);
        state.epoch += 1;
    }
    Ok(state)
}

/// Supervised pre-training from freshly initialised parameters.
pub fn stage1_supervised(cfg: &TrainConfig, sources: &[DomainDataset]) -> Result<TrainState> {
    let state = init_state(cfg, sources)?;
    labeled_epochs(state, cfg, sources, Stage::Sup, cfg.epochs_sup, cfg.lr_sup, None)
}

/// Intermediate-domain training continuing from `state`. The active parts
/// are taken from `cfg.components`; with all of them off this is plain
/// supervised training at the second-stage learning rate.
pub fn stage2_aida(state: TrainState, cfg: &TrainConfig, sources: &[DomainDataset]) -> Result<TrainState> {
    labeled_epochs(state, cfg, sources, Stage::Aida, cfg.epochs_aida, cfg.lr_aida, Some(cfg.components))
}

/// Both labeled stages.
pub fn train(cfg: &TrainConfig, sources: &[DomainDataset]) -> Result<TrainState> {
    let state = stage1_supervised(cfg, sources)?;
    stage2_aida(state, cfg, sources)
}

/// Source-free refinement on unlabeled target rows `[n, feature_dim]`.
///
/// Optimizer moments are reset (a refinement run starts from a checkpoint,
/// which carries no moments). Each batch is split into k-means
/// pseudo-domains over its features; every pseudo-domain is normalised by
/// its own statistics and restyled with their uniform mean, and the
/// consistency loss ties the two embeddings together. The controller
/// adjusts λ only.
pub fn sf_refine(mut state: TrainState, cfg: &TrainConfig, target: &Tensor) -> Result<TrainState> {
    if cfg.epochs_sf == 0 {
        return Ok(state);
    }
    cfg.validate()?;
    if target.rank() != 2 || target.cols() != state.params.feature_dim() {
        return Err(Error::Contract(format!(
            "target rows must be [n, {}], got {:?}",
            state.params.feature_dim(),
            target.shape()
        )));
    }
    if target.rows() < 2 {
        return Err(Error::Contract("source-free refinement needs at least two target rows".into()));
    }
    state.adam = AdamState::new(state.params.named().into_iter().map(|(_, t)| t));
    let stage = Stage::Sf;
    for epoch in 0..cfg.epochs_sf {
        let batches = unlabeled_batches(target.rows(), cfg.sf.batch_size, derive_seed(cfg.seed, &format!("sf/epoch/{epoch}")));
        let pseudo = if cfg.sf.pseudo_labels {
            Some(pseudo_labels(&state.params, target, cfg.sf.pseudo_clusters, derive_seed(cfg.seed, &format!("sf/epoch/{epoch}/pseudo")))?)
        } else {
            None
        };
        let mut loss_sum = 0.0;
        for idx in &batches {
            let batch_pseudo = pseudo.as_ref().map(|p| PseudoBatch { labels: idx.iter().map(|&i| p.labels[i]).collect(), centroids: &p.centroids });
            let row = sf_step(&mut state, cfg, &target.select_rows(idx), batch_pseudo).map_err(|e| as_divergence(e, stage, state.step))?;
            loss_sum += row.loss_total;
            state.metrics.push(row);
            state.step += 1;
        }
        state.epochs.push(EpochLoss {
            stage: stage.to_string(),
            epoch,
            loss: loss_sum / batches.len() as f64,
            train_accuracy: None,
        });
        state.epoch += 1;
    }
    Ok(state)
}

/// Pseudo-labels for every target row and the matching unit-norm centroids
/// as a `[embed_dim, clusters]` matrix.
struct PseudoLabels {
    labels: Vec<usize>,
    centroids: Tensor,
}

struct PseudoBatch<'a> {
    labels: Vec<usize>,
    centroids: &'a Tensor,
}

fn pseudo_labels(params: &ModelParams, target: &Tensor, clusters: usize, seed: u64) -> Result<PseudoLabels> {
    let z = params.embed_rows(target)?;
    let n = z.rows();
    let dim = z.cols();
    let points: Vec<Vec<f64>> = (0..n).map(|i| z.row(i).to_vec()).collect();
    let k = clusters.min(n);
    let labels = kmeans(&points, k, seed)?;
    let mut ct = vec![0.0; dim * k];
    for c in 0..k {
        let mut centroid = vec![0.0; dim];
        for (p, _) in points.iter().zip(&labels).filter(|(_, &l)| l == c) {
            for (acc, v) in centroid.iter_mut().zip(p) {
                *acc += v;
            }
        }
        let norm = centroid.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for (j, v) in centroid.iter().enumerate() {
            ct[j * k + c] = v / norm;
        }
    }
    Ok(PseudoLabels { labels, centroids: Tensor::new(vec![dim, k], ct)? })
}

fn sf_step(state: &mut TrainState, cfg: &TrainConfig, x: &Tensor, pseudo: Option<PseudoBatch<'_>>) -> Result<MetricsRow> {
    let stage = Stage::Sf;
    let seed = derive_seed(cfg.seed, &format!("sf/step/{}", state.step));
    let tape = Tape::new();
    let vars = state.params.register(&tape);
    let params = vars.all();
    let fw = forward(&vars, tape.constant(x.clone()))?;
    let fv = fw.features.value();
    let n = x.rows();
    let points: Vec<Vec<f64>> = (0..n).map(|i| fv.row(i).to_vec()).collect();
    let k = cfg.sf.clusters.min(n);
    let assign = kmeans(&points, k, derive_seed(seed, "kmeans"))?;

    let groups: Vec<Vec<usize>> =
        (0..k).map(|c| (0..n).filter(|&i| assign[i] == c).collect::<Vec<_>>()).filter(|g| !g.is_empty()).collect();
    let order: Vec<usize> = groups.iter().flatten().copied().collect();
    let stats: Vec<ChannelStats> = groups.iter().map(|g| channel_stats(&fv.select_rows(g))).collect::<Result<_>>()?;
    let donor = aggregate_stats(&stats, &vec![1.0 / stats.len() as f64; stats.len()])?;
    let parts: Vec<Var<'_>> = groups
        .iter()
        .map(|g| statistics_transfer(fw.features.select_rows(g)?, &donor, cfg.msidg.eps))
        .collect::<Result<_>>()?;
    let mirror = head_forward(&vars, concat_rows(&parts)?)?;
    let z = fw.normalized.select_rows(&order)?;

    let pairs = cfg.loss.pair_policy.pairs(n, derive_seed(seed, "pairs"));
    let pmr = pmr_loss(z, mirror.normalized, &cfg.loss, &pairs)?;
    let lambda = state.controller.lambda_pmr;
    let mut total = pmr.total.scale(cfg.sf.consistency_weight * lambda)?;
    let mut pseudo_loss = None;
    if let Some(p) = pseudo {
        let logits = fw.normalized.matmul(tape.constant(p.centroids.clone()))?;
        let id = id_loss(logits.scale(1.0 / cfg.sf.temperature)?.softmax()?, &p.labels)?;
        pseudo_loss = Some(id.value().item());
        total = total.add(id.scale(cfg.sf.pseudo_weight)?)?;
    }

    let (loss_total, grad_var) = apply_step(state, &tape, &params, total, cfg.lr_sf, &cfg.adam, stage)?;
    let entropy = batch_entropy(&fw.posteriors.value())?;
    state.controller.update_normalizers(entropy, grad_var);
    state.controller.update_lambda(entropy, grad_var);

    Ok(MetricsRow {
        stage,
        epoch: state.epoch,
        step: state.step,
        loss_total,
        loss_id: pseudo_loss,
        loss_tri: None,
        loss_pmr_point: Some(pmr.point.value().item()),
        loss_rel: Some(pmr.rel.value().item()),
        entropy: Some(entropy),
        grad_var: Some(grad_var),
        lambda_pmr: Some(lambda),
        alpha: None,
    })
}
