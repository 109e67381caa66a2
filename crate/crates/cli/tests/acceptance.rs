//! Acceptance criteria 1-11, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the lines always print. The process
//! fails if any criterion fails, except those listed in `KNOWN_RED`, whose
//! failure must match its documented cause exactly.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use aida_cli::ablate::cmd_ablate;
use aida_cli::layout::Layout;
use aida_cli::RunConfig;
use aida_core::dfc::{batch_entropy, simplex_project, ControllerConfig, ControllerMode, ControllerState};
use aida_core::eval::{average_precision, cmc, mean_ap, RetrievalItem, RetrievalSplit};
use aida_core::losses::{
    batch_hard_triplet, id_loss, pmr_loss, pmr_point_loss, relational_loss, supervised_loss, total_loss, LossConfig,
};
use aida_core::model::{classify, extract_features, head_forward, ModelConfig, ModelParams, ModelVars};
use aida_core::msidg::{
    channel_stats, intermediate_embed, multi_source_mix, statistics_transfer, transfer_values, ChannelStats, MixWeights,
};
use aida_core::{concat_rows, finite_diff_check, Tape, Tensor, Var};
use aida_oracles::formulas;
use aida_oracles::rank::{brute_force_rank, cmc_curve, mean_average_precision, OracleItem};
use aida_oracles::simplex::grid_project;

const EPS: f64 = 1e-5;

struct Outcome {
    pass: bool,
    detail: String,
    /// Set when a failure was reproduced exactly as analysed.
    explained: bool,
}

impl Outcome {
    fn check(pass: bool, detail: String) -> Self {
        Outcome { pass, detail, explained: false }
    }
}

/// Criteria whose pinned tolerance cannot be met by the specified formula.
const KNOWN_RED: [u8; 1] = [2];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn random_simplex(r: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| -r.random_range(1e-12..1.0f64).ln()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

// ---------------------------------------------------------------- criterion 1

const KINK: f64 = 1e-4;
const H: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;

fn distances(z: &Tensor) -> Vec<Vec<f64>> {
    let r = rows_of(z);
    r.iter().map(|a| r.iter().map(|b| formulas::euclidean(a, b)).collect()).collect()
}

/// True when the hardest positive or negative is nearly tied, or the hinge
/// is nearly at zero, for some anchor.
fn triplet_kink(z: &Tensor, labels: &[usize], margin: f64) -> bool {
    let d = distances(z);
    (0..labels.len()).any(|a| {
        let mut pos: Vec<f64> = (0..labels.len()).filter(|&j| j != a && labels[j] == labels[a]).map(|j| d[a][j]).collect();
        let mut neg: Vec<f64> = (0..labels.len()).filter(|&j| labels[j] != labels[a]).map(|j| d[a][j]).collect();
        pos.sort_by(|x, y| y.total_cmp(x));
        neg.sort_by(|x, y| x.total_cmp(y));
        (pos.len() > 1 && pos[0] - pos[1] < KINK)
            || (neg.len() > 1 && neg[1] - neg[0] < KINK)
            || (pos[0] - neg[0] + margin).abs() < KINK
    })
}

fn relational_kink(z: &Tensor, m: &Tensor, pairs: &[(usize, usize)]) -> bool {
    let (dz, dm) = (distances(z), distances(m));
    pairs.iter().any(|&(i, j)| (dz[i][j] - dm[i][j]).abs() < KINK)
}

fn relu_kink(params: &ModelParams, x: &Tensor) -> bool {
    let mut h = rows_of(x);
    for layer in &params.backbone[..params.backbone.len() - 1] {
        let (w, b) = (&layer.weight, &layer.bias);
        let pre: Vec<Vec<f64>> = h
            .iter()
            .map(|row| (0..w.cols()).map(|o| b.data()[o] + row.iter().enumerate().map(|(i, v)| v * w.at(i, o)).sum::<f64>()).collect())
            .collect();
        if pre.iter().flatten().any(|v| v.abs() < KINK) {
            return true;
        }
        h = pre.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    }
    false
}

fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

fn model_vars<'t>(v: &[Var<'t>]) -> ModelVars<'t> {
    let n = v.len() / 2;
    ModelVars {
        backbone: (0..n - 2).map(|i| (v[2 * i], v[2 * i + 1])).collect(),
        head: (v[2 * n - 4], v[2 * n - 3]),
        classifier: (v[2 * n - 2], v[2 * n - 1]),
        classify_on_raw: false,
    }
}

/// One batch of the mixed-domain objective: three domains, two identities
/// each, two instances per identity.
struct MixInstance {
    params: ModelParams,
    x: Tensor,
    labels: Vec<usize>,
    groups: Vec<Vec<usize>>,
    stats: Vec<ChannelStats>,
    alpha: Vec<f64>,
    lambda: f64,
    loss: LossConfig,
    pairs: Vec<(usize, usize)>,
}

impl MixInstance {
    fn new(r: &mut ChaCha8Rng, seed: u64) -> Self {
        let cfg = ModelConfig { hidden: vec![12, 8], embed_dim: 6, classify_on_raw: false };
        let mut params = ModelParams::init(6, 6, &cfg, seed).unwrap();
        for t in params.tensors_mut() {
            if t.rank() == 1 {
                for v in t.data_mut() {
                    *v = r.random_range(-0.1..0.1);
                }
            }
        }
        let mut rows = Vec::new();
        for _ in 0..3 {
            let scale = r.random_range(0.5..2.0);
            let offset = r.random_range(-1.0..1.0);
            for _ in 0..4 {
                rows.push((0..6).map(|_| offset + scale * r.random_range(-1.0..1.0)).collect::<Vec<f64>>());
            }
        }
        let x = Tensor::from_rows(&rows).unwrap();
        let groups: Vec<Vec<usize>> = (0..3).map(|d| (4 * d..4 * d + 4).collect()).collect();
        let feats = params.features(&x).unwrap();
        let stats = groups.iter().map(|g| channel_stats(&feats.select_rows(g)).unwrap()).collect();
        MixInstance {
            params,
            x,
            labels: (0..12).map(|i| i / 2).collect(),
            groups,
            stats,
            alpha: random_simplex(r, 3),
            lambda: r.random_range(0.0..1.0),
            loss: LossConfig::default(),
            pairs: all_pairs(12),
        }
    }

    fn tensors(&self) -> Vec<Tensor> {
        self.params.named().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Total objective. Donor statistics are constants.
    fn loss<'t>(&self, t: &'t Tape, p: &[Var<'t>]) -> aida_core::Result<Var<'t>> {
        let vars = model_vars(p);
        let f = extract_features(&vars, t.constant(self.x.clone()))?;
        let fw = head_forward(&vars, f)?;
        let sup = supervised_loss(fw.posteriors, fw.normalized, &self.labels, &self.loss, 0)?;
        let parts = self
            .groups
            .iter()
            .map(|g| multi_source_mix(f.select_rows(g)?, &self.stats, &self.alpha, EPS))
            .collect::<aida_core::Result<Vec<_>>>()?;
        let z_mix = intermediate_embed(&vars, concat_rows(&parts)?)?;
        let int = id_loss(classify(&vars, z_mix)?, &self.labels)?;
        let pmr = pmr_loss(fw.normalized, z_mix, &self.loss, &self.pairs)?;
        total_loss(sup.total.add(int)?, pmr.total, self.lambda)
    }

    fn near_kink(&self) -> bool {
        if relu_kink(&self.params, &self.x) {
            return true;
        }
        let t = Tape::new();
        let vars = self.params.constants(&t);
        let f = extract_features(&vars, t.constant(self.x.clone())).unwrap();
        let zn = head_forward(&vars, f).unwrap().normalized.value();
        let parts: Vec<_> =
            self.groups.iter().map(|g| multi_source_mix(f.select_rows(g).unwrap(), &self.stats, &self.alpha, EPS).unwrap()).collect();
        let zm = intermediate_embed(&vars, concat_rows(&parts).unwrap()).unwrap().value();
        triplet_kink(&zn, &self.labels, self.loss.margin) || relational_kink(&zn, &zm, &self.pairs)
    }
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut r = rng(101);
    let mut worst: Vec<(&str, f64, usize)> = Vec::new();
    let mut record = |name: &'static str, errs: Vec<f64>, skipped: usize| {
        worst.push((name, errs.iter().cloned().fold(0.0, f64::max), skipped));
    };
    let n = 100;

    let errs = (0..n)
        .map(|_| {
            let x = uniform(&mut r, 6, 5, -1.0, 1.0);
            let (w, b) = (uniform(&mut r, 5, 4, -1.0, 1.0), Tensor::vector((0..4).map(|_| r.random_range(-0.5..0.5)).collect()));
            let labels: Vec<usize> = (0..6).map(|_| r.random_range(0..4)).collect();
            finite_diff_check(|t, p| id_loss(t.constant(x.clone()).matmul(p[0])?.add(p[1])?.softmax()?, &labels), &[w, b], H).unwrap()
        })
        .collect();
    record("id_loss", errs, 0);

    let (mut errs, mut skipped) = (Vec::new(), 0);
    let labels: Vec<usize> = (0..9).map(|i| i / 3).collect();
    while errs.len() < n {
        let z = uniform(&mut r, 9, 4, -1.0, 1.0);
        if triplet_kink(&z, &labels, 0.3) {
            skipped += 1;
            continue;
        }
        errs.push(finite_diff_check(|_, p| batch_hard_triplet(p[0], &labels, 0.3), &[z], H).unwrap());
    }
    record("batch_hard_triplet", errs, skipped);

    let errs = (0..n)
        .map(|_| {
            let (z, m) = (uniform(&mut r, 6, 4, -1.0, 1.0), uniform(&mut r, 6, 4, -1.0, 1.0));
            finite_diff_check(|_, p| pmr_point_loss(p[0], p[1]), &[z, m], H).unwrap()
        })
        .collect();
    record("pmr_point_loss", errs, 0);

    let (mut errs, mut skipped) = (Vec::new(), 0);
    let pairs = all_pairs(6);
    while errs.len() < n {
        let (z, m) = (uniform(&mut r, 6, 4, -1.0, 1.0), uniform(&mut r, 6, 4, -1.0, 1.0));
        if relational_kink(&z, &m, &pairs) {
            skipped += 1;
            continue;
        }
        errs.push(finite_diff_check(|_, p| relational_loss(p[0], p[1], &pairs), &[z, m], H).unwrap());
    }
    record("relational_loss", errs, skipped);

    let (mut errs, mut skipped, mut seed) = (Vec::new(), 0, 0);
    while errs.len() < n {
        seed += 1;
        let inst = MixInstance::new(&mut r, seed);
        if inst.near_kink() {
            skipped += 1;
            continue;
        }
        errs.push(finite_diff_check(|t, p| inst.loss(t, p), &inst.tensors(), H).unwrap());
    }
    record("total_loss (mixing path)", errs, skipped);

    let secs = started.elapsed().as_secs_f64();
    let pass = worst.iter().all(|w| w.1 < GRAD_TOL) && secs < 60.0;
    let parts: Vec<String> = worst.iter().map(|(name, e, s)| format!("{name} {e:.1e} ({s} kink draws skipped)")).collect();
    Outcome::check(pass, format!("gradients, {n} instances each, max rel err < {GRAD_TOL:.0e}: {}; {secs:.1}s < 60s", parts.join(", ")))
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let mut r = rng(202);
    let (mut stats_dev, mut ident_dev, mut closed_form_gap): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..500 {
        let (n, c) = (r.random_range(8..40), r.random_range(1..9));
        let scale = r.random_range(1.0..4.0);
        let content = uniform(&mut r, n, c, -scale, scale);
        let donor = ChannelStats {
            mu: (0..c).map(|_| r.random_range(-3.0..3.0)).collect(),
            sigma: (0..c).map(|_| r.random_range(0.1..2.0)).collect(),
        };
        let out = transfer_values(&content, &donor, EPS).unwrap();
        let (mu, sigma) = formulas::column_stats(&rows_of(&out));
        for j in 0..c {
            stats_dev = stats_dev.max((mu[j] - donor.mu[j]).abs()).max((sigma[j] - donor.sigma[j]).abs());
        }

        let (own_mu, own_sigma) = formulas::column_stats(&rows_of(&content));
        let own = ChannelStats { mu: own_mu.clone(), sigma: own_sigma.clone() };
        let same = transfer_values(&content, &own, EPS).unwrap();
        for i in 0..n {
            for j in 0..c {
                let dev = (same.at(i, j) - content.at(i, j)).abs();
                ident_dev = ident_dev.max(dev);
                // The deviation the transfer formula predicts for an identity donor.
                let predicted = (content.at(i, j) - own_mu[j]).abs() * EPS / (own_sigma[j] + EPS);
                closed_form_gap = closed_form_gap.max((dev - predicted).abs());
            }
        }
    }
    let stats_ok = stats_dev < 1e-4;
    let ident_ok = ident_dev < 1e-6;
    let detail = format!(
        "statistics transfer, 500 pairs: output stats vs donor max dev {stats_dev:.1e} (< 1e-4 {}); \
         identity donor max dev {ident_dev:.1e} (< 1e-6 {}), equal to |f - mu| eps / (sigma + eps) within {closed_form_gap:.1e}",
        if stats_ok { "ok" } else { "NOT met" },
        if ident_ok { "ok" } else { "NOT met" },
    );
    let mut o = Outcome::check(stats_ok && ident_ok, detail);
    // The identity-donor bound is unreachable at eps = 1e-5: the deviation is
    // |z| * sigma * eps / (sigma + eps), about |z| * 1e-5 for sigma >> eps.
    o.explained = stats_ok && !ident_ok && closed_form_gap < 1e-12;
    o
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let mut r = rng(303);
    let mut worst: f64 = 0.0;
    for i in 0..500 {
        let k = [2, 3, 5][i % 3];
        let (n, c) = (r.random_range(2..20), r.random_range(1..8));
        let f = uniform(&mut r, n, c, -3.0, 3.0);
        let stats: Vec<ChannelStats> = (0..k)
            .map(|_| ChannelStats {
                mu: (0..c).map(|_| r.random_range(-3.0..3.0)).collect(),
                sigma: (0..c).map(|_| r.random_range(0.0..3.0)).collect(),
            })
            .collect();
        let alpha = random_simplex(&mut r, k);
        let donor = ChannelStats {
            mu: (0..c).map(|j| (0..k).map(|s| alpha[s] * stats[s].mu[j]).sum()).collect(),
            sigma: (0..c).map(|j| (0..k).map(|s| alpha[s] * stats[s].sigma[j]).sum()).collect(),
        };
        let tape = Tape::new();
        let fv = tape.constant(f);
        let summed = multi_source_mix(fv, &stats, &alpha, EPS).unwrap().value();
        let aggregated = statistics_transfer(fv, &donor, EPS).unwrap().value();
        for (a, b) in summed.data().iter().zip(aggregated.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Outcome::check(worst < 1e-12, format!("mixing sum vs aggregated donor, 500 triples, K in {{2,3,5}}: max dev {worst:.1e} < 1e-12"))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let mut r = rng(404);
    let (mut linf, mut constraint): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let v: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
        let p = simplex_project(&v);
        let g = grid_project(&v, 1e-3);
        for (a, b) in p.as_slice().iter().zip(&g) {
            linf = linf.max((a - b).abs());
        }
        let s: f64 = p.as_slice().iter().sum();
        constraint = constraint.max((s - 1.0).abs()).max(p.as_slice().iter().map(|x| (-x).max(0.0)).fold(0.0, f64::max));
    }
    Outcome::check(
        linf <= 2e-3 && constraint <= 1e-12,
        format!("simplex projection vs grid (step 1e-3), 200 vectors: L-inf {linf:.1e} <= 2e-3, constraint violation {constraint:.1e} <= 1e-12"),
    )
}

// ---------------------------------------------------------------- criterion 5

fn controller(mode: ControllerMode, k: usize, alpha: Vec<f64>, eta: f64) -> ControllerState {
    let cfg = ControllerConfig { mode, eta_alpha: eta, ..Default::default() };
    let mut c = ControllerState::new(k, &cfg);
    c.alpha = MixWeights::new(alpha).unwrap();
    c
}

fn criterion_5() -> Outcome {
    let mut r = rng(505);
    let mut literal_dev: f64 = 0.0;
    for i in 0..1000 {
        let k = r.random_range(2..7);
        let mut alpha = random_simplex(&mut r, k);
        if i % 4 == 0 {
            // Boundary points too.
            alpha[0] = 0.0;
            let s: f64 = alpha.iter().sum();
            alpha.iter_mut().for_each(|a| *a /= s);
        }
        let mut c = controller(ControllerMode::Literal, k, alpha.clone(), r.random_range(1e-3..2.0));
        c.step(r.random_range(0.0..5.0), r.random_range(0.0..5.0), None).unwrap();
        for (a, b) in c.alpha.as_slice().iter().zip(&alpha) {
            literal_dev = literal_dev.max((a - b).abs());
        }
    }
    let mut unchanged = 0;
    for _ in 0..1000 {
        let k = r.random_range(2..7);
        let alpha: Vec<f64> = {
            let raw = random_simplex(&mut r, k);
            let s: f64 = raw.iter().map(|a| a + 0.01).sum();
            raw.iter().map(|a| (a + 0.01) / s).collect()
        };
        let mut ents: Vec<f64> = (0..k).map(|_| r.random_range(0.0..3.0)).collect();
        ents[0] += 0.1;
        let mut c = controller(ControllerMode::PerDomain, k, alpha.clone(), r.random_range(1e-3..1.0));
        c.step(r.random_range(0.0..3.0), r.random_range(0.0..3.0), Some(&ents)).unwrap();
        if c.alpha.as_slice() == alpha.as_slice() {
            unchanged += 1;
        }
    }
    Outcome::check(
        literal_dev <= 1e-12 && unchanged == 0,
        format!("literal update no-op on 1000 draws: max change {literal_dev:.1e} <= 1e-12; per-domain update left alpha unchanged in {unchanged} of 1000 draws with differing signals"),
    )
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let mut r = rng(606);
    let (mut escapes, mut drifted) = (0, 0);
    for i in 0..10_000 {
        let lambda_max = r.random_range(0.01..3.0);
        let cfg = ControllerConfig {
            mode: ControllerMode::Literal,
            eta_lambda: r.random_range(0.0..5.0),
            lambda_max,
            lambda_init: r.random_range(0.0..=lambda_max),
            decay: r.random_range(0.5..=1.0),
            ..Default::default()
        };
        let mut c = ControllerState::new(3, &cfg);
        let zero = i % 2 == 1;
        let start = c.lambda_pmr;
        for _ in 0..r.random_range(1..40) {
            let (e, v) = if zero {
                (0.0, 0.0)
            } else if r.random_bool(0.05) {
                (r.random_range(0.0..1e6), r.random_range(0.0..1e6))
            } else {
                (r.random_range(0.0..5.0), r.random_range(0.0..5.0))
            };
            c.step(e, v, None).unwrap();
            if !(0.0..=lambda_max).contains(&c.lambda_pmr) {
                escapes += 1;
            }
            if zero && c.lambda_pmr != start {
                drifted += 1;
            }
        }
    }
    Outcome::check(
        escapes == 0 && drifted == 0,
        format!("lambda bounds over 10000 sequences: {escapes} steps outside [0, lambda_max]; {drifted} changes under zero signals"),
    )
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let mut r = rng(707);
    let (mut one_hot_max, mut uniform_dev, mut out_of_range): (f64, f64, usize) = (0.0, 0.0, 0);
    for c in 1..=12usize {
        let one_hot = Tensor::new(vec![c, c], (0..c * c).map(|i| if i % (c + 1) == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        one_hot_max = one_hot_max.max(batch_entropy(&one_hot).unwrap().abs());
        let uniform_rows = Tensor::new(vec![3, c], vec![1.0 / c as f64; 3 * c]).unwrap();
        uniform_dev = uniform_dev.max((batch_entropy(&uniform_rows).unwrap() - (c as f64).ln()).abs());
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..4)
                .map(|_| {
                    let e: Vec<f64> = (0..c).map(|_| r.random_range(-6.0..6.0f64).exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.iter().map(|x| x / s).collect()
                })
                .collect();
            let h = batch_entropy(&Tensor::from_rows(&rows).unwrap()).unwrap();
            if !(0.0..=(c as f64).ln() + 1e-12).contains(&h) {
                out_of_range += 1;
            }
        }
    }
    Outcome::check(
        one_hot_max == 0.0 && uniform_dev <= 1e-12 && out_of_range == 0,
        format!("entropy: one-hot {one_hot_max:e} (exactly 0), uniform vs ln C dev {uniform_dev:.1e} <= 1e-12, {out_of_range} of 600 random batches outside [0, ln C]"),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let mut r = rng(808);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (nq, ng, ids) = (r.random_range(1..=20), r.random_range(0..=30), r.random_range(1..=6));
        let item = |r: &mut ChaCha8Rng| RetrievalItem {
            embedding: (0..2).map(|_| r.random_range(0..4) as f64).collect(),
            identity: r.random_range(0..ids),
            camera: r.random_range(0..2),
        };
        let query: Vec<_> = (0..nq).map(|_| item(&mut r)).collect();
        let gallery: Vec<_> = (0..ng).map(|_| item(&mut r)).collect();
        let oracle = |v: &[RetrievalItem]| -> Vec<OracleItem> {
            v.iter().map(|i| OracleItem { embedding: i.embedding.clone(), identity: i.identity, camera: i.camera }).collect()
        };
        let ranks = brute_force_rank(&oracle(&query), &oracle(&gallery));
        let split = RetrievalSplit { query, gallery };
        if cmc(&split).curve != cmc_curve(&ranks, ng) || mean_ap(&split).map != mean_average_precision(&ranks) {
            mismatches += 1;
        }
    }
    let ap = average_precision(&[true, false, true]);
    let by_formula = (1.0 + 2.0 / 3.0) / 2.0;
    let ulps = (ap.to_bits() as i64 - (5.0f64 / 6.0).to_bits() as i64).abs();
    Outcome::check(
        mismatches == 0 && ap == by_formula && ulps <= 1,
        format!("retrieval metrics vs brute-force ranking: {mismatches} of 1000 differ; AP(ranks 1, 3) = {ap} = (1 + 2/3) / 2 exactly ({ulps} ulp from the literal 5/6)"),
    )
}

// ---------------------------------------------------------------- criterion 9

fn aida(args: &[&str], out: &Path) -> std::process::Output {
    let o = Command::new(env!("CARGO_BIN_EXE_aida")).args(args).arg("--out").arg(out).env("AIDA_LOG_LEVEL", "error").output().unwrap();
    assert!(o.status.success(), "aida {args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn pipeline(out: &Path) {
    for cmd in ["gen-data", "train", "adapt", "eval"] {
        aida(&[cmd, "--seed", "11"], out);
    }
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pipeline(&a);
    pipeline(&b);
    let files = [
        "data/source_0.json",
        "data/source_1.json",
        "data/source_2.json",
        "data/target.json",
        "train/checkpoint.bin",
        "train/metrics.csv",
        "train/controller.csv",
        "adapt/checkpoint.bin",
        "adapt/metrics.csv",
        "adapt/adapt.json",
        "eval/report.json",
    ];
    let differing: Vec<&str> =
        files.iter().copied().filter(|f| std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap()).collect();
    let manifest = |p: &Path| {
        let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("data/manifest.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("created_unix");
        v
    };
    let manifest_same = manifest(&a) == manifest(&b);
    Outcome::check(
        differing.is_empty() && manifest_same,
        format!(
            "two gen-data/train/adapt/eval runs, seed 11: {} of {} files differ{}, manifest equal apart from its timestamp: {manifest_same}",
            differing.len(),
            files.len(),
            if differing.is_empty() { String::new() } else { format!(" ({})", differing.join(", ")) }
        ),
    )
}

// --------------------------------------------------------------- criterion 10

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    assert_eq!(cfg.ablate.seeds.len(), 5);
    let started = Instant::now();
    let table = cmd_ablate(&cfg, &Layout::new(dir.path())).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let m: Vec<f64> = table.rows.iter().map(|r| r.mean_map).collect();
    Outcome::check(
        m[1] >= m[0] && m[2] >= m[0] && secs < 600.0,
        format!(
            "ablation on the 3-source benchmark, 5 seeds, mean target mAP A {:.4} B {:.4} C {:.4} D {:.4}: B >= A and C >= A; {secs:.1}s < 600s",
            m[0], m[1], m[2], m[3]
        ),
    )
}

// --------------------------------------------------------------- criterion 11

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let small = r#"{"format_version": 1, "seed": 5, "train": {"epochs_sup": 5, "epochs_aida": 3, "epochs_sf": 2}}"#;
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, small).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    aida(&["gen-data", "--config", cfg], &out);
    aida(&["train", "--config", cfg], &out);

    let with_sources = dir.path().join("with_sources.json");
    let mut v: serde_json::Value = serde_json::from_str(small).unwrap();
    v["paths"] = serde_json::json!({ "sources": [out.join("data/source_0.json")] });
    std::fs::write(&with_sources, v.to_string()).unwrap();
    let guarded = Command::new(env!("CARGO_BIN_EXE_aida"))
        .args(["adapt", "--config", with_sources.to_str().unwrap(), "--out"])
        .arg(&out)
        .output()
        .unwrap();
    let refused = !guarded.status.success() && String::from_utf8_lossy(&guarded.stderr).contains("source-free") && !out.join("adapt").exists();

    for i in 0..3 {
        std::fs::remove_file(out.join(format!("data/source_{i}.json"))).unwrap();
    }
    let adapted = Command::new(env!("CARGO_BIN_EXE_aida")).args(["adapt", "--config", cfg, "--out"]).arg(&out).output().unwrap();
    let completed = adapted.status.success() && out.join("adapt/checkpoint.bin").exists();
    Outcome::check(
        refused && completed,
        format!("source-free guard: adapt with a source path refused: {refused}; adapt after deleting every source file completed: {completed}"),
    )
}

fn main() {
    let criteria: [(u8, fn() -> Outcome); 11] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
        (11, criterion_11),
    ];
    let mut unexpected = Vec::new();
    for (id, run) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Outcome::check(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let tag = if outcome.pass { "PASS" } else { "FAIL" };
        let note = if !outcome.pass && outcome.explained { " [known: tolerance unattainable, see decisions ledger]" } else { "" };
        println!("{tag} criterion {id}: {}{note}", outcome.detail);
        if !outcome.pass && !(KNOWN_RED.contains(&id) && outcome.explained) {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
