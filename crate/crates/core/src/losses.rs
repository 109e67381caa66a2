//! Training objectives.
//!
//! Everything here takes tape variables and returns a scalar variable, so the
//! same code serves the training step and gradient checks.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tape::Var;

/// Floor applied to squared distances before the square root, so coincident
/// points have a finite derivative.
pub const DIST_FLOOR: f64 = 1e-12;
/// Guard inside `log(p + LOG_GUARD)`.
pub const LOG_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletMining {
    /// Hardest positive and hardest negative per anchor.
    #[default]
    BatchHard,
    /// One random positive and negative per anchor.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PairPolicy {
    AllPairs,
    Sampled { count: usize },
}

impl Default for PairPolicy {
    fn default() -> Self {
        PairPolicy::AllPairs
    }
}

impl PairPolicy {
    /// Index pairs `(i, j)` with `i < j` for a batch of `n` rows.
    pub fn pairs(&self, n: usize, seed: u64) -> Vec<(usize, usize)> {
        let all: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        match *self {
            PairPolicy::AllPairs => all,
            PairPolicy::Sampled { count } if count >= all.len() => all,
            PairPolicy::Sampled { count } => {
                let mut picked: Vec<(usize, usize)> =
                    all.choose_multiple(&mut rng_from(seed), count).cloned().collect();
                picked.sort_unstable();
                picked
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda_tri: f64,
    pub lambda_rel: f64,
    pub pair_policy: PairPolicy,
    pub triplet_mining: TripletMining,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.3,
            lambda_tri: 1.0,
            lambda_rel: 0.5,
            pair_policy: PairPolicy::AllPairs,
            triplet_mining: TripletMining::BatchHard,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("margin", self.margin), ("lambda_tri", self.lambda_tri), ("lambda_rel", self.lambda_rel)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss.{name} must be finite and >= 0, got {v}")));
            }
        }
        if let PairPolicy::Sampled { count: 0 } = self.pair_policy {
            return Err(Error::Config("loss.pair_policy.count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Euclidean distance matrix between the rows of `a` and `b`.
pub fn euclidean<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    Ok(a.pairwise_sq_dist(b)?.clamp_min(DIST_FLOOR)?.sqrt()?)
}

/// Mean negative log posterior of the true class.
pub fn id_loss<'t>(posteriors: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = posteriors.shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::Contract(format!("posteriors {shape:?} vs {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::Contract(format!("label {bad} outside [0, {})", shape[1])));
    }
    let picks: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
    Ok(posteriors.gather(&picks)?.add_scalar(LOG_GUARD)?.ln()?.mean()?.neg()?)
}

/// Mean of per-anchor terms, summed in ascending value order so the result
/// does not depend on batch order.
fn order_free_mean(terms: Var<'_>) -> Result<Var<'_>> {
    let v = terms.value();
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v.data()[a].total_cmp(&v.data()[b]));
    Ok(terms.reshape(&[v.len(), 1])?.select_rows(&order)?.mean()?)
}

fn check_triplet_batch(labels: &[usize], n: usize) -> Result<()> {
    if labels.len() != n || n == 0 {
        return Err(Error::Contract(format!("{n} embeddings vs {} labels", labels.len())));
    }
    for (a, &la) in labels.iter().enumerate() {
        let pos = labels.iter().enumerate().any(|(j, &l)| j != a && l == la);
        let neg = labels.iter().any(|&l| l != la);
        if !pos || !neg {
            return Err(Error::Contract(format!(
                "anchor {a} (label {la}) has no {}",
                if pos { "negative" } else { "positive" }
            )));
        }
    }
    Ok(())
}

/// Per-anchor `max(0, d(a, p) - d(a, n) + m)` with the farthest positive and
/// nearest negative, averaged over anchors.
pub fn batch_hard_triplet<'t>(z: Var<'t>, labels: &[usize], margin: f64) -> Result<Var<'t>> {
    let n = z.shape()[0];
    check_triplet_batch(labels, n)?;
    let d = euclidean(z, z)?;
    let dv = d.value();
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for a in 0..n {
        let mut best_p: Option<usize> = None;
        let mut best_n: Option<usize> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let dj = dv.at(a, j);
            if labels[j] == labels[a] {
                if best_p.map_or(true, |p| dj > dv.at(a, p)) {
                    best_p = Some(j);
                }
            } else if best_n.map_or(true, |q| dj < dv.at(a, q)) {
                best_n = Some(j);
            }
        }
        pos.push((a, best_p.expect("checked")));
        neg.push((a, best_n.expect("checked")));
    }
    hinge(d, &pos, &neg, margin)
}

/// Same hinge with a uniformly random positive and negative per anchor.
pub fn random_triplet<'t>(z: Var<'t>, labels: &[usize], margin: f64, seed: u64) -> Result<Var<'t>> {
    let n = z.shape()[0];
    check_triplet_batch(labels, n)?;
    let d = euclidean(z, z)?;
    let mut rng = rng_from(seed);
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for a in 0..n {
        let ps: Vec<usize> = (0..n).filter(|&j| j != a && labels[j] == labels[a]).collect();
        let ns: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a]).collect();
        pos.push((a, ps[rng.random_range(0..ps.len())]));
        neg.push((a, ns[rng.random_range(0..ns.len())]));
    }
    hinge(d, &pos, &neg, margin)
}

fn hinge<'t>(d: Var<'t>, pos: &[(usize, usize)], neg: &[(usize, usize)], margin: f64) -> Result<Var<'t>> {
    let terms = d.gather(pos)?.sub(d.gather(neg)?)?.add_scalar(margin)?.relu()?;
    order_free_mean(terms)
}

pub fn triplet_loss<'t>(z: Var<'t>, labels: &[usize], cfg: &LossConfig, seed: u64) -> Result<Var<'t>> {
    match cfg.triplet_mining {
        TripletMining::BatchHard => batch_hard_triplet(z, labels, cfg.margin),
        TripletMining::Random => random_triplet(z, labels, cfg.margin, seed),
    }
}

/// Components of the supervised objective.
pub struct SupervisedLoss<'t> {
    pub total: Var<'t>,
    pub id: Var<'t>,
    pub tri: Var<'t>,
}

/// `id_loss + λ_tri · triplet`.
pub fn supervised_loss<'t>(
    posteriors: Var<'t>,
    z: Var<'t>,
    labels: &[usize],
    cfg: &LossConfig,
    seed: u64,
) -> Result<SupervisedLoss<'t>> {
    let id = id_loss(posteriors, labels)?;
    let tri = triplet_loss(z, labels, cfg, seed)?;
    let total = id.add(tri.scale(cfg.lambda_tri)?)?;
    Ok(SupervisedLoss { total, id, tri })
}

fn same_shape(a: &Var<'_>, b: &Var<'_>, what: &str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb || sa.len() != 2 {
        return Err(Error::Contract(format!("{what}: shapes {sa:?} and {sb:?} differ")));
    }
    Ok(())
}

/// Mean squared L2 distance between corresponding rows.
pub fn pmr_point_loss<'t>(z: Var<'t>, z_mirror: Var<'t>) -> Result<Var<'t>> {
    same_shape(&z, &z_mirror, "pmr_point_loss")?;
    Ok(z.sub(z_mirror)?.square()?.sum_axis(1, false)?.mean()?)
}

/// Mean absolute difference of pairwise distances over `pairs`.
pub fn relational_loss<'t>(z: Var<'t>, z_mirror: Var<'t>, pairs: &[(usize, usize)]) -> Result<Var<'t>> {
    same_shape(&z, &z_mirror, "relational_loss")?;
    if pairs.is_empty() {
        return Err(Error::Contract("relational_loss needs at least one pair".into()));
    }
    let n = z.shape()[0];
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n) {
        return Err(Error::Contract(format!("pair ({i}, {j}) outside batch of {n}")));
    }
    let d = euclidean(z, z)?.gather(pairs)?;
    let dm = euclidean(z_mirror, z_mirror)?.gather(pairs)?;
    Ok(d.sub(dm)?.abs()?.mean()?)
}

pub struct PmrLoss<'t> {
    pub total: Var<'t>,
    pub point: Var<'t>,
    pub rel: Var<'t>,
}

/// `point + λ_rel · relational`.
pub fn pmr_loss<'t>(z: Var<'t>, z_mirror: Var<'t>, cfg: &LossConfig, pairs: &[(usize, usize)]) -> Result<PmrLoss<'t>> {
    let point = pmr_point_loss(z, z_mirror)?;
    let rel = relational_loss(z, z_mirror, pairs)?;
    let total = point.add(rel.scale(cfg.lambda_rel)?)?;
    Ok(PmrLoss { total, point, rel })
}

/// `sup + λ_PMR · pmr`.
pub fn total_loss<'t>(sup: Var<'t>, pmr: Var<'t>, lambda_pmr: f64) -> Result<Var<'t>> {
    Ok(sup.add(pmr.scale(lambda_pmr)?)?)
}
