//! Retrieval and clustering metrics.
//!
//! Retrieval follows the usual re-identification protocol: for every query,
//! gallery items with the same identity *and* the same camera are removed
//! before ranking, ties in distance go to the lower gallery index, and queries
//! left without any correct match are skipped and counted.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::rng_from;
use crate::synth::DomainDataset;
use crate::tensor::Tensor;

use rand::Rng as _;

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalItem {
    pub embedding: Vec<f64>,
    pub identity: usize,
    pub camera: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalSplit {
    pub query: Vec<RetrievalItem>,
    pub gallery: Vec<RetrievalItem>,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `[queries, gallery]` Euclidean distances.
pub fn distance_matrix(query: &[Vec<f64>], gallery: &[Vec<f64>]) -> Tensor {
    let data = query.iter().flat_map(|q| gallery.iter().map(move |g| euclidean(q, g))).collect();
    Tensor::new(vec![query.len(), gallery.len()], data).expect("shape")
}

/// For one query: whether each retained gallery item (in rank order) is a
/// correct match. `None` when no correct match survives the exclusion rule.
fn ranked_matches(split: &RetrievalSplit, dist: &Tensor, qi: usize) -> Option<Vec<bool>> {
    let q = &split.query[qi];
    let mut order: Vec<usize> = (0..split.gallery.len())
        .filter(|&g| !(split.gallery[g].identity == q.identity && split.gallery[g].camera == q.camera))
        .collect();
    order.sort_by(|&a, &b| dist.at(qi, a).total_cmp(&dist.at(qi, b)).then(a.cmp(&b)));
    let hits: Vec<bool> = order.iter().map(|&g| split.gallery[g].identity == q.identity).collect();
    hits.contains(&true).then_some(hits)
}

fn split_distances(split: &RetrievalSplit) -> Tensor {
    let q: Vec<Vec<f64>> = split.query.iter().map(|i| i.embedding.clone()).collect();
    let g: Vec<Vec<f64>> = split.gallery.iter().map(|i| i.embedding.clone()).collect();
    distance_matrix(&q, &g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmcCurve {
    /// `curve[k - 1]` = fraction of valid queries whose first match has rank <= k.
    pub curve: Vec<f64>,
    pub valid_queries: usize,
    pub skipped_queries: usize,
}

impl CmcCurve {
    /// CMC(k); ranks past the gallery length saturate.
    pub fn at(&self, k: usize) -> f64 {
        if self.curve.is_empty() || k == 0 {
            return 0.0;
        }
        self.curve[k.min(self.curve.len()) - 1]
    }
}

pub fn cmc(split: &RetrievalSplit) -> CmcCurve {
    let dist = split_distances(split);
    let mut counts = vec![0usize; split.gallery.len()];
    let (mut valid, mut skipped) = (0, 0);
    for qi in 0..split.query.len() {
        match ranked_matches(split, &dist, qi) {
            Some(hits) => {
                valid += 1;
                let first = hits.iter().position(|&h| h).expect("has a match");
                for c in counts.iter_mut().skip(first) {
                    *c += 1;
                }
            }
            None => skipped += 1,
        }
    }
    let curve = counts.iter().map(|&c| if valid == 0 { 0.0 } else { c as f64 / valid as f64 }).collect();
    CmcCurve { curve, valid_queries: valid, skipped_queries: skipped }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanAp {
    pub map: f64,
    pub valid_queries: usize,
    pub skipped_queries: usize,
}

/// Average precision of one ranked hit list.
pub fn average_precision(hits: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (r, &h) in hits.iter().enumerate() {
        if h {
            found += 1;
            sum += found as f64 / (r + 1) as f64;
        }
    }
    if found == 0 {
        0.0
    } else {
        sum / found as f64
    }
}

pub fn mean_ap(split: &RetrievalSplit) -> MeanAp {
    let dist = split_distances(split);
    let (mut total, mut valid, mut skipped) = (0.0, 0, 0);
    for qi in 0..split.query.len() {
        match ranked_matches(split, &dist, qi) {
            Some(hits) => {
                valid += 1;
                total += average_precision(&hits);
            }
            None => skipped += 1,
        }
    }
    MeanAp { map: if valid == 0 { 0.0 } else { total / valid as f64 }, valid_queries: valid, skipped_queries: skipped }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Maximum number of empty-cluster re-seeds before giving up.
pub const MAX_RESEEDS: usize = 3;
pub const KMEANS_MAX_ITERS: usize = 100;

/// Lloyd's algorithm from seeded farthest-point initialisation.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Clustering(format!("k = {k} with {n} points")));
    }
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng_from(seed).random_range(0..n)].clone());
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let far = (0..n).fold(0, |best, i| if nearest[i] > nearest[best] { i } else { best });
        centers.push(points[far].clone());
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }

    let assign_all = |centers: &[Vec<f64>]| -> Vec<usize> {
        points
            .iter()
            .map(|p| {
                (0..centers.len()).fold(0, |best, c| if sq_dist(p, &centers[c]) < sq_dist(p, &centers[best]) { c } else { best })
            })
            .collect()
    };

    let mut assign = assign_all(&centers);
    let mut reseeds = 0;
    for _ in 0..KMEANS_MAX_ITERS {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                reseeds += 1;
                if reseeds > MAX_RESEEDS {
                    return Err(Error::Clustering(format!("cluster {c} stayed empty after {MAX_RESEEDS} re-seeds")));
                }
                // Move the empty centre onto the point worst served by its own centre.
                let far = (0..n).fold(0, |best, i| {
                    if sq_dist(&points[i], &centers[assign[i]]) > sq_dist(&points[best], &centers[assign[best]]) {
                        i
                    } else {
                        best
                    }
                });
                centers[c] = points[far].clone();
            } else {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next = assign_all(&centers);
        if next == assign {
            break;
        }
        assign = next;
    }
    Ok(assign)
}

fn entropy_of(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts.filter(|&c| c > 0).map(|c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

/// Mutual information normalised by the arithmetic mean of both entropies.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Contract(format!("nmi needs two equal non-empty labelings, got {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let ha = entropy_of(ca.values().copied(), n);
    let hb = entropy_of(cb.values().copied(), n);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    // Terms are summed in sorted order so that swapping the arguments gives
    // the identical value.
    let mut terms: Vec<f64> = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            pxy * (pxy / ((ca[&x] as f64 / n) * (cb[&y] as f64 / n))).ln()
        })
        .collect();
    terms.sort_by(f64::total_cmp);
    let mi: f64 = terms.iter().sum();
    Ok((mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0))
}

/// Mean silhouette over points; singleton clusters contribute 0 and a single
/// cluster overall scores 0.
pub fn silhouette(points: &[Vec<f64>], assign: &[usize]) -> Result<f64> {
    if points.len() != assign.len() || points.is_empty() {
        return Err(Error::Contract("silhouette needs one assignment per point".into()));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in assign.iter().enumerate() {
        members.entry(c).or_default().push(i);
    }
    if members.len() < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let own = &members[&assign[i]];
        if own.len() == 1 {
            continue;
        }
        let a = own.iter().filter(|&&j| j != i).map(|&j| euclidean(p, &points[j])).sum::<f64>() / (own.len() - 1) as f64;
        let b = members
            .iter()
            .filter(|(&c, _)| c != assign[i])
            .map(|(_, m)| m.iter().map(|&j| euclidean(p, &points[j])).sum::<f64>() / m.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}

/// Per identity: the first sample seen from each camera goes to the query
/// set, the remaining samples to the gallery.
pub fn split_by_camera(items: Vec<RetrievalItem>) -> RetrievalSplit {
    let mut seen = std::collections::BTreeSet::new();
    let mut split = RetrievalSplit::default();
    for it in items {
        if seen.insert((it.identity, it.camera)) {
            split.query.push(it);
        } else {
            split.gallery.push(it);
        }
    }
    split
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub nmi: f64,
    pub silhouette: f64,
    pub valid_queries: usize,
    pub skipped_queries: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_trace: Vec<EpochLoss>,
}

impl MetricsReport {
    /// Arithmetic mean of the metric fields (query counts are summed).
    pub fn average(reports: &[MetricsReport]) -> MetricsReport {
        let n = reports.len().max(1) as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MetricsReport {
            rank1: avg(|r| r.rank1),
            rank5: avg(|r| r.rank5),
            rank10: avg(|r| r.rank10),
            map: avg(|r| r.map),
            nmi: avg(|r| r.nmi),
            silhouette: avg(|r| r.silhouette),
            valid_queries: reports.iter().map(|r| r.valid_queries).sum(),
            skipped_queries: reports.iter().map(|r| r.skipped_queries).sum(),
            loss_trace: Vec::new(),
        }
    }
}

/// Retrieval metrics on a labeled split plus clustering metrics over every
/// embedding, with `k` = number of identities.
pub fn report_from_embeddings(items: Vec<RetrievalItem>, seed: u64) -> Result<MetricsReport> {
    let points: Vec<Vec<f64>> = items.iter().map(|i| i.embedding.clone()).collect();
    let labels: Vec<usize> = items.iter().map(|i| i.identity).collect();
    let k = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    let assign = kmeans(&points, k, seed)?;
    let split = split_by_camera(items);
    let curve = cmc(&split);
    let ap = mean_ap(&split);
    Ok(MetricsReport {
        rank1: curve.at(1),
        rank5: curve.at(5),
        rank10: curve.at(10),
        map: ap.map,
        nmi: nmi(&assign, &labels)?,
        silhouette: silhouette(&points, &assign)?,
        valid_queries: curve.valid_queries,
        skipped_queries: curve.skipped_queries,
        loss_trace: Vec::new(),
    })
}

/// Embeds a labeled dataset with `params` and scores it.
pub fn evaluate(params: &ModelParams, dataset: &DomainDataset, seed: u64) -> Result<MetricsReport> {
    let emb = params.embed_rows(&dataset.matrix())?;
    let items = dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| RetrievalItem { embedding: emb.row(i).to_vec(), identity: s.identity, camera: s.camera })
        .collect();
    report_from_embeddings(items, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(e: &[f64], id: usize, cam: usize) -> RetrievalItem {
        RetrievalItem { embedding: e.to_vec(), identity: id, camera: cam }
    }

    #[test]
    fn distances() {
        let d = distance_matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(d.at(0, 0), 0.0);
        assert!((d.at(0, 1) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(d.at(0, 1), d.at(1, 0));
    }

    #[test]
    fn perfect_retrieval() {
        let split = RetrievalSplit {
            query: vec![item(&[0.0], 0, 0), item(&[10.0], 1, 0)],
            gallery: vec![item(&[0.1], 0, 1), item(&[10.1], 1, 1)],
        };
        assert_eq!(cmc(&split).at(1), 1.0);
        assert_eq!(mean_ap(&split).map, 1.0);
    }

    #[test]
    fn correct_match_always_second() {
        let split = RetrievalSplit {
            query: vec![item(&[0.0], 0, 0)],
            gallery: vec![item(&[0.1], 5, 1), item(&[0.2], 0, 1), item(&[3.0], 6, 1)],
        };
        let c = cmc(&split);
        assert_eq!(c.at(1), 0.0);
        assert_eq!(c.at(5), 1.0);
        assert!(c.curve.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn same_camera_matches_are_excluded() {
        let split = RetrievalSplit {
            query: vec![item(&[0.0], 0, 0), item(&[5.0], 1, 0)],
            gallery: vec![item(&[0.0], 0, 0), item(&[1.0], 0, 1), item(&[5.0], 1, 0)],
        };
        let c = cmc(&split);
        assert_eq!(c.valid_queries, 1);
        assert_eq!(c.skipped_queries, 1);
        assert_eq!(c.at(1), 1.0);
    }

    #[test]
    fn ap_worked_example() {
        assert_eq!(average_precision(&[true, false, true]), (1.0 + 2.0 / 3.0) / 2.0);
        assert_eq!(average_precision(&[true]), 1.0);
    }

    #[test]
    fn kmeans_degenerate_k() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, (i * i) as f64]).collect();
        assert!(kmeans(&pts, 1, 3).unwrap().iter().all(|&a| a == 0));
        let all = kmeans(&pts, 5, 3).unwrap();
        let distinct: std::collections::BTreeSet<_> = all.iter().collect();
        assert_eq!(distinct.len(), 5);
        assert!(kmeans(&pts, 6, 3).is_err());
    }

    #[test]
    fn nmi_cases() {
        assert!((nmi(&[0, 0, 1, 1], &[5, 5, 7, 7]).unwrap() - 1.0).abs() < 1e-15);
        // Balanced independent partitions share no information.
        assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-15);
        let (a, b) = ([0, 0, 1, 2, 2, 1], [1, 0, 0, 2, 2, 2]);
        assert_eq!(nmi(&a, &b).unwrap(), nmi(&b, &a).unwrap());
    }

    #[test]
    fn silhouette_cases() {
        let pts = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        assert!(silhouette(&pts, &[0, 0, 1, 1]).unwrap() > 0.9);
        assert_eq!(silhouette(&pts, &[0, 0, 0, 0]).unwrap(), 0.0);
        // Singletons contribute zero.
        let s = silhouette(&pts, &[0, 1, 2, 2]).unwrap();
        assert!(s > 0.0 && s < 0.5);
    }

    #[test]
    fn camera_split_rule() {
        let items = vec![item(&[0.0], 0, 0), item(&[0.0], 0, 1), item(&[0.0], 0, 0), item(&[0.0], 1, 0)];
        let s = split_by_camera(items);
        assert_eq!(s.query.len(), 3);
        assert_eq!(s.gallery.len(), 1);
    }
}
