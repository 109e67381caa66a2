//! Exhaustive retrieval ranking.

#[derive(Clone, Debug, PartialEq)]
pub struct OracleItem {
    pub embedding: Vec<f64>,
    pub identity: usize,
    pub camera: usize,
}

/// Gallery indices in rank order together with whether each is a match.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub gallery: Vec<usize>,
    pub matches: Vec<bool>,
}

impl RankedList {
    /// 1-based rank of the first correct match.
    pub fn first_match_rank(&self) -> Option<usize> {
        self.matches.iter().position(|&m| m).map(|p| p + 1)
    }

    pub fn average_precision(&self) -> f64 {
        let mut hits = 0.0;
        let mut precisions = Vec::new();
        for (i, &m) in self.matches.iter().enumerate() {
            if m {
                hits += 1.0;
                precisions.push(hits / (i + 1) as f64);
            }
        }
        let mut sum = 0.0;
        for p in &precisions {
            sum += p;
        }
        sum / precisions.len() as f64
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s.sqrt()
}

/// For each query, every gallery item sorted by (distance, index), then
/// same-identity same-camera items dropped. `None` for queries with no
/// remaining correct match.
pub fn brute_force_rank(query: &[OracleItem], gallery: &[OracleItem]) -> Vec<Option<RankedList>> {
    let mut out = Vec::with_capacity(query.len());
    for q in query {
        let mut scored: Vec<(f64, usize)> = Vec::new();
        for (gi, g) in gallery.iter().enumerate() {
            scored.push((distance(&q.embedding, &g.embedding), gi));
        }
        scored.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
        let mut list = RankedList { gallery: Vec::new(), matches: Vec::new() };
        for (_, gi) in scored {
            let g = &gallery[gi];
            if g.identity == q.identity && g.camera == q.camera {
                continue;
            }
            list.gallery.push(gi);
            list.matches.push(g.identity == q.identity);
        }
        out.push(if list.matches.iter().any(|&m| m) { Some(list) } else { None });
    }
    out
}

/// CMC(k) for k = 1..=gallery_len over the valid queries.
pub fn cmc_curve(ranks: &[Option<RankedList>], gallery_len: usize) -> Vec<f64> {
    let firsts: Vec<usize> = ranks.iter().flatten().map(|r| r.first_match_rank().expect("valid")).collect();
    (1..=gallery_len)
        .map(|k| {
            if firsts.is_empty() {
                0.0
            } else {
                firsts.iter().filter(|&&r| r <= k).count() as f64 / firsts.len() as f64
            }
        })
        .collect()
}

pub fn mean_average_precision(ranks: &[Option<RankedList>]) -> f64 {
    let aps: Vec<f64> = ranks.iter().flatten().map(RankedList::average_precision).collect();
    if aps.is_empty() {
        return 0.0;
    }
    let mut s = 0.0;
    for a in &aps {
        s += a;
    }
    s / aps.len() as f64
}
