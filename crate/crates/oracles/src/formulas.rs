//! Textbook formulas on plain vectors.

/// Central differences of `f` at `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    out
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    s.sqrt()
}

/// Per-column mean and population standard deviation.
pub fn column_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let c = rows[0].len();
    let mut mu = vec![0.0; c];
    let mut sd = vec![0.0; c];
    for j in 0..c {
        let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let v = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
        mu[j] = m;
        sd[j] = v.sqrt();
    }
    (mu, sd)
}

/// `sigma_d * (x - mu_x) / (sigma_x + eps) + mu_d` column by column.
pub fn restyle(rows: &[Vec<f64>], mu_d: &[f64], sigma_d: &[f64], eps: f64) -> Vec<Vec<f64>> {
    let (mu, sd) = column_stats(rows);
    rows.iter()
        .map(|r| (0..r.len()).map(|j| sigma_d[j] * (r[j] - mu[j]) / (sd[j] + eps) + mu_d[j]).collect())
        .collect()
}

/// Mean Shannon entropy (natural log) of probability rows.
pub fn mean_row_entropy(rows: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for r in rows {
        for &p in r {
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    total / rows.len() as f64
}

/// Normalised mutual information (arithmetic-mean normalisation) from the
/// contingency table.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0.0; kb]; ka];
    for i in 0..a.len() {
        table[a[i]][b[i]] += 1.0;
    }
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let h = |m: &[f64]| -> f64 { m.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).ln()).sum() };
    let (ha, hb) = (h(&rows), h(&cols));
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let c = table[i][j];
            if c > 0.0 {
                mi += (c / n) * ((c * n) / (rows[i] * cols[j])).ln();
            }
        }
    }
    mi / ((ha + hb) / 2.0)
}

/// Mean silhouette by the O(N²) definition; singletons score 0 and a single
/// cluster overall scores 0.
pub fn silhouette(points: &[Vec<f64>], assign: &[usize]) -> f64 {
    let clusters: std::collections::BTreeSet<usize> = assign.iter().copied().collect();
    if clusters.len() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..points.len() {
        let mean_to = |c: usize, skip_self: bool| -> Option<f64> {
            let d: Vec<f64> = (0..points.len())
                .filter(|&j| assign[j] == c && !(skip_self && j == i))
                .map(|j| euclidean(&points[i], &points[j]))
                .collect();
            (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
        };
        let Some(a) = mean_to(assign[i], true) else { continue };
        let b = clusters.iter().filter(|&&c| c != assign[i]).filter_map(|&c| mean_to(c, false)).fold(f64::INFINITY, f64::min);
        if a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / points.len() as f64
}

/// Parameter after one bias-corrected adaptive-moment step from zero
/// moments; the corrected moments reduce to `g` and `g²`.
pub fn adam_first_step(theta: f64, g: f64, lr: f64, eps: f64) -> f64 {
    theta - lr * g / ((g * g).sqrt() + eps)
}
