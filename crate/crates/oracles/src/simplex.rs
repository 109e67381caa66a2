//! Grid search for the Euclidean projection onto the probability simplex.

/// Closest point to `v` among simplex points whose coordinates are multiples
/// of `step` (`1/step` must be a whole number). Supports up to three
/// coordinates.
pub fn grid_project(v: &[f64], step: f64) -> Vec<f64> {
    assert!(!v.is_empty() && v.len() <= 3, "grid search supports 1 to 3 coordinates");
    let n = (1.0 / step).round() as usize;
    assert!(((n as f64) * step - 1.0).abs() < 1e-9, "1/step must be a whole number");
    let h = 1.0 / n as f64;
    let sq = |p: &[f64]| -> f64 { p.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum() };

    match v.len() {
        1 => vec![1.0],
        2 => {
            let mut best = (f64::INFINITY, vec![]);
            for i in 0..=n {
                let p = vec![i as f64 * h, (n - i) as f64 * h];
                let d = sq(&p);
                if d < best.0 {
                    best = (d, p);
                }
            }
            best.1
        }
        _ => {
            let mut best = (f64::INFINITY, vec![]);
            for i in 0..=n {
                for j in 0..=(n - i) {
                    let p = vec![i as f64 * h, j as f64 * h, (n - i - j) as f64 * h];
                    let d = sq(&p);
                    if d < best.0 {
                        best = (d, p);
                    }
                }
            }
            best.1
        }
    }
}
