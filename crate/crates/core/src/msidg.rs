//! Multi-source intermediate-domain generation in feature-statistics space.
//!
//! Features are `[batch, channels]`; statistics are per channel over the batch
//! axis. Donor statistics are plain values (detached from the tape), so the
//! gradient only flows through the content features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{embed, l2_normalize, ModelVars};
use crate::tape::{Tape, Var};
use crate::tensor::{mean_var, Tensor};

/// Denominator guard in `(f - mu) / (sigma + eps)`.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-channel population mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mu.len()
    }
}

/// Mixing weights on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MixWeights(Vec<f64>);

/// Tolerance for a stored [`MixWeights`] value.
pub const SIMPLEX_TOL: f64 = 1e-9;
/// Tolerance accepted by [`multi_source_mix`] for caller-supplied weights.
pub const MIX_INPUT_TOL: f64 = 1e-6;

fn check_simplex(alpha: &[f64], tol: f64) -> Result<()> {
    if alpha.is_empty() {
        return Err(Error::Contract("mixing weights are empty".into()));
    }
    if let Some(a) = alpha.iter().find(|&&a| !(a >= -tol) || !a.is_finite()) {
        return Err(Error::Contract(format!("mixing weight {a} is negative")));
    }
    let s: f64 = alpha.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(Error::Contract(format!("mixing weights sum to {s}, not 1")));
    }
    Ok(())
}

impl MixWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        check_simplex(&alpha, SIMPLEX_TOL)?;
        Ok(MixWeights(alpha))
    }

    pub fn uniform(k: usize) -> Self {
        MixWeights(vec![1.0 / k as f64; k])
    }

    /// Weight `1` on `k`, zero elsewhere.
    pub fn one_hot(len: usize, k: usize) -> Self {
        let mut v = vec![0.0; len];
        v[k] = 1.0;
        MixWeights(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for MixWeights {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        MixWeights::new(v)
    }
}

impl From<MixWeights> for Vec<f64> {
    fn from(w: MixWeights) -> Self {
        w.0
    }
}

pub fn channel_stats(f: &Tensor) -> Result<ChannelStats> {
    if f.rank() != 2 || f.rows() == 0 || f.cols() == 0 {
        return Err(Error::Contract(format!("channel_stats needs a non-empty matrix, got {:?}", f.shape())));
    }
    let (n, c) = (f.rows(), f.cols());
    let mut mu = Vec::with_capacity(c);
    let mut sigma = Vec::with_capacity(c);
    let mut col = vec![0.0; n];
    for j in 0..c {
        for (i, v) in col.iter_mut().enumerate() {
            *v = f.at(i, j);
        }
        let (m, var) = mean_var(&col);
        mu.push(m);
        sigma.push(var.sqrt());
    }
    Ok(ChannelStats { mu, sigma })
}

/// `Σ_k α_k (μ_k, σ_k)`.
pub fn aggregate_stats(stats: &[ChannelStats], alpha: &[f64]) -> Result<ChannelStats> {
    if stats.len() != alpha.len() || stats.is_empty() {
        return Err(Error::Contract(format!("{} donor statistics for {} weights", stats.len(), alpha.len())));
    }
    let c = stats[0].channels();
    if stats.iter().any(|s| s.channels() != c) {
        return Err(Error::Contract("donor statistics disagree on channel count".into()));
    }
    let mut mu = vec![0.0; c];
    let mut sigma = vec![0.0; c];
    for (s, &a) in stats.iter().zip(alpha) {
        for j in 0..c {
            mu[j] += a * s.mu[j];
            sigma[j] += a * s.sigma[j];
        }
    }
    Ok(ChannelStats { mu, sigma })
}

/// `(f - μ(f)) / (σ(f) + eps)`, differentiable through the batch statistics.
fn normalize_channels(f: Var<'_>, eps: f64) -> Result<Var<'_>> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps must be > 0, got {eps}")));
    }
    let shape = f.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Contract(format!("feature map must be a non-empty matrix, got {shape:?}")));
    }
    let mu = f.mean_axis(0, true)?;
    let sd = f.std_axis(0, true)?.add_scalar(eps)?;
    Ok(f.sub(mu)?.div(sd)?)
}

fn check_channels(f: &Var<'_>, donor: &ChannelStats) -> Result<()> {
    let c = f.shape().last().copied().unwrap_or(0);
    if donor.channels() != c || donor.sigma.len() != c {
        return Err(Error::Contract(format!("feature map has {c} channels, donor statistics have {}", donor.channels())));
    }
    Ok(())
}

/// Re-styles `content` to carry the donor's channel mean and deviation.
pub fn statistics_transfer<'t>(content: Var<'t>, donor: &ChannelStats, eps: f64) -> Result<Var<'t>> {
    check_channels(&content, donor)?;
    let tape = content.tape();
    let norm = normalize_channels(content, eps)?;
    let sigma = tape.constant(Tensor::vector(donor.sigma.clone()));
    let mu = tape.constant(Tensor::vector(donor.mu.clone()));
    Ok(norm.mul(sigma)?.add(mu)?)
}

/// Sum of per-donor transfers, `Σ_k α_k (σ_k ⊙ norm(f) + μ_k)`.
pub fn multi_source_mix<'t>(f: Var<'t>, stats: &[ChannelStats], alpha: &[f64], eps: f64) -> Result<Var<'t>> {
    check_simplex(alpha, MIX_INPUT_TOL)?;
    if stats.len() != alpha.len() {
        return Err(Error::Contract(format!("{} donor statistics for {} weights", stats.len(), alpha.len())));
    }
    for s in stats {
        check_channels(&f, s)?;
    }
    let tape = f.tape();
    let norm = normalize_channels(f, eps)?;
    let mut acc: Option<Var<'t>> = None;
    for (s, &a) in stats.iter().zip(alpha) {
        let sigma = tape.constant(Tensor::vector(s.sigma.clone()));
        let mu = tape.constant(Tensor::vector(s.mu.clone()));
        let term = norm.mul(sigma)?.add(mu)?.scale(a)?;
        acc = Some(match acc {
            Some(prev) => prev.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one donor"))
}

/// Normalized embedding of intermediate-domain features.
pub fn intermediate_embed<'t>(vars: &ModelVars<'t>, f_mix: Var<'t>) -> Result<Var<'t>> {
    l2_normalize(embed(vars, f_mix)?)
}

/// Value-level [`statistics_transfer`].
pub fn transfer_values(content: &Tensor, donor: &ChannelStats, eps: f64) -> Result<Tensor> {
    let tape = Tape::new();
    let out = statistics_transfer(tape.constant(content.clone()), donor, eps)?;
    Ok((*out.value()).clone())
}

/// Value-level [`multi_source_mix`].
pub fn mix_values(f: &Tensor, stats: &[ChannelStats], alpha: &[f64], eps: f64) -> Result<Tensor> {
    let tape = Tape::new();
    let out = multi_source_mix(tape.constant(f.clone()), stats, alpha, eps)?;
    Ok((*out.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn constant_channel_has_zero_sigma() {
        let s = channel_stats(&col(&[2.5; 4])).unwrap();
        assert_eq!(s.mu, vec![2.5]);
        assert_eq!(s.sigma, vec![0.0]);
    }

    #[test]
    fn known_channel_stats() {
        let s = channel_stats(&col(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(s.mu, vec![2.5]);
        assert!((s.sigma[0] - 1.25f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn stats_of_self_concatenation() {
        let f = Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0], [2.0, 0.0]]).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..3).map(|i| f.row(i).to_vec()).collect();
        rows.extend(rows.clone());
        let ff = Tensor::from_rows(&rows).unwrap();
        let (a, b) = (channel_stats(&f).unwrap(), channel_stats(&ff).unwrap());
        for j in 0..2 {
            assert!((a.mu[j] - b.mu[j]).abs() < 1e-15);
            assert!((a.sigma[j] - b.sigma[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_map_is_rejected() {
        assert!(channel_stats(&Tensor::zeros(&[0, 3])).is_err());
    }

    #[test]
    fn standardized_content_becomes_affine() {
        // Content with mu = 0 and sigma = 1 per channel.
        let f = col(&[-1.0, 1.0, -1.0, 1.0]);
        let donor = ChannelStats { mu: vec![3.0], sigma: vec![2.0] };
        let out = transfer_values(&f, &donor, 1e-5).unwrap();
        for (o, x) in out.data().iter().zip(f.data()) {
            let expected = 2.0 * x / (1.0 + 1e-5) + 3.0;
            assert!((o - expected).abs() < 1e-15);
            assert!((o - (2.0 * x + 3.0)).abs() < 3e-5);
        }
    }

    #[test]
    fn own_statistics_shrink_by_eps() {
        // With the donor equal to the content's own statistics the output is
        // `mu + (f - mu) * sigma / (sigma + eps)`.
        let f = col(&[0.3, -1.2, 2.0, 0.7, -0.4]);
        let s = channel_stats(&f).unwrap();
        for eps in [1e-5, 1e-12] {
            let out = transfer_values(&f, &s, eps).unwrap();
            for (o, x) in out.data().iter().zip(f.data()) {
                let expected = s.mu[0] + (x - s.mu[0]) * s.sigma[0] / (s.sigma[0] + eps);
                assert!((o - expected).abs() < 1e-15);
            }
        }
        let out = transfer_values(&f, &s, 1e-12).unwrap();
        assert!(out.data().iter().zip(f.data()).all(|(o, x)| (o - x).abs() < 1e-11));
    }

    #[test]
    fn channel_mismatch_is_contract_error() {
        let f = Tensor::zeros(&[3, 2]);
        let donor = ChannelStats { mu: vec![0.0; 3], sigma: vec![1.0; 3] };
        assert!(matches!(transfer_values(&f, &donor, 1e-5), Err(Error::Contract(_))));
    }

    #[test]
    fn off_simplex_alpha_rejected() {
        let f = Tensor::from_rows(&[[1.0], [2.0]]).unwrap();
        let s = channel_stats(&f).unwrap();
        assert!(mix_values(&f, &[s.clone(), s.clone()], &[0.6, 0.6], 1e-5).is_err());
        assert!(mix_values(&f, &[s.clone(), s], &[0.5, 0.5 + 5e-7], 1e-5).is_ok());
    }

    #[test]
    fn mix_weights_validate() {
        assert!(MixWeights::new(vec![0.5, 0.5]).is_ok());
        assert!(MixWeights::new(vec![0.5, 0.6]).is_err());
        assert!(MixWeights::new(vec![-0.1, 1.1]).is_err());
        let w: std::result::Result<MixWeights, _> = serde_json::from_str("[0.2, 0.2]");
        assert!(w.is_err());
    }
}
