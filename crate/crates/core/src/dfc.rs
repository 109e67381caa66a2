//! Dynamic feedback controller for the mixing weights and the consistency
//! regularization strength.
//!
//! Two feedback signals drive it: the mean prediction entropy on
//! intermediate-domain samples and the variance of the flattened parameter
//! gradient. Both are divided by decayed running maxima before use.
//!
//! The literal mixing-weight rule subtracts the same scalar from every weight
//! before projecting back onto the simplex. A uniform shift is orthogonal to
//! the simplex's affine hull, so that projection returns the starting point
//! and the literal rule never moves the weights. [`ControllerMode::PerDomain`]
//! replaces the scalar with one entropy per source domain, which does move
//! them. Both modes are available; training defaults to per-domain.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msidg::MixWeights;
use crate::tensor::{mean_var, Tensor};

/// Lower bound for the running normalizers.
pub const NORMALIZER_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    Literal,
    #[default]
    PerDomain,
}

impl FromStr for ControllerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(ControllerMode::Literal),
            "per_domain" => Ok(ControllerMode::PerDomain),
            other => Err(Error::Config(format!("unknown controller mode '{other}' (expected literal or per_domain)"))),
        }
    }
}

impl std::fmt::Display for ControllerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ControllerMode::Literal => "literal",
            ControllerMode::PerDomain => "per_domain",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub mode: ControllerMode,
    pub eta_alpha: f64,
    pub eta_lambda: f64,
    pub lambda_max: f64,
    pub lambda_init: f64,
    pub decay: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            mode: ControllerMode::PerDomain,
            eta_alpha: 0.05,
            eta_lambda: 0.05,
            lambda_max: 1.0,
            lambda_init: 0.1,
            decay: 0.99,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_alpha >= 0.0) || !(self.eta_lambda >= 0.0) {
            return Err(Error::Config("controller step sizes must be >= 0".into()));
        }
        if !(self.lambda_max >= 0.0) || !(self.lambda_init >= 0.0) || self.lambda_init > self.lambda_max {
            return Err(Error::Config("controller needs 0 <= lambda_init <= lambda_max".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("controller decay must be in (0, 1], got {}", self.decay)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub alpha: MixWeights,
    pub lambda_pmr: f64,
    pub e_max: f64,
    pub v_max: f64,
    pub eta_alpha: f64,
    pub eta_lambda: f64,
    pub lambda_max: f64,
    pub decay: f64,
    pub mode: ControllerMode,
}

impl ControllerState {
    /// Uniform weights over `k` domains, `λ = lambda_init`, normalizers unset.
    pub fn new(k: usize, cfg: &ControllerConfig) -> Self {
        ControllerState {
            alpha: MixWeights::uniform(k),
            lambda_pmr: cfg.lambda_init,
            e_max: 0.0,
            v_max: 0.0,
            eta_alpha: cfg.eta_alpha,
            eta_lambda: cfg.eta_lambda,
            lambda_max: cfg.lambda_max,
            decay: cfg.decay,
            mode: cfg.mode,
        }
    }

    /// `e_max ← max(decay·e_max, E)`, likewise for `v_max`, both floored.
    pub fn update_normalizers(&mut self, entropy: f64, grad_var: f64) {
        self.e_max = (self.decay * self.e_max).max(entropy).max(NORMALIZER_FLOOR);
        self.v_max = (self.decay * self.v_max).max(grad_var).max(NORMALIZER_FLOOR);
    }

    /// `E/E_max + V/V_max`.
    pub fn signal(&self, entropy: f64, grad_var: f64) -> f64 {
        entropy / self.e_max.max(NORMALIZER_FLOOR) + grad_var / self.v_max.max(NORMALIZER_FLOOR)
    }

    /// Projected gradient-style step on the mixing weights. Per-domain mode
    /// needs one entropy per domain.
    pub fn update_alpha(&mut self, entropy: f64, grad_var: f64, per_domain: Option<&[f64]>) -> Result<()> {
        let k = self.alpha.len();
        let shifted: Vec<f64> = match self.mode {
            ControllerMode::Literal => {
                let s = self.signal(entropy, grad_var);
                self.alpha.as_slice().iter().map(|a| a - self.eta_alpha * s).collect()
            }
            ControllerMode::PerDomain => {
                let ents = per_domain
                    .ok_or_else(|| Error::Contract("per_domain controller mode needs per-domain entropies".into()))?;
                if ents.len() != k {
                    return Err(Error::Contract(format!("{} per-domain entropies for {k} weights", ents.len())));
                }
                self.alpha
                    .as_slice()
                    .iter()
                    .zip(ents)
                    .map(|(a, &e)| a - self.eta_alpha * self.signal(e, grad_var))
                    .collect()
            }
        };
        self.alpha = simplex_project(&shifted);
        Ok(())
    }

    /// `λ ← clip(λ + η_λ (E/E_max + V/V_max), 0, λ_max)`.
    pub fn update_lambda(&mut self, entropy: f64, grad_var: f64) {
        let next = self.lambda_pmr + self.eta_lambda * self.signal(entropy, grad_var);
        self.lambda_pmr = next.clamp(0.0, self.lambda_max);
    }

    /// Normalizers, then mixing weights, then λ.
    pub fn step(&mut self, entropy: f64, grad_var: f64, per_domain: Option<&[f64]>) -> Result<()> {
        self.update_normalizers(entropy, grad_var);
        self.update_alpha(entropy, grad_var, per_domain)?;
        self.update_lambda(entropy, grad_var);
        Ok(())
    }
}

/// Mean row entropy `-(1/B) Σ_i Σ_c p_ic ln p_ic`, with `0 ln 0 = 0`.
pub fn batch_entropy(posteriors: &Tensor) -> Result<f64> {
    if posteriors.rank() != 2 || posteriors.rows() == 0 {
        return Err(Error::Contract(format!("posteriors must be a non-empty matrix, got {:?}", posteriors.shape())));
    }
    let mut total = 0.0;
    for i in 0..posteriors.rows() {
        let row = posteriors.row(i);
        if let Some(p) = row.iter().find(|&&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Contract(format!("row {i} has invalid probability {p}")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("row {i} sums to {s}")));
        }
        total -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    }
    Ok(total / posteriors.rows() as f64)
}

/// Population variance of all gradient components flattened together.
pub fn gradient_variance<'a>(grads: impl IntoIterator<Item = &'a Tensor>) -> Result<f64> {
    let flat: Vec<f64> = grads.into_iter().flat_map(|g| g.data().iter().copied()).collect();
    if flat.is_empty() {
        return Err(Error::Contract("gradient variance of an empty gradient set".into()));
    }
    Ok(mean_var(&flat).1)
}

/// Euclidean projection onto the probability simplex (sort and threshold).
pub fn simplex_project(v: &[f64]) -> MixWeights {
    assert!(!v.is_empty(), "projection of an empty vector");
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
        }
    }
    let w: Vec<f64> = v.iter().map(|&x| (x - tau).max(0.0)).collect();
    MixWeights::new(w).expect("projection lands on the simplex")
}
