//! MLP backbone, embedding head and identity classifier.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Rows with an L2 norm at or below this are rejected by [`l2_normalize`].
pub const EPS_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Feed the classifier unnormalized embeddings instead of unit rows.
    pub classify_on_raw: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: vec![64, 64], embed_dim: 32, classify_on_raw: false }
    }
}

/// `y = x W + b`, with `W` stored as `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    fn he_normal(rng: &mut crate::rng::Rng, fan_in: usize, fan_out: usize) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Affine {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub backbone: Vec<Affine>,
    pub head: Affine,
    pub classifier: Affine,
    pub classify_on_raw: bool,
}

impl ModelParams {
    /// He-normal weights, zero biases.
    pub fn init(feature_dim: usize, num_classes: usize, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if feature_dim == 0 || num_classes == 0 || cfg.embed_dim == 0 || cfg.hidden.contains(&0) {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if cfg.hidden.is_empty() {
            return Err(Error::Config("backbone needs at least one layer".into()));
        }
        let mut rng = rng_from(seed);
        let mut backbone = Vec::new();
        let mut fan_in = feature_dim;
        for &h in &cfg.hidden {
            backbone.push(Affine::he_normal(&mut rng, fan_in, h));
            fan_in = h;
        }
        let head = Affine::he_normal(&mut rng, fan_in, cfg.embed_dim);
        let classifier = Affine::he_normal(&mut rng, cfg.embed_dim, num_classes);
        Ok(ModelParams { backbone, head, classifier, classify_on_raw: cfg.classify_on_raw })
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone[0].inputs()
    }

    pub fn channels(&self) -> usize {
        self.backbone.last().map(Affine::outputs).unwrap_or(0)
    }

    pub fn embed_dim(&self) -> usize {
        self.head.outputs()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.outputs()
    }

    fn layers(&self) -> Vec<(String, &Affine)> {
        let mut out: Vec<(String, &Affine)> =
            self.backbone.iter().enumerate().map(|(i, l)| (format!("backbone.{i}"), l)).collect();
        out.push(("head".into(), &self.head));
        out.push(("classifier".into(), &self.classifier));
        out
    }

    /// Parameter tensors with stable names, in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.layers()
            .into_iter()
            .flat_map(|(n, l)| [(format!("{n}.weight"), &l.weight), (format!("{n}.bias"), &l.bias)])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.backbone.iter_mut().chain([&mut self.head, &mut self.classifier]) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Rebuilds parameters from `(name, tensor)` pairs in canonical order.
    pub fn from_named(tensors: Vec<(String, Tensor)>, classify_on_raw: bool) -> Result<Self> {
        if tensors.len() < 6 || tensors.len() % 2 != 0 {
            return Err(Error::Format(format!("expected an even number >= 6 of tensors, got {}", tensors.len())));
        }
        let n_layers = tensors.len() / 2;
        let mut layers = Vec::with_capacity(n_layers);
        let mut it = tensors.into_iter();
        for li in 0..n_layers {
            let prefix = if li + 2 < n_layers {
                format!("backbone.{li}")
            } else if li + 2 == n_layers {
                "head".into()
            } else {
                "classifier".into()
            };
            let (wn, weight) = it.next().expect("count checked");
            let (bn, bias) = it.next().expect("count checked");
            if wn != format!("{prefix}.weight") || bn != format!("{prefix}.bias") {
                return Err(Error::Format(format!("unexpected tensor names {wn}, {bn} for layer {prefix}")));
            }
            if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
                return Err(Error::Format(format!("layer {prefix}: inconsistent shapes")));
            }
            layers.push(Affine { weight, bias });
        }
        for w in layers.windows(2) {
            if w[0].outputs() != w[1].inputs() {
                return Err(Error::Format("layer shapes do not chain".into()));
            }
        }
        let classifier = layers.pop().expect("len >= 3");
        let head = layers.pop().expect("len >= 2");
        let params = ModelParams { backbone: layers, head, classifier, classify_on_raw };
        params.check_finite()?;
        Ok(params)
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.named() {
            if !t.is_finite() {
                return Err(Error::Contract(format!("parameter {name} has non-finite values")));
            }
        }
        Ok(())
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn register<'t>(&self, tape: &'t Tape) -> ModelVars<'t> {
        let reg = |l: &Affine| (tape.param(l.weight.clone()), tape.param(l.bias.clone()));
        ModelVars {
            backbone: self.backbone.iter().map(reg).collect(),
            head: reg(&self.head),
            classifier: reg(&self.classifier),
            classify_on_raw: self.classify_on_raw,
        }
    }

    /// Registers every parameter as a constant (inference only).
    pub fn constants<'t>(&self, tape: &'t Tape) -> ModelVars<'t> {
        let reg = |l: &Affine| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()));
        ModelVars {
            backbone: self.backbone.iter().map(reg).collect(),
            head: reg(&self.head),
            classifier: reg(&self.classifier),
            classify_on_raw: self.classify_on_raw,
        }
    }

    /// Backbone features of raw rows.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.constants(&tape);
        Ok((*extract_features(&vars, tape.constant(x.clone()))?.value()).clone())
    }

    /// Unit-norm embeddings of raw rows.
    pub fn embed_rows(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.constants(&tape);
        let f = extract_features(&vars, tape.constant(x.clone()))?;
        Ok((*l2_normalize(embed(&vars, f)?)?.value()).clone())
    }
}

/// Parameters as tape variables for one forward/backward pass.
pub struct ModelVars<'t> {
    pub backbone: Vec<(Var<'t>, Var<'t>)>,
    pub head: (Var<'t>, Var<'t>),
    pub classifier: (Var<'t>, Var<'t>),
    pub classify_on_raw: bool,
}

impl<'t> ModelVars<'t> {
    /// All parameter variables in canonical order.
    pub fn all(&self) -> Vec<Var<'t>> {
        self.backbone
            .iter()
            .chain([&self.head, &self.classifier])
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

fn affine<'t>(x: Var<'t>, (w, b): (Var<'t>, Var<'t>), what: &str) -> Result<Var<'t>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || xs[1] != ws[0] {
        return Err(Error::Contract(format!("{what}: input shape {xs:?} does not match weight {ws:?}")));
    }
    Ok(x.matmul(w)?.add(b)?)
}

/// Output of the last backbone layer (no activation after it).
pub fn extract_features<'t>(vars: &ModelVars<'t>, x: Var<'t>) -> Result<Var<'t>> {
    let mut h = x;
    let last = vars.backbone.len() - 1;
    for (i, &layer) in vars.backbone.iter().enumerate() {
        h = affine(h, layer, "extract_features")?;
        if i < last {
            h = h.relu()?;
        }
    }
    Ok(h)
}

pub fn embed<'t>(vars: &ModelVars<'t>, f: Var<'t>) -> Result<Var<'t>> {
    affine(f, vars.head, "embed")
}

/// Divides each row by its L2 norm.
pub fn l2_normalize(z: Var<'_>) -> Result<Var<'_>> {
    let norms = z.l2_norm()?;
    let nv = norms.value();
    if let Some((row, &norm)) = nv.data().iter().enumerate().find(|(_, &n)| !(n > EPS_NORM)) {
        return Err(Error::DegenerateEmbedding { row, norm });
    }
    let n = nv.len();
    Ok(z.div(norms.reshape(&[n, 1])?)?)
}

/// Softmax posteriors over the union label space.
pub fn classify<'t>(vars: &ModelVars<'t>, z: Var<'t>) -> Result<Var<'t>> {
    Ok(affine(z, vars.classifier, "classify")?.softmax()?)
}

/// Every intermediate of one forward pass.
pub struct Forward<'t> {
    pub features: Var<'t>,
    pub embedding: Var<'t>,
    pub normalized: Var<'t>,
    pub posteriors: Var<'t>,
}

/// Embeds features and classifies, honouring `classify_on_raw`.
pub fn head_forward<'t>(vars: &ModelVars<'t>, f: Var<'t>) -> Result<Forward<'t>> {
    let z = embed(vars, f)?;
    let zn = l2_normalize(z)?;
    let posteriors = classify(vars, if vars.classify_on_raw { z } else { zn })?;
    Ok(Forward { features: f, embedding: z, normalized: zn, posteriors })
}

pub fn forward<'t>(vars: &ModelVars<'t>, x: Var<'t>) -> Result<Forward<'t>> {
    let f = extract_features(vars, x)?;
    head_forward(vars, f)
}
