//! Synthetic multi-domain identity data.
//!
//! Each domain draws one standard-normal prototype per identity and renders
//! samples as `scale ⊙ (prototype + noise) + offset + camera_offset`. Domains
//! differ only through the per-dimension affine style and the camera offsets,
//! which is exactly the kind of shift channel-statistics mixing targets.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, Rng};
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Per-dimension affine style of a domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleShift {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl StyleShift {
    pub fn identity(dim: usize) -> Self {
        StyleShift { scale: vec![1.0; dim], offset: vec![0.0; dim] }
    }

    pub fn uniform(dim: usize, scale: f64, offset: f64) -> Self {
        StyleShift { scale: vec![scale; dim], offset: vec![offset; dim] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub num_cameras: usize,
    pub feature_dim: usize,
    pub style_shift: StyleShift,
    pub camera_jitter: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(format!("domain {}: {m}", self.domain_id)));
        if self.num_identities == 0 || self.num_cameras == 0 || self.feature_dim == 0 {
            return bad("identity, camera and feature counts must be >= 1".into());
        }
        if self.samples_per_identity < 2 {
            return bad(format!(
                "samples_per_identity = {} but every identity needs at least 2 samples",
                self.samples_per_identity
            ));
        }
        let d = self.feature_dim;
        if self.style_shift.scale.len() != d || self.style_shift.offset.len() != d {
            return bad(format!("style_shift vectors must have length feature_dim = {d}"));
        }
        if self.style_shift.scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return bad("style scales must be finite and > 0".into());
        }
        if self.style_shift.offset.iter().any(|o| !o.is_finite()) {
            return bad("style offsets must be finite".into());
        }
        if !(self.camera_jitter >= 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("camera_jitter and noise_sigma must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub raw: Vec<f64>,
    pub identity: usize,
    pub domain_id: usize,
    pub camera: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub spec: DomainSpec,
    pub samples: Vec<Sample>,
}

impl DomainDataset {
    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    /// Distinct identity labels, ascending.
    pub fn identities(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.identity).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Raw vectors as a `[n, feature_dim]` matrix.
    pub fn matrix(&self) -> Tensor {
        let rows: Vec<&[f64]> = self.samples.iter().map(|s| s.raw.as_slice()).collect();
        Tensor::from_rows(&rows).expect("dataset rows share feature_dim")
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = DatasetFile {
            format_version: DATASET_FORMAT_VERSION,
            spec: self.spec.clone(),
            sample_fields: SAMPLE_FIELDS.iter().map(|s| s.to_string()).collect(),
            samples: self
                .samples
                .iter()
                .map(|s| SampleRow(s.identity, s.domain_id, s.camera, s.raw.clone()))
                .collect(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::Json { path: path.into(), source: e })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: DatasetFile =
            serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })?;
        if file.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: dataset format_version {} is not supported (expected {DATASET_FORMAT_VERSION})",
                path.display(),
                file.format_version
            )));
        }
        if file.sample_fields != SAMPLE_FIELDS {
            return Err(Error::Format(format!("{}: unexpected sample_fields {:?}", path.display(), file.sample_fields)));
        }
        file.spec.validate()?;
        let d = file.spec.feature_dim;
        let mut samples = Vec::with_capacity(file.samples.len());
        for (i, SampleRow(identity, domain_id, camera, raw)) in file.samples.into_iter().enumerate() {
            if raw.len() != d {
                return Err(Error::Format(format!("{}: sample {i} has {} values, expected {d}", path.display(), raw.len())));
            }
            samples.push(Sample { raw, identity, domain_id, camera });
        }
        Ok(DomainDataset { spec: file.spec, samples })
    }
}

/// Field order of each serialized sample row.
pub const SAMPLE_FIELDS: [&str; 4] = ["identity", "domain_id", "camera", "raw"];

#[derive(Serialize, Deserialize)]
struct SampleRow(usize, usize, usize, Vec<f64>);

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    format_version: u32,
    spec: DomainSpec,
    sample_fields: Vec<String>,
    samples: Vec<SampleRow>,
}

fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Renders one domain. Labels are local (`0..num_identities`) until
/// [`make_disjoint`] re-indexes them.
pub fn generate_domain(spec: &DomainSpec) -> Result<DomainDataset> {
    spec.validate()?;
    let d = spec.feature_dim;
    let mut rng = rng_from(spec.seed);

    let camera_offsets: Vec<Vec<f64>> = (0..spec.num_cameras)
        .map(|_| {
            let v = normal_vec(&mut rng, d);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || spec.camera_jitter == 0.0 {
                vec![0.0; d]
            } else {
                v.iter().map(|x| x * spec.camera_jitter / norm).collect()
            }
        })
        .collect();
    let prototypes: Vec<Vec<f64>> = (0..spec.num_identities).map(|_| normal_vec(&mut rng, d)).collect();

    let StyleShift { scale, offset } = &spec.style_shift;
    let mut samples = Vec::with_capacity(spec.num_identities * spec.samples_per_identity);
    for (identity, proto) in prototypes.iter().enumerate() {
        for j in 0..spec.samples_per_identity {
            let camera = j % spec.num_cameras;
            let noise = normal_vec(&mut rng, d);
            let raw = (0..d)
                .map(|c| {
                    scale[c] * (proto[c] + spec.noise_sigma * noise[c]) + offset[c] + camera_offsets[camera][c]
                })
                .collect();
            samples.push(Sample { raw, identity, domain_id: spec.domain_id, camera });
        }
    }
    Ok(DomainDataset { spec: spec.clone(), samples })
}

/// Re-indexes identity labels so that distinct domains occupy disjoint,
/// consecutive label ranges in the given order.
pub fn make_disjoint(domains: Vec<DomainDataset>) -> Vec<DomainDataset> {
    let mut next = 0;
    domains
        .into_iter()
        .map(|mut ds| {
            let ids = ds.identities();
            for s in &mut ds.samples {
                s.identity = next + ids.binary_search(&s.identity).expect("label present");
            }
            next += ids.len();
            ds
        })
        .collect()
}

/// An identity-balanced mini-batch. Rows are grouped by source dataset
/// (ascending), then identity, then instance.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    /// Index into the dataset slice passed to [`pk_sample`].
    pub sources: Vec<usize>,
    pub cameras: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row indices of each source dataset present in the batch.
    pub fn groups(&self) -> Vec<(usize, Vec<usize>)> {
        let mut out: Vec<(usize, Vec<usize>)> = Vec::new();
        for (row, &src) in self.sources.iter().enumerate() {
            match out.iter_mut().find(|(s, _)| *s == src) {
                Some((_, rows)) => rows.push(row),
                None => out.push((src, vec![row])),
            }
        }
        out.sort_by_key(|(s, _)| *s);
        out
    }
}

/// Draws `p` distinct identities with `k_inst` instances each. Identities
/// are spread as evenly as possible over the datasets (the first
/// `p % n` datasets take one extra).
pub fn pk_sample(datasets: &[&DomainDataset], p: usize, k_inst: usize, seed: u64) -> Result<Batch> {
    if p < 2 || k_inst < 2 {
        return Err(Error::Sampling(format!("need P >= 2 and K >= 2, got P = {p}, K = {k_inst}")));
    }
    if datasets.is_empty() {
        return Err(Error::Sampling("no datasets to sample from".into()));
    }
    let n = datasets.len();
    let mut rows: Vec<&[f64]> = Vec::with_capacity(p * k_inst);
    let (mut labels, mut sources, mut cameras) = (Vec::new(), Vec::new(), Vec::new());
    for (di, ds) in datasets.iter().enumerate() {
        let want = p / n + usize::from(di < p % n);
        if want == 0 {
            continue;
        }
        let mut rng = rng_from(derive_seed(seed, &format!("pk/{di}")));
        let mut ids = ds.identities();
        if ids.len() < want {
            return Err(Error::Sampling(format!(
                "dataset {di} (domain {}) has {} identities, {want} requested",
                ds.spec.domain_id,
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);
        let mut chosen = ids[..want].to_vec();
        chosen.sort_unstable();
        for id in chosen {
            let mut members: Vec<usize> = (0..ds.samples.len()).filter(|&i| ds.samples[i].identity == id).collect();
            if members.len() < k_inst {
                return Err(Error::Sampling(format!(
                    "identity {id} in dataset {di} has {} samples, {k_inst} requested",
                    members.len()
                )));
            }
            members.shuffle(&mut rng);
            let mut picked = members[..k_inst].to_vec();
            picked.sort_unstable();
            for i in picked {
                let s = &ds.samples[i];
                rows.push(&s.raw);
                labels.push(s.identity);
                sources.push(di);
                cameras.push(s.camera);
            }
        }
    }
    let x = Tensor::from_rows(&rows).map_err(|e| Error::Sampling(e.to_string()))?;
    Ok(Batch { x, labels, sources, cameras })
}

/// Shuffled fixed-size chunks of unlabeled rows (the last partial chunk is
/// dropped unless it is the only one).
pub fn unlabeled_batches(n: usize, batch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(seed));
    let mut out: Vec<Vec<usize>> = idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().map(|c| c.len() < batch).unwrap_or(false) {
        out.pop();
    }
    out
}
