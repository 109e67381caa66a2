//! Dataset generation, the manifest, and dataset path resolution.

use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};

use aida_core::synth::{generate_domain, make_disjoint, DomainDataset};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::layout::{read_json, require, sha256_hex, write_json, Layout};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// File name relative to the manifest's directory.
    pub file: String,
    pub role: Role,
    pub domain_id: usize,
    /// Generator seed of this domain.
    pub seed: u64,
    pub identities: usize,
    pub samples: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub root_seed: u64,
    /// Seconds since the Unix epoch. The only timestamp any command writes.
    pub created_unix: u64,
    pub total_samples: usize,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn paths(&self, layout: &Layout, role: Role) -> Vec<PathBuf> {
        self.files.iter().filter(|f| f.role == role).map(|f| layout.data_dir().join(&f.file)).collect()
    }
}

/// Writes every source and the target as dataset JSON plus `manifest.json`.
pub fn gen_data(cfg: &RunConfig, layout: &Layout) -> Result<Manifest> {
    let specs = cfg.domain_specs(cfg.seed)?;
    let mut domains = specs.iter().map(generate_domain).collect::<aida_core::Result<Vec<_>>>()?;
    let target = domains.pop().expect("at least two domain specs");
    let sources = make_disjoint(domains);

    let dir = layout.data_dir();
    crate::layout::ensure_dir(&dir)?;
    let mut files = Vec::new();
    let named = sources
        .iter()
        .enumerate()
        .map(|(i, d)| (format!("source_{i}.json"), Role::Source, d))
        .chain(std::iter::once(("target.json".to_string(), Role::Target, &target)));
    for (file, role, ds) in named {
        let path = dir.join(&file);
        ds.save_json(&path)?;
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        files.push(ManifestEntry {
            file,
            role,
            domain_id: ds.spec.domain_id,
            seed: ds.spec.seed,
            identities: ds.identities().len(),
            samples: ds.samples.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        root_seed: cfg.seed,
        created_unix,
        total_samples: files.iter().map(|f| f.samples).sum(),
        files,
    };
    write_json(&layout.manifest(), &manifest)?;
    info!("wrote {} sources and 1 target ({} samples) to {}", sources.len(), manifest.total_samples, dir.display());
    Ok(manifest)
}

pub fn load_manifest(layout: &Layout) -> Result<Manifest> {
    let path = layout.manifest();
    require(&path, "run gen-data first or set paths in the config")?;
    let m: Manifest = read_json(&path)?;
    if m.format_version != MANIFEST_VERSION {
        return Err(CliError::Config(format!("{}: manifest format_version {} is not supported", path.display(), m.format_version)));
    }
    Ok(m)
}

/// `paths.sources`, or the manifest's sources.
pub fn source_paths(cfg: &RunConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    if !cfg.paths.sources.is_empty() {
        return Ok(cfg.paths.sources.clone());
    }
    Ok(load_manifest(layout)?.paths(layout, Role::Source))
}

/// `paths.target`, or the manifest's target.
pub fn target_path(cfg: &RunConfig, layout: &Layout) -> Result<PathBuf> {
    if let Some(p) = &cfg.paths.target {
        return Ok(p.clone());
    }
    load_manifest(layout)?
        .paths(layout, Role::Target)
        .into_iter()
        .next()
        .ok_or_else(|| CliError::Config(format!("{}: manifest lists no target", layout.manifest().display())))
}

/// Loads sources and re-indexes their labels to be disjoint.
pub fn load_sources(paths: &[PathBuf]) -> Result<Vec<DomainDataset>> {
    if paths.is_empty() {
        return Err(CliError::Config("no source datasets".into()));
    }
    let domains = paths.iter().map(|p| DomainDataset::load_json(p)).collect::<aida_core::Result<Vec<_>>>()?;
    Ok(make_disjoint(domains))
}
