//! The run configuration: one strict JSON document shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use aida_core::dfc::ControllerMode;
use aida_core::protocol::{benchmark_specs, BenchmarkSpec};
use aida_core::synth::DomainSpec;
use aida_core::trainer::TrainConfig;

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Where the datasets come from. At most one of the two may be given; with
/// neither, the default benchmark is used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkSpec>,
    /// Explicit domains: every entry but the last is a source, the last is
    /// the target.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domains: Option<Vec<DomainSpec>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    /// One transfer per seed: data and training both use it.
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection { seeds: (0..5).collect() }
    }
}

/// Explicit file locations. Anything left unset falls back to the run
/// directory layout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    /// Root seed. Training, data generation and evaluation derive from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSection,
    /// Training hyperparameters. Its `seed` field is owned by the root seed
    /// and may not be set here.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablate: AblateSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: FORMAT_VERSION,
            seed: 0,
            data: DataSection::default(),
            train: TrainConfig::default(),
            ablate: AblateSection::default(),
            paths: PathsSection::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub controller_mode: Option<ControllerMode>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Value = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        match raw.get("format_version") {
            None => return Err(CliError::Config("missing format_version".into())),
            Some(v) if v.as_u64() != Some(FORMAT_VERSION as u64) => {
                return Err(CliError::Config(format!("format_version {v} is not supported (expected {FORMAT_VERSION})")))
            }
            Some(_) => {}
        }
        if raw.get("train").and_then(|t| t.get("seed")).is_some() {
            return Err(CliError::Config("train.seed is not allowed; set the top-level seed".into()));
        }
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(train) = v.get_mut("train").and_then(Value::as_object_mut) {
            train.remove("seed");
        }
        serde_json::to_string_pretty(&v).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.benchmark.is_some() && self.data.domains.is_some() {
            return Err(CliError::Config("data.benchmark and data.domains are mutually exclusive".into()));
        }
        if let Some(d) = &self.data.domains {
            if d.len() < 2 {
                return Err(CliError::Config(format!("data.domains needs a source and a target, got {} entries", d.len())));
            }
        }
        if self.ablate.seeds.is_empty() {
            return Err(CliError::Config("ablate.seeds is empty".into()));
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(mode) = o.controller_mode {
            self.train.controller.mode = mode;
        }
    }

    /// Training configuration carrying the root seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    /// Source specs followed by the target spec, for data seed `seed`.
    pub fn domain_specs(&self, seed: u64) -> Result<Vec<DomainSpec>> {
        match &self.data.domains {
            Some(d) => Ok(d.clone()),
            None => Ok(benchmark_specs(&self.data.benchmark.clone().unwrap_or_default(), seed)?),
        }
    }
}
