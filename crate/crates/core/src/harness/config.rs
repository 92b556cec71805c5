//! Run configuration (sectioned TOML) and the manifest written beside every
//! run's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::downstream::{FinetuneConfig, LabelConfig, TaskSelection};
use crate::embedding::{Component, EmbeddingConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::pretrain::{MaskingConfig, PretrainConfig, SWEEP_LABELS};
use crate::seeding::derive_seed;
use crate::sequence::{TruncationMode, WindowSpec, MIN_EVENTS};

/// Relative output paths resolve under this directory when it is set.
pub const OUTPUT_ROOT_ENV: &str = "PULSE_ICU_OUTPUT_ROOT";
pub const RUN_MANIFEST_FILE: &str = "run.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub test_fraction: f64,
    pub val_fraction: f64,
    /// Restrict inputs to the bundled core variable list.
    pub core_variables: bool,
    /// Restrict inputs to the names in this file (one per line).
    pub variables_file: Option<PathBuf>,
    /// Stays left with fewer events after variable filtering are dropped.
    pub min_events: usize,
    /// SOFA rule table replacing the bundled one.
    pub sofa_rules: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            val_fraction: 0.1,
            core_variables: false,
            variables_file: None,
            min_events: MIN_EVENTS,
            sofa_rules: None,
        }
    }
}

/// Axes of the sweep drivers. Empty axes fall back to the base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Masking configurations as M/C/P/V labels.
    pub masking: Vec<String>,
    pub label_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub ablations: Vec<Component>,
    pub observation_hours: Vec<f64>,
    pub truncation_modes: Vec<TruncationMode>,
    /// Variable filter axis: `true` restricts inputs to the core list.
    pub core_variables: Vec<bool>,
    /// Fine-tune from a pretrained backbone in the ratio sweep.
    pub pretrained: bool,
    /// Pretrain before fine-tuning in every ablation run.
    pub ablation_pretrain: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            masking: SWEEP_LABELS.iter().map(|s| s.to_string()).collect(),
            label_fractions: vec![0.0, 0.1, 0.3, 1.0],
            seeds: vec![0, 1, 2],
            ablations: Component::ABLATABLE.to_vec(),
            observation_hours: Vec::new(),
            truncation_modes: Vec::new(),
            core_variables: Vec::new(),
            pretrained: true,
            ablation_pretrain: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every other seed of the run.
    pub seed: u64,
    pub data: DataConfig,
    pub window: WindowSpec,
    pub labels: LabelConfig,
    pub embedding: EmbeddingConfig,
    pub encoder: EncoderConfig,
    pub masking: MaskingConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub tasks: TaskSelection,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::desk();
        Self {
            seed: 0,
            data: DataConfig::default(),
            window: WindowSpec {
                max_tokens: encoder.max_tokens,
                ..WindowSpec::default()
            },
            labels: LabelConfig::default(),
            embedding: EmbeddingConfig::default(),
            encoder,
            masking: MaskingConfig::default(),
            pretrain: PretrainConfig {
                epochs: 60,
                lr: 3e-3,
                ..PretrainConfig::default()
            },
            finetune: FinetuneConfig {
                epochs: 40,
                lr_backbone: 1e-3,
                lr_heads: 1e-2,
                ..FinetuneConfig::default()
            },
            tasks: TaskSelection::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.masking.validate()?;
        let d = &self.data;
        if !(0.0..1.0).contains(&d.test_fraction)
            || !(0.0..1.0).contains(&d.val_fraction)
            || d.test_fraction + d.val_fraction >= 1.0
        {
            return Err(Error::Config(
                "test and validation fractions must leave training stays".into(),
            ));
        }
        if self.window.max_tokens > self.encoder.max_tokens {
            return Err(Error::Config(format!(
                "window.max_tokens {} exceeds encoder.max_tokens {}",
                self.window.max_tokens, self.encoder.max_tokens
            )));
        }
        if self.tasks.tasks().is_empty() {
            return Err(Error::Config("task selection is empty".into()));
        }
        for label in &self.sweep.masking {
            MaskingConfig::from_label(label)?;
        }
        if self
            .sweep
            .label_fractions
            .iter()
            .any(|r| !(0.0..=1.0).contains(r))
        {
            return Err(Error::Config("label fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Copy whose component seeds are derived from the top-level seed.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.masking.seed = derive_seed(self.seed, "masking", &[]);
        c.pretrain.seed = derive_seed(self.seed, "pretrain", &[]);
        c.finetune.seed = derive_seed(self.seed, "finetune", &[]);
        c
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, "model", &[])
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Hash of a dataset directory: its manifest plus every file it lists.
pub fn hash_dataset(dir: &Path) -> Result<String> {
    use crate::event_data::{DatasetManifest, MANIFEST_FILE};
    let manifest_path = if dir.is_dir() {
        dir.join(MANIFEST_FILE)
    } else {
        dir.to_path_buf()
    };
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(&manifest_path)?;
    let manifest = DatasetManifest::from_toml(&text)?;
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    for f in std::iter::once(&manifest.vocabulary).chain(&manifest.stays) {
        h.update(std::fs::read(root.join(f))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Resolves a relative output path against the output root variable.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Everything needed to rerun a command and reproduce its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Crate version plus a config hash prefix.
    pub artifact_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub data: Option<PathBuf>,
    pub data_hash: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub outputs: Vec<String>,
    /// The full configuration the run used.
    pub config: toml::Table,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config_toml: &str) -> Result<Self> {
        let config: toml::Table =
            toml::from_str(config_toml).map_err(|e| Error::Config(e.to_string()))?;
        let hash = sha256_hex(config_toml.as_bytes());
        let version = env!("CARGO_PKG_VERSION").to_string();
        Ok(Self {
            command: command.into(),
            artifact_version: format!("{version}+{}", &hash[..12]),
            version,
            seed,
            config_hash: hash,
            data: None,
            data_hash: None,
            checkpoint: None,
            outputs: Vec::new(),
            config,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(dir.join(RUN_MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
