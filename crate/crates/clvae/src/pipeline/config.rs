//! Experiment configuration: TOML files, dotted-path overrides, validation
//! and normalization, and the content hash that names run directories.

use super::{PipeResult, PipelineError};
use crate::datamodel::{SplitSpec, SynthSceneSpec};
use crate::losses::LossWeights;
use crate::vae::VaeSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Ablation switches. A disabled loss term is not computed and its logged
/// component is exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSwitches {
    /// Attach a discrepancy map as a fourth input channel.
    pub use_discrepancy: bool,
    pub use_distance_loss: bool,
    pub use_cluster_loss: bool,
    pub use_perceptual_loss: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        Self {
            use_discrepancy: false,
            use_distance_loss: false,
            use_cluster_loss: false,
            use_perceptual_loss: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Symmetric separation of the two prior means on the first latent
    /// channel: normal at −delta, anomaly at +delta.
    pub delta: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { delta: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// The distance loss is unbounded below; values past this radius are
    /// clamped (with zero gradient).
    pub distance_cap: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            distance_cap: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitWeights {
    pub train: u64,
    pub val: u64,
    pub test: u64,
}

impl Default for SplitWeights {
    fn default() -> Self {
        Self {
            train: 70,
            val: 20,
            test: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthDataConfig {
    pub n_normal: usize,
    pub n_anomaly: usize,
    /// Alternative sizing: total count plus anomaly fraction.
    pub n_samples: Option<usize>,
    pub anomaly_fraction: Option<f64>,
    /// Scene recipe; its image size and seed are overwritten from the
    /// model spec and the data seed during normalization.
    pub scene: SynthSceneSpec,
}

impl Default for SynthDataConfig {
    fn default() -> Self {
        Self {
            n_normal: 500,
            n_anomaly: 100,
            n_samples: None,
            anomaly_fraction: None,
            scene: SynthSceneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Anomaly samples with fewer mask pixels are dropped. Zero disables
    /// the filter (the desk-scale default; 3000 matches full-resolution
    /// road scenes).
    pub min_anomaly_pixels: usize,
    /// Keep at most this many manifest entries per dataset tag
    /// (0 = unlimited).
    pub per_scene_cap: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_anomaly_pixels: 0,
            per_scene_cap: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// When set, samples come from this manifest instead of the synthetic
    /// generator.
    pub manifest: Option<PathBuf>,
    pub synth: SynthDataConfig,
    pub filter: FilterConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synth: SynthDataConfig::default(),
            filter: FilterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Oracle,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscrepancyConfig {
    pub provider: ProviderKind,
    /// Noise level of the oracle provider.
    pub noise_level: f64,
    /// Directory of precomputed PNGs for the file provider.
    pub dir: PathBuf,
}

impl Default for DiscrepancyConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Oracle,
            noise_level: 0.05,
            dir: PathBuf::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Decay the learning rate linearly to zero by the end of training.
    pub lr_linear_decay: bool,
    /// Write a checkpoint every this many epochs (0 = final only).
    pub checkpoint_interval_epochs: usize,
    /// When set, every batch samples anomalies with replacement to reach
    /// this fraction; unset uses the dataset's natural mix.
    pub batch_anomaly_fraction: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 12,
            learning_rate: 1e-4,
            lr_linear_decay: true,
            checkpoint_interval_epochs: 0,
            batch_anomaly_fraction: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub backbone: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            model: 1,
            data: 2,
            backbone: 3,
        }
    }
}

/// The full experiment recipe. Serialized (resolved) into each run
/// directory; its hash names the directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub vae: VaeSpec,
    pub priors: PriorConfig,
    pub loss: LossConfig,
    pub ablation: AblationSwitches,
    pub split: SplitWeights,
    pub data: DataConfig,
    pub discrepancy: DiscrepancyConfig,
    pub train: TrainConfig,
    pub seeds: Seeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            vae: VaeSpec::default(),
            priors: PriorConfig::default(),
            loss: LossConfig::default(),
            ablation: AblationSwitches::default(),
            split: SplitWeights::default(),
            data: DataConfig::default(),
            discrepancy: DiscrepancyConfig::default(),
            train: TrainConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

impl ExperimentConfig {
    /// Validates the config and resolves derived fields: input channel
    /// count from the discrepancy switch, synth counts from fraction mode,
    /// and the seeds threaded into the model and scene specs. The hash is
    /// taken over the normalized form.
    pub fn normalized(&self) -> PipeResult<ExperimentConfig> {
        let mut cfg = self.clone();
        cfg.vae.input_channels = if cfg.ablation.use_discrepancy { 4 } else { 3 };
        cfg.vae.seed = cfg.seeds.model;
        cfg.data.synth.scene.image_size = cfg.vae.image_size;
        cfg.data.synth.scene.seed = cfg.seeds.data;
        if let (Some(n), Some(f)) = (cfg.data.synth.n_samples, cfg.data.synth.anomaly_fraction) {
            if !(0.0..=1.0).contains(&f) {
                return Err(PipelineError::Config(format!(
                    "anomaly_fraction {f} outside [0, 1]"
                )));
            }
            let n_anomaly = (n as f64 * f).round() as usize;
            cfg.data.synth.n_anomaly = n_anomaly;
            cfg.data.synth.n_normal = n - n_anomaly;
            cfg.data.synth.n_samples = None;
            cfg.data.synth.anomaly_fraction = None;
        } else if cfg.data.synth.n_samples.is_some() || cfg.data.synth.anomaly_fraction.is_some() {
            return Err(PipelineError::Config(
                "n_samples and anomaly_fraction must be set together".into(),
            ));
        }

        cfg.vae.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.loss
            .weights
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if cfg.data.manifest.is_none() {
            cfg.data
                .synth
                .scene
                .validate()
                .map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if cfg.train.epochs == 0 {
            return Err(PipelineError::Config("epochs must be >= 1".into()));
        }
        if cfg.train.batch_size == 0 {
            return Err(PipelineError::Config("batch_size must be >= 1".into()));
        }
        if !(cfg.train.learning_rate > 0.0) {
            return Err(PipelineError::Config("learning_rate must be > 0".into()));
        }
        if let Some(f) = cfg.train.batch_anomaly_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(PipelineError::Config(format!(
                    "batch_anomaly_fraction {f} outside [0, 1]"
                )));
            }
        }
        if cfg.split.train + cfg.split.val + cfg.split.test == 0 {
            return Err(PipelineError::Config("split weights are all zero".into()));
        }
        if cfg.discrepancy.provider == ProviderKind::File && cfg.discrepancy.dir.as_os_str().is_empty()
        {
            return Err(PipelineError::Config(
                "discrepancy.provider = \"file\" requires discrepancy.dir".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn split_spec(&self) -> PipeResult<SplitSpec> {
        SplitSpec::from_weights(
            self.split.train,
            self.split.val,
            self.split.test,
            self.seeds.data,
        )
        .map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> PipeResult<String> {
        toml::to_string_pretty(self).map_err(|e| PipelineError::Config(e.to_string()))
    }
}

/// First 16 hex digits of the SHA-256 of the canonical TOML form.
pub fn config_hash(config: &ExperimentConfig) -> PipeResult<String> {
    let text = config.to_toml()?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(hex::encode(&digest[..8]))
}

/// Loads a config file, or the defaults when `path` is `None`.
pub fn load_config(path: Option<&Path>) -> PipeResult<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                PipelineError::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            toml::from_str(&text)
                .map_err(|e| PipelineError::Config(format!("config parse: {e}")))
        }
    }
}

/// Applies `key.path=value` overrides on the TOML representation, then
/// re-deserializes. Values parse as TOML (bare words fall back to strings).
pub fn apply_overrides(
    config: &ExperimentConfig,
    overrides: &[String],
) -> PipeResult<ExperimentConfig> {
    if overrides.is_empty() {
        return Ok(config.clone());
    }
    let text = config.to_toml()?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
    for item in overrides {
        let (path, raw) = item.split_once('=').ok_or_else(|| {
            PipelineError::Config(format!("override '{item}' must be key.path=value"))
        })?;
        let value = parse_toml_value(raw.trim());
        set_dotted(&mut table, path.trim(), value)?;
    }
    let text = toml::to_string(&table).map_err(|e| PipelineError::Config(e.to_string()))?;
    toml::from_str(&text).map_err(|e| PipelineError::Config(format!("after overrides: {e}")))
}

fn parse_toml_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Carrier {
        v: toml::Value,
    }
    toml::from_str::<Carrier>(&format!("v = {raw}"))
        .map(|c| c.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, path: &str, value: toml::Value) -> PipeResult<()> {
    let mut parts = path.split('.').peekable();
    let mut current = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            current.insert(part.to_string(), value);
            return Ok(());
        }
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                PipelineError::Config(format!("override path '{path}' crosses a non-table"))
            })?;
    }
    Err(PipelineError::Config(format!("empty override path '{path}'")))
}

/// Sets every seed to the same value (the `--seed` escape hatch).
pub fn override_all_seeds(config: &mut ExperimentConfig, seed: u64) {
    config.seeds = Seeds {
        model: seed,
        data: seed,
        backbone: seed,
    };
}
