//! Run configuration: defaults, then the JSON file, then command-line
//! overrides.

use std::path::{Path, PathBuf};

use interformer::evaluation::ClassifierConfig;
use interformer::generation::GenConfig;
use interformer::model::{ModelConfig, Setup};
use interformer::skeleton::{NormMode, SynthConfig};
use interformer::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

/// Dataset handling shared by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Samples per class in the synthesized test split.
    pub test_samples_per_class: usize,
    /// Per-sample normalisation applied before training, generation and
    /// evaluation. Files on disk keep raw coordinates.
    pub normalize: NormMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            test_samples_per_class: 10,
            normalize: NormMode::CenterScale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Runs per variant; run `i` uses seed `seed + i`.
    pub seeds: usize,
    pub setups: Vec<Setup>,
    /// Also run the full setup with single-head temporal and/or spatial
    /// attention.
    pub multihead_grid: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: 3,
            setups: Setup::ALL.to_vec(),
            multihead_grid: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Training split; `None` means `<out>/train.json`.
    pub train_data: Option<PathBuf>,
    /// Test split; `None` means `<out>/test.json`.
    pub test_data: Option<PathBuf>,
    /// Model checkpoint; `None` means `<out>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Classifier checkpoint to load instead of training one.
    pub classifier: Option<PathBuf>,
    /// Action sequence file for `generate`.
    pub action: Option<PathBuf>,
    /// Sequence file whose first frame seeds `generate`.
    pub first_frame: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds model initialisation; `--seed` also sets every component seed.
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
    pub classifier: ClassifierConfig,
    pub ablate: AblateConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut train = TrainConfig {
            steps: 2000,
            batch_size: 32,
            input_noise_sd: 0.02,
            ..TrainConfig::default()
        };
        train.adam.alpha = 1e-3;
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            model: ModelConfig {
                n_layers: 2,
                ..ModelConfig::default()
            },
            train,
            gen: GenConfig::default(),
            classifier: ClassifierConfig::default(),
            ablate: AblateConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn train_data(&self) -> PathBuf {
        self.paths
            .train_data
            .clone()
            .unwrap_or_else(|| self.out.join("train.json"))
    }

    pub fn test_data(&self) -> PathBuf {
        self.paths
            .test_data
            .clone()
            .unwrap_or_else(|| self.out.join("test.json"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    /// Writes this configuration as `config_used.json` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("config serialises");
        crate::commands::write_text(&dir.join("config_used.json"), &(text + "\n"))
    }
}

/// Recursively overlays `patch` onto `base`. Objects merge key by key; any
/// other value replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets the dotted `path` (e.g. `train.adam.alpha`) in `root`.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::Usage(format!("invalid key `{path}`")));
        }
        let obj = cur.as_object_mut().ok_or_else(|| {
            CliError::Usage(format!("`{}` is not a section", parts[..i].join(".")))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Parses a `KEY=VALUE` override; the value is read as JSON when possible
/// and as a string otherwise.
pub fn parse_assignment(text: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("expected KEY=VALUE, got `{text}`")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Builds the configuration from defaults, an optional JSON file, and
/// overrides applied in order.
pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig, CliError> {
    let mut value = serde_json::to_value(RunConfig::default()).expect("defaults serialise");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(CliError::Usage(format!(
                "config {} must be a JSON object",
                path.display()
            )));
        }
        merge(&mut value, patch);
    }
    for (key, v) in overrides {
        set_path(&mut value, key, v.clone())?;
    }
    serde_json::from_value(value)
        .map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}
