//! Run configuration: a TOML file with `[train]`, `[model]`, `[data]` and
//! optional `[diagnose]` / `[output]` sections, plus dotted-key overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cst_core::data::{load_csv_images, load_idx_images, synth_blobs, DatasetHandle};
use cst_core::network::LayerSpec;
use cst_core::trainer::TrainConfig;
use cst_core::NetworkSpec;

use crate::CliError;

fn default_eval_fraction() -> f64 {
    0.2
}
fn default_checkpoint_every() -> usize {
    1
}
fn default_alpha() -> f64 {
    0.5
}
fn default_n_samples() -> usize {
    400
}
fn default_batch_rows() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layers; the classifier is appended automatically.
    #[serde(default)]
    pub layers: Vec<LayerSpec>,
    /// Output classes. Defaults to the dataset's class count.
    #[serde(default)]
    pub classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Blobs {
        classes: usize,
        dims: usize,
        n_per_class: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Csv {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    /// Keep only the first `limit` rows.
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    /// Structure vector to diagnose at; defaults to the model's `s` (from a
    /// checkpoint) or the uniform initialization.
    #[serde(default)]
    pub s: Option<Vec<f64>>,
    /// Rows of the training split forming the fixed minibatch.
    #[serde(default = "default_batch_rows")]
    pub batch_rows: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            alpha: default_alpha(),
            n_samples: default_n_samples(),
            s: None,
            batch_rows: default_batch_rows(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Epochs between checkpoint writes.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            checkpoint_every: default_checkpoint_every(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub diagnose: DiagnoseConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Parses `KEY=VALUE`, reading VALUE as a TOML value and falling back to a
/// bare string.
fn parse_override(text: &str) -> Result<(Vec<String>, toml::Value), CliError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{text}` is not KEY=VALUE")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_owned).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    Ok((path, value))
}

fn apply_override(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty override path");
    let mut table = root;
    for key in parents {
        table = table
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override path `{}` crosses a non-table key `{key}`", path.join("."))))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// A loaded config together with the directory its relative paths resolve
/// against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub source: PathBuf,
}

pub fn load(path: &Path, seed: Option<u64>, overrides: &[String]) -> Result<LoadedConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for o in overrides {
        let (key, value) = parse_override(o)?;
        apply_override(&mut table, &key, value)?;
    }
    if let Some(seed) = seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::Config(format!("seed {seed} exceeds the config integer range")))?;
        apply_override(&mut table, &["train".into(), "seed".into()], toml::Value::Integer(seed))?;
    }
    let config: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
    config.train.validate()?;
    if !(0.0..1.0).contains(&config.data.eval_fraction) {
        return Err(CliError::Config(format!(
            "data.eval_fraction = {} not in [0, 1)",
            config.data.eval_fraction
        )));
    }
    if config.output.checkpoint_every == 0 {
        return Err(CliError::Config("output.checkpoint_every must be at least 1".into()));
    }
    Ok(LoadedConfig {
        config,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        source: path.to_path_buf(),
    })
}

impl LoadedConfig {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn dataset(&self) -> Result<DatasetHandle, CliError> {
        let d = &self.config.data;
        let data = match &d.source {
            DataSource::Blobs {
                classes,
                dims,
                n_per_class,
                separation,
                seed,
            } => synth_blobs(*classes, *dims, *n_per_class, *separation, *seed)?,
            DataSource::Idx { images, labels } => load_idx_images(self.resolve(images), self.resolve(labels))?,
            DataSource::Csv { path } => load_csv_images(self.resolve(path))?,
        };
        let data = match d.limit {
            Some(n) => data.truncate(n)?,
            None => data,
        };
        Ok(data.with_split(d.eval_fraction, d.split_seed)?)
    }

    pub fn network(&self, data: &DatasetHandle) -> Result<NetworkSpec, CliError> {
        let classes = self.config.model.classes.unwrap_or(data.classes());
        Ok(NetworkSpec::new(
            data.example_shape().to_vec(),
            classes,
            self.config.model.layers.clone(),
        )?)
    }

    /// Name used for the default output directory.
    pub fn run_name(&self) -> String {
        self.source
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    }
}
