//! Run configuration: a TOML file plus `--set key.path=value` overrides.

use std::path::{Path, PathBuf};

use biocast_core::batch_builder::SourceDescriptor;
use biocast_core::data_model::{GridSpec, Month, Schema};
use biocast_core::model::ModelConfig;
use biocast_core::training::{AdapterConfig, OptimSchedule, VariableWeights};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every random stream derives from it.
    pub seed: u64,
    pub model: ModelSection,
    pub optim: OptimSchedule,
    pub train: TrainSection,
    pub finetune: FinetuneSection,
    pub rollout: RolloutSection,
    pub evaluate: EvaluateSection,
    pub data: DataSection,
    pub paths: PathsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `small`, `medium`, `desk` or `mini`.
    pub preset: String,
    /// Replaces the preset schema: `desk` or `full`.
    pub schema: Option<String>,
    /// Replaces the preset grid: `desk`, `mini` or `full`.
    pub grid: Option<String>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { preset: "desk".into(), schema: None, grid: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    /// 1 trains on the one-step objective, more on the rollout objective.
    pub rollout_k: usize,
    /// Intermediate checkpoint period in steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// `full` or `uniform`.
    pub weights: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { steps: 100, rollout_k: 1, checkpoint_every: 0, weights: "full".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub steps: u64,
    pub rollout_k: usize,
    /// Adapter layout; without it every parameter is fine-tuned.
    pub adapter: Option<AdapterConfig>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self { steps: 50, rollout_k: 6, adapter: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    pub steps: usize,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self { steps: 12 }
    }
}

pub const ALL_METRICS: [&str; 7] = ["scorecard", "mae", "rmse", "r2", "f1", "sorensen", "richness"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub metrics: Vec<String>,
    /// Species presence iff the denormalized value exceeds this.
    pub threshold: f64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self { metrics: ALL_METRICS.iter().map(|s| s.to_string()).collect(), threshold: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// First month of the first window.
    pub start: Month,
    /// Number of consecutive two-month windows to build.
    pub windows: usize,
    pub sources: Vec<SourceDescriptor>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { start: Month::new(2000, 1).expect("valid"), windows: 1, sources: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub batches: PathBuf,
    pub stats: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { batches: "batches".into(), stats: "stats.json".into(), output: "run".into() }
    }
}

/// A loaded configuration together with the directory relative paths
/// resolve against.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: RunConfig,
    pub base: PathBuf,
}

impl Loaded {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

/// Splits `a.b.c=value`; the value is read as a TOML literal, falling back
/// to a bare string.
fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value), CliError> {
    let (key, raw) = s.split_once('=').ok_or_else(|| CliError::Config(format!("override `{s}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty");
    let mut t = table;
    for p in parents {
        let entry = t.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry.as_table_mut().ok_or_else(|| CliError::Config(format!("`{p}` is not a section")))?;
    }
    t.insert(last.clone(), value);
    Ok(())
}

/// Reads `path` (or starts from defaults) and applies the overrides in order.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Loaded, CliError> {
    let (mut table, base) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            let table: toml::Table =
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (table, base)
        }
        None => (toml::Table::new(), PathBuf::new()),
    };
    for o in overrides {
        let (path, value) = parse_override(o)?;
        apply(&mut table, &path, value)?;
    }
    let config: RunConfig =
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    config.validate()?;
    Ok(Loaded { config, base })
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.model_config()?;
        self.weights(&self.model_config()?.schema)?;
        if self.train.rollout_k == 0 || self.finetune.rollout_k == 0 {
            return Err(CliError::Config("rollout_k must be at least 1".into()));
        }
        if self.rollout.steps == 0 {
            return Err(CliError::Config("rollout.steps must be at least 1".into()));
        }
        if self.data.windows == 0 {
            return Err(CliError::Config("data.windows must be at least 1".into()));
        }
        for m in &self.evaluate.metrics {
            if !ALL_METRICS.contains(&m.as_str()) {
                return Err(CliError::Config(format!("unknown metric `{m}` (known: {})", ALL_METRICS.join(", "))));
            }
        }
        if !self.evaluate.threshold.is_finite() {
            return Err(CliError::Config("evaluate.threshold must be finite".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let mut cfg = ModelConfig::preset(&self.model.preset).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(s) = &self.model.schema {
            cfg.schema = match s.as_str() {
                "desk" => Schema::desk(),
                "full" => Schema::full(),
                other => return Err(CliError::Config(format!("unknown schema preset `{other}`"))),
            };
        }
        if let Some(g) = &self.model.grid {
            cfg.grid = match g.as_str() {
                "desk" => GridSpec::desk(),
                "mini" => GridSpec::mini(),
                "full" => GridSpec::full(),
                other => return Err(CliError::Config(format!("unknown grid preset `{other}`"))),
            };
        }
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn weights(&self, schema: &Schema) -> Result<VariableWeights, CliError> {
        let w = match self.train.weights.as_str() {
            "full" => VariableWeights::full(),
            "uniform" => VariableWeights::uniform(schema),
            other => return Err(CliError::Config(format!("unknown weight table `{other}`"))),
        };
        w.channel_coefficients(schema, 1).map_err(|e| CliError::Config(format!("loss weights: {e}")))?;
        Ok(w)
    }

    /// TOML has no null, so disabled clipping is written as `clip_norm = 0`.
    pub fn to_toml(&self) -> String {
        let mut c = self.clone();
        c.optim.clip_norm.get_or_insert(0.0);
        toml::to_string(&c).expect("config serializes")
    }
}
