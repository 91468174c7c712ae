//! Run configuration: a sectioned TOML file whose every key can be
//! overridden by `section.key` (or a bare key when it is unambiguous).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use super::data::DatasetDescriptor;
use crate::classifier::{ClassifierDescriptor, ClassifierReplayConfig};
use crate::denoiser::DenoiserDescriptor;
use crate::diffusion::VarianceSchedule;
use crate::error::{Error, Result};
use crate::metrics::LabelerConfig;
use crate::strategies::{Strategy, StrategyConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub tasks: usize,
    pub classes_per_task: usize,
    /// Explicit class order; empty means a seed-derived random order.
    pub class_order: Vec<usize>,
    pub out: PathBuf,
    pub checkpoints: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            tasks: 5,
            classes_per_task: 2,
            class_order: Vec::new(),
            out: PathBuf::from("runs/default"),
            checkpoints: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub horizon: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self { horizon: 100, beta_start: 1e-3, beta_end: 0.1, hidden: vec![256, 256], time_dim: 32 }
    }
}

/// Diffusion-model training settings shared by every strategy in a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategySection {
    /// Strategies to run, in reporting order.
    pub strategy: Vec<Strategy>,
    pub teacher_steps: usize,
    /// Distillation weight; each strategy's own default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub buffer: usize,
    pub epochs_per_task: usize,
    pub batch_size_current: usize,
    pub batch_size_replay: usize,
    pub learning_rate: f64,
    pub cache_replay: bool,
}

impl Default for StrategySection {
    fn default() -> Self {
        let base = StrategyConfig::default();
        Self {
            strategy: vec![Strategy::GenerativeDistillation],
            teacher_steps: base.teacher_steps,
            lambda: None,
            buffer: base.buffer_capacity,
            epochs_per_task: base.epochs_per_task,
            batch_size_current: base.batch_size_current,
            batch_size_replay: base.batch_size_replay,
            learning_rate: base.learning_rate,
            cache_replay: base.cache_replay,
        }
    }
}

impl StrategySection {
    pub fn config_for(&self, strategy: Strategy) -> StrategyConfig {
        StrategyConfig {
            strategy,
            teacher_steps: self.teacher_steps,
            lambda: self.lambda.unwrap_or_else(|| strategy.default_lambda()),
            buffer_capacity: self.buffer,
            epochs_per_task: self.epochs_per_task,
            batch_size_current: self.batch_size_current,
            batch_size_replay: self.batch_size_replay,
            learning_rate: self.learning_rate,
            cache_replay: self.cache_replay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub enabled: bool,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub temperature: f64,
    pub replay_ddim_steps: usize,
    pub epochs: usize,
    pub batch_size_current: usize,
    pub batch_size_replay: usize,
    pub learning_rate: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let r = ClassifierReplayConfig::default();
        Self {
            enabled: true,
            hidden: vec![128, 64],
            dropout: 0.1,
            temperature: r.temperature,
            replay_ddim_steps: r.replay_ddim_steps,
            epochs: r.epochs,
            batch_size_current: r.batch_size_current,
            batch_size_replay: r.batch_size_replay,
            learning_rate: r.learning_rate,
        }
    }
}

impl ClassifierSection {
    pub fn replay_config(&self) -> ClassifierReplayConfig {
        ClassifierReplayConfig {
            temperature: self.temperature,
            replay_ddim_steps: self.replay_ddim_steps,
            epochs: self.epochs,
            batch_size_current: self.batch_size_current,
            batch_size_replay: self.batch_size_replay,
            learning_rate: self.learning_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_samples: usize,
    pub eval_steps: usize,
    pub grid_samples: usize,
    pub grid_steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { n_samples: 2000, eval_steps: 10, grid_samples: 64, grid_steps: 10 }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub dataset: DatasetDescriptor,
    pub diffusion: DiffusionSection,
    pub strategy: StrategySection,
    pub classifier: ClassifierSection,
    pub labeler: LabelerConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// Every settable key as `section.key`.
    pub fn keys() -> Vec<String> {
        let mut probe = Self::default();
        probe.strategy.lambda = Some(0.0);
        let table = Value::try_from(&probe).expect("config serializes");
        let mut keys = Vec::new();
        for (section, body) in table.as_table().expect("table") {
            for key in body.as_table().expect("sections are tables").keys() {
                keys.push(format!("{section}.{key}"));
            }
        }
        keys
    }

    /// Resolve a bare or dotted key to `section.key`. Dashes read as
    /// underscores.
    pub fn resolve_key(key: &str) -> Result<String> {
        let key = key.replace('-', "_");
        let keys = Self::keys();
        if keys.contains(&key) {
            return Ok(key);
        }
        let matches: Vec<&String> = keys.iter().filter(|k| k.split_once('.').unwrap().1 == key).collect();
        match matches.as_slice() {
            [one] => Ok((*one).clone()),
            [] => Err(Error::Config(format!("unknown config key `{key}`"))),
            many => Err(Error::Config(format!(
                "ambiguous key `{key}`; use one of {}",
                many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    /// Set one key from its textual value. Values parse as TOML, so strings
    /// may be given bare, and comma-separated values fill list keys.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let full = Self::resolve_key(key)?;
        let (section, field) = full.split_once('.').unwrap();
        let mut table: Table = Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let is_list = matches!(
            table.get(section).and_then(|s| s.get(field)),
            Some(Value::Array(_))
        ) || full == "strategy.strategy";
        let parsed = parse_value(value, is_list);
        table
            .get_mut(section)
            .and_then(Value::as_table_mut)
            .expect("section exists")
            .insert(field.to_string(), parsed);
        let updated: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{full} = {value}: {e}")))?;
        *self = updated;
        Ok(())
    }

    pub fn schedule(&self) -> Result<VarianceSchedule> {
        VarianceSchedule::linear(self.diffusion.horizon, self.diffusion.beta_start, self.diffusion.beta_end)
    }

    pub fn denoiser_descriptor(&self, data_shape: &[usize]) -> DenoiserDescriptor {
        DenoiserDescriptor {
            data_shape: data_shape.to_vec(),
            hidden: self.diffusion.hidden.clone(),
            time_dim: self.diffusion.time_dim,
            horizon: self.diffusion.horizon,
        }
    }

    pub fn classifier_descriptor(&self, input_dim: usize) -> ClassifierDescriptor {
        ClassifierDescriptor {
            input_dim,
            hidden: self.classifier.hidden.clone(),
            num_classes: self.dataset.num_classes,
            dropout: self.classifier.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.strategy.strategy.is_empty() {
            return Err(Error::Config("at least one strategy is required".into()));
        }
        if !self.run.class_order.is_empty() {
            let mut sorted = self.run.class_order.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.run.class_order.len() {
                return Err(Error::Config("class_order repeats a class".into()));
            }
        }
        self.dataset.validate()?;
        self.schedule()?;
        for &s in &self.strategy.strategy {
            self.strategy.config_for(s).validate()?;
        }
        self.classifier.replay_config().validate()?;
        if self.eval.n_samples < 2 || self.eval.eval_steps < 1 || self.eval.grid_steps < 1 {
            return Err(Error::Config("eval needs n_samples >= 2 and at least one sampling step".into()));
        }
        let side = (self.eval.grid_samples as f64).sqrt().round() as usize;
        if side * side != self.eval.grid_samples || side == 0 {
            return Err(Error::Config("grid_samples must be a positive perfect square".into()));
        }
        Ok(())
    }
}

fn parse_value(text: &str, is_list: bool) -> Value {
    let text = text.trim();
    let scalar = |s: &str| -> Value {
        let s = s.trim();
        toml::from_str::<Table>(&format!("v = {s}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(s.to_string()))
    };
    if is_list && !text.starts_with('[') {
        if text.is_empty() {
            return Value::Array(Vec::new());
        }
        return Value::Array(text.split(',').map(scalar).collect());
    }
    scalar(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.strategy.lambda = Some(0.5);
        cfg.run.class_order = vec![3, 1];
        let text = cfg.to_toml_string().unwrap();
        assert!(text.contains("[strategy]"));
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(RunConfig::from_toml_str("[run]\nbogus = 1\n").is_err());
    }

    #[test]
    fn every_key_is_overridable() {
        let keys = RunConfig::keys();
        assert!(keys.contains(&"strategy.lambda".to_string()));
        assert!(keys.contains(&"dataset.resolution".to_string()));
        let mut cfg = RunConfig::default();
        cfg.apply_override("lambda", "0.3").unwrap();
        cfg.apply_override("teacher-steps", "10").unwrap();
        cfg.apply_override("strategy", "gd,generative_replay").unwrap();
        cfg.apply_override("seeds", "4,5").unwrap();
        cfg.apply_override("out", "/tmp/x y").unwrap();
        cfg.apply_override("dataset.source", "csv_points").unwrap();
        cfg.apply_override("run.class_order", "[1, 0]").unwrap();
        assert_eq!(cfg.strategy.lambda, Some(0.3));
        assert_eq!(cfg.strategy.teacher_steps, 10);
        assert_eq!(
            cfg.strategy.strategy,
            vec![Strategy::GenerativeDistillation, Strategy::GenerativeReplay]
        );
        assert_eq!(cfg.run.seeds, vec![4, 5]);
        assert_eq!(cfg.run.out, PathBuf::from("/tmp/x y"));
        assert_eq!(cfg.run.class_order, vec![1, 0]);
        assert!(cfg.apply_override("hidden", "[8]").is_err());
        assert!(cfg.apply_override("nonexistent", "1").is_err());
        assert!(cfg.apply_override("tasks", "many").is_err());
    }

    #[test]
    fn lambda_defaults_per_strategy() {
        let s = StrategySection::default();
        assert_eq!(s.config_for(Strategy::GaussianDistill).lambda, 8.0);
        assert_eq!(s.config_for(Strategy::GenerativeDistillation).lambda, 0.75);
    }
}
