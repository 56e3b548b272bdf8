use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UliError};
use crate::model::ModelConfig;
use crate::task::{Profile, TaskKind};

/// Optimisation settings. Read from TOML: top-level keys are shared and a
/// `[profile.<name>]` section overrides them for that profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub profile: String,
    pub seed: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Cosine schedule length in iterations.
    pub horizon: usize,
    pub iterations: usize,
    pub batch_size: usize,
    /// Task name → sampling weight.
    pub tasks: BTreeMap<String, f64>,
    pub flip_prob: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Training tracks kept per window; 0 keeps every grid point.
    pub tracks_per_window: usize,
    pub accelerated: bool,
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Synthetic scenes generated per task when no dataset is given.
    pub scenes: usize,
    pub model: ModelSize,
}

/// Transformer size; geometry comes from the profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSize {
    pub dim: usize,
    pub heads: usize,
    pub pretrained_layers: usize,
    pub new_layers: usize,
    pub global_every: usize,
}

impl Default for ModelSize {
    fn default() -> Self {
        let d = ModelConfig::desk();
        Self {
            dim: d.dim,
            heads: d.heads,
            pretrained_layers: d.pretrained_layers,
            new_layers: d.new_layers,
            global_every: d.global_every,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            profile: "desk".into(),
            seed: 0,
            base_lr: 2e-4,
            weight_decay: 0.05,
            horizon: 2000,
            iterations: 2000,
            batch_size: 8,
            tasks: TaskKind::ALL.iter().map(|t| (t.short().to_string(), 0.2)).collect(),
            flip_prob: 0.5,
            grad_clip: 0.0,
            tracks_per_window: 0,
            accelerated: false,
            checkpoint_every: 500,
            log_every: 50,
            scenes: 16,
            model: ModelSize::default(),
        }
    }
}

fn parse_error(text: &str, e: toml::de::Error) -> UliError {
    let (line, column) = match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
            (line, column)
        }
        None => (0, 0),
    };
    UliError::ParseError { line, column, message: e.message().to_string() }
}

impl TrainConfig {
    pub fn from_toml(text: &str, profile: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| parse_error(text, e))?;
        let sections = table.remove("profile");
        // a plain `profile = "..."` (as written by to_toml) is informational
        if let Some(s) = sections.as_ref().and_then(|s| s.as_table()) {
            if let Some(over) = s.get(profile) {
                let Some(over) = over.as_table() else {
                    return Err(UliError::Config(format!("[profile.{profile}] is not a table")));
                };
                for (k, v) in over {
                    table.insert(k.clone(), v.clone());
                }
            }
        }
        table.insert("profile".into(), toml::Value::String(profile.into()));
        let cfg: TrainConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| UliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn task_weights(&self) -> Result<Vec<(TaskKind, f64)>> {
        let mut out: Vec<(TaskKind, f64)> =
            self.tasks.iter().map(|(k, &w)| Ok((k.parse::<TaskKind>()?, w))).collect::<Result<_>>()?;
        out.sort_by_key(|t| t.0.index());
        Ok(out)
    }

    /// Uniform weights over the given tasks.
    pub fn with_tasks(mut self, tasks: &[TaskKind]) -> Self {
        let w = 1.0 / tasks.len().max(1) as f64;
        self.tasks = tasks.iter().map(|t| (t.short().to_string(), w)).collect();
        self
    }

    /// Model geometry for the configured profile and size.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let base = match Profile::by_name(&self.profile)?.name.as_str() {
            "paper" => ModelConfig::paper(),
            _ => ModelConfig::desk(),
        };
        let m = &self.model;
        let cfg = ModelConfig {
            dim: m.dim,
            heads: m.heads,
            pretrained_layers: m.pretrained_layers,
            new_layers: m.new_layers,
            global_every: m.global_every,
            accelerated: self.accelerated,
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(UliError::Config(format!("learning rate {} must be positive", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(UliError::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(UliError::Config(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        let w = self.task_weights()?;
        crate::train::TaskSampler::new(w)?;
        Ok(())
    }
}
