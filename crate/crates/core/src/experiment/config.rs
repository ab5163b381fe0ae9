use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::GameEnvConfig;
use crate::policy::ModelConfig;
use crate::ppo::{PPOConfig, SupervisedConfig};

/// Largest seed a TOML config can hold.
pub const MAX_CONFIG_SEED: u64 = i64::MAX as u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Arithmetic,
    GameExternal,
    BanditSanity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Ppo,
    Supervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArithmeticConfig {
    pub terms: usize,
    /// Fresh instances scored at each evaluation.
    pub eval_instances: usize,
}

impl Default for ArithmeticConfig {
    fn default() -> Self {
        ArithmeticConfig {
            terms: crate::arithmetic::DEFAULT_TERMS,
            eval_instances: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BanditConfig {
    /// `rewards[context][action]`.
    pub rewards: Vec<Vec<f64>>,
}

impl Default for BanditConfig {
    fn default() -> Self {
        BanditConfig {
            rewards: vec![vec![0.2, 1.0, 0.5]],
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    #[serde(default)]
    pub mode: Mode,
    pub seed: u64,
    pub steps: u64,
    /// Evaluate every this many steps; 0 disables periodic evaluation.
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    #[serde(default)]
    pub checkpoint_interval: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_half_life")]
    pub smoothing_half_life: f64,
    #[serde(default)]
    pub ppo: PPOConfig,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub supervised: SupervisedConfig,
    #[serde(default)]
    pub arithmetic: ArithmeticConfig,
    #[serde(default)]
    pub bandit: BanditConfig,
    #[serde(default)]
    pub game: GameEnvConfig,
}

fn default_eval_interval() -> u64 {
    10
}

fn default_half_life() -> f64 {
    50.0
}

fn default_model() -> ModelConfig {
    ModelConfig::toy(0)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_value(value: toml::Value) -> Result<Self> {
        let config: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_value(&self) -> Result<toml::Value> {
        toml::Value::try_from(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Copy with a dotted key (e.g. `ppo.beta_bent`) replaced.
    pub fn with_override(&self, key: &str, value: toml::Value) -> Result<Self> {
        let mut root = self.to_value()?;
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts
            .pop()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::config("empty override key"))?;
        let mut node = &mut root;
        for p in parts {
            node = node
                .get_mut(p)
                .ok_or_else(|| Error::config(format!("unknown config section `{p}` in `{key}`")))?;
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("`{key}` is not inside a table")))?;
        table.insert(last.to_string(), value);
        Self::from_value(root)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > MAX_CONFIG_SEED || self.model.seed > MAX_CONFIG_SEED {
            return Err(Error::config(format!(
                "seed must be at most {MAX_CONFIG_SEED}"
            )));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be positive"));
        }
        if self.smoothing_half_life.is_nan() || self.smoothing_half_life <= 0.0 {
            return Err(Error::config("smoothing_half_life must be positive"));
        }
        if self.mode == Mode::Supervised && self.task != Task::Arithmetic {
            return Err(Error::config(
                "mode = \"supervised\" is only defined for task = \"arithmetic\"",
            ));
        }
        if self.task == Task::GameExternal && self.game.command.is_empty() {
            return Err(Error::config("task = \"game-external\" needs game.command"));
        }
        self.ppo.validate()?;
        self.model.validate()?;
        self.supervised.validate()
    }

    /// PPO settings with the run's seed and step count filled in.
    pub fn resolved_ppo(&self) -> PPOConfig {
        PPOConfig {
            seed: self.seed,
            total_steps: self.steps,
            ..self.ppo.clone()
        }
    }
}
