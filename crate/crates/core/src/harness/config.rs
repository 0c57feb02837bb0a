use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::envs::env_spec;
use crate::error::{Error, Result};
use crate::learner::LearnerConfig;
use crate::planner::PlannerConfig;
use crate::replay::ReanalyzeConfig;
use crate::world_model::ModelConfig;

/// Everything a training run needs. Serialised as a flat `key=value`
/// file; nested configs use dotted keys such as `planner.samples`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: String,
    /// Budget in environment (physics) steps.
    pub total_steps: usize,
    /// Random-action steps before the first update.
    pub seed_steps: usize,
    /// Updates per environment step collected.
    pub utd: f64,
    /// Updates run once when seeding ends; 0 means `seed_steps * utd`.
    pub pretrain_updates: usize,
    /// Environment steps between evaluations; 0 evaluates only at the end.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    /// End the run after the first evaluation whose planner return
    /// reaches this value.
    pub stop_return: Option<f64>,
    /// Environment steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub buffer_capacity: usize,
    pub seed: u64,
    /// Run re-planning on a worker thread instead of inline.
    pub concurrent_reanalyze: bool,
    /// Stop imitation once seeding ends (control runs).
    pub freeze_policy: bool,
    pub model: ModelConfig,
    pub planner: PlannerConfig,
    pub learner: LearnerConfig,
    pub reanalyze: ReanalyzeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: "pendulum_swingup".into(),
            total_steps: 30_000,
            seed_steps: 1000,
            utd: 1.0,
            pretrain_updates: 0,
            eval_interval: 5000,
            eval_episodes: 10,
            eval_seed: 1_000_000,
            stop_return: None,
            checkpoint_interval: 0,
            buffer_capacity: 1_000_000,
            seed: 1,
            concurrent_reanalyze: false,
            freeze_policy: false,
            model: ModelConfig::new(3, 1),
            planner: PlannerConfig::default(),
            learner: LearnerConfig::default(),
            reanalyze: ReanalyzeConfig::default(),
        }
    }
}

const NESTED: [&str; 4] = ["model", "planner", "learner", "reanalyze"];
/// Derived from the environment, never read from a file.
const DERIVED: [&str; 2] = ["model.obs_dim", "model.action_dim"];

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        serde_json::Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

fn parse_value(raw: &str, current: &serde_json::Value) -> Result<serde_json::Value> {
    if current.is_string() {
        return Ok(serde_json::Value::String(raw.to_string()));
    }
    serde_json::from_str(raw).map_err(|e| Error::Config(format!("cannot parse `{raw}`: {e}")))
}

fn from_json<T: DeserializeOwned>(v: serde_json::Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

impl RunConfig {
    /// Small networks and planner for single-core runs on the toy tasks.
    pub fn desk(env: &str) -> Result<Self> {
        let spec = env_spec(env)?;
        let mut cfg = Self {
            env: env.to_string(),
            model: ModelConfig { latent_dim: 32, hidden_dim: 64, ..ModelConfig::new(spec.obs_dim, spec.action_dim) },
            planner: PlannerConfig {
                samples: 128,
                iterations: 4,
                prior_samples: 16,
                elites: 32,
                ..PlannerConfig::default()
            },
            learner: LearnerConfig { batch_size: 64, ..LearnerConfig::default() },
            reanalyze: ReanalyzeConfig { batch: 5, ..ReanalyzeConfig::default() },
            buffer_capacity: 100_000,
            ..Self::default()
        };
        cfg.sync_dims()?;
        Ok(cfg)
    }

    /// Copy observation and action sizes from the environment.
    pub fn sync_dims(&mut self) -> Result<()> {
        let spec = env_spec(&self.env)?;
        self.model.obs_dim = spec.obs_dim;
        self.model.action_dim = spec.action_dim;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        env_spec(&self.env)?;
        if !(self.utd >= 0.0 && self.utd.is_finite()) {
            return Err(Error::Config("utd must be a non-negative number".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be positive".into()));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::Config("buffer_capacity must be positive".into()));
        }
        if self.planner.discount != self.learner.discount {
            return Err(Error::Config("planner.discount and learner.discount differ".into()));
        }
        self.model.validate()?;
        self.planner.validate()?;
        self.learner.validate()?;
        self.reanalyze.validate()
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("plain struct"), &mut out);
        for k in DERIVED {
            out.remove(k);
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.to_kv().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        if DERIVED.contains(&key) {
            return Err(Error::Config(format!("`{key}` is taken from the environment")));
        }
        let mut root = serde_json::to_value(&*self).expect("plain struct");
        let (section, field) = match key.split_once('.') {
            Some((s, f)) if NESTED.contains(&s) => (Some(s), f),
            Some(_) => return Err(Error::Config(format!("unknown key `{key}`"))),
            None => (None, key),
        };
        let obj = match section {
            Some(s) => root.get_mut(s).expect("nested section"),
            None => &mut root,
        };
        let slot = obj
            .as_object_mut()
            .expect("object")
            .get_mut(field)
            .filter(|v| !v.is_object())
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        *slot = parse_value(raw.trim(), slot)?;
        *self = from_json(root)?;
        if key == "env" {
            self.sync_dims()?;
        }
        Ok(())
    }

    /// Parse a flat file on top of the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        // env first so dims follow it regardless of line order
        if let Some((_, v)) = pairs.iter().find(|(k, _)| k == "env") {
            cfg.set("env", v)?;
        } else {
            cfg.sync_dims()?;
        }
        for (k, v) in &pairs {
            cfg.set(k, v).map_err(|e| Error::Config(format!("{k}: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}
