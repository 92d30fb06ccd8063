//! Flat key-value run configuration. Precedence: explicit overrides, then
//! the config file, then defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::classifier::McTrainConfig;
use crate::data::{CohortConfig, DEFAULT_STATE_DIM};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_HORIZON;
use crate::model::DualSightConfig;
use crate::training::{DMTrainConfig, LossWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub seeds: Vec<u64>,

    pub n_trajectories: usize,
    pub state_dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub mortality_target: f64,
    pub test_fraction: f64,

    pub mc_learning_rate: f64,
    pub mc_weight_decay: f64,
    pub mc_dropout: f64,
    pub mc_batch_size: usize,
    pub mc_max_iterations: usize,
    pub mc_eval_every: usize,
    pub mc_patience: usize,
    pub mc_val_fraction: f64,
    pub mc_use_smote: bool,
    pub smote_k: usize,
    pub smote_m: usize,

    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub context_length: usize,
    pub dropout: f64,
    pub max_timestep: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub iterations: usize,

    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub neg_ce_cap: f64,

    pub horizon: usize,
    pub ablation_values: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cohort = CohortConfig::default();
        let mc = McTrainConfig::default();
        let dm = DMTrainConfig::new(DEFAULT_STATE_DIM);
        let w = LossWeights::default();
        Self {
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            n_trajectories: 2000,
            state_dim: cohort.state_dim,
            min_len: cohort.min_len,
            max_len: cohort.max_len,
            mortality_target: cohort.mortality_target,
            test_fraction: 0.3,
            mc_learning_rate: mc.learning_rate,
            mc_weight_decay: mc.weight_decay,
            mc_dropout: mc.dropout,
            mc_batch_size: mc.batch_size,
            mc_max_iterations: mc.max_iterations,
            mc_eval_every: mc.eval_every,
            mc_patience: mc.patience,
            mc_val_fraction: mc.val_fraction,
            mc_use_smote: mc.use_smote,
            smote_k: mc.smote_k,
            smote_m: mc.smote_m,
            n_layers: dm.model.n_layers,
            n_heads: dm.model.n_heads,
            embed_dim: dm.model.embed_dim,
            context_length: dm.model.context_length,
            dropout: dm.model.dropout,
            max_timestep: dm.model.max_timestep,
            batch_size: dm.batch_size,
            learning_rate: dm.learning_rate,
            weight_decay: dm.weight_decay,
            warmup_steps: dm.warmup_steps,
            iterations: dm.iterations,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            eta: w.eta,
            neg_ce_cap: w.neg_ce_cap,
            horizon: DEFAULT_HORIZON,
            ablation_values: crate::eval::ABLATION_VALUES.to_vec(),
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                row: i + 1,
                msg: format!("expected `key = value`, found `{line}`"),
            });
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn coerce(key: &str, current: &Value, raw: &str) -> Result<Value> {
    let bad = || Error::config(format!("invalid value `{raw}` for `{key}`"));
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_f64() => serde_json::json!(raw.parse::<f64>().map_err(|_| bad())?),
        Value::Number(_) => serde_json::json!(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Array(items) => {
            let float = items.first().is_some_and(|v| v.is_f64());
            let parts = raw.split(',').map(str::trim).filter(|s| !s.is_empty());
            Value::Array(
                parts
                    .map(|p| {
                        if float {
                            p.parse::<f64>().map(|v| serde_json::json!(v)).map_err(|_| bad())
                        } else {
                            p.parse::<u64>().map(|v| serde_json::json!(v)).map_err(|_| bad())
                        }
                    })
                    .collect::<Result<_>>()?,
            )
        }
        _ => Value::String(raw.to_string()),
    })
}

impl RunConfig {
    /// Defaults, overlaid with `file` entries, overlaid with `overrides`.
    pub fn resolve(file: &[(String, String)], overrides: &[(String, String)]) -> Result<Self> {
        let Value::Object(mut map) = serde_json::to_value(Self::default())? else {
            unreachable!("struct serializes to an object");
        };
        for (k, v) in file.iter().chain(overrides) {
            apply(&mut map, k, v)?;
        }
        let cfg: Self = serde_json::from_value(Value::Object(map)).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let file = match path {
            Some(p) => parse_kv(&std::fs::read_to_string(p)?)?,
            None => Vec::new(),
        };
        Self::resolve(&file, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort().validate()?;
        self.mc_train().validate()?;
        self.dm_train().validate()?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("test_fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn cohort(&self) -> CohortConfig {
        CohortConfig {
            n_trajectories: self.n_trajectories,
            state_dim: self.state_dim,
            min_len: self.min_len,
            max_len: self.max_len,
            mortality_target: self.mortality_target,
            seed: self.seed,
        }
    }

    pub fn mc_train(&self) -> McTrainConfig {
        McTrainConfig {
            learning_rate: self.mc_learning_rate,
            weight_decay: self.mc_weight_decay,
            dropout: self.mc_dropout,
            batch_size: self.mc_batch_size,
            max_iterations: self.mc_max_iterations,
            eval_every: self.mc_eval_every,
            patience: self.mc_patience,
            val_fraction: self.mc_val_fraction,
            use_smote: self.mc_use_smote,
            smote_k: self.smote_k,
            smote_m: self.smote_m,
            seed: self.seed,
        }
    }

    /// Training config for a model over `state_dim`-wide states.
    pub fn dm_train_for(&self, state_dim: usize) -> DMTrainConfig {
        DMTrainConfig {
            model: DualSightConfig {
                n_layers: self.n_layers,
                n_heads: self.n_heads,
                embed_dim: self.embed_dim,
                context_length: self.context_length,
                dropout: self.dropout,
                state_dim,
                n_actions: crate::data::N_ACTIONS,
                max_timestep: self.max_timestep,
            },
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            iterations: self.iterations,
            seed: self.seed,
            weights: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
                eta: self.eta,
                neg_ce_cap: self.neg_ce_cap,
            },
        }
    }

    pub fn dm_train(&self) -> DMTrainConfig {
        self.dm_train_for(self.state_dim)
    }
}

fn apply(map: &mut Map<String, Value>, key: &str, raw: &str) -> Result<()> {
    let current = map
        .get(key)
        .ok_or_else(|| Error::config(format!("unknown config key `{key}`")))?;
    let value = coerce(key, current, raw)?;
    map.insert(key.to_string(), value);
    Ok(())
}
