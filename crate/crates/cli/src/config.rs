//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use kgformer_core::evaluator::{Directions, EvalOptions};
use kgformer_core::graphstore::{SplitPaths, SurfaceKind};
use kgformer_core::model::{ModelConfig, INIT_STD};
use kgformer_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::CliError;

/// Every recognised key, with its default. Field names are the file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding `train.tsv`, `dev.tsv`, `test.tsv` and the text files.
    pub data_dir: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Entity text file; defaults to the one matching `surface_kind` in `data_dir`.
    pub texts: Option<PathBuf>,
    pub surface_kind: String,
    pub out_dir: PathBuf,
    /// Existing vocabulary file; built from the entity texts when absent.
    pub vocab: Option<PathBuf>,
    pub vocab_target: usize,

    pub d_model: usize,
    pub heads: usize,
    pub entity_layers: usize,
    pub context_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    /// 0 derives `max_len` plus the fusion slot.
    pub max_positions: usize,
    pub max_neighbors: usize,
    pub early_fusion: bool,
    pub dropout: f64,
    pub init_std: f64,

    pub batch_size: usize,
    pub negatives: usize,
    pub steps: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub loaded_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub use_support: bool,
    pub cross_positive_negatives: bool,
    /// Pretrain only: tag every tensor but the relation table as loaded, as
    /// a transfer would.
    pub transfer_tags: bool,
    /// Finetune only: keep this fraction of train triplets.
    pub train_fraction: f64,

    /// Defaults to `use_support`.
    pub eval_support: Option<bool>,
    pub directions: String,
    pub eval_threads: usize,
    pub eval_batch_size: usize,

    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            data_dir: None,
            train: None,
            dev: None,
            test: None,
            texts: None,
            surface_kind: "description".into(),
            out_dir: PathBuf::from("run"),
            vocab: None,
            vocab_target: 4000,
            d_model: m.d_model,
            heads: m.heads,
            entity_layers: m.entity_layers,
            context_layers: m.context_layers,
            ffn_dim: m.ffn_dim,
            max_len: m.max_len,
            max_positions: 0,
            max_neighbors: m.max_neighbors,
            early_fusion: m.early_fusion,
            dropout: m.dropout,
            init_std: INIT_STD,
            batch_size: t.batch_size,
            negatives: t.negatives,
            steps: t.steps,
            epochs: t.epochs,
            peak_lr: t.peak_lr,
            loaded_lr: t.loaded_lr,
            warmup_fraction: t.warmup_fraction,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            use_support: t.use_support,
            cross_positive_negatives: t.cross_positive_negatives,
            transfer_tags: false,
            train_fraction: 1.0,
            eval_support: None,
            directions: "both".into(),
            eval_threads: 1,
            eval_batch_size: 128,
            seed: 0,
        }
    }
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CliError::config(format!("{origin}:{}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults, then the file (if any), then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut pairs = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            pairs = parse_pairs(&text, &path.display().to_string())?;
        }
        pairs.extend_from_slice(overrides);
        let Value::Object(mut map) = serde_json::to_value(Self::default()).expect("config serializes") else {
            unreachable!("struct serializes to an object")
        };
        for (k, v) in pairs {
            let slot = map.get_mut(&k).ok_or_else(|| CliError::config(format!("unknown config key {k:?}")))?;
            *slot = typed(&k, &v, slot)?;
        }
        let cfg: Self = serde_json::from_value(Value::Object(Map::from_iter(map))).map_err(|e| CliError::config(e.to_string()))?;
        cfg.directions()?;
        cfg.surface_kind()?;
        if !(cfg.train_fraction > 0.0 && cfg.train_fraction <= 1.0) {
            return Err(CliError::config(format!("train_fraction {} outside (0, 1]", cfg.train_fraction)));
        }
        Ok(cfg)
    }

    pub fn surface_kind(&self) -> Result<SurfaceKind, CliError> {
        self.surface_kind.parse().map_err(CliError::config)
    }

    pub fn directions(&self) -> Result<Directions, CliError> {
        self.directions.parse().map_err(CliError::config)
    }

    pub fn split_paths(&self) -> Result<(SplitPaths, PathBuf), CliError> {
        let from_dir = self.data_dir.as_deref().map(SplitPaths::in_dir);
        let pick = |explicit: &Option<PathBuf>, fallback: Option<&PathBuf>, name: &str| {
            explicit.clone().or_else(|| fallback.cloned()).ok_or_else(|| CliError::config(format!("no path for {name}: set data_dir or {name}")))
        };
        let paths = SplitPaths {
            train: pick(&self.train, from_dir.as_ref().map(|p| &p.train), "train")?,
            dev: pick(&self.dev, from_dir.as_ref().map(|p| &p.dev), "dev")?,
            test: pick(&self.test, from_dir.as_ref().map(|p| &p.test), "test")?,
        };
        let file = match self.surface_kind()? {
            SurfaceKind::Description => "entity_descriptions.tsv",
            SurfaceKind::Name => "entity_names.tsv",
        };
        let default_texts = self.data_dir.as_ref().map(|d| d.join(file));
        let texts = pick(&self.texts, default_texts.as_ref(), "texts")?;
        for p in [&paths.train, &paths.dev, &paths.test, &texts] {
            if !p.is_file() {
                return Err(CliError::config(format!("{} does not exist", p.display())));
            }
        }
        Ok((paths, texts))
    }

    pub fn model_config(&self, relation_count: usize, vocab_size: usize) -> ModelConfig {
        let max_positions = if self.max_positions == 0 { self.max_len + usize::from(self.early_fusion) } else { self.max_positions };
        ModelConfig {
            d_model: self.d_model,
            heads: self.heads,
            entity_layers: self.entity_layers,
            context_layers: self.context_layers,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            max_positions,
            max_neighbors: self.max_neighbors,
            relation_count,
            vocab_size,
            early_fusion: self.early_fusion,
            dropout: self.dropout,
            init_std: self.init_std,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            negatives: self.negatives,
            steps: self.steps,
            epochs: self.epochs,
            peak_lr: self.peak_lr,
            loaded_lr: self.loaded_lr,
            warmup_fraction: self.warmup_fraction,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            use_support: self.use_support,
            cross_positive_negatives: self.cross_positive_negatives,
            seed: self.seed,
        }
    }

    pub fn eval_options(&self) -> Result<EvalOptions, CliError> {
        Ok(EvalOptions {
            support: self.eval_support.unwrap_or(self.use_support),
            directions: self.directions()?,
            seed: self.seed,
            threads: self.eval_threads,
            batch_size: self.eval_batch_size,
        })
    }

    /// Resolved keys in sorted order, one `key = value` per line.
    pub fn snapshot(&self) -> String {
        let Value::Object(map) = serde_json::to_value(self).expect("config serializes") else { unreachable!() };
        let mut keys: Vec<_> = map.keys().cloned().collect();
        keys.sort();
        keys.iter()
            .map(|k| match &map[k] {
                Value::Null => format!("{k} =\n"),
                Value::String(s) => format!("{k} = {s}\n"),
                v => format!("{k} = {v}\n"),
            })
            .collect()
    }
}

/// Parses `raw` into the JSON type already present at `slot`. Unset optional
/// keys are paths or flags; an empty value clears them.
fn typed(key: &str, raw: &str, slot: &Value) -> Result<Value, CliError> {
    let bad = |what: &str| CliError::config(format!("{key} = {raw:?}: expected {what}"));
    Ok(match slot {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Number(n) if n.is_u64() => Value::Number(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?.into()),
        Value::Number(_) => {
            let x: f64 = raw.parse().map_err(|_| bad("a number"))?;
            Value::Number(Number::from_f64(x).ok_or_else(|| bad("a finite number"))?)
        }
        _ if raw.is_empty() => Value::Null,
        _ if key == "eval_support" => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        _ => Value::String(raw.to_string()),
    })
}
