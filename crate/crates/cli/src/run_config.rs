//! Run configuration: a flat TOML file with dotted keys, overridden by
//! `--set key=value` pairs and convenience flags, resolved against the
//! dataset dimensions.

use std::path::Path;

use hbaf::config::{Ablations, ModelConfig};
use hbaf::contrastive::ContrastiveConfig;
use hbaf::train_eval::TrainConfig;
use hbaf::{HbafError, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Model widths; anything unset comes from the full-size preset, or from
/// the proportional reduction when `width` is given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub width: Option<usize>,
    pub audio_dim: Option<usize>,
    pub text_dim: Option<usize>,
    pub num_classes: Option<usize>,
    pub d_model: Option<usize>,
    pub conv_kernel: Option<usize>,
    pub conv_filters: Option<usize>,
    pub lstm_units: Option<usize>,
    pub lstm_layers: Option<usize>,
    pub encoder_layers: Option<usize>,
    pub encoder_heads: Option<usize>,
    pub encoder_ff: Option<usize>,
    pub attn_hidden: Option<usize>,
    pub fusion_ff: Option<usize>,
    pub separate_cross_projections: Option<bool>,
    pub ln_eps: Option<f64>,
    pub dropout: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub seeds: Vec<u64>,
    pub variants: Vec<String>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            seeds: vec![1, 2, 3],
            variants: hbaf::train_eval::DEFAULT_VARIANTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Everything `train` and `ablate` read. Model weights are initialized from
/// `train.seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub contrastive: ContrastiveConfig,
    pub ablate: Ablations,
    pub sweep: SweepSection,
}

/// [`TrainConfig`] minus the nested tables, which live at the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2_weight: f64,
    pub decoupled_l2: bool,
    pub patience: usize,
    pub mu: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub precision: hbaf::autograd::Precision,
    pub standardize: bool,
    pub eval_train: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            l2_weight: t.l2_weight,
            decoupled_l2: t.decoupled_l2,
            patience: t.patience,
            mu: t.mu,
            max_epochs: t.max_epochs,
            seed: t.seed,
            precision: t.precision,
            standardize: t.standardize,
            eval_train: t.eval_train,
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `sets` in order, and rejects unknown keys.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| HbafError::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                text.parse::<Table>().map_err(|e| HbafError::Parse {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?
            }
            None => Table::new(),
        };
        for s in sets {
            let patch = parse_set(s)?;
            merge(&mut table, patch);
        }
        Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HbafError::Config(e.message().to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            l2_weight: t.l2_weight,
            decoupled_l2: t.decoupled_l2,
            patience: t.patience,
            mu: t.mu,
            max_epochs: t.max_epochs,
            seed: t.seed,
            ablations: self.ablate,
            precision: t.precision,
            contrastive: self.contrastive.clone(),
            standardize: t.standardize,
            eval_train: t.eval_train,
        }
    }

    /// Fills model widths for a dataset and records them back into the
    /// config so the echoed file is complete.
    pub fn resolve_model(&mut self, audio_dim: usize, text_dim: usize, num_classes: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let check = |name: &str, given: Option<usize>, actual: usize| -> Result<()> {
            match given {
                Some(g) if g != actual => Err(HbafError::DimMismatch {
                    context: format!("model.{name} vs dataset"),
                    expected: actual,
                    found: g,
                }),
                _ => Ok(()),
            }
        };
        check("audio_dim", m.audio_dim, audio_dim)?;
        check("text_dim", m.text_dim, text_dim)?;
        check("num_classes", m.num_classes, num_classes)?;
        let mut cfg = match m.width {
            Some(d) => ModelConfig::reduced(d, audio_dim, text_dim, num_classes),
            None => ModelConfig {
                audio_dim,
                text_dim,
                ..ModelConfig::full(num_classes)
            },
        };
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = m.$f { cfg.$f = v; } )* };
        }
        take!(
            d_model,
            conv_kernel,
            conv_filters,
            lstm_units,
            lstm_layers,
            encoder_layers,
            encoder_heads,
            encoder_ff,
            attn_hidden,
            fusion_ff,
            separate_cross_projections,
            ln_eps,
            dropout
        );
        cfg.validate()?;
        self.model = ModelSection {
            width: m.width,
            audio_dim: Some(cfg.audio_dim),
            text_dim: Some(cfg.text_dim),
            num_classes: Some(cfg.num_classes),
            d_model: Some(cfg.d_model),
            conv_kernel: Some(cfg.conv_kernel),
            conv_filters: Some(cfg.conv_filters),
            lstm_units: Some(cfg.lstm_units),
            lstm_layers: Some(cfg.lstm_layers),
            encoder_layers: Some(cfg.encoder_layers),
            encoder_heads: Some(cfg.encoder_heads),
            encoder_ff: Some(cfg.encoder_ff),
            attn_hidden: Some(cfg.attn_hidden),
            fusion_ff: Some(cfg.fusion_ff),
            separate_cross_projections: Some(cfg.separate_cross_projections),
            ln_eps: Some(cfg.ln_eps),
            dropout: Some(cfg.dropout),
        };
        Ok(cfg)
    }

    /// The config as flat `section.key = value` lines.
    pub fn to_flat_toml(&self) -> String {
        let value = Value::try_from(self).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.join("\n") + "\n"
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

/// `a.b=1` becomes `{a = {b = 1}}`. Bare words that are not valid TOML
/// values are taken as strings.
fn parse_set(s: &str) -> Result<Table> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| HbafError::Config(format!("override {s:?} is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let doc = format!("{key} = {raw}");
    match doc.parse::<Table>() {
        Ok(t) => Ok(t),
        Err(_) => {
            let quoted = format!("{key} = {}", Value::String(raw.to_string()));
            quoted
                .parse::<Table>()
                .map_err(|e| HbafError::Config(format!("override {s:?}: {}", e.message())))
        }
    }
}

fn merge(into: &mut Table, patch: Table) {
    for (k, v) in patch {
        match (into.get_mut(&k), v) {
            (Some(Value::Table(a)), Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}
