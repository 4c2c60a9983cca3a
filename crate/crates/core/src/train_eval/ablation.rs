//! Full model against single-component removals over shared seeds.

use serde::{Deserialize, Serialize};

use crate::config::{Ablations, ModelConfig};
use crate::error::{HbafError, Result};
use crate::feature_store::{DialogueRecord, EmotionLabelSet};
use crate::train_eval::model::HbafModel;
use crate::train_eval::train::{train, TrainConfig};

/// Removals the sweep runs when none are named.
pub const DEFAULT_VARIANTS: [&str; 5] = ["no_acn", "no_fusion", "no_contrastive", "no_gate", "no_residual"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `full` or an ablation flag name.
    pub variant: String,
    pub seeds: Vec<u64>,
    /// Validation weighted F1 of the restored best epoch, per seed.
    pub val_f1: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub sd: f64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub struct AblationData<'a> {
    pub labels: &'a EmotionLabelSet,
    pub train: &'a [DialogueRecord],
    pub val: &'a [DialogueRecord],
}

/// Trains the full model and each variant once per seed. The first row is
/// the full model; the base config's own ablations are ignored.
pub fn ablation_sweep(
    data: &AblationData,
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    variants: &[String],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(HbafError::Config("ablation sweep needs at least one seed".into()));
    }
    let mut plan = vec![("full".to_string(), Ablations::default())];
    for v in variants {
        plan.push((v.clone(), Ablations::single(v)?));
    }
    let mut rows = Vec::with_capacity(plan.len());
    for (variant, ablations) in plan {
        let mut f1s = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                ablations,
                ..base.clone()
            };
            let mut model = HbafModel::new(model_cfg.clone(), data.labels.clone(), seed)?;
            let out = train(&mut model, data.train, data.val, &cfg)?;
            f1s.push(out.best().val_f1);
        }
        let (mean, sd) = mean_sd(&f1s);
        rows.push(AblationRow {
            variant,
            seeds: seeds.to_vec(),
            val_f1: f1s,
            mean,
            sd,
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.variant.len()).max().unwrap_or(7).max(7);
    let mut out = format!("{:<width$}  mean_f1  sd_f1    per-seed\n", "variant");
    for r in rows {
        let per: Vec<String> = r.val_f1.iter().map(|f| format!("{f:.4}")).collect();
        out.push_str(&format!("{:<width$}  {:.4}   {:.4}   {}\n", r.variant, r.mean, r.sd, per.join(" ")));
    }
    out
}
