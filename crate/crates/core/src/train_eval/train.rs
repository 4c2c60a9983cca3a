//! Training loop with early stopping, and evaluation passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Precision;
use crate::config::Ablations;
use crate::contrastive::ContrastiveConfig;
use crate::error::{HbafError, Result};
use crate::feature_store::{batch_dialogues, DialogueRecord, FeatureStats};
use crate::nn::Session;
use crate::params::ParameterStore;
use crate::train_eval::loss::{objective, LossReport};
use crate::train_eval::metrics::{argmax_rows, EvalReport};
use crate::train_eval::model::{batch_forward, DialogueInput, HbafModel};
use crate::train_eval::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Dialogues per optimizer step.
    pub batch_size: usize,
    /// Weight of the squared parameter norm.
    pub l2_weight: f64,
    /// Apply the norm penalty as weight decay outside Adam's moments instead
    /// of adding its gradient to the loss gradient.
    pub decoupled_l2: bool,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub mu: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub ablations: Ablations,
    pub precision: Precision,
    pub contrastive: ContrastiveConfig,
    /// Standardize every feature with statistics of the training split.
    pub standardize: bool,
    /// Re-evaluate the training split after each epoch to report its F1.
    pub eval_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 8,
            l2_weight: 3e-4,
            decoupled_l2: false,
            patience: 15,
            mu: 0.2,
            max_epochs: 100,
            seed: 0,
            ablations: Ablations::default(),
            precision: Precision::F64,
            contrastive: ContrastiveConfig::default(),
            standardize: false,
            eval_train: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HbafError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(self.l2_weight >= 0.0 && self.l2_weight.is_finite()) {
            return err(format!("l2_weight must be nonnegative, got {}", self.l2_weight));
        }
        if self.patience == 0 {
            return err("patience must be at least 1".into());
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return err(format!("mu must be nonnegative, got {}", self.mu));
        }
        if self.max_epochs == 0 {
            return err("max_epochs must be positive".into());
        }
        self.contrastive.validate()
    }

    fn uses_contrastive(&self) -> bool {
        !self.ablations.no_contrastive && self.mu > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub utterances: usize,
    pub loss: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Utterance-weighted mean over the epoch's steps.
    pub train: LossReport,
    pub train_f1: Option<f64>,
    pub val: LossReport,
    pub val_f1: f64,
    pub val_accuracy: f64,
    /// `l2_weight * sum(theta^2)` after the epoch.
    pub l2_penalty: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters the model holds on return.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }
}

/// Trains `model` in place and leaves it holding the parameters of the epoch
/// with the lowest validation total loss.
pub fn train(model: &mut HbafModel, train: &[DialogueRecord], val: &[DialogueRecord], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(model, train, val, cfg, &mut |_| {})
}

pub fn train_observed(
    model: &mut HbafModel,
    train: &[DialogueRecord],
    val: &[DialogueRecord],
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(HbafError::Config("train and val splits must both be nonempty".into()));
    }
    model.feature_stats = if cfg.standardize {
        Some(FeatureStats::fit(train)?)
    } else {
        None
    };
    let train_in = model.prepare(train)?;
    let val_in = model.prepare(val)?;

    let mut adam_cfg = AdamConfig::new(cfg.learning_rate);
    if cfg.decoupled_l2 {
        adam_cfg.decoupled_decay = cfg.l2_weight;
    }
    let mut adam = Adam::new(adam_cfg, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    let mut waited = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let order_seed: u64 = rng.random();
        let dropout_seed: u64 = rng.random();
        let batches = batch_dialogues(&train_in, cfg.batch_size, order_seed)?;
        let mut parts = Vec::with_capacity(batches.len());
        for (k, idx) in batches.iter().enumerate() {
            let batch: Vec<&DialogueInput> = idx.iter().map(|&i| &train_in[i]).collect();
            let utterances = batch.iter().map(|x| x.len()).sum();
            let loss = train_step(model, &mut adam, &batch, cfg, dropout_seed.wrapping_add(k as u64))
                .map_err(|e| match e {
                    HbafError::NonFinite(m) => HbafError::NonFinite(format!("epoch {epoch} step {}: {m}", k + 1)),
                    other => other,
                })?;
            on_step(&StepRecord {
                epoch,
                step: adam.steps() as usize,
                utterances,
                loss,
            });
            parts.push((loss, utterances));
        }
        let train_loss = LossReport::weighted_mean(&parts);
        let train_f1 = if cfg.eval_train {
            Some(evaluate_inputs(model, &train_in, cfg)?.0.weighted_f1)
        } else {
            None
        };
        let (val_report, val_loss) = evaluate_inputs(model, &val_in, cfg)?;
        if !val_loss.total.is_finite() {
            return Err(HbafError::NonFinite(format!("epoch {epoch}: validation loss is {}", val_loss.total)));
        }
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss.total < *b);
        if improved {
            best = Some((val_loss.total, epoch, model.store.clone()));
            waited = 0;
        } else {
            waited += 1;
        }
        history.push(EpochRecord {
            epoch,
            train: train_loss,
            train_f1,
            val: val_loss,
            val_f1: val_report.weighted_f1,
            val_accuracy: val_report.accuracy,
            l2_penalty: cfg.l2_weight * model.store.sum_squares(),
            improved,
        });
        if waited >= cfg.patience {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    model.store = params;
    Ok(TrainOutcome {
        history,
        best_epoch,
        stopped_early,
        steps: adam.steps() as usize,
    })
}

fn train_step(model: &mut HbafModel, adam: &mut Adam, batch: &[&DialogueInput], cfg: &TrainConfig, seed: u64) -> Result<LossReport> {
    let (report, mut grads) = {
        let mut s = Session::new(&model.store, cfg.precision).with_dropout(model.cfg.dropout, seed);
        let out = batch_forward(&mut s, &model.params, batch, &cfg.ablations)?;
        let nodes = objective(&mut s, &out, &model.params.con, cfg.mu, &cfg.contrastive, cfg.uses_contrastive())?;
        let report = nodes.report(&s);
        if !report.total.is_finite() {
            let at = s.g.first_non_finite(Some(&model.store)).unwrap_or_else(|| "loss".into());
            return Err(HbafError::NonFinite(format!("first non-finite tensor: {at}")));
        }
        let grads = s.g.backward(nodes.total).param_grads(&s.g, &model.store);
        (report, grads)
    };
    if let Some(name) = grads.first_non_finite(&model.store) {
        return Err(HbafError::NonFinite(format!("gradient of {name}")));
    }
    if !cfg.decoupled_l2 && cfg.l2_weight > 0.0 {
        grads.add_l2(&model.store, cfg.l2_weight);
    }
    adam.step(&mut model.store, &grads);
    if let Some(name) = model.store.first_non_finite() {
        return Err(HbafError::NonFinite(format!("parameter {name} after update")));
    }
    Ok(report)
}

/// Metrics and mean losses over prepared dialogues, in their given order,
/// without dropout.
pub fn evaluate_inputs(model: &HbafModel, inputs: &[DialogueInput], cfg: &TrainConfig) -> Result<(EvalReport, LossReport)> {
    if inputs.is_empty() {
        return Err(HbafError::Config("cannot evaluate an empty split".into()));
    }
    let mut parts = Vec::new();
    let (mut labels, mut preds) = (Vec::new(), Vec::new());
    for chunk in inputs.chunks(cfg.batch_size.max(1)) {
        let batch: Vec<&DialogueInput> = chunk.iter().collect();
        let mut s = Session::new(&model.store, cfg.precision);
        let out = batch_forward(&mut s, &model.params, &batch, &cfg.ablations)?;
        let nodes = objective(&mut s, &out, &model.params.con, cfg.mu, &cfg.contrastive, cfg.uses_contrastive())?;
        parts.push((nodes.report(&s), out.labels.len()));
        preds.extend(argmax_rows(s.g.value(out.logits)));
        labels.extend(out.labels);
    }
    let report = EvalReport::from_predictions(&labels, &preds, model.labels.names())?;
    Ok((report, LossReport::weighted_mean(&parts)))
}

/// Evaluates raw records with the model's own feature statistics.
pub fn evaluate(model: &HbafModel, records: &[DialogueRecord], cfg: &TrainConfig) -> Result<(EvalReport, LossReport)> {
    let inputs = model.prepare(records)?;
    evaluate_inputs(model, &inputs, cfg)
}
