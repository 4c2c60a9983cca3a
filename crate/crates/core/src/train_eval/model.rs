//! The assembled network: audio and text context, fusion, classifier head and
//! contrastive projection, evaluated over batches of whole dialogues.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio_context::{acn_forward, AcnParams};
use crate::autograd::{Matrix, Var};
use crate::config::{Ablations, ModelConfig};
use crate::error::{HbafError, Result};
use crate::feature_store::{DialogueRecord, EmotionLabelSet, FeatureStats, UtteranceFeatures};
use crate::fusion::{fuse, FusionParams, FusionState};
use crate::nn::{Linear, Session};
use crate::params::{Initializer, ParameterStore};
use crate::text_context::{text_context_forward, TextContextParams, TextInputs, TextOutput};

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub acn: AcnParams,
    pub txt: TextContextParams,
    pub fus: FusionParams,
    /// `2d -> C`.
    pub cls: Linear,
    /// `2d -> d`, maps `h_m` next to `h_a` and `h_l` for the contrastive terms.
    pub con: Linear,
}

impl ModelParams {
    pub fn register(store: &mut ParameterStore, init: &mut Initializer, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(ModelParams {
            acn: AcnParams::register(store, init, cfg)?,
            txt: TextContextParams::register(store, init, cfg)?,
            fus: FusionParams::register(store, init, cfg)?,
            cls: Linear::register(store, init, "cls", 2 * d, cfg.num_classes, true)?,
            con: Linear::register(store, init, "con.proj", 2 * d, d, true)?,
        })
    }
}

/// What a checkpoint carries besides the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub labels: EmotionLabelSet,
    pub feature_stats: Option<FeatureStats>,
    pub ablations: Ablations,
}

#[derive(Clone, Debug)]
pub struct HbafModel {
    pub cfg: ModelConfig,
    pub labels: EmotionLabelSet,
    pub params: ModelParams,
    pub store: ParameterStore,
    /// Applied to records before they enter the network.
    pub feature_stats: Option<FeatureStats>,
}

impl HbafModel {
    pub fn new(cfg: ModelConfig, labels: EmotionLabelSet, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if labels.len() != cfg.num_classes {
            return Err(HbafError::DimMismatch {
                context: "label set size vs model classes".into(),
                expected: cfg.num_classes,
                found: labels.len(),
            });
        }
        let mut store = ParameterStore::new();
        let params = ModelParams::register(&mut store, &mut Initializer::new(seed), &cfg)?;
        Ok(HbafModel {
            cfg,
            labels,
            params,
            store,
            feature_stats: None,
        })
    }

    pub fn save(&self, path: &Path, ablations: Ablations) -> Result<()> {
        let meta = CheckpointMeta {
            model: self.cfg.clone(),
            labels: self.labels.clone(),
            feature_stats: self.feature_stats.clone(),
            ablations,
        };
        let json = serde_json::to_string(&meta).map_err(|e| HbafError::Checkpoint(e.to_string()))?;
        self.store.save(path, &json)
    }

    /// Rebuilds the model a checkpoint was written from, with the ablations
    /// it was trained under.
    pub fn load(path: &Path) -> Result<(Self, Ablations)> {
        let (loaded, json) = ParameterStore::load(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&json)
            .map_err(|e| HbafError::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
        let mut model = HbafModel::new(meta.model, meta.labels, 0)?;
        for (id, name, value) in model.store.iter() {
            match loaded.get(name) {
                Some(m) if m.dim() == value.dim() => {}
                Some(m) => {
                    return Err(HbafError::Checkpoint(format!(
                        "{name}: shape {:?} does not match model shape {:?}",
                        m.dim(),
                        value.dim()
                    )))
                }
                None => return Err(HbafError::Checkpoint(format!("missing tensor {name} (id {})", id.index()))),
            }
        }
        if loaded.len() != model.store.len() {
            return Err(HbafError::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                loaded.len(),
                model.store.len()
            )));
        }
        model.store.copy_matching(&loaded);
        model.feature_stats = meta.feature_stats;
        Ok((model, meta.ablations))
    }

    /// Copies and standardizes records for this model.
    pub fn prepare(&self, records: &[DialogueRecord]) -> Result<Vec<DialogueInput>> {
        let mut owned = records.to_vec();
        if let Some(stats) = &self.feature_stats {
            stats.apply(&mut owned);
        }
        owned.iter().map(|r| DialogueInput::new(r, &self.cfg)).collect()
    }
}

/// One dialogue as dense `N x dim` matrices plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogueInput {
    pub id: String,
    pub audio: Matrix,
    pub context: Matrix,
    pub external: Matrix,
    pub internal: Matrix,
    pub purpose: Matrix,
    pub labels: Vec<usize>,
}

impl DialogueInput {
    pub fn new(rec: &DialogueRecord, cfg: &ModelConfig) -> Result<Self> {
        if rec.is_empty() {
            return Err(HbafError::Record {
                path: rec.dialogue_id.clone().into(),
                message: "dialogue has no utterances".into(),
            });
        }
        let n = rec.len();
        let u = &rec.utterances;
        let stack = |dim: usize, pick: fn(&UtteranceFeatures) -> &Vec<f32>, what: &str| -> Result<Matrix> {
            let mut m = Matrix::zeros((n, dim));
            for t in 0..n {
                let v = pick(&u[t]);
                if v.len() != dim {
                    return Err(HbafError::DimMismatch {
                        context: format!("{} utterance {t} {what}", rec.dialogue_id),
                        expected: dim,
                        found: v.len(),
                    });
                }
                for (j, x) in v.iter().enumerate() {
                    m[[t, j]] = *x as f64;
                }
            }
            Ok(m)
        };
        let labels = rec.labels();
        if let Some(bad) = labels.iter().find(|&&y| y >= cfg.num_classes) {
            return Err(HbafError::UnknownLabel(format!(
                "{}: label index {bad} outside {} classes",
                rec.dialogue_id, cfg.num_classes
            )));
        }
        Ok(DialogueInput {
            id: rec.dialogue_id.clone(),
            audio: stack(cfg.audio_dim, |x| &x.audio, "audio")?,
            context: stack(cfg.text_dim, |x| &x.context, "context")?,
            external: stack(cfg.text_dim, |x| &x.external, "external")?,
            internal: stack(cfg.text_dim, |x| &x.internal, "internal")?,
            purpose: stack(cfg.text_dim, |x| &x.purpose, "purpose")?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Intermediates of one dialogue's pass.
pub struct DialogueForward {
    pub h_audio: Var,
    pub text: TextOutput,
    pub acn_attention: Vec<Var>,
    pub fusion: Option<FusionState>,
}

/// Rows of every dialogue in a batch, stacked in batch order.
pub struct BatchForward {
    pub dialogues: Vec<DialogueForward>,
    /// `K x d` each.
    pub h_a: Var,
    pub h_l: Var,
    /// `K x 2d`.
    pub h_m: Var,
    /// `K x C`.
    pub logits: Var,
    pub labels: Vec<usize>,
}

pub fn dialogue_forward(s: &mut Session, p: &ModelParams, x: &DialogueInput, ablate: &Ablations) -> Result<DialogueForward> {
    let audio = s.g.input(x.audio.clone());
    let acn = acn_forward(s, &p.acn, audio, ablate.no_acn);
    let inputs = TextInputs {
        context: s.g.input(x.context.clone()),
        external: s.g.input(x.external.clone()),
        internal: s.g.input(x.internal.clone()),
        purpose: s.g.input(x.purpose.clone()),
    };
    let text = text_context_forward(s, &p.txt, inputs);
    let fusion = if ablate.no_fusion {
        None
    } else {
        Some(fuse(s, &p.fus, acn.h, text.h, ablate)?)
    };
    Ok(DialogueForward {
        h_audio: acn.h,
        text,
        acn_attention: acn.attention,
        fusion,
    })
}

/// Runs each dialogue separately (attention never crosses dialogues) and
/// classifies the pooled utterance rows.
pub fn batch_forward(s: &mut Session, p: &ModelParams, batch: &[&DialogueInput], ablate: &Ablations) -> Result<BatchForward> {
    if batch.is_empty() {
        return Err(HbafError::Config("empty batch".into()));
    }
    let mut dialogues = Vec::with_capacity(batch.len());
    let (mut ha, mut hl, mut hm, mut labels) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for x in batch {
        let f = dialogue_forward(s, p, x, ablate)?;
        match &f.fusion {
            Some(st) => {
                ha.push(st.h_a);
                hl.push(st.h_l);
                hm.push(st.h_m);
            }
            None => {
                ha.push(f.h_audio);
                hl.push(f.text.h);
                hm.push(s.g.concat_cols(&[f.h_audio, f.text.h]));
            }
        }
        labels.extend_from_slice(&x.labels);
        dialogues.push(f);
    }
    let h_a = s.g.concat_rows(&ha);
    let h_l = s.g.concat_rows(&hl);
    let h_m = s.g.concat_rows(&hm);
    let logits = s.scoped("cls", |s| p.cls.forward(s, h_m));
    Ok(BatchForward {
        dialogues,
        h_a,
        h_l,
        h_m,
        logits,
        labels,
    })
}
