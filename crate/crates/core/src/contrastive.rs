//! Inter-modal contrastive objective.
//!
//! Absolute losses anchor each uni-modal row against the projected fused
//! rows; the relative loss anchors audio rows against text rows. Sample `i`'s
//! own counterpart is the positive and the other `K - 1` samples are the
//! negatives. Each loss is averaged over the `K` anchors.

use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Precision, Var};
use crate::error::{HbafError, Result};
use crate::nn::Session;
use crate::params::ParameterStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub tau: f64,
    /// Weights of (audio-fused, text-fused, audio-text).
    pub lambdas: [f64; 3],
    /// Sum the absolute-loss denominator over every sample including the
    /// positive, on top of the explicit positive term.
    pub literal_denominator: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.1,
            lambdas: [1.0 / 3.0; 3],
            literal_denominator: false,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(HbafError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(HbafError::Config(format!(
                "lambdas must be nonnegative, got {:?}",
                self.lambdas
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Anchor {
    Audio,
    Text,
}

/// `x . y / (|x| |y|)`; zero vectors are an error.
pub fn cosine_sim(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(HbafError::DimMismatch {
            context: "cosine similarity".into(),
            expected: x.len(),
            found: y.len(),
        });
    }
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(HbafError::Degenerate("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

/// `K` aligned samples on the tape: audio, text, and projected fused rows.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveBatch {
    pub h_a: Var,
    pub h_l: Var,
    pub h_m_proj: Var,
}

impl ContrastiveBatch {
    fn validate(&self, s: &Session) -> Result<usize> {
        let k = s.g.shape(self.h_a).0;
        if k < 2 {
            return Err(HbafError::TooFewSamples(k));
        }
        for (name, v) in [("h_a", self.h_a), ("h_l", self.h_l), ("h_m_proj", self.h_m_proj)] {
            let m = s.g.value(v);
            if m.nrows() != k {
                return Err(HbafError::DimMismatch {
                    context: format!("contrastive batch {name} rows"),
                    expected: k,
                    found: m.nrows(),
                });
            }
            if let Some(i) = m.rows().into_iter().position(|r| r.iter().all(|x| *x == 0.0)) {
                return Err(HbafError::Degenerate(format!("{name} row {i} is zero")));
            }
        }
        Ok(k)
    }
}

/// `cos(x_i, y_k) / tau` for every pair.
fn similarity_logits(s: &mut Session, x: Var, y: Var, tau: f64) -> Var {
    let xn = s.g.l2_normalize_rows(x);
    let yn = s.g.l2_normalize_rows(y);
    let yt = s.g.transpose(yn);
    let sim = s.g.matmul(xn, yt);
    s.g.scale(sim, 1.0 / tau)
}

pub fn absolute_loss(s: &mut Session, batch: &ContrastiveBatch, anchor: Anchor, cfg: &ContrastiveConfig) -> Result<Var> {
    batch.validate(s)?;
    let rows = match anchor {
        Anchor::Audio => batch.h_a,
        Anchor::Text => batch.h_l,
    };
    let logits = similarity_logits(s, rows, batch.h_m_proj, cfg.tau);
    let w = if cfg.literal_denominator { 2.0 } else { 1.0 };
    Ok(s.g.info_nce(logits, w))
}

pub fn relative_loss(s: &mut Session, batch: &ContrastiveBatch, cfg: &ContrastiveConfig) -> Result<Var> {
    batch.validate(s)?;
    let logits = similarity_logits(s, batch.h_a, batch.h_l, cfg.tau);
    Ok(s.g.info_nce(logits, 1.0))
}

#[derive(Clone, Copy, Debug)]
pub struct InterModalTerms {
    pub audio_fused: Var,
    pub text_fused: Var,
    pub audio_text: Var,
    pub total: Var,
}

/// `lambda1 L_am + lambda2 L_lm + lambda3 L_al`.
pub fn inter_modal_loss(s: &mut Session, batch: &ContrastiveBatch, cfg: &ContrastiveConfig) -> Result<InterModalTerms> {
    s.scoped("con", |s| {
        let audio_fused = absolute_loss(s, batch, Anchor::Audio, cfg)?;
        let text_fused = absolute_loss(s, batch, Anchor::Text, cfg)?;
        let audio_text = relative_loss(s, batch, cfg)?;
        let [l1, l2, l3] = cfg.lambdas;
        let a = s.g.scale(audio_fused, l1);
        let b = s.g.scale(text_fused, l2);
        let c = s.g.scale(audio_text, l3);
        let ab = s.g.add(a, b);
        let total = s.g.add(ab, c);
        Ok(InterModalTerms {
            audio_fused,
            text_fused,
            audio_text,
            total,
        })
    })
}

/// Loss values for plain matrices: `(L_am, L_lm, L_al, L_inter)`.
pub fn inter_modal_values(
    h_a: &Matrix,
    h_l: &Matrix,
    h_m_proj: &Matrix,
    cfg: &ContrastiveConfig,
) -> Result<(f64, f64, f64, f64)> {
    cfg.validate()?;
    let store = ParameterStore::new();
    let mut s = Session::new(&store, Precision::F64);
    let batch = ContrastiveBatch {
        h_a: s.g.constant(h_a.clone()),
        h_l: s.g.constant(h_l.clone()),
        h_m_proj: s.g.constant(h_m_proj.clone()),
    };
    let t = inter_modal_loss(&mut s, &batch, cfg)?;
    Ok((
        s.g.scalar(t.audio_fused),
        s.g.scalar(t.text_fused),
        s.g.scalar(t.audio_text),
        s.g.scalar(t.total),
    ))
}
