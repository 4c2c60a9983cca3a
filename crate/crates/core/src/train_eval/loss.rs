//! Classification head outputs and the combined objective.

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Matrix, Var};
use crate::contrastive::{inter_modal_loss, ContrastiveBatch, ContrastiveConfig};
use crate::error::Result;
use crate::nn::{Linear, Session};
use crate::train_eval::model::BatchForward;

/// Row-wise `softmax(h_m W + b)`.
pub fn classify(h_m: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut logits = h_m.dot(w);
    logits += b;
    softmax_rows(&logits)
}

/// Mean of `-ln p[label]` over rows of a probability matrix.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> f64 {
    let total: f64 = probs.rows().into_iter().zip(labels).map(|(row, &y)| -row[y].ln()).sum();
    total / labels.len() as f64
}

pub fn total_loss(ce: f64, inter: f64, mu: f64) -> f64 {
    ce + mu * inter
}

/// Loss values of one step or one averaged pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub inter: f64,
    pub total: f64,
    pub audio_fused: f64,
    pub text_fused: f64,
    pub audio_text: f64,
}

impl LossReport {
    /// Utterance-weighted mean of several reports.
    pub fn weighted_mean(parts: &[(LossReport, usize)]) -> LossReport {
        let n: usize = parts.iter().map(|(_, k)| k).sum();
        let mut out = LossReport::default();
        if n == 0 {
            return out;
        }
        for (r, k) in parts {
            let w = *k as f64 / n as f64;
            out.ce += w * r.ce;
            out.inter += w * r.inter;
            out.total += w * r.total;
            out.audio_fused += w * r.audio_fused;
            out.text_fused += w * r.text_fused;
            out.audio_text += w * r.audio_text;
        }
        out
    }
}

/// Loss nodes on the tape.
pub struct LossNodes {
    pub ce: Var,
    pub total: Var,
    pub inter: Option<crate::contrastive::InterModalTerms>,
}

impl LossNodes {
    pub fn report(&self, s: &Session) -> LossReport {
        let ce = s.g.scalar(self.ce);
        let total = s.g.scalar(self.total);
        match &self.inter {
            Some(t) => LossReport {
                ce,
                inter: s.g.scalar(t.total),
                total,
                audio_fused: s.g.scalar(t.audio_fused),
                text_fused: s.g.scalar(t.text_fused),
                audio_text: s.g.scalar(t.audio_text),
            },
            None => LossReport {
                ce,
                total,
                ..LossReport::default()
            },
        }
    }
}

/// `L_ce + mu * L_inter` for a batch.
///
/// The contrastive term is skipped when its weight is zero or the batch has a
/// single utterance, so such steps carry no contrastive gradient at all.
pub fn objective(
    s: &mut Session,
    out: &BatchForward,
    con: &Linear,
    mu: f64,
    cfg: &ContrastiveConfig,
    use_contrastive: bool,
) -> Result<LossNodes> {
    let ce = s.scoped("loss.ce", |s| s.g.cross_entropy(out.logits, &out.labels));
    if !use_contrastive || mu == 0.0 || out.labels.len() < 2 {
        return Ok(LossNodes { ce, total: ce, inter: None });
    }
    let h_m_proj = s.scoped("con.proj", |s| con.forward(s, out.h_m));
    let batch = ContrastiveBatch {
        h_a: out.h_a,
        h_l: out.h_l,
        h_m_proj,
    };
    let terms = inter_modal_loss(s, &batch, cfg)?;
    let weighted = s.g.scale(terms.total, mu);
    let total = s.g.add(ce, weighted);
    Ok(LossNodes {
        ce,
        total,
        inter: Some(terms),
    })
}
