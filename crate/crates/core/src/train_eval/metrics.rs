//! Confusion matrix, per-class scores and support-weighted F1.

use serde::{Deserialize, Serialize};

use crate::error::{HbafError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn from_predictions(labels: &[usize], preds: &[usize], names: &[String]) -> Result<Self> {
        if labels.len() != preds.len() {
            return Err(HbafError::DimMismatch {
                context: "predictions vs labels".into(),
                expected: labels.len(),
                found: preds.len(),
            });
        }
        let c = names.len();
        let mut confusion = vec![vec![0u64; c]; c];
        for (&y, &p) in labels.iter().zip(preds) {
            if y >= c || p >= c {
                return Err(HbafError::UnknownLabel(format!("class index {} outside {c}", y.max(p))));
            }
            confusion[y][p] += 1;
        }
        Ok(Self::from_confusion(confusion, names))
    }

    pub fn from_confusion(confusion: Vec<Vec<u64>>, names: &[String]) -> Self {
        let c = confusion.len();
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..c).map(|i| confusion[i][i]).sum();
        let per_class: Vec<ClassMetrics> = (0..c)
            .map(|k| {
                let tp = confusion[k][k] as f64;
                let support: u64 = confusion[k].iter().sum();
                let predicted: u64 = confusion.iter().map(|row| row[k]).sum();
                let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
                let recall = if support > 0 { tp / support as f64 } else { 0.0 };
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics {
                    label: names[k].clone(),
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        let (weighted_f1, accuracy) = if total == 0 {
            (0.0, 0.0)
        } else {
            let t = total as f64;
            let wf1 = per_class.iter().map(|m| m.support as f64 / t * m.f1).sum();
            (wf1, correct as f64 / t)
        };
        EvalReport {
            weighted_f1,
            accuracy,
            per_class,
            confusion,
        }
    }

    /// Aligned per-class table followed by the confusion matrix.
    pub fn to_table(&self) -> String {
        let width = self.per_class.iter().map(|m| m.label.len()).max().unwrap_or(5).max(5);
        let mut out = format!(
            "weighted_f1 {:.6}\naccuracy    {:.6}\n\n{:<width$}  precision     recall         f1  support\n",
            self.weighted_f1, self.accuracy, "class"
        );
        for m in &self.per_class {
            out.push_str(&format!(
                "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}\n",
                m.label, m.precision, m.recall, m.f1, m.support
            ));
        }
        out.push_str(&format!("\nconfusion (rows true, columns predicted)\n{:<width$}", ""));
        for m in &self.per_class {
            out.push_str(&format!(" {:>width$}", m.label));
        }
        out.push('\n');
        for (m, row) in self.per_class.iter().zip(&self.confusion) {
            out.push_str(&format!("{:<width$}", m.label));
            for v in row {
                out.push_str(&format!(" {v:>width$}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn argmax_rows(m: &crate::autograd::Matrix) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
