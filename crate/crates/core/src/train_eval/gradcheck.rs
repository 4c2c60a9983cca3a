//! Analytic gradients against central finite differences.

use serde::{Deserialize, Serialize};

use crate::autograd::{Precision, Var};
use crate::config::{Ablations, ModelConfig};
use crate::contrastive::ContrastiveConfig;
use crate::error::{HbafError, Result};
use crate::feature_store::{generate_synthetic, SignalMode, SynthSpec};
use crate::nn::Session;
use crate::params::ParameterStore;
use crate::train_eval::loss::objective;
use crate::train_eval::model::{batch_forward, DialogueInput, HbafModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckOptions {
    /// Perturbation relative to `max(|theta|, 1)`.
    pub step: f64,
    pub tolerance: f64,
    /// Gradient magnitudes below this count as this value in the relative
    /// error denominator.
    pub floor: f64,
    /// Adds `1e-3` to the first analytic entry of this tensor.
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.tensors.iter().filter(|t| !t.passed).map(|t| t.name.as_str()).collect()
    }

    pub fn to_table(&self) -> String {
        let width = self.tensors.iter().map(|t| t.name.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  entries   max_rel_err   max_abs_err  status\n", "tensor");
        for t in &self.tensors {
            out.push_str(&format!(
                "{:<width$}  {:>7}  {:>12.3e}  {:>12.3e}  {}\n",
                t.name,
                t.entries,
                t.max_rel_err,
                t.max_abs_err,
                if t.passed { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Checks every parameter the loss built by `f` touches. Tensors the loss
/// does not read are skipped.
pub fn check_gradients(
    store: &ParameterStore,
    opts: &GradCheckOptions,
    f: impl Fn(&mut Session) -> Result<Var>,
) -> Result<GradCheckReport> {
    let (loss, mut analytic, used) = {
        let mut s = Session::new(store, Precision::F64);
        let loss = f(&mut s)?;
        let grads = s.g.backward(loss).param_grads(&s.g, store);
        let used: Vec<bool> = store.ids().map(|id| s.g.has_param(id)).collect();
        (s.g.scalar(loss), grads, used)
    };
    if let Some(name) = &opts.corrupt {
        let id = store
            .id(name)
            .ok_or_else(|| HbafError::Config(format!("unknown tensor {name}")))?;
        if let Some(v) = analytic.get_mut(id).get_mut([0, 0]) {
            *v += 1e-3;
        }
    }
    let mut work = store.clone();
    let eval = |w: &ParameterStore| -> Result<f64> {
        let mut s = Session::new(w, Precision::F64);
        let l = f(&mut s)?;
        Ok(s.g.scalar(l))
    };
    let mut tensors = Vec::new();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !used[id.index()] {
            continue;
        }
        let n = store.value(id).len();
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        let cols = store.value(id).ncols();
        for k in 0..n {
            let at = [k / cols, k % cols];
            let theta = store.value(id)[at];
            let h = opts.step * theta.abs().max(1.0);
            work.value_mut(id)[at] = theta + h;
            let up = eval(&work)?;
            work.value_mut(id)[at] = theta - h;
            let down = eval(&work)?;
            work.value_mut(id)[at] = theta;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id)[at];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        tensors.push(TensorCheck {
            name: store.name(id).to_string(),
            entries: n,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            passed: max_rel <= opts.tolerance,
        });
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        loss,
        tensors,
    })
}

/// Width-reduced network and the tiny batch the full-graph check runs on.
pub fn gradcheck_setup(d: usize, seed: u64) -> Result<(HbafModel, Vec<DialogueInput>)> {
    let spec = SynthSpec {
        n_dialogues: 2,
        utterances_per_dialogue: 3,
        num_classes: 4,
        audio_dim: 6,
        text_dim: 5,
        signal_mode: SignalMode::Agreement,
        noise_std: 0.3,
        seed,
        val_dialogues: 0,
        test_dialogues: 0,
    };
    let (manifest, records) = generate_synthetic(&spec)?;
    let cfg = ModelConfig::reduced(d, spec.audio_dim, spec.text_dim, spec.num_classes);
    let model = HbafModel::new(cfg, manifest.label_set, seed)?;
    let inputs = model.prepare(&records)?;
    Ok((model, inputs))
}

/// `L_total = L_ce + mu L_inter` through the complete network.
pub fn grad_check(d: usize, seed: u64, mu: f64, ablations: &Ablations, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (model, inputs) = gradcheck_setup(d, seed)?;
    let refs: Vec<&DialogueInput> = inputs.iter().collect();
    let con = ContrastiveConfig::default();
    check_gradients(&model.store, opts, |s| {
        let out = batch_forward(s, &model.params, &refs, ablations)?;
        let nodes = objective(s, &out, &model.params.con, mu, &con, !ablations.no_contrastive)?;
        Ok(nodes.total)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Matrix;
    use crate::nn::Linear;
    use crate::params::Initializer;

    fn linear_toy() -> (ParameterStore, Linear, Matrix) {
        let mut store = ParameterStore::new();
        let lin = Linear::register(&mut store, &mut Initializer::new(3), "toy", 3, 2, true).unwrap();
        let x = Matrix::from_shape_fn((4, 3), |(i, j)| (i as f64 - 1.5) * 0.3 + j as f64 * 0.2);
        (store, lin, x)
    }

    #[test]
    fn linear_model_is_exact() {
        let (store, lin, x) = linear_toy();
        let report = check_gradients(&store, &GradCheckOptions::default(), |s| {
            let xi = s.g.constant(x.clone());
            let y = lin.forward(s, xi);
            Ok(s.g.sum(y))
        })
        .unwrap();
        assert_eq!(report.tensors.len(), 2);
        assert!(report.max_rel_err() <= 1e-9, "{}", report.to_table());
    }

    #[test]
    fn corruption_is_caught() {
        let (store, lin, x) = linear_toy();
        let opts = GradCheckOptions {
            corrupt: Some("toy.b".into()),
            ..Default::default()
        };
        let report = check_gradients(&store, &opts, |s| {
            let xi = s.g.constant(x.clone());
            let y = lin.forward(s, xi);
            let y = s.g.tanh(y);
            Ok(s.g.sum(y))
        })
        .unwrap();
        assert_eq!(report.failing(), vec!["toy.b"]);
    }

    #[test]
    fn unknown_corrupt_target_is_an_error() {
        let (store, _, _) = linear_toy();
        let opts = GradCheckOptions {
            corrupt: Some("nope".into()),
            ..Default::default()
        };
        assert!(check_gradients(&store, &opts, |s| Ok(s.g.zeros(1, 1))).is_err());
    }
}
