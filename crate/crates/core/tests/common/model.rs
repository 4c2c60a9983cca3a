//! Whole-network helpers: random dialogues, forward-pass invariants and
//! the causality probe.

use hbaf::autograd::{Matrix, Precision};
use hbaf::config::{Ablations, ModelConfig};
use hbaf::feature_store::EmotionLabelSet;
use hbaf::nn::Session;
use hbaf::train_eval::model::dialogue_forward;
use hbaf::train_eval::{DialogueInput, HbafModel};
use rand::Rng;

use super::*;

pub fn random_dialogue(rng: &mut ChaCha8Rng, n: usize, audio: usize, text: usize, classes: usize) -> DialogueInput {
    DialogueInput {
        id: "r".into(),
        audio: rand_matrix(rng, n, audio, 2.0),
        context: rand_matrix(rng, n, text, 2.0),
        external: rand_matrix(rng, n, text, 2.0),
        internal: rand_matrix(rng, n, text, 2.0),
        purpose: rand_matrix(rng, n, text, 2.0),
        labels: (0..n).map(|_| rng.random_range(0..classes)).collect(),
    }
}

pub fn random_model(rng: &mut ChaCha8Rng) -> HbafModel {
    let d = 2 * rng.random_range(1..5);
    let (audio, text) = (rng.random_range(1..7), rng.random_range(1..7));
    let cfg = ModelConfig::reduced(d, audio, text, 4);
    HbafModel::new(cfg, EmotionLabelSet::generic(4).unwrap(), rng.random()).unwrap()
}

/// Worst violations seen over one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct Invariants {
    /// Largest `|row sum - 1|` over every attention matrix in the network.
    pub row_sum_err: f64,
    /// Any probability outside `[0, 1]`.
    pub bad_probability: bool,
    pub gate_min: f64,
    pub gate_max: f64,
    /// Largest distance of a gated feature outside the interval spanned by
    /// its self and cross inputs, in units of the larger input magnitude.
    pub outside_interval: f64,
}

impl Invariants {
    pub fn merge(self, o: Invariants) -> Invariants {
        Invariants {
            row_sum_err: self.row_sum_err.max(o.row_sum_err),
            bad_probability: self.bad_probability || o.bad_probability,
            gate_min: self.gate_min.min(o.gate_min),
            gate_max: self.gate_max.max(o.gate_max),
            outside_interval: self.outside_interval.max(o.outside_interval),
        }
    }

    pub fn identity() -> Invariants {
        Invariants {
            gate_min: f64::INFINITY,
            gate_max: f64::NEG_INFINITY,
            ..Default::default()
        }
    }
}

fn interval_excess(star: &Matrix, own: &Matrix, cross: &Matrix) -> f64 {
    let mut worst = 0.0f64;
    for ((s, a), b) in star.iter().zip(own.iter()).zip(cross.iter()) {
        let (lo, hi) = (a.min(*b), a.max(*b));
        let scale = a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
        worst = worst.max((lo - s) / scale).max((s - hi) / scale);
    }
    worst
}

/// One random model on one random dialogue of `n` utterances.
/// Rounding slack for `g a + (1 - g) b`, relative to `max(|a|, |b|)`.
pub const INTERVAL_SLACK: f64 = 4.0 * f64::EPSILON;

pub fn forward_invariants(seed: u64, n: usize) -> Invariants {
    let mut rng = rng(seed);
    let model = random_model(&mut rng);
    let c = &model.cfg;
    let x = random_dialogue(&mut rng, n, c.audio_dim, c.text_dim, c.num_classes);
    let mut s = Session::new(&model.store, Precision::F64);
    let out = dialogue_forward(&mut s, &model.params, &x, &Ablations::default()).unwrap();
    let fus = out.fusion.as_ref().expect("fusion enabled");
    let mut inv = Invariants::identity();
    let probs = out.acn_attention.iter().chain(&out.text.alphas).chain(&fus.attention);
    for &p in probs {
        let m = s.g.value(p);
        for row in m.rows() {
            inv.row_sum_err = inv.row_sum_err.max((row.sum() - 1.0).abs());
        }
        inv.bad_probability |= m.iter().any(|v| !(0.0..=1.0).contains(v));
    }
    for g in [fus.gate_a, fus.gate_l].into_iter().flatten() {
        for &v in s.g.value(g) {
            inv.gate_min = inv.gate_min.min(v);
            inv.gate_max = inv.gate_max.max(v);
        }
    }
    let v = |id| s.g.value(id);
    inv.outside_interval = interval_excess(v(fus.star_a), v(fus.zeta_a), v(fus.zeta_l_a))
        .max(interval_excess(v(fus.star_l), v(fus.zeta_l), v(fus.zeta_a_l)));
    inv
}

/// Perturbs every utterance after `t` and counts `H_l` entries at or before
/// `t` that changed at all.
pub fn causality_violations(seed: u64) -> usize {
    let mut rng = rng(seed);
    let model = random_model(&mut rng);
    let c = model.cfg.clone();
    let n = rng.random_range(2..8);
    let t = rng.random_range(0..n - 1);
    let x = random_dialogue(&mut rng, n, c.audio_dim, c.text_dim, c.num_classes);
    let mut y = x.clone();
    for m in [&mut y.context, &mut y.external, &mut y.internal, &mut y.purpose, &mut y.audio] {
        for row in t + 1..n {
            for v in m.row_mut(row) {
                *v += rng.random_range(-3.0..3.0);
            }
        }
    }
    let h_l = |x: &DialogueInput| {
        let mut s = Session::new(&model.store, Precision::F64);
        let out = dialogue_forward(&mut s, &model.params, x, &Ablations::default()).unwrap();
        s.g.value(out.text.h).clone()
    };
    let (a, b) = (h_l(&x), h_l(&y));
    assert_ne!(a.row(n - 1), b.row(n - 1), "perturbation had no effect");
    (0..=t)
        .flat_map(|r| (0..a.ncols()).map(move |j| (r, j)))
        .filter(|&(r, j)| a[[r, j]].to_bits() != b[[r, j]].to_bits())
        .count()
}
