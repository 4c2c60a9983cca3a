//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
//!
//! Run with `cargo test -p hbaf --test acceptance`.

mod common;

use std::time::{Duration, Instant};

use hbaf::autograd::Matrix;
use hbaf::config::{Ablations, ModelConfig};
use hbaf::contrastive::{inter_modal_values, ContrastiveConfig};
use hbaf::feature_store::{generate_synthetic, DialogueRecord, EmotionLabelSet, SignalMode, SynthSpec};
use hbaf::train_eval::{
    ablation_sweep, ablation_table, cross_entropy, grad_check, train, train_observed, AblationData,
    GradCheckOptions, HbafModel, TrainConfig, DEFAULT_VARIANTS,
};

use common::compare::*;
use common::model::{causality_violations, forward_invariants, Invariants, INTERVAL_SLACK};

struct Outcome {
    passed: bool,
    detail: String,
}

fn check(results: &mut Vec<bool>, name: &str, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let o = f();
    let secs = start.elapsed().as_secs_f64();
    println!(
        "{} {name}: {} ({secs:.1}s)",
        if o.passed { "PASS" } else { "FAIL" },
        o.detail
    );
    results.push(o.passed);
}

fn agreement(n_dialogues: usize, val: usize, seed: u64) -> (EmotionLabelSet, Vec<DialogueRecord>) {
    let spec = SynthSpec {
        n_dialogues,
        utterances_per_dialogue: 6,
        num_classes: 4,
        audio_dim: 16,
        text_dim: 16,
        signal_mode: SignalMode::Agreement,
        noise_std: 0.3,
        seed,
        val_dialogues: val,
        test_dialogues: 0,
    };
    let (m, recs) = generate_synthetic(&spec).unwrap();
    (m.label_set, recs)
}

fn gradcheck() -> Outcome {
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let r = grad_check(8, 1, 0.2, &Ablations::default(), &GradCheckOptions::default()).unwrap();
    let took = start.elapsed();
    Outcome {
        passed: r.max_rel_err() <= TOL && r.passed() && took < Duration::from_secs(120),
        detail: format!(
            "d=8, {} tensors, max rel err {:.2e} <= {TOL:e}, {:.1}s < 120s",
            r.tensors.len(),
            r.max_rel_err(),
            took.as_secs_f64()
        ),
    }
}

fn loss_identities() -> Outcome {
    let mut worst_k = 0.0f64;
    for k in [2usize, 5, 16] {
        let rows = Matrix::from_shape_fn((k, 4), |(_, j)| [0.7, -0.1, 1.3, 0.4][j]);
        let (am, lm, al, _) = inter_modal_values(&rows, &rows, &rows, &ContrastiveConfig::default()).unwrap();
        for v in [am, lm, al] {
            worst_k = worst_k.max((v - (k as f64).ln()).abs());
        }
    }
    let mut worst_c = 0.0f64;
    for c in [4usize, 6, 7] {
        let p = Matrix::from_elem((6, c), 1.0 / c as f64);
        let labels: Vec<usize> = (0..6).map(|i| i % c).collect();
        worst_c = worst_c.max((cross_entropy(&p, &labels) - (c as f64).ln()).abs());
    }
    let (labels, recs) = agreement(8, 4, 7);
    let mut model = HbafModel::new(ModelConfig::reduced(16, 16, 16, 4), labels, 1).unwrap();
    let cfg = TrainConfig {
        max_epochs: 5,
        ..Default::default()
    };
    let (mut worst_t, mut steps) = (0.0f64, 0);
    train_observed(&mut model, &recs[..8], &recs[8..], &cfg, &mut |r| {
        let l = r.loss;
        worst_t = worst_t.max((l.total - (l.ce + 0.2 * l.inter)).abs());
        steps += 1;
    })
    .unwrap();
    Outcome {
        passed: worst_k <= 1e-9 && worst_c <= 1e-12 && worst_t <= 1e-12 && steps > 0,
        detail: format!(
            "|L - ln K| {worst_k:.1e} <= 1e-9; |CE - ln C| {worst_c:.1e} <= 1e-12; \
             |total - (ce + 0.2 inter)| {worst_t:.1e} <= 1e-12 over {steps} steps"
        ),
    }
}

fn forward_invariants_hold() -> Outcome {
    let inv = (0..100u64).fold(Invariants::identity(), |acc, s| acc.merge(forward_invariants(s, 1 + (s as usize) % 7)));
    Outcome {
        passed: inv.row_sum_err <= 1e-9
            && !inv.bad_probability
            && inv.gate_min > 0.0
            && inv.gate_max < 1.0
            && inv.outside_interval <= INTERVAL_SLACK,
        detail: format!(
            "100 passes; row sum err {:.1e} <= 1e-9; gates in [{:.4}, {:.4}] inside (0,1); \
             interval excess {:.1e} <= {INTERVAL_SLACK:.1e} relative",
            inv.row_sum_err, inv.gate_min, inv.gate_max, inv.outside_interval
        ),
    }
}

fn scalar_oracles() -> Outcome {
    const N: usize = 150;
    let errs = [
        ("conv", conv_max_error(N, 11)),
        ("lstm", lstm_max_error(N, 12)),
        ("gru", gru_max_error(N, 13)),
        ("softmax", softmax_max_error(N, 14)),
        ("attention", attention_max_error(N, 15)),
        ("weighted_f1", weighted_f1_max_error(N, 16)),
    ];
    Outcome {
        passed: errs.iter().all(|(_, e)| *e <= 1e-12),
        detail: format!(
            "{N} instances each, tol 1e-12: {}",
            errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn learnability() -> Outcome {
    let (labels, recs) = agreement(8, 4, 7);
    let start = Instant::now();
    let mut model = HbafModel::new(ModelConfig::reduced(32, 16, 16, 4), labels, 1).unwrap();
    let cfg = TrainConfig {
        max_epochs: 300,
        patience: 300,
        eval_train: true,
        ..Default::default()
    };
    let out = train(&mut model, &recs[..8], &recs[8..], &cfg).unwrap();
    let took = start.elapsed();
    let first = out.history.iter().find(|h| h.train_f1 == Some(1.0)).map(|h| h.epoch);
    Outcome {
        passed: first.is_some() && took < Duration::from_secs(300),
        detail: format!(
            "8x6 agreement, C=4, width 32, lr 1e-4: train F1 = 1.0 first at epoch {} (limit 300), {:.1}s < 300s",
            first.map_or("never".to_string(), |e| e.to_string()),
            took.as_secs_f64()
        ),
    }
}

fn ablation_direction() -> Outcome {
    let (labels, recs) = agreement(48, 24, 11);
    let data = AblationData {
        labels: &labels,
        train: &recs[..48],
        val: &recs[48..],
    };
    let base = TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 80,
        eval_train: false,
        ..Default::default()
    };
    let variants: Vec<String> = DEFAULT_VARIANTS.iter().map(|s| s.to_string()).collect();
    let rows = ablation_sweep(&data, &ModelConfig::reduced(16, 16, 16, 4), &base, &variants, &[1, 2, 3]).unwrap();
    print!("{}", ablation_table(&rows));
    let mean = |v: &str| rows.iter().find(|r| r.variant == v).unwrap().mean;
    let full = mean("full");
    let below = variants.iter().all(|v| mean(v) <= full);
    let fusion_drop = full - mean("no_fusion");
    let contrastive_drop = full - mean("no_contrastive");
    Outcome {
        passed: below && fusion_drop >= contrastive_drop,
        detail: format!(
            "3 seeds; full {full:.4} >= every ablation: {below}; no_fusion drop {fusion_drop:.4} >= no_contrastive drop {contrastive_drop:.4}"
        ),
    }
}

fn determinism() -> Outcome {
    let (labels, recs) = agreement(8, 4, 3);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        max_epochs: 8,
        ..Default::default()
    };
    let run = || {
        let mut m = HbafModel::new(ModelConfig::reduced(16, 16, 16, 4), labels.clone(), 9).unwrap();
        let out = train(&mut m, &recs[..8], &recs[8..], &cfg).unwrap();
        (serde_json::to_string(&out.history).unwrap(), m.store.to_checkpoint_bytes(""))
    };
    let (a, b) = (run(), run());
    Outcome {
        passed: a == b,
        detail: format!(
            "two runs, seed 0, f64: histories identical {}, parameters identical {}",
            a.0 == b.0,
            a.1 == b.1
        ),
    }
}

fn causality() -> Outcome {
    let changed: usize = (0..100u64).map(causality_violations).sum();
    Outcome {
        passed: changed == 0,
        detail: format!("100 random dialogues, later utterances perturbed: {changed} entries of H_l[<=t] changed (need 0)"),
    }
}

fn main() {
    let mut results = Vec::new();
    check(&mut results, "[1] gradcheck", gradcheck);
    check(&mut results, "[2] loss identities", loss_identities);
    check(&mut results, "[3] attention and gate invariants", forward_invariants_hold);
    check(&mut results, "[4] scalar-loop oracles", scalar_oracles);
    check(&mut results, "[5] learnability", learnability);
    check(&mut results, "[6] ablation direction", ablation_direction);
    check(&mut results, "[7] determinism", determinism);
    check(&mut results, "[8] text causality", causality);
    let failed = results.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
