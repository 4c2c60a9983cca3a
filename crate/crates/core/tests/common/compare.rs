//! Library output against the scalar oracles, as a worst-case absolute
//! error over many random instances.

use hbaf::audio_context::{bilstm_forward, conv1d_forward, AcnParams};
use hbaf::autograd::{Matrix, Precision};
use hbaf::config::ModelConfig;
use hbaf::nn::{scaled_dot_attention, Session};
use hbaf::params::{Initializer, ParameterStore};
use hbaf::text_context::{gru_step, GruParams};
use hbaf::train_eval::EvalReport;
use rand::Rng;

use super::*;

/// Replaces every tensor with uniform values in `[-scale, scale)`.
fn randomize(store: &mut ParameterStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (r, c) = store.value(id).dim();
        *store.value_mut(id) = rand_matrix(rng, r, c, scale);
    }
}

fn acn(rng: &mut ChaCha8Rng) -> (ParameterStore, AcnParams, usize) {
    let d = 2 * rng.random_range(1..5);
    let audio = rng.random_range(1..6);
    let mut cfg = ModelConfig::reduced(d, audio, 3, 3);
    cfg.conv_kernel = [1, 3, 5][rng.random_range(0..3)];
    let mut store = ParameterStore::new();
    let p = AcnParams::register(&mut store, &mut Initializer::new(0), &cfg).unwrap();
    randomize(&mut store, rng, 1.0);
    (store, p, audio)
}

pub fn conv_max_error(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (store, p, audio) = acn(&mut rng);
        let n = rng.random_range(1..9);
        let x = rand_matrix(&mut rng, n, audio, 2.0);
        let mut s = Session::new(&store, Precision::F64);
        let xi = s.g.constant(x.clone());
        let y = conv1d_forward(&mut s, &p, xi);
        let b = store.value(p.conv.b.unwrap());
        let expect = conv_oracle(&x, store.value(p.conv.w), b, p.conv_kernel);
        worst = worst.max(max_abs_diff(s.g.value(y), &expect));
    }
    worst
}

pub fn lstm_max_error(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (store, p, _) = acn(&mut rng);
        let n = rng.random_range(1..9);
        let x = rand_matrix(&mut rng, n, store.value(p.lstm[0][0].w_x).nrows(), 2.0);
        let mut s = Session::new(&store, Precision::F64);
        let xi = s.g.constant(x.clone());
        let y = bilstm_forward(&mut s, &p, xi);
        let mut cur = x;
        for [f, b] in &p.lstm {
            let run = |l: &hbaf::audio_context::LstmParams, rev| {
                lstm_oracle(&cur, store.value(l.w_x), store.value(l.w_h), store.value(l.b), rev)
            };
            let (fo, bo) = (run(f, false), run(b, true));
            cur = ndarray::concatenate(ndarray::Axis(1), &[fo.view(), bo.view()]).unwrap();
        }
        worst = worst.max(max_abs_diff(s.g.value(y), &cur));
    }
    worst
}

pub fn gru_max_error(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (input, units) = (rng.random_range(1..7), rng.random_range(1..7));
        let mut store = ParameterStore::new();
        let p = GruParams::register(&mut store, &mut Initializer::new(0), "g", input, units).unwrap();
        randomize(&mut store, &mut rng, 1.0);
        let h = rand_matrix(&mut rng, 1, units, 1.0);
        let x = rand_matrix(&mut rng, 1, input, 2.0);
        let mut s = Session::new(&store, Precision::F64);
        let (hv, xv) = (s.g.constant(h.clone()), s.g.constant(x.clone()));
        let y = gru_step(&mut s, &p, hv, xv);
        let row = |m: &Matrix| m.row(0).to_vec();
        let expect = gru_oracle(
            &row(&h),
            &row(&x),
            store.value(p.w_x),
            store.value(p.w_h),
            store.value(p.b_x),
            store.value(p.b_h),
        );
        let expect = Matrix::from_shape_vec((1, units), expect).unwrap();
        worst = worst.max(max_abs_diff(s.g.value(y), &expect));
    }
    worst
}

pub fn softmax_max_error(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let store = ParameterStore::new();
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (r, c) = (rng.random_range(1..6), rng.random_range(1..9));
        let x = rand_matrix(&mut rng, r, c, 20.0);
        let mut s = Session::new(&store, Precision::F64);
        let xi = s.g.constant(x.clone());
        let y = s.g.softmax_rows(xi);
        let mut expect = Matrix::zeros((r, c));
        for i in 0..r {
            for (j, v) in softmax_oracle(&x.row(i).to_vec()).into_iter().enumerate() {
                expect[[i, j]] = v;
            }
        }
        worst = worst.max(max_abs_diff(s.g.value(y), &expect));
    }
    worst
}

pub fn attention_max_error(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let store = ParameterStore::new();
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (nq, nk) = (rng.random_range(1..7), rng.random_range(1..7));
        let (d, dv) = (rng.random_range(1..6), rng.random_range(1..6));
        let q = rand_matrix(&mut rng, nq, d, 2.0);
        let k = rand_matrix(&mut rng, nk, d, 2.0);
        let v = rand_matrix(&mut rng, nk, dv, 2.0);
        let mut s = Session::new(&store, Precision::F64);
        let (qi, ki, vi) = (s.g.constant(q.clone()), s.g.constant(k.clone()), s.g.constant(v.clone()));
        let (out, probs) = scaled_dot_attention(&mut s.g, qi, ki, vi);
        let (eo, ep) = attention_oracle(&q, &k, &v);
        worst = worst.max(max_abs_diff(s.g.value(out), &eo)).max(max_abs_diff(s.g.value(probs), &ep));
    }
    worst
}

pub fn weighted_f1_max_error(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let c = rng.random_range(2..8);
        let n = rng.random_range(1..60);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        // Bias predictions toward the truth so scores cover the whole range.
        let hit = rng.random_range(0.0..1.0);
        let preds: Vec<usize> = labels
            .iter()
            .map(|&y| if rng.random_bool(hit) { y } else { rng.random_range(0..c) })
            .collect();
        let names: Vec<String> = (0..c).map(|i| format!("c{i}")).collect();
        let got = EvalReport::from_predictions(&labels, &preds, &names).unwrap().weighted_f1;
        worst = worst.max((got - weighted_f1_oracle(&labels, &preds, c)).abs());
    }
    worst
}
