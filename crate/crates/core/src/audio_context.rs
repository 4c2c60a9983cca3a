//! Audio context network: a length-preserving convolution over the utterance
//! axis, a stack of bidirectional LSTMs, and post-norm Transformer encoder
//! layers. Turns per-utterance acoustic statistics into dialogue-aware rows.

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{positional_encoding, scaled_dot_attention, LayerNorm, Linear, Session};
use crate::params::{Initializer, ParamId, ParameterStore};

#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    /// `input x 4H`, gate blocks ordered input, forget, cell, output.
    pub w_x: ParamId,
    /// `H x 4H`.
    pub w_h: ParamId,
    pub b: ParamId,
    pub units: usize,
}

impl LstmParams {
    fn register(
        store: &mut ParameterStore,
        init: &mut Initializer,
        name: &str,
        input: usize,
        units: usize,
    ) -> Result<Self> {
        Ok(LstmParams {
            w_x: store.register(&format!("{name}.w_x"), init.fan_in_uniform(input, 4 * units, units))?,
            w_h: store.register(&format!("{name}.w_h"), init.fan_in_uniform(units, 4 * units, units))?,
            b: store.register(&format!("{name}.b"), init.fan_in_uniform(1, 4 * units, units))?,
            units,
        })
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct AcnParams {
    pub conv: Linear,
    pub conv_kernel: usize,
    /// `[layer][direction]`, direction 0 forward and 1 backward.
    pub lstm: Vec<[LstmParams; 2]>,
    pub encoder: Vec<EncoderLayerParams>,
    pub heads: usize,
    /// Linear stand-in used when the network is ablated.
    pub bypass: Linear,
}

impl AcnParams {
    pub fn register(store: &mut ParameterStore, init: &mut Initializer, cfg: &ModelConfig) -> Result<Self> {
        let k = cfg.conv_kernel;
        let conv = Linear::register(store, init, "acn.conv", k * cfg.audio_dim, cfg.conv_filters, true)?;
        let mut lstm = Vec::with_capacity(cfg.lstm_layers);
        for layer in 0..cfg.lstm_layers {
            let input = if layer == 0 {
                cfg.conv_filters
            } else {
                2 * cfg.lstm_units
            };
            let fwd = LstmParams::register(store, init, &format!("acn.lstm.{layer}.fwd"), input, cfg.lstm_units)?;
            let bwd = LstmParams::register(store, init, &format!("acn.lstm.{layer}.bwd"), input, cfg.lstm_units)?;
            lstm.push([fwd, bwd]);
        }
        let d = cfg.d_model;
        let mut encoder = Vec::with_capacity(cfg.encoder_layers);
        for layer in 0..cfg.encoder_layers {
            let p = format!("acn.enc.{layer}");
            encoder.push(EncoderLayerParams {
                q: Linear::register(store, init, &format!("{p}.attn.q"), d, d, true)?,
                k: Linear::register(store, init, &format!("{p}.attn.k"), d, d, true)?,
                v: Linear::register(store, init, &format!("{p}.attn.v"), d, d, true)?,
                o: Linear::register(store, init, &format!("{p}.attn.o"), d, d, true)?,
                ln1: LayerNorm::register(store, &format!("{p}.ln1"), d, cfg.ln_eps)?,
                ff1: Linear::register(store, init, &format!("{p}.ff.1"), d, cfg.encoder_ff, true)?,
                ff2: Linear::register(store, init, &format!("{p}.ff.2"), cfg.encoder_ff, d, true)?,
                ln2: LayerNorm::register(store, &format!("{p}.ln2"), d, cfg.ln_eps)?,
            });
        }
        let bypass = Linear::register(store, init, "acn.bypass", cfg.audio_dim, d, true)?;
        Ok(AcnParams {
            conv,
            conv_kernel: k,
            lstm,
            encoder,
            heads: cfg.encoder_heads,
            bypass,
        })
    }
}

/// Convolution along the utterance axis with zero padding that keeps `N` rows.
///
/// Row `t` of the output mixes input rows `t - k/2 ..= t + k/2`; the weight is
/// stored as `k` stacked `D_a x F` taps.
pub fn conv1d_forward(s: &mut Session, p: &AcnParams, x: Var) -> Var {
    s.scoped("acn.conv", |s| {
        let half = (p.conv_kernel / 2) as isize;
        let taps: Vec<Var> = (-half..=half).map(|o| s.g.shift_rows(x, o)).collect();
        let window = s.g.concat_cols(&taps);
        p.conv.forward(s, window)
    })
}

fn lstm_direction(s: &mut Session, p: &LstmParams, x: Var, reverse: bool) -> Var {
    let n = s.g.shape(x).0;
    let hsz = p.units;
    let (wx, wh, b) = (s.p(p.w_x), s.p(p.w_h), s.p(p.b));
    let xw = s.g.matmul(x, wx);
    let xw = s.g.add_row(xw, b);
    let mut h = s.g.zeros(1, hsz);
    let mut c = s.g.zeros(1, hsz);
    let mut outs = vec![h; n];
    let steps: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for t in steps {
        let xt = s.g.slice_rows(xw, t, 1);
        let hw = s.g.matmul(h, wh);
        let pre = s.g.add(xt, hw);
        let gate = |s: &mut Session, k: usize| s.g.slice_cols(pre, k * hsz, hsz);
        let i = gate(s, 0);
        let i = s.g.sigmoid(i);
        let f = gate(s, 1);
        let f = s.g.sigmoid(f);
        let cand = gate(s, 2);
        let cand = s.g.tanh(cand);
        let o = gate(s, 3);
        let o = s.g.sigmoid(o);
        let keep = s.g.mul(f, c);
        let write = s.g.mul(i, cand);
        c = s.g.add(keep, write);
        let tc = s.g.tanh(c);
        h = s.g.mul(o, tc);
        outs[t] = h;
    }
    s.g.concat_rows(&outs)
}

/// Stacked bidirectional LSTM from zero initial states; row `t` of each layer's
/// output is `[forward_t, backward_t]`.
pub fn bilstm_forward(s: &mut Session, p: &AcnParams, x: Var) -> Var {
    let mut cur = x;
    for (layer, [fwd, bwd]) in p.lstm.iter().enumerate() {
        cur = s.scoped(&format!("acn.lstm.{layer}"), |s| {
            let f = lstm_direction(s, fwd, cur, false);
            let b = lstm_direction(s, bwd, cur, true);
            s.g.concat_cols(&[f, b])
        });
    }
    cur
}

/// Multi-head self-attention; returns the projected output and one
/// probability matrix per head.
fn multi_head_attention(s: &mut Session, p: &EncoderLayerParams, x: Var, heads: usize) -> (Var, Vec<Var>) {
    let q = p.q.forward(s, x);
    let k = p.k.forward(s, x);
    let v = p.v.forward(s, x);
    let d = s.g.shape(q).1;
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = s.g.slice_cols(q, h * dh, dh);
        let kh = s.g.slice_cols(k, h * dh, dh);
        let vh = s.g.slice_cols(v, h * dh, dh);
        let (out, pr) = scaled_dot_attention(&mut s.g, qh, kh, vh);
        outs.push(out);
        probs.push(pr);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        s.g.concat_cols(&outs)
    };
    (p.o.forward(s, cat), probs)
}

/// One post-norm encoder layer: attention, add & normalize, feed-forward, add & normalize.
pub fn encoder_layer_forward(s: &mut Session, p: &EncoderLayerParams, x: Var, heads: usize) -> (Var, Vec<Var>) {
    let (attn, probs) = multi_head_attention(s, p, x, heads);
    let attn = s.dropout(attn);
    let res = s.g.add(x, attn);
    let x1 = p.ln1.forward(s, res);
    let hidden = p.ff1.forward(s, x1);
    let hidden = s.g.relu(hidden);
    let ff = p.ff2.forward(s, hidden);
    let ff = s.dropout(ff);
    let res = s.g.add(x1, ff);
    (p.ln2.forward(s, res), probs)
}

/// Adds the sinusoidal position table and runs every encoder layer.
/// Attention probabilities are returned layer-major, head-minor.
pub fn encoder_forward(s: &mut Session, p: &AcnParams, x: Var) -> (Var, Vec<Var>) {
    let (n, d) = s.g.shape(x);
    let pe = s.g.constant(positional_encoding(n, d));
    let mut cur = s.g.add(x, pe);
    let mut all = Vec::new();
    for (layer, lp) in p.encoder.iter().enumerate() {
        let (out, probs) = s.scoped(&format!("acn.enc.{layer}"), |s| encoder_layer_forward(s, lp, cur, p.heads));
        cur = out;
        all.extend(probs);
    }
    (cur, all)
}

pub struct AcnOutput {
    /// `N x d_model` contextual audio rows.
    pub h: Var,
    pub attention: Vec<Var>,
}

/// Full audio context network, or its linear stand-in when `bypass` is set.
pub fn acn_forward(s: &mut Session, p: &AcnParams, audio: Var, bypass: bool) -> AcnOutput {
    if bypass {
        let h = s.scoped("acn.bypass", |s| p.bypass.forward(s, audio));
        return AcnOutput {
            h,
            attention: Vec::new(),
        };
    }
    let conv = conv1d_forward(s, p, audio);
    let seq = bilstm_forward(s, p, conv);
    let (h, attention) = encoder_forward(s, p, seq);
    AcnOutput { h, attention }
}
