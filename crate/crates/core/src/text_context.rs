//! Text context network.
//!
//! Each utterance's contextual vector and its three commonsense vectors are
//! projected to `d_model`. For utterance `t`, additive attention over the
//! projected contextual vectors of utterances `1..t-1` yields `l_c_t`
//! (the zero vector when `t = 1`). Three GRUs track external, internal and
//! purpose states; at step `t` each receives its projected commonsense vector
//! plus `l_c_t`. The three states are concatenated and projected back to
//! `d_model`. Nothing at step `t` reads utterances after `t`.

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{Linear, Session};
use crate::params::{Initializer, ParamId, ParameterStore};

#[derive(Clone, Copy, Debug)]
pub struct SoftAttentionParams {
    /// `d_model x A` projection with bias.
    pub w_s: Linear,
    /// `A x 1` scoring vector.
    pub v: ParamId,
}

/// Gate blocks are ordered reset, update, candidate.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b_x: ParamId,
    pub b_h: ParamId,
    pub units: usize,
}

impl GruParams {
    pub fn register(
        store: &mut ParameterStore,
        init: &mut Initializer,
        name: &str,
        input: usize,
        units: usize,
    ) -> Result<Self> {
        Ok(GruParams {
            w_x: store.register(&format!("{name}.w_x"), init.fan_in_uniform(input, 3 * units, units))?,
            w_h: store.register(&format!("{name}.w_h"), init.fan_in_uniform(units, 3 * units, units))?,
            b_x: store.register(&format!("{name}.b_x"), init.fan_in_uniform(1, 3 * units, units))?,
            b_h: store.register(&format!("{name}.b_h"), init.fan_in_uniform(1, 3 * units, units))?,
            units,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TextContextParams {
    pub in_r: Linear,
    pub in_e: Linear,
    pub in_i: Linear,
    pub in_p: Linear,
    pub attention: SoftAttentionParams,
    /// External, internal, purpose.
    pub gru: [GruParams; 3],
    pub out: Linear,
}

impl TextContextParams {
    pub fn register(store: &mut ParameterStore, init: &mut Initializer, cfg: &ModelConfig) -> Result<Self> {
        let (dt, d, a) = (cfg.text_dim, cfg.d_model, cfg.attn_hidden);
        let in_r = Linear::register(store, init, "txt.proj.in_r", dt, d, true)?;
        let in_e = Linear::register(store, init, "txt.proj.in_e", dt, d, true)?;
        let in_i = Linear::register(store, init, "txt.proj.in_i", dt, d, true)?;
        let in_p = Linear::register(store, init, "txt.proj.in_p", dt, d, true)?;
        let w_s = Linear::register(store, init, "txt.attn.w_s", d, a, true)?;
        let v = store.register("txt.attn.v", init.fan_in_uniform(a, 1, a))?;
        let gru = [
            GruParams::register(store, init, "txt.gru.e", d, d)?,
            GruParams::register(store, init, "txt.gru.i", d, d)?,
            GruParams::register(store, init, "txt.gru.p", d, d)?,
        ];
        let out = Linear::register(store, init, "txt.proj.out", 3 * d, d, true)?;
        Ok(TextContextParams {
            in_r,
            in_e,
            in_i,
            in_p,
            attention: SoftAttentionParams { w_s, v },
            gru,
            out,
        })
    }
}

pub struct SoftAttention {
    /// `1 x d` attentive context.
    pub context: Var,
    /// `1 x (t-1)` weights over the priors; `None` when there are no priors.
    pub alpha: Option<Var>,
}

/// Attentive summary of the prior (projected) contextual vectors.
///
/// `score_i = v . tanh(W_s prior_i + b_s)`, `alpha = softmax(score)`,
/// `context = sum_i alpha_i prior_i`. With no priors the context is zero.
pub fn soft_attention_context(s: &mut Session, p: &SoftAttentionParams, priors: Option<Var>, width: usize) -> SoftAttention {
    let Some(priors) = priors else {
        return SoftAttention {
            context: s.g.zeros(1, width),
            alpha: None,
        };
    };
    let u = p.w_s.forward(s, priors);
    let u = s.g.tanh(u);
    let v = s.p(p.v);
    let scores = s.g.matmul(u, v);
    let scores = s.g.transpose(scores);
    let alpha = s.g.softmax_rows(scores);
    SoftAttention {
        context: s.g.matmul(alpha, priors),
        alpha: Some(alpha),
    }
}

/// One GRU update.
///
/// `r = sigmoid(x W_xr + b_xr + h W_hr + b_hr)`, `z` likewise,
/// `n = tanh(x W_xn + b_xn + r * (h W_hn + b_hn))`, and the new state is
/// `(1 - z) * h + z * n`, so a saturated update gate selects the candidate.
pub fn gru_step(s: &mut Session, p: &GruParams, prev: Var, input: Var) -> Var {
    let u = p.units;
    let (wx, wh, bx, bh) = (s.p(p.w_x), s.p(p.w_h), s.p(p.b_x), s.p(p.b_h));
    let gx = s.g.matmul(input, wx);
    let gx = s.g.add_row(gx, bx);
    let gh = s.g.matmul(prev, wh);
    let gh = s.g.add_row(gh, bh);
    let block = |s: &mut Session, m: Var, k: usize| s.g.slice_cols(m, k * u, u);
    let (xr, hr) = (block(s, gx, 0), block(s, gh, 0));
    let r = s.g.add(xr, hr);
    let r = s.g.sigmoid(r);
    let (xz, hz) = (block(s, gx, 1), block(s, gh, 1));
    let z = s.g.add(xz, hz);
    let z = s.g.sigmoid(z);
    let (xn, hn) = (block(s, gx, 2), block(s, gh, 2));
    let gated = s.g.mul(r, hn);
    let n = s.g.add(xn, gated);
    let n = s.g.tanh(n);
    let keep = s.g.affine(z, -1.0, 1.0);
    let kept = s.g.mul(keep, prev);
    let moved = s.g.mul(z, n);
    s.g.add(kept, moved)
}

/// Raw per-utterance text features, each `N x text_dim`.
#[derive(Clone, Copy, Debug)]
pub struct TextInputs {
    pub context: Var,
    pub external: Var,
    pub internal: Var,
    pub purpose: Var,
}

pub struct TextOutput {
    /// `N x d_model`.
    pub h: Var,
    /// Attention weights for `t = 2..=N`.
    pub alphas: Vec<Var>,
}

pub fn text_context_forward(s: &mut Session, p: &TextContextParams, x: TextInputs) -> TextOutput {
    let n = s.g.shape(x.context).0;
    let (r, rel) = s.scoped("txt.proj", |s| {
        let r = p.in_r.forward(s, x.context);
        let e = p.in_e.forward(s, x.external);
        let i = p.in_i.forward(s, x.internal);
        let pp = p.in_p.forward(s, x.purpose);
        (r, [e, i, pp])
    });
    let d = s.g.shape(r).1;
    let mut states = [s.g.zeros(1, d), s.g.zeros(1, d), s.g.zeros(1, d)];
    let mut rows = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n.saturating_sub(1));
    for t in 0..n {
        let priors = (t > 0).then(|| s.g.slice_rows(r, 0, t));
        let att = s.scoped("txt.attn", |s| soft_attention_context(s, &p.attention, priors, d));
        alphas.extend(att.alpha);
        for (k, scope) in ["txt.gru.e", "txt.gru.i", "txt.gru.p"].iter().enumerate() {
            states[k] = s.scoped(scope, |s| {
                let own = s.g.slice_rows(rel[k], t, 1);
                let input = s.g.add(own, att.context);
                gru_step(s, &p.gru[k], states[k], input)
            });
        }
        rows.push(s.g.concat_cols(&states));
    }
    let h = s.scoped("txt.proj.out", |s| {
        let stacked = s.g.concat_rows(&rows);
        p.out.forward(s, stacked)
    });
    TextOutput { h, alphas }
}
