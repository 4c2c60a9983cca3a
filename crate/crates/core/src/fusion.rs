//! Multi-modal fusion: bimodal (self and cross) attention, the dynamic filter
//! gate, and the residual block.
//!
//! Cross-modal information only moves through attention weights: the audio
//! branch gates `zeta H_a` against `zeta H_{l-a}` (text queries over audio
//! keys and values) and the text branch gates `zeta H_l` against
//! `zeta H_{a-l}` (audio queries over text keys and values).

use crate::autograd::Var;
use crate::config::{Ablations, ModelConfig};
use crate::error::{HbafError, Result};
use crate::nn::{scaled_dot_attention, LayerNorm, Linear, Session};
use crate::params::{Initializer, ParamId, ParameterStore};

/// Bias-free query/key/value projections of one modality.
#[derive(Clone, Copy, Debug)]
pub struct AttentionProjections {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl AttentionProjections {
    fn register(store: &mut ParameterStore, init: &mut Initializer, name: &str, d: usize) -> Result<Self> {
        Ok(AttentionProjections {
            q: Linear::register(store, init, &format!("{name}.q"), d, d, false)?,
            k: Linear::register(store, init, &format!("{name}.k"), d, d, false)?,
            v: Linear::register(store, init, &format!("{name}.v"), d, d, false)?,
        })
    }
}

/// `G = sigmoid(self W_s + cross W_c + b)` for one modality.
#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub w_self: ParamId,
    pub w_cross: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ResidualParams {
    /// `2d -> d` applied to `[H, H_star]`.
    pub proj: Linear,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
}

impl ResidualParams {
    fn register(store: &mut ParameterStore, init: &mut Initializer, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(ResidualParams {
            proj: Linear::register(store, init, &format!("{name}.proj"), 2 * d, d, true)?,
            ln1: LayerNorm::register(store, &format!("{name}.ln1"), d, cfg.ln_eps)?,
            ff1: Linear::register(store, init, &format!("{name}.ff.1"), d, cfg.fusion_ff, true)?,
            ff2: Linear::register(store, init, &format!("{name}.ff.2"), cfg.fusion_ff, d, true)?,
            ln2: LayerNorm::register(store, &format!("{name}.ln2"), d, cfg.ln_eps)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub attn_a: AttentionProjections,
    pub attn_l: AttentionProjections,
    /// Separate cross-attention projections `(audio, text)` when configured.
    pub cross: Option<(AttentionProjections, AttentionProjections)>,
    pub gate_a: GateParams,
    pub gate_l: GateParams,
    pub res_a: ResidualParams,
    pub res_l: ResidualParams,
}

impl FusionParams {
    pub fn register(store: &mut ParameterStore, init: &mut Initializer, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let attn_a = AttentionProjections::register(store, init, "fus.attn.a", d)?;
        let attn_l = AttentionProjections::register(store, init, "fus.attn.l", d)?;
        let cross = if cfg.separate_cross_projections {
            Some((
                AttentionProjections::register(store, init, "fus.xattn.a", d)?,
                AttentionProjections::register(store, init, "fus.xattn.l", d)?,
            ))
        } else {
            None
        };
        let mut gate = |suffix: &str| -> Result<GateParams> {
            Ok(GateParams {
                w_self: store.register(&format!("fus.gate.w_s{suffix}"), init.fan_in_uniform(d, d, 2 * d))?,
                w_cross: store.register(&format!("fus.gate.w_c{suffix}"), init.fan_in_uniform(d, d, 2 * d))?,
                b: store.register(&format!("fus.gate.b_{suffix}"), init.fan_in_uniform(1, d, 2 * d))?,
            })
        };
        let gate_a = gate("a")?;
        let gate_l = gate("l")?;
        Ok(FusionParams {
            attn_a,
            attn_l,
            cross,
            gate_a,
            gate_l,
            res_a: ResidualParams::register(store, init, "fus.res.a", cfg)?,
            res_l: ResidualParams::register(store, init, "fus.res.l", cfg)?,
        })
    }

    fn cross_projections(&self) -> (&AttentionProjections, &AttentionProjections) {
        match &self.cross {
            Some((a, l)) => (a, l),
            None => (&self.attn_a, &self.attn_l),
        }
    }
}

/// `softmax(Q K^T / sqrt(d)) V` with all three from one modality.
/// Returns the output and the `N x N` attention probabilities.
pub fn self_attention(s: &mut Session, proj: &AttentionProjections, h: Var) -> (Var, Var) {
    let q = proj.q.forward(s, h);
    let k = proj.k.forward(s, h);
    let v = proj.v.forward(s, h);
    scaled_dot_attention(&mut s.g, q, k, v)
}

/// Queries from `src`, keys and values from `tgt`.
pub fn cross_attention(
    s: &mut Session,
    src_proj: &AttentionProjections,
    tgt_proj: &AttentionProjections,
    src: Var,
    tgt: Var,
) -> Result<(Var, Var)> {
    let (ns, nt) = (s.g.shape(src).0, s.g.shape(tgt).0);
    if ns != nt {
        return Err(HbafError::DimMismatch {
            context: "cross-attention utterance count".into(),
            expected: ns,
            found: nt,
        });
    }
    let q = src_proj.q.forward(s, src);
    let k = tgt_proj.k.forward(s, tgt);
    let v = tgt_proj.v.forward(s, tgt);
    Ok(scaled_dot_attention(&mut s.g, q, k, v))
}

/// Gate values and the gated combination `G * self + (1 - G) * cross`.
/// With `average` set the gate is skipped and the two inputs are averaged.
pub fn dynamic_filter_gate(s: &mut Session, p: &GateParams, own: Var, cross: Var, average: bool) -> (Option<Var>, Var) {
    if average {
        let sum = s.g.add(own, cross);
        return (None, s.g.scale(sum, 0.5));
    }
    let (ws, wc, b) = (s.p(p.w_self), s.p(p.w_cross), s.p(p.b));
    let a = s.g.matmul(own, ws);
    let c = s.g.matmul(cross, wc);
    let pre = s.g.add(a, c);
    let pre = s.g.add_row(pre, b);
    let gate = s.g.sigmoid(pre);
    let keep = s.g.affine(gate, -1.0, 1.0);
    let from_self = s.g.mul(gate, own);
    let from_cross = s.g.mul(keep, cross);
    (Some(gate), s.g.add(from_self, from_cross))
}

/// `H_ln = LN(proj([H, H_star]))`, `h = LN(H_ln + FF(H_ln))`.
pub fn residual_block(s: &mut Session, p: &ResidualParams, h: Var, h_star: Var) -> Var {
    let cat = s.g.concat_cols(&[h, h_star]);
    let mixed = p.proj.forward(s, cat);
    let h_ln = p.ln1.forward(s, mixed);
    let hidden = p.ff1.forward(s, h_ln);
    let hidden = s.g.relu(hidden);
    let ff = p.ff2.forward(s, hidden);
    let ff = s.dropout(ff);
    let sum = s.g.add(h_ln, ff);
    p.ln2.forward(s, sum)
}

/// Every intermediate of one fusion pass.
#[derive(Clone, Debug)]
pub struct FusionState {
    pub zeta_a: Var,
    pub zeta_l: Var,
    /// Audio queries over text.
    pub zeta_a_l: Var,
    /// Text queries over audio.
    pub zeta_l_a: Var,
    /// Attention probabilities of `zeta_a`, `zeta_l`, `zeta_a_l`, `zeta_l_a`.
    pub attention: Vec<Var>,
    pub gate_a: Option<Var>,
    pub gate_l: Option<Var>,
    pub star_a: Var,
    pub star_l: Var,
    pub h_a: Var,
    pub h_l: Var,
    /// `[h_a, h_l]`, `N x 2d`.
    pub h_m: Var,
}

/// Runs attention, gating and residual stages for both modalities.
///
/// Honors `no_attention`, `no_gate` and `no_residual`; each replaces only
/// its own stage.
pub fn fuse(s: &mut Session, p: &FusionParams, h_a: Var, h_l: Var, ablate: &Ablations) -> Result<FusionState> {
    let (cross_a, cross_l) = p.cross_projections();
    let (zeta_a, zeta_l, zeta_a_l, zeta_l_a, attention) = if ablate.no_attention {
        (h_a, h_l, h_l, h_a, Vec::new())
    } else {
        s.scoped("fus.attn", |s| -> Result<_> {
            let (za, pa) = self_attention(s, &p.attn_a, h_a);
            let (zl, pl) = self_attention(s, &p.attn_l, h_l);
            let (zal, pal) = cross_attention(s, cross_a, cross_l, h_a, h_l)?;
            let (zla, pla) = cross_attention(s, cross_l, cross_a, h_l, h_a)?;
            Ok((za, zl, zal, zla, vec![pa, pl, pal, pla]))
        })?
    };
    let (gate_a, star_a, gate_l, star_l) = s.scoped("fus.gate", |s| {
        let (ga, sa) = dynamic_filter_gate(s, &p.gate_a, zeta_a, zeta_l_a, ablate.no_gate);
        let (gl, sl) = dynamic_filter_gate(s, &p.gate_l, zeta_l, zeta_a_l, ablate.no_gate);
        (ga, sa, gl, sl)
    });
    let (out_a, out_l) = if ablate.no_residual {
        (star_a, star_l)
    } else {
        let a = s.scoped("fus.res.a", |s| residual_block(s, &p.res_a, h_a, star_a));
        let l = s.scoped("fus.res.l", |s| residual_block(s, &p.res_l, h_l, star_l));
        (a, l)
    };
    let h_m = s.g.concat_cols(&[out_a, out_l]);
    Ok(FusionState {
        zeta_a,
        zeta_l,
        zeta_a_l,
        zeta_l_a,
        attention,
        gate_a,
        gate_l,
        star_a,
        star_l,
        h_a: out_a,
        h_l: out_l,
        h_m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Matrix, Precision};
    use ndarray::array;

    fn setup(d: usize) -> (ParameterStore, FusionParams) {
        let cfg = ModelConfig::reduced(d, 3, 3, 3);
        let mut store = ParameterStore::new();
        let p = FusionParams::register(&mut store, &mut Initializer::new(2), &cfg).unwrap();
        (store, p)
    }

    #[test]
    fn single_row_self_attention_is_value_projection() {
        let (store, p) = setup(4);
        let mut s = Session::new(&store, Precision::F64);
        let row = array![[0.2, -0.4, 1.0, 0.3]];
        let h = s.g.constant(row.clone());
        let (z, probs) = self_attention(&mut s, &p.attn_a, h);
        assert_eq!(s.g.value(probs), &array![[1.0]]);
        let expect = row.dot(store.value(p.attn_a.v.w));
        assert_eq!(s.g.value(z), &expect);
    }

    #[test]
    fn zero_query_gives_mean_of_values() {
        let (mut store, p) = setup(4);
        store.zero_prefix("fus.attn.a.q");
        let mut s = Session::new(&store, Precision::F64);
        let x = Matrix::from_shape_fn((3, 4), |(i, j)| (i as f64 - 1.0) * (j as f64 + 0.5));
        let h = s.g.constant(x.clone());
        let (z, _) = self_attention(&mut s, &p.attn_a, h);
        let v = x.dot(store.value(p.attn_a.v.w));
        let mean = v.mean_axis(ndarray::Axis(0)).unwrap();
        for row in s.g.value(z).rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let (store, p) = setup(4);
        let mut s = Session::new(&store, Precision::F64);
        let a = s.g.constant(Matrix::zeros((2, 4)));
        let b = s.g.constant(Matrix::zeros((3, 4)));
        assert!(cross_attention(&mut s, &p.attn_a, &p.attn_l, a, b).is_err());
    }

    #[test]
    fn zero_gate_parameters_average_inputs() {
        let (mut store, p) = setup(3);
        store.zero_prefix("fus.gate");
        let mut s = Session::new(&store, Precision::F64);
        let own = s.g.constant(array![[1.0, 2.0, 3.0], [0.0, -1.0, 4.0]]);
        let cross = s.g.constant(array![[3.0, 0.0, -1.0], [2.0, 1.0, 0.0]]);
        let (gate, star) = dynamic_filter_gate(&mut s, &p.gate_a, own, cross, false);
        assert!(s.g.value(gate.unwrap()).iter().all(|g| *g == 0.5));
        assert_eq!(s.g.value(star), &array![[2.0, 1.0, 1.0], [1.0, 0.0, 2.0]]);
    }

    #[test]
    fn saturated_gate_selects_self() {
        let (mut store, p) = setup(3);
        store.zero_prefix("fus.gate");
        store.value_mut(p.gate_a.b).fill(30.0);
        let mut s = Session::new(&store, Precision::F64);
        let own = s.g.constant(array![[1.0, 2.0, 3.0]]);
        let cross = s.g.constant(array![[3.0, 0.0, -1.0]]);
        let (gate, star) = dynamic_filter_gate(&mut s, &p.gate_a, own, cross, false);
        assert!(s.g.value(gate.unwrap()).iter().all(|g| *g >= 1.0 - 1e-13));
        for (a, b) in s.g.value(star).iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_parameters_give_constant_rows() {
        let (mut store, p) = setup(4);
        store.zero_prefix("fus");
        let off_a = array![[1.0, 2.0, 3.0, 4.0]];
        let off_l = array![[-1.0, 0.5, 0.0, 9.0]];
        store.value_mut(p.res_a.ln2.beta).assign(&off_a);
        store.value_mut(p.res_l.ln2.beta).assign(&off_l);
        let mut s = Session::new(&store, Precision::F64);
        let ha = s.g.constant(Matrix::from_shape_fn((3, 4), |(i, j)| (i + j) as f64));
        let hl = s.g.constant(Matrix::from_shape_fn((3, 4), |(i, j)| (i * j) as f64));
        let st = fuse(&mut s, &p, ha, hl, &Ablations::default()).unwrap();
        for row in s.g.value(st.h_m).rows() {
            assert_eq!(row.to_vec(), vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 9.0]);
        }
    }

    #[test]
    fn no_residual_outputs_gated_features() {
        let (store, p) = setup(4);
        let mut s = Session::new(&store, Precision::F64);
        let ha = s.g.constant(Matrix::from_shape_fn((2, 4), |(i, j)| (i + j) as f64 / 3.0));
        let hl = s.g.constant(Matrix::from_shape_fn((2, 4), |(i, j)| (i * j) as f64 / 5.0));
        let ablate = Ablations::single("no_residual").unwrap();
        let st = fuse(&mut s, &p, ha, hl, &ablate).unwrap();
        assert_eq!(st.h_a, st.star_a);
        assert_eq!(st.h_l, st.star_l);
    }
}
