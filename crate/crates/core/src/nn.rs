//! Building blocks shared by the network modules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Matrix, Precision, Var};
use crate::error::Result;
use crate::params::{Initializer, ParamId, ParameterStore};

/// One forward evaluation: the tape, the parameters it reads, and the
/// dropout state for training passes.
pub struct Session<'a> {
    pub g: Graph,
    pub store: &'a ParameterStore,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParameterStore, precision: Precision) -> Self {
        Session {
            g: Graph::new(precision),
            store,
            dropout: None,
        }
    }

    /// Enables inverted dropout with the given rate. A zero rate is a no-op.
    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, ChaCha8Rng::seed_from_u64(seed)));
        }
        self
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let keep = 1.0 - *rate;
        let (r, c) = self.g.shape(x);
        let mask = Matrix::from_shape_fn((r, c), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.g.constant(mask);
        self.g.mul(x, m)
    }

    /// Runs `f` with every new node labelled `scope`.
    pub fn scoped<T>(&mut self, scope: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = self.g.set_scope(scope);
        let out = f(self);
        self.g.restore_scope(prev);
        out
    }
}

/// `x W + b`, with `W` stored as `fan_in x fan_out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn register(
        store: &mut ParameterStore,
        init: &mut Initializer,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.register(&format!("{name}.w"), init.fan_in_uniform(fan_in, fan_out, fan_in))?;
        let b = if bias {
            Some(store.register(&format!("{name}.b"), init.fan_in_uniform(1, fan_out, fan_in))?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.p(self.w);
        let y = s.g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = s.p(b);
                s.g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Row normalization followed by a learned per-feature scale and offset.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn register(store: &mut ParameterStore, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.register(&format!("{name}.gamma"), Matrix::ones((1, dim)))?,
            beta: store.register(&format!("{name}.beta"), Matrix::zeros((1, dim)))?,
            eps,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let n = s.g.normalize_rows(x, self.eps);
        let gamma = s.p(self.gamma);
        let beta = s.p(self.beta);
        let scaled = s.g.mul_row(n, gamma);
        s.g.add_row(scaled, beta)
    }
}

/// `softmax(q k^T / sqrt(d)) v` with `d` the key width. Returns the output and
/// the attention probabilities.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> (Var, Var) {
    let d = g.shape(k).1 as f64;
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt);
    let scaled = g.scale(logits, 1.0 / d.sqrt());
    let probs = g.softmax_rows(scaled);
    (g.matmul(probs, v), probs)
}

/// Standard sinusoidal position table, `n x d`.
pub fn positional_encoding(n: usize, d: usize) -> Matrix {
    Matrix::from_shape_fn((n, d), |(t, j)| {
        let i = (j / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
