use rand_chacha::ChaCha8Rng;

use super::params::{Ctx, ParamId, ParamStore};
use crate::autodiff::Var;
use crate::Result;

/// Attention score for hidden positions; exp underflows to exactly zero.
pub const MASKED_SCORE: f64 = -1e9;

/// Affine map `x W + b`; `x` may be one row `[in]` or a matrix `[n, in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng);
        let b = store.add_uniform(format!("{name}.b"), &[fan_out], fan_in, rng);
        Self {
            w,
            b: Some(b),
            fan_in,
            fan_out,
        }
    }

    pub fn no_bias(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng);
        Self {
            w,
            b: None,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Result<Var> {
        let y = cx.g.matmul(x, cx.p(self.w))?;
        match self.b {
            Some(b) => cx.g.add(y, cx.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add_constant(format!("{name}.gain"), &[width], 1.0),
            bias: store.add_constant(format!("{name}.bias"), &[width], 0.0),
        }
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Result<Var> {
        cx.g.layer_norm(x, cx.p(self.gain), cx.p(self.bias))
    }
}

/// Two-layer perceptron with a gelu in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), width, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, width, rng),
        }
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Result<Var> {
        let h = cx.g.gelu(self.fc1.forward(cx, x)?)?;
        self.fc2.forward(cx, h)
    }
}

/// Pre-norm transformer block with single-head attention.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub width: usize,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            q: Linear::new(store, &format!("{name}.q"), width, width, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, rng),
            o: Linear::new(store, &format!("{name}.o"), width, width, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, hidden, rng),
            width,
        }
    }

    /// Every row attends to every row.
    pub fn forward(&self, cx: &Ctx, x: Var) -> Result<Var> {
        self.forward_rows(cx, x, 0, false)
    }

    /// Computes only rows `from..n`. With `causal`, row `r` sees columns
    /// `0..=r`, so rows before `from` act as a fully visible prefix.
    pub fn forward_rows(&self, cx: &Ctx, x: Var, from: usize, causal: bool) -> Result<Var> {
        let g = cx.g;
        let n = g.shape(x)[0];
        let h = self.ln1.forward(cx, x)?;
        let k = self.k.forward(cx, h)?;
        let v = self.v.forward(cx, h)?;
        let (hq, xq) = if from == 0 {
            (h, x)
        } else {
            (g.slice_rows(h, from, n)?, g.slice_rows(x, from, n)?)
        };
        let q = self.q.forward(cx, hq)?;
        let scores = g.matmul(q, g.transpose(k)?)?;
        let mut scores = g.scalar_mul(scores, 1.0 / (self.width as f64).sqrt())?;
        if causal {
            let m = n - from;
            let mask: Vec<bool> = (0..m)
                .flat_map(|r| (0..n).map(move |c| c > from + r))
                .collect();
            if mask.iter().any(|&b| b) {
                scores = g.masked_fill(scores, &mask, MASKED_SCORE)?;
            }
        }
        let attn = g.matmul(g.softmax(scores)?, v)?;
        let x1 = g.add(xq, self.o.forward(cx, attn)?)?;
        let m = self.mlp.forward(cx, self.ln2.forward(cx, x1)?)?;
        g.add(x1, m)
    }
}
