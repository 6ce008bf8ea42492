//! Layer building blocks on top of the tape.

use std::sync::Arc;

use rand::Rng;

use crate::params::{normal_mat, ParamId, ParamStore};
use crate::tape::{Mat, Tape, Var};

/// Standard deviation of the truncated-free normal init used everywhere.
pub const INIT_STD: f64 = 0.02;

/// `y = x · W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            normal_mat(rng, fan_in, fan_out, INIT_STD),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Mat::zeros((1, fan_out)), true));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Mat::ones((1, dim)), true),
            beta: store.add(format!("{name}.beta"), Mat::zeros((1, dim)), true),
            eps,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let n = tape.normalize(x, self.eps);
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let n = tape.mul_row(n, g);
        tape.add_row(n, b)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "hidden size {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, rng, &format!("{name}.query"), dim, dim, true),
            key: Linear::new(store, rng, &format!("{name}.key"), dim, dim, true),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim, true),
            output: Linear::new(store, rng, &format!("{name}.output"), dim, dim, true),
            heads,
        }
    }

    /// Attends from the rows of `x_q` to the rows of `x_kv` whose
    /// `key_mask` entry is true. Per-head probability matrices are appended
    /// to `trace` when given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_q: Var,
        x_kv: Var,
        key_mask: Arc<[bool]>,
        mut trace: Option<&mut Vec<Mat>>,
    ) -> Var {
        let dim = tape.value(x_q).ncols();
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let q = self.query.forward(tape, store, x_q);
        let k = self.key.forward(tape, store, x_kv);
        let v = self.value.forward(tape, store, x_kv);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim);
            let kh = tape.slice_cols(k, h * head_dim, head_dim);
            let vh = tape.slice_cols(v, h * head_dim, head_dim);
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax(scores, Arc::clone(&key_mask));
            if let Some(trace) = trace.as_deref_mut() {
                trace.push(tape.value(probs).clone());
            }
            outs.push(tape.matmul(probs, vh));
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(outs)
        };
        self.output.forward(tape, store, joined)
    }
}

/// Position-wise `Linear → GELU → Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            inner: Linear::new(store, rng, &format!("{name}.inner"), dim, hidden, true),
            outer: Linear::new(store, rng, &format!("{name}.outer"), hidden, dim, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.inner.forward(tape, store, x);
        let h = tape.gelu(h);
        self.outer.forward(tape, store, h)
    }
}
