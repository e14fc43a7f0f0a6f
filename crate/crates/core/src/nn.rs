//! Layers shared by the encoders and the in-context model.

use rand::Rng;
use shotlab_tensor::{AttentionMask, Bound, ParamId, ParamStore, Scalar, Tape, Var};

pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Linear {
            w: store.add_uniform(format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng),
            b: store.add_zeros(format!("{name}.bias"), &[fan_out]),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        tape.linear(x, p.var(self.w), Some(p.var(self.b)))
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Norm {
            gamma: store.add_ones(format!("{name}.gamma"), &[dim]),
            beta: store.add_zeros(format!("{name}.beta"), &[dim]),
        }
    }

    pub fn layer<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), NORM_EPS)
    }

    pub fn group<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        batch: usize,
        groups: usize,
    ) -> Var {
        tape.group_norm(x, p.var(self.gamma), p.var(self.beta), batch, groups, NORM_EPS)
    }
}

/// Dropout switch for one forward pass.
pub(crate) enum Dropout<'a, R: Rng + ?Sized> {
    Off,
    On(f64, &'a mut R),
}

impl<R: Rng + ?Sized> Dropout<'_, R> {
    fn apply<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Dropout::Off => x,
            Dropout::On(rate, rng) => tape.dropout(x, *rate, &mut **rng),
        }
    }
}

/// Pre-norm transformer block: multi-head self-attention and a GELU
/// feed-forward, each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub(crate) struct TransformerBlock {
    ln1: Norm,
    qkv: Linear,
    out: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
    heads: usize,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Self {
        TransformerBlock {
            ln1: Norm::new(store, &format!("{name}.ln1"), dim),
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            out: Linear::new(store, &format!("{name}.attn_out"), dim, dim, rng),
            ln2: Norm::new(store, &format!("{name}.ln2"), dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, ff_dim, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ff_dim, dim, rng),
            heads,
        }
    }

    /// `x` is `[seqs * len, dim]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        seqs: usize,
        len: usize,
        mask: AttentionMask,
        dropout: &mut Dropout<'_, R>,
    ) -> Var {
        let h = self.ln1.layer(tape, p, x);
        let qkv = self.qkv.forward(tape, p, h);
        let a = tape.attention(qkv, seqs, len, self.heads, mask);
        let a = self.out.forward(tape, p, a);
        let a = dropout.apply(tape, a);
        let x = tape.add(x, a);

        let h = self.ln2.layer(tape, p, x);
        let h = self.ff1.forward(tape, p, h);
        let h = tape.gelu(h);
        let h = self.ff2.forward(tape, p, h);
        let h = dropout.apply(tape, h);
        tape.add(x, h)
    }
}
