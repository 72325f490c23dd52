//! Causal multi-head self-attention blocks for the hybrid encoder.
//!
//! The blocks see only what the preceding Mamba layers wrote into the hidden
//! states: there is no positional table and no time encoding here.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{ParamStore, Tensor, Var};

/// Additive score for masked (future) positions.
pub const MASKED_SCORE: f64 = -1e9;

/// `[L, L]` additive mask: zero on and below the diagonal.
pub fn causal_mask(len: usize) -> Tensor {
    let mut m = Tensor::zeros(vec![len, len]);
    for i in 0..len {
        for j in i + 1..len {
            m.data_mut()[i * len + j] = MASKED_SCORE;
        }
    }
    m
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub heads: usize,
    pub norm1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        ffn_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible into {heads} heads"
            )));
        }
        let lin = |store: &mut ParamStore, part: &str, i, o, rng: &mut _| {
            Linear::new(store, &format!("{name}.{part}"), i, o, true, rng)
        };
        Ok(AttentionBlock {
            heads,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model)?,
            query: lin(store, "query", d_model, d_model, rng)?,
            key: lin(store, "key", d_model, d_model, rng)?,
            value: lin(store, "value", d_model, d_model, rng)?,
            output: lin(store, "output", d_model, d_model, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model)?,
            ff1: lin(store, "ff1", d_model, ffn_width, rng)?,
            ff2: lin(store, "ff2", ffn_width, d_model, rng)?,
        })
    }

    /// Causal self-attention over `x` `[.., L, D]`.
    pub fn attend<'g>(&self, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let g = x.graph();
        let shape = x.shape();
        let rank = shape.len();
        let (len, d_model) = (shape[rank - 2], shape[rank - 1]);
        let dh = d_model / self.heads;
        let q = self.query.forward(store, x)?;
        let k = self.key.forward(store, x)?;
        let v = self.value.forward(store, x)?;
        let mask = g.constant(causal_mask(len));
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice(rank - 1, h * dh, dh)?;
            let kh = k.slice(rank - 1, h * dh, dh)?;
            let vh = v.slice(rank - 1, h * dh, dh)?;
            let scores = qh.matmul(kh.t()?)?.scale(scale).add(mask)?;
            outs.push(scores.softmax(rank - 1)?.matmul(vh)?);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs, rank - 1)?
        };
        Ok(self.output.forward(store, joined)?)
    }

    pub fn forward<'g>(&self, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let x = x.add(self.attend(store, self.norm1.forward(store, x)?)?)?;
        let hidden = self.ff1.forward(store, self.norm2.forward(store, x)?)?.gelu();
        Ok(x.add(self.ff2.forward(store, hidden)?)?)
    }
}
