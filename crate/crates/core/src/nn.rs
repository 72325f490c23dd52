//! Small reusable layers built on the tensor engine.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::tensor::{ParamId, ParamStore, Result, Tensor, TensorError, Var};

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("sized")
}

/// `y = x · W (+ b)` with `W` stored as `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// PyTorch-style uniform initialization in `±1/√in`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[input, output], bound))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), uniform(rng, &[output], bound))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward<'g>(&self, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let g = x.graph();
        let y = x.matmul(g.param(store, self.weight))?;
        match self.bias {
            Some(b) => y.add(g.param(store, b)),
            None => Ok(y),
        }
    }
}

/// Appends a trailing unit axis so a per-row statistic broadcasts back.
pub(crate) fn keepdim<'g>(v: Var<'g>) -> Result<Var<'g>> {
    let mut shape = v.shape();
    shape.push(1);
    v.reshape(shape)
}

fn last_axis(x: Var<'_>) -> Result<usize> {
    x.shape()
        .len()
        .checked_sub(1)
        .ok_or_else(|| TensorError::Invalid("normalization of a rank-0 tensor".into()))
}

/// Root-mean-square normalization over the last axis with a learned scale.
#[derive(Clone, Copy, Debug)]
pub struct RmsNorm {
    pub scale: ParamId,
}

impl RmsNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(RmsNorm {
            scale: store.add(format!("{name}.scale"), Tensor::ones(vec![dim]))?,
        })
    }

    pub fn forward<'g>(&self, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let axis = last_axis(x)?;
        let ms = keepdim(x.square().mean_axis(axis)?)?;
        let rms = ms.add_scalar(Self::EPS).sqrt()?;
        x.div(rms)?.mul(x.graph().param(store, self.scale))
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            scale: store.add(format!("{name}.scale"), Tensor::ones(vec![dim]))?,
            shift: store.add(format!("{name}.shift"), Tensor::zeros(vec![dim]))?,
        })
    }

    pub fn forward<'g>(&self, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let g = x.graph();
        let axis = last_axis(x)?;
        let centered = x.sub(keepdim(x.mean_axis(axis)?)?)?;
        let var = keepdim(centered.square().mean_axis(axis)?)?;
        let std = var.add_scalar(Self::EPS).sqrt()?;
        centered
            .div(std)?
            .mul(g.param(store, self.scale))?
            .add(g.param(store, self.shift))
    }
}
