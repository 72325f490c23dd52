use super::{CustomOp, Result, Tensor, TensorError, Var};

/// Depthwise causal convolution over the time axis.
///
/// `x` is `[.., L, D]`, `kernel` is `[W, D]` and `bias` is `[D]`:
/// `out[t, d] = bias[d] + Σ_w kernel[w, d] · x[t - W + 1 + w, d]`, with
/// positions before the start of the sequence read as zero.
pub fn causal_conv1d_forward(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (lead, len, dim) = check(x, kernel, bias)?;
    let width = kernel.shape()[0];
    let (xs, ks) = (x.data(), kernel.data());
    let mut out = vec![0.0; x.numel()];
    for b in 0..lead {
        let base = b * len * dim;
        for t in 0..len {
            let row = &mut out[base + t * dim..base + (t + 1) * dim];
            if let Some(bias) = bias {
                row.copy_from_slice(bias.data());
            }
            for w in 0..width {
                // source position t - (width - 1) + w
                let Some(src) = (t + w + 1).checked_sub(width) else { continue };
                let xrow = &xs[base + src * dim..base + (src + 1) * dim];
                let krow = &ks[w * dim..(w + 1) * dim];
                for ((o, xv), kv) in row.iter_mut().zip(xrow).zip(krow) {
                    *o += kv * xv;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn check(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    let mismatch = |rhs: &Tensor| TensorError::ShapeMismatch {
        op: "causal_conv1d",
        lhs: x.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    };
    let r = x.rank();
    if r < 2 || x.shape()[r - 2] == 0 {
        return Err(TensorError::Invalid(format!(
            "causal_conv1d: input must be non-empty [.., L, D], got {:?}",
            x.shape()
        )));
    }
    let (len, dim) = (x.shape()[r - 2], x.shape()[r - 1]);
    if kernel.rank() != 2 || kernel.shape()[1] != dim || kernel.shape()[0] == 0 {
        return Err(mismatch(kernel));
    }
    if let Some(b) = bias {
        if b.shape() != [dim] {
            return Err(mismatch(b));
        }
    }
    Ok((x.numel() / (len * dim), len, dim))
}

struct CausalConv {
    has_bias: bool,
}

impl CustomOp for CausalConv {
    fn name(&self) -> &'static str {
        "causal_conv1d"
    }

    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Tensor>> {
        let (x, kernel) = (inputs[0], inputs[1]);
        let r = x.rank();
        let (len, dim) = (x.shape()[r - 2], x.shape()[r - 1]);
        let lead = x.numel() / (len * dim);
        let width = kernel.shape()[0];
        let mut gx = vec![0.0; x.numel()];
        let mut gk = vec![0.0; kernel.numel()];
        let mut gb = vec![0.0; dim];
        let (xs, ks, gs) = (x.data(), kernel.data(), g.data());
        for b in 0..lead {
            let base = b * len * dim;
            for t in 0..len {
                let grow = &gs[base + t * dim..base + (t + 1) * dim];
                for (acc, gv) in gb.iter_mut().zip(grow) {
                    *acc += gv;
                }
                for w in 0..width {
                    let Some(src) = (t + w + 1).checked_sub(width) else { continue };
                    for d in 0..dim {
                        gk[w * dim + d] += grow[d] * xs[base + src * dim + d];
                        gx[base + src * dim + d] += grow[d] * ks[w * dim + d];
                    }
                }
            }
        }
        let mut grads = vec![
            Tensor::new(x.shape().to_vec(), gx).ok(),
            Tensor::new(kernel.shape().to_vec(), gk).ok(),
        ];
        if self.has_bias {
            grads.push(Tensor::new(vec![dim], gb).ok());
        }
        grads
    }
}

/// Differentiable [`causal_conv1d_forward`].
pub fn causal_conv1d<'g>(x: Var<'g>, kernel: Var<'g>, bias: Option<Var<'g>>) -> Result<Var<'g>> {
    let (xv, kv) = (x.value(), kernel.value());
    let bv = bias.map(|b| b.value());
    let out = causal_conv1d_forward(&xv, &kv, bv.as_deref())?;
    let mut inputs = vec![x, kernel];
    inputs.extend(bias);
    Ok(x.graph().custom(
        &inputs,
        out,
        Box::new(CausalConv {
            has_bias: bias.is_some(),
        }),
    ))
}
