use super::{numel, Result, Tensor, TensorError};

/// Trailing-dimension broadcast of two shapes, `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        let lead = rank - s.len();
        if i < lead {
            1
        } else {
            s[i - lead]
        }
    };
    (0..rank)
        .map(|i| {
            let (da, db) = (dim(a, i), dim(b, i));
            match (da, db) {
                _ if da == db => Some(da),
                (1, _) => Some(db),
                (_, 1) => Some(da),
                _ => None,
            }
        })
        .collect()
}

/// Strides of `shape` right-aligned against `out`, zero along broadcast dims.
pub(crate) fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let lead = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut stride = 1;
    for i in (0..shape.len()).rev() {
        strides[i + lead] = if shape[i] == 1 { 0 } else { stride };
        stride *= shape[i];
    }
    strides
}

/// Visits every element of `out` in row-major order, passing the linear output
/// index and the matching offsets into the two broadcast operands.
pub(crate) fn for_each_offset(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut pos = 0;
    loop {
        for j in 0..last {
            f(pos + j, oa + j * la, ob + j * lb);
        }
        pos += last;
        if pos >= total {
            break;
        }
        // odometer over the leading dims
        let mut d = rank - 1;
        loop {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn binary_map(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let out = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })?;
    let sa = aligned_strides(&a.shape, &out);
    let sb = aligned_strides(&b.shape, &out);
    let mut data = vec![0.0; numel(&out)];
    for_each_offset(&out, &sa, &sb, |i, ia, ib| {
        data[i] = f(a.data[ia], b.data[ib]);
    });
    Ok(Tensor { shape: out, data })
}

/// Sums `grad` over the dimensions along which `shape` was broadcast.
#[cfg(test)]
pub(crate) fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let sa = aligned_strides(shape, &grad.shape);
    let zeros = vec![0; grad.shape.len()];
    let mut data = vec![0.0; numel(shape)];
    for_each_offset(&grad.shape, &sa, &zeros, |i, ia, _| {
        data[ia] += grad.data[i];
    });
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}
