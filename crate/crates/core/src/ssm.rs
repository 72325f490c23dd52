//! Selective state-space layer driven by inter-event time gaps.
//!
//! Each channel `d` of the inner stream carries an `N`-dimensional state with
//! a diagonal, strictly negative transition `A[d, :] = −exp(A_log[d, :])`.
//! Event `i` contributes through input-dependent projections `B_i = x_i·W_B`
//! and `C_i = x_i·W_C`, and the state is advanced across the gap `Δ_i` by the
//! exact zero-order-hold solution of `h' = a·h + B·x`:
//!
//! ```text
//! Ā_i = exp(Δ_i a)          B̄_i = (exp(Δ_i a) − 1) / a · B_i
//! z_i = Ā_i ⊙ z_{i−1} + B̄_i x_i
//! y_i = C_i · z_i + D ⊙ x_i
//! ```
//!
//! The scan is sequential and recorded on the tape as one node with a
//! hand-written backward pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{uniform, Linear, RmsNorm};
use crate::tensor::{causal_conv1d, CustomOp, ParamId, ParamStore, Tensor, Var};

/// Below this `|Δ·a|` the ZOH input coefficient uses its Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-4;

/// Zero-order-hold coefficients for one diagonal entry: returns
/// `(exp(Δa), (exp(Δa) − 1)/a)`, i.e. `Ā` and the factor that multiplies `B`.
pub fn zoh(delta: f64, a: f64) -> (f64, f64) {
    let x = delta * a;
    let a_bar = x.exp();
    let coef = if x.abs() < SERIES_THRESHOLD {
        delta * (1.0 + x / 2.0 + x * x / 6.0)
    } else {
        x.exp_m1() / a
    };
    (a_bar, coef)
}

/// `∂/∂a` of the input coefficient `(exp(Δa) − 1)/a`.
fn zoh_coef_da(delta: f64, a: f64) -> f64 {
    let x = delta * a;
    // φ(x) = expm1(x)/x, coefficient = Δ·φ(Δa), so ∂/∂a = Δ²·φ'(x)
    let dphi = if x.abs() < 1e-2 {
        0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0 + x * x * x * x / 144.0
    } else {
        (x * x.exp() - x.exp_m1()) / (x * x)
    };
    delta * delta * dphi
}

/// Discretized transition and input matrices for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Discretized {
    pub a_bar: Tensor,
    pub b_bar: Tensor,
}

/// Elementwise ZOH discretization of a diagonal `A` with input matrix `B`
/// (broadcast against `A`).
pub fn discretize(delta: f64, a: &Tensor, b: &Tensor) -> Result<Discretized> {
    if !(delta > 0.0) {
        return Err(Error::NonPositiveStep {
            index: 0,
            value: delta,
        });
    }
    let coefs: Vec<(f64, f64)> = a.data().iter().map(|&ai| zoh(delta, ai)).collect();
    let a_bar = Tensor::new(a.shape().to_vec(), coefs.iter().map(|c| c.0).collect())?;
    let coef = Tensor::new(a.shape().to_vec(), coefs.iter().map(|c| c.1).collect())?;
    let g = crate::tensor::Graph::new();
    let b_bar = g.constant(coef).mul(g.constant(b.clone()))?.value();
    Ok(Discretized {
        a_bar,
        b_bar: (*b_bar).clone(),
    })
}

struct ScanDims {
    batch: usize,
    len: usize,
    inner: usize,
    state: usize,
}

fn scan_dims(x: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Result<ScanDims> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::Config(format!("scan input must be [.., L, D], got {:?}", x.shape())));
    }
    let (len, inner) = (x.shape()[r - 2], x.shape()[r - 1]);
    if len == 0 {
        return Err(Error::SequenceTooShort { len: 0, min: 1 });
    }
    let batch = x.numel() / (len * inner);
    if a.rank() != 2 || a.shape()[0] != inner {
        return Err(Error::LengthMismatch {
            what: "A rows",
            expected: inner,
            got: a.shape().first().copied().unwrap_or(0),
        });
    }
    let state = a.shape()[1];
    let checks = [
        ("step sizes", delta.numel(), batch * len),
        ("B", b.numel(), batch * len * state),
        ("C", c.numel(), batch * len * state),
        ("D", d.numel(), inner),
    ];
    for (what, got, expected) in checks {
        if got != expected {
            return Err(Error::LengthMismatch { what, expected, got });
        }
    }
    if let Some((index, &value)) = delta.data().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::NonPositiveStep { index, value });
    }
    Ok(ScanDims {
        batch,
        len,
        inner,
        state,
    })
}

struct ScanOp {
    dims: ScanDims,
    /// every state z_t, laid out [batch, len, inner, state]
    states: Vec<f64>,
}

fn scan_forward(
    dims: &ScanDims,
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let ScanDims {
        batch,
        len,
        inner,
        state,
    } = *dims;
    let mut y = vec![0.0; batch * len * inner];
    let mut states = vec![0.0; batch * len * inner * state];
    let mut h = vec![0.0; inner * state];
    for bi in 0..batch {
        h.fill(0.0);
        for t in 0..len {
            let row = bi * len + t;
            let dt = delta[row];
            let bt = &b[row * state..(row + 1) * state];
            let ct = &c[row * state..(row + 1) * state];
            for ch in 0..inner {
                let xv = x[row * inner + ch];
                let hs = &mut h[ch * state..(ch + 1) * state];
                let mut acc = d[ch] * xv;
                for n in 0..state {
                    let (a_bar, coef) = zoh(dt, a[ch * state + n]);
                    hs[n] = a_bar * hs[n] + coef * bt[n] * xv;
                    acc += ct[n] * hs[n];
                }
                y[row * inner + ch] = acc;
            }
            states[row * inner * state..(row + 1) * inner * state].copy_from_slice(&h);
        }
    }
    (y, states)
}

impl CustomOp for ScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, gy: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Tensor>> {
        let ScanDims {
            batch,
            len,
            inner,
            state,
        } = self.dims;
        let (x, delta, a, b, c, d) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
            inputs[5].data(),
        );
        let gy = gy.data();
        let mut gx = vec![0.0; x.len()];
        let mut gdelta = vec![0.0; delta.len()];
        let mut ga = vec![0.0; a.len()];
        let mut gb = vec![0.0; b.len()];
        let mut gc = vec![0.0; c.len()];
        let mut gd = vec![0.0; d.len()];
        // gradient flowing into z_t from later steps
        let mut dh = vec![0.0; inner * state];
        for bi in 0..batch {
            dh.fill(0.0);
            for t in (0..len).rev() {
                let row = bi * len + t;
                let dt = delta[row];
                let cur = &self.states[row * inner * state..(row + 1) * inner * state];
                let prev = (t > 0).then(|| &self.states[(row - 1) * inner * state..row * inner * state]);
                for ch in 0..inner {
                    let xv = x[row * inner + ch];
                    let g = gy[row * inner + ch];
                    gx[row * inner + ch] += d[ch] * g;
                    gd[ch] += g * xv;
                    for n in 0..state {
                        let k = ch * state + n;
                        let an = a[k];
                        let (a_bar, coef) = zoh(dt, an);
                        let bn = b[row * state + n];
                        gc[row * state + n] += g * cur[k];
                        let dz = dh[k] + c[row * state + n] * g;
                        let h_prev = prev.map_or(0.0, |p| p[k]);
                        let d_abar = dz * h_prev;
                        let d_coef = dz * bn * xv;
                        gb[row * state + n] += dz * coef * xv;
                        gx[row * inner + ch] += dz * coef * bn;
                        gdelta[row] += d_abar * an * a_bar + d_coef * a_bar;
                        ga[k] += d_abar * dt * a_bar + d_coef * zoh_coef_da(dt, an);
                        dh[k] = dz * a_bar;
                    }
                }
            }
        }
        let wrap = |t: &Tensor, v: Vec<f64>| Tensor::new(t.shape().to_vec(), v).ok();
        vec![
            wrap(inputs[0], gx),
            wrap(inputs[1], gdelta),
            wrap(inputs[2], ga),
            wrap(inputs[3], gb),
            wrap(inputs[4], gc),
            wrap(inputs[5], gd),
        ]
    }
}

/// Differentiable selective scan with explicit per-step `B` and `C`.
///
/// Shapes: `x` `[.., L, D]`, `delta` `[.., L]`, `a` `[D, N]` (the negative
/// diagonal transition itself, not its log), `b` and `c` `[.., L, N]`,
/// `d` `[D]`. The state starts at zero for every sequence in the batch.
pub fn scan<'g>(
    x: Var<'g>,
    delta: Var<'g>,
    a: Var<'g>,
    b: Var<'g>,
    c: Var<'g>,
    d: Var<'g>,
) -> Result<Var<'g>> {
    let (xv, dv, av, bv, cv, skip) = (x.value(), delta.value(), a.value(), b.value(), c.value(), d.value());
    let dims = scan_dims(&xv, &dv, &av, &bv, &cv, &skip)?;
    let (y, states) = scan_forward(&dims, xv.data(), dv.data(), av.data(), bv.data(), cv.data(), skip.data());
    let out = Tensor::new(xv.shape().to_vec(), y)?;
    Ok(x.graph()
        .custom(&[x, delta, a, b, c, d], out, Box::new(ScanOp { dims, states })))
}

/// Learnable pieces of the selective SSM: diagonal `A` (as `A_log`), the
/// `B`/`C` projections and the skip connection `D`.
#[derive(Clone, Copy, Debug)]
pub struct SsmCore {
    pub a_log: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub d_skip: ParamId,
    pub d_inner: usize,
    pub d_state: usize,
}

impl SsmCore {
    /// S4D-real initialization: `a[d, n] = −(n + 1)`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_inner: usize,
        d_state: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let a_log = (0..d_inner)
            .flat_map(|_| (0..d_state).map(|n| ((n + 1) as f64).ln()))
            .collect();
        let bound = 1.0 / (d_inner as f64).sqrt();
        Ok(SsmCore {
            a_log: store.add(format!("{name}.A_log"), Tensor::new(vec![d_inner, d_state], a_log)?)?,
            w_b: store.add(format!("{name}.W_B"), uniform(rng, &[d_inner, d_state], bound))?,
            w_c: store.add(format!("{name}.W_C"), uniform(rng, &[d_inner, d_state], bound))?,
            d_skip: store.add(format!("{name}.D"), Tensor::ones(vec![d_inner]))?,
            d_inner,
            d_state,
        })
    }

    /// Runs the scan on `x` `[.., L, D_inner]` with step sizes `delta`
    /// `[.., L]`, projecting `B` and `C` from `x` at every step.
    pub fn forward<'g>(&self, store: &ParamStore, x: Var<'g>, delta: Var<'g>) -> Result<Var<'g>> {
        let g = x.graph();
        let a = g.param(store, self.a_log).exp().neg();
        let b = x.matmul(g.param(store, self.w_b))?;
        let c = x.matmul(g.param(store, self.w_c))?;
        scan(x, delta, a, b, c, g.param(store, self.d_skip))
    }
}

/// Reference recurrence for a single-state channel with `A = −1`, `B = 1`:
/// `g_i = exp(t_{i−1} − t_i)`, `z_i = g_i z_{i−1} + (1 − g_i) x_i`, with
/// `z_0 = 0` and `t_0 = 0`.
pub fn decay_recurrence(timestamps: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if timestamps.len() != x.len() {
        return Err(Error::LengthMismatch {
            what: "inputs",
            expected: timestamps.len(),
            got: x.len(),
        });
    }
    let mut prev_t = 0.0;
    let mut z = 0.0;
    let mut out = Vec::with_capacity(x.len());
    for (i, (&t, &xi)) in timestamps.iter().zip(x).enumerate() {
        if i > 0 && !(t > prev_t) {
            return Err(Error::NonIncreasingTimestamps { index: i });
        }
        let gate = (prev_t - t).exp();
        z = gate * z + (1.0 - gate) * xi;
        out.push(z);
        prev_t = t;
    }
    Ok(out)
}

/// Mamba block: pre-norm, input projection into a stream and a gate, causal
/// depthwise convolution, SiLU, selective scan over the event gaps, SiLU
/// gating, output projection and a residual connection.
#[derive(Clone, Copy, Debug)]
pub struct MambaBlock {
    pub norm: RmsNorm,
    pub in_proj: Linear,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub core: SsmCore,
    pub out_proj: Linear,
}

impl MambaBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_inner: usize,
        d_state: usize,
        d_conv: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let norm = RmsNorm::new(store, &format!("{name}.norm"), d_model)?;
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), d_model, 2 * d_inner, false, rng)?;
        let bound = 1.0 / (d_conv as f64).sqrt();
        let conv_weight = store.add(format!("{name}.conv.weight"), uniform(rng, &[d_conv, d_inner], bound))?;
        let conv_bias = store.add(format!("{name}.conv.bias"), uniform(rng, &[d_inner], bound))?;
        let core = SsmCore::new(store, &format!("{name}.ssm"), d_inner, d_state, rng)?;
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), d_inner, d_model, false, rng)?;
        Ok(MambaBlock {
            norm,
            in_proj,
            conv_weight,
            conv_bias,
            core,
            out_proj,
        })
    }

    /// `u` is `[.., L, D_model]`, `delta` `[.., L]`.
    pub fn forward<'g>(&self, store: &ParamStore, u: Var<'g>, delta: Var<'g>) -> Result<Var<'g>> {
        let g = u.graph();
        let d_inner = self.core.d_inner;
        let xz = self.in_proj.forward(store, self.norm.forward(store, u)?)?;
        let last = xz.shape().len() - 1;
        let x = xz.slice(last, 0, d_inner)?;
        let z = xz.slice(last, d_inner, d_inner)?;
        let x = causal_conv1d(
            x,
            g.param(store, self.conv_weight),
            Some(g.param(store, self.conv_bias)),
        )?
        .silu();
        let y = self.core.forward(store, x, delta)?;
        let out = self.out_proj.forward(store, y.mul(z.silu())?)?;
        Ok(u.add(out)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::{numeric_grad, rel_err};
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    #[test]
    fn zoh_closed_form() {
        let (a_bar, coef) = zoh(std::f64::consts::LN_2, -1.0);
        assert!((a_bar - 0.5).abs() < 1e-15);
        assert!((coef - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zoh_matches_quadrature() {
        // coefficient is the integral of exp(a s) over [0, Δ]; Simpson's rule
        for &(delta, a) in &[(0.5f64, -1.0f64), (2.0, -0.3), (1e-3, -5.0), (3.0, -7.5)] {
            let n = 2000;
            let h = delta / n as f64;
            let f = |s: f64| (a * s).exp();
            let mut acc = f(0.0) + f(delta);
            for i in 1..n {
                acc += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            let quad = acc * h / 3.0;
            let (a_bar, coef) = zoh(delta, a);
            assert!(((coef - quad) / quad).abs() < 1e-10);
            assert_eq!(a_bar, (delta * a).exp());
        }
    }

    #[test]
    fn zoh_small_argument_limit() {
        let (a_bar, coef) = zoh(0.3, -1e-12);
        assert!((a_bar - 1.0).abs() < 1e-11);
        assert!((coef - 0.3).abs() < 1e-12);
    }

    #[test]
    fn series_and_exact_branches_agree_at_threshold() {
        for &delta in &[1e-3, 0.5, 7.0] {
            let a = -SERIES_THRESHOLD / delta;
            let x = delta * a;
            let series = delta * (1.0 + x / 2.0 + x * x / 6.0);
            let exact = x.exp_m1() / a;
            assert!(((series - exact) / exact).abs() < 1e-10);
            // just inside and just outside the threshold
            let (_, inside) = zoh(delta, a * (1.0 - 1e-9));
            let (_, outside) = zoh(delta, a * (1.0 + 1e-9));
            assert!(((inside - outside) / outside).abs() < 1e-8);
        }
    }

    #[test]
    fn coefficient_derivative_matches_finite_differences() {
        for &(delta, a) in &[(0.7f64, -1.3f64), (2.0, -1e-4), (1e-3, -2.0), (0.1, -0.05), (3.0, -4.0)] {
            let h = 1e-6 * a.abs().max(1e-3);
            let fd = (zoh(delta, a + h).1 - zoh(delta, a - h).1) / (2.0 * h);
            let an = zoh_coef_da(delta, a);
            assert!(((an - fd) / an).abs() < 1e-6, "delta {delta} a {a}: {an} vs {fd}");
        }
    }

    #[test]
    fn discretize_rejects_non_positive_step() {
        let a = Tensor::full(vec![1, 1], -1.0);
        let b = Tensor::ones(vec![1]);
        assert!(matches!(discretize(0.0, &a, &b), Err(Error::NonPositiveStep { .. })));
        assert!(matches!(discretize(-1.0, &a, &b), Err(Error::NonPositiveStep { .. })));
        let d = discretize(std::f64::consts::LN_2, &a, &b).unwrap();
        assert!((d.a_bar.item() - 0.5).abs() < 1e-15 && (d.b_bar.item() - 0.5).abs() < 1e-15);
    }

    fn naive_scan(x: &Tensor, delta: &[f64], a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Vec<f64> {
        // interpreted loop, written against the definitions with multi-indices
        let (len, inner) = (x.shape()[0], x.shape()[1]);
        let state = a.shape()[1];
        let mut z = vec![vec![0.0; state]; inner];
        let mut y = vec![0.0; len * inner];
        for t in 0..len {
            for ch in 0..inner {
                for n in 0..state {
                    let av = a.get(&[ch, n]);
                    let a_bar = (delta[t] * av).exp();
                    let b_bar = (a_bar - 1.0) / av * b.get(&[t, n]);
                    z[ch][n] = a_bar * z[ch][n] + b_bar * x.get(&[t, ch]);
                }
                y[t * inner + ch] =
                    (0..state).map(|n| c.get(&[t, n]) * z[ch][n]).sum::<f64>() + d.get(&[ch]) * x.get(&[t, ch]);
            }
        }
        y
    }

    fn random_instance(rng: &mut ChaCha8Rng, len: usize, inner: usize, state: usize) -> [Tensor; 6] {
        let gaps = Uniform::new(0.05, 2.0).unwrap();
        let delta = Tensor::from_vec((0..len).map(|_| gaps.sample(rng)).collect());
        let a = randn(rng, &[inner, state]).map(|v| -v.exp());
        [
            randn(rng, &[len, inner]),
            delta,
            a,
            randn(rng, &[len, state]),
            randn(rng, &[len, state]),
            randn(rng, &[inner]),
        ]
    }

    fn run_scan(t: &[Tensor; 6]) -> Tensor {
        let g = Graph::new();
        let v: Vec<Var> = t.iter().map(|x| g.var(x.clone())).collect();
        (*scan(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap().value()).clone()
    }

    #[test]
    fn scan_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let inst = random_instance(&mut rng, 6, 3, 2);
            let y = run_scan(&inst);
            let want = naive_scan(&inst[0], inst[1].data(), &inst[2], &inst[3], &inst[4], &inst[5]);
            for (p, q) in y.data().iter().zip(&want) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_step_has_no_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = random_instance(&mut rng, 1, 2, 3);
        let y = run_scan(&inst);
        let dt = inst[1].data()[0];
        for ch in 0..2 {
            let xv = inst[0].get(&[0, ch]);
            let want: f64 = (0..3)
                .map(|n| {
                    let (_, coef) = zoh(dt, inst[2].get(&[ch, n]));
                    inst[4].get(&[0, n]) * coef * inst[3].get(&[0, n]) * xv
                })
                .sum::<f64>()
                + inst[5].get(&[ch]) * xv;
            assert!((y.get(&[0, ch]) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn scan_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inst = random_instance(&mut rng, 5, 3, 4);
        let w = randn(&mut rng, &[5, 3]);
        let loss = |ins: &[Tensor]| {
            let g = Graph::new();
            let v: Vec<Var> = ins.iter().map(|x| g.var(x.clone())).collect();
            scan(v[0], v[1], v[2], v[3], v[4], v[5])
                .unwrap()
                .mul(g.constant(w.clone()))
                .unwrap()
                .sum_all()
                .item()
        };
        let g = Graph::new();
        let v: Vec<Var> = inst.iter().map(|x| g.var(x.clone())).collect();
        let l = scan(v[0], v[1], v[2], v[3], v[4], v[5])
            .unwrap()
            .mul(g.constant(w.clone()))
            .unwrap()
            .sum_all();
        let grads = g.backward(l).unwrap();
        for i in 0..6 {
            let numeric = numeric_grad(&inst[i], 1e-5, |p| {
                let mut ins = inst.to_vec();
                ins[i] = p.clone();
                loss(&ins)
            });
            let err = rel_err(grads.wrt(v[i]).unwrap(), &numeric, 1e-8);
            assert!(err < 1e-4, "input {i}: {err:e}");
        }
    }

    #[test]
    fn scan_checks_lengths_and_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut inst = random_instance(&mut rng, 4, 2, 2);
        let g = Graph::new();
        let bad = g.var(Tensor::from_vec(vec![1.0; 3]));
        let v: Vec<Var> = inst.iter().map(|x| g.var(x.clone())).collect();
        assert!(matches!(
            scan(v[0], bad, v[2], v[3], v[4], v[5]),
            Err(Error::LengthMismatch { what: "step sizes", .. })
        ));
        inst[1].data_mut()[2] = 0.0;
        let v: Vec<Var> = inst.iter().map(|x| g.var(x.clone())).collect();
        assert!(matches!(
            scan(v[0], v[1], v[2], v[3], v[4], v[5]),
            Err(Error::NonPositiveStep { index: 2, .. })
        ));
    }

    #[test]
    fn decay_recurrence_hand_values() {
        let ln2 = std::f64::consts::LN_2;
        let z = decay_recurrence(&[ln2, 2.0 * ln2], &[1.0, 1.0]).unwrap();
        assert!((z[0] - 0.5).abs() < 1e-15);
        assert!((z[1] - 0.75).abs() < 1e-15);
        // a huge gap forgets the past entirely
        let z = decay_recurrence(&[1.0, 1e6], &[-3.0, 2.5]).unwrap();
        assert_eq!(z[1], 2.5);
        assert!(matches!(
            decay_recurrence(&[1.0, 1.0], &[0.0, 0.0]),
            Err(Error::NonIncreasingTimestamps { index: 1 })
        ));
    }

    #[test]
    fn scan_reduces_to_decay_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let gaps = Uniform::new(0.01, 3.0).unwrap();
        for _ in 0..20 {
            let len = rng.random_range(1..30);
            let mut t = 0.0;
            let times: Vec<f64> = (0..len)
                .map(|_| {
                    t += gaps.sample(&mut rng);
                    t
                })
                .collect();
            let x: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
            let delta: Vec<f64> = times
                .iter()
                .scan(0.0, |prev, &ti| {
                    let d = ti - *prev;
                    *prev = ti;
                    Some(d)
                })
                .collect();
            let g = Graph::new();
            let y = scan(
                g.constant(Tensor::new(vec![len, 1], x.clone()).unwrap()),
                g.constant(Tensor::from_vec(delta)),
                g.constant(Tensor::full(vec![1, 1], -1.0)),
                g.constant(Tensor::ones(vec![len, 1])),
                g.constant(Tensor::ones(vec![len, 1])),
                g.constant(Tensor::zeros(vec![1])),
            )
            .unwrap()
            .value();
            let want = decay_recurrence(&times, &x).unwrap();
            for (p, q) in y.data().iter().zip(&want) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stable_transition_contracts_state() {
        // zero input after a pulse: the state norm never grows
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let core = SsmCore::new(&mut store, "s", 3, 4, &mut rng).unwrap();
        let a = store.value(core.a_log).map(|v| -v.exp());
        for gap in [1e-6, 0.3, 5.0, 1e4] {
            for &av in a.data() {
                let (a_bar, _) = zoh(gap, av);
                assert!(a_bar > 0.0 && a_bar < 1.0 || (gap >= 1e3 && a_bar == 0.0));
            }
        }
    }

    #[test]
    fn mamba_block_zero_input_gives_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = MambaBlock::new(&mut store, "b", 8, 16, 4, 4, &mut rng).unwrap();
        store.set_value(block.conv_bias, Tensor::zeros(vec![16])).unwrap();
        let g = Graph::new();
        let u = g.constant(Tensor::zeros(vec![5, 8]));
        let delta = g.constant(Tensor::ones(vec![5]));
        let y = block.forward(&store, u, delta).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mamba_block_shapes_and_causality() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &d_model in &[8, 64] {
            let mut store = ParamStore::new();
            let block = MambaBlock::new(&mut store, "b", d_model, 2 * d_model, 16, 4, &mut rng).unwrap();
            for &len in &[1, 2, 7] {
                let u = randn(&mut rng, &[len, d_model]);
                let delta = Tensor::from_vec((0..len).map(|i| 0.2 + i as f64 * 0.1).collect());
                let run = |u: &Tensor| {
                    let g = Graph::new();
                    let out = block.forward(&store, g.constant(u.clone()), g.constant(delta.clone())).unwrap();
                    (*out.value()).clone()
                };
                let base = run(&u);
                assert_eq!(base.shape(), &[len, d_model]);
                let t = len / 2;
                let mut up = u.clone();
                up.data_mut()[t * d_model] += 0.5;
                let pert = run(&up);
                assert_eq!(&pert.data()[..t * d_model], &base.data()[..t * d_model]);
            }
        }
    }
}
