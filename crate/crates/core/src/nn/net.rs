//! Layer plan and the forward/backward kernels.
//!
//! Kernels are generic over the scalar type: models run in `f32`, the
//! gradient check re-runs the same code in `f64`. Activations are stored
//! channel-major (CHW); convolutions go through im2col and a GEMM.

use num_traits::Float;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::spec::{Activation, ArchitectureSpec, LayerSpec, Padding};
use super::NnError;

pub trait Scalar: Float + Default + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static {
    fn of(v: f64) -> Self;

    /// `c = op(a)·op(b) + beta·c`, row-major, with `op(a)` of shape m×k and
    /// `op(b)` of shape k×n.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self], beta: Self);
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn of(v: f64) -> Self {
                v as $t
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                beta: Self,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                // SAFETY: the asserts above bound every index touched for the given strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Weights and bias of one conv or dense layer. Conv weights are laid out
/// `(filters, channels, k, k)`, dense weights `(inputs, outputs)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn zeros_like<U>(other: &LayerParams<U>) -> Self {
        Self {
            w: vec![T::zero(); other.w.len()],
            b: vec![T::zero(); other.b.len()],
        }
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U>
    where
        T: Into<f64>,
    {
        LayerParams {
            w: self.w.iter().map(|&v| U::of(v.into())).collect(),
            b: self.b.iter().map(|&v| U::of(v.into())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Conv,
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub kind: ParamKind,
    /// Index of the owning layer in the spec.
    pub layer: usize,
    pub weight_shape: Vec<usize>,
    pub bias_len: usize,
    pub fan_in: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Op {
    Conv {
        c: usize,
        h: usize,
        w: usize,
        f: usize,
        k: usize,
        pad: usize,
        oh: usize,
        ow: usize,
        p: usize,
    },
    Relu {
        len: usize,
    },
    MaxPool {
        c: usize,
        h: usize,
        w: usize,
        size: usize,
        oh: usize,
        ow: usize,
    },
    Dropout {
        rate: f32,
        len: usize,
    },
    Dense {
        inp: usize,
        out: usize,
        p: usize,
    },
}

/// A spec compiled into primitive ops.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub(crate) ops: Vec<Op>,
    /// Spec layer that produced each op.
    pub(crate) op_layer: Vec<usize>,
    pub params: Vec<ParamInfo>,
    pub input_len: usize,
    pub classes: usize,
}

impl Plan {
    pub fn new(spec: &ArchitectureSpec) -> Result<Self, NnError> {
        let shapes = spec.shapes()?;
        let mut ops = Vec::new();
        let mut op_layer = Vec::new();
        let mut params = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            let (c, h, w) = shapes[i];
            let out = shapes[i + 1];
            let mut push = |op: Op| {
                ops.push(op);
                op_layer.push(i);
            };
            match *layer {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    padding,
                    activation,
                } => {
                    let pad = match padding {
                        Padding::Valid => 0,
                        Padding::Same => kernel / 2,
                    };
                    params.push(ParamInfo {
                        kind: ParamKind::Conv,
                        layer: i,
                        weight_shape: vec![filters, c, kernel, kernel],
                        bias_len: filters,
                        fan_in: c * kernel * kernel,
                    });
                    push(Op::Conv {
                        c,
                        h,
                        w,
                        f: filters,
                        k: kernel,
                        pad,
                        oh: out.1,
                        ow: out.2,
                        p: params.len() - 1,
                    });
                    if activation == Activation::Relu {
                        push(Op::Relu {
                            len: out.0 * out.1 * out.2,
                        });
                    }
                }
                LayerSpec::MaxPool { size } => push(Op::MaxPool {
                    c,
                    h,
                    w,
                    size,
                    oh: out.1,
                    ow: out.2,
                }),
                LayerSpec::Dropout { rate } => push(Op::Dropout { rate, len: c * h * w }),
                LayerSpec::Dense { units, activation } => {
                    let inp = c * h * w;
                    params.push(ParamInfo {
                        kind: ParamKind::Dense,
                        layer: i,
                        weight_shape: vec![inp, units],
                        bias_len: units,
                        fan_in: inp,
                    });
                    push(Op::Dense {
                        inp,
                        out: units,
                        p: params.len() - 1,
                    });
                    if activation == Activation::Relu {
                        push(Op::Relu { len: units });
                    }
                }
            }
        }
        Ok(Self {
            ops,
            op_layer,
            params,
            input_len: spec.input_len(),
            classes: spec.classes,
        })
    }

    pub fn op_count(&self) -> usize {
        self.ops.len()
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(input: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, oh: usize, ow: usize) -> Vec<T> {
    let p = oh * ow;
    let mut cols = vec![T::zero(); c * k * k * p];
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, oh: usize, ow: usize) -> Vec<T> {
    let p = oh * ow;
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] = out[base + ix as usize] + row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn fake_quant<T: Scalar>(x: &mut [T], (lo, hi): (f32, f32)) {
    if hi <= lo {
        return;
    }
    let lo = T::of(lo as f64);
    let scale = T::of(((hi - lo.to_f32().unwrap()) / 255.0) as f64);
    let top = T::of(255.0);
    for v in x {
        let q = ((*v - lo) / scale).round().max(T::zero()).min(top);
        *v = q * scale + lo;
    }
}

/// Per-op cached state needed by the backward pass.
#[derive(Debug, Default)]
pub(crate) struct Trace<T> {
    /// `acts[0]` is the input; `acts[i + 1]` is the output of op `i`.
    pub acts: Vec<Vec<T>>,
    cols: Vec<Option<Vec<T>>>,
    argmax: Vec<Option<Vec<u32>>>,
    masks: Vec<Option<Vec<T>>>,
}

impl<T> Trace<T> {
    pub fn logits(&self) -> &[T] {
        self.acts.last().expect("trace holds the input at least")
    }
}

/// Runs the plan; with `dropout_rng` set, dropout is active (inverted scaling).
pub(crate) fn forward_trace<T: Scalar>(
    plan: &Plan,
    params: &[LayerParams<T>],
    input: &[T],
    mut dropout_rng: Option<&mut dyn RngCore>,
    act_ranges: Option<&[(f32, f32)]>,
) -> Trace<T> {
    let n = plan.ops.len();
    let mut trace = Trace {
        acts: Vec::with_capacity(n + 1),
        cols: Vec::with_capacity(n),
        argmax: Vec::with_capacity(n),
        masks: Vec::with_capacity(n),
    };
    trace.acts.push(input.to_vec());
    for (i, op) in plan.ops.iter().enumerate() {
        let x = &trace.acts[i];
        let (mut y, cols, argmax, mask) = match *op {
            Op::Conv {
                c,
                h,
                w,
                f,
                k,
                pad,
                oh,
                ow,
                p,
            } => {
                let cols = im2col(x, c, h, w, k, pad, oh, ow);
                let pos = oh * ow;
                let lp = &params[p];
                let mut y = vec![T::zero(); f * pos];
                for (fi, row) in y.chunks_mut(pos).enumerate() {
                    row.fill(lp.b[fi]);
                }
                T::gemm(f, c * k * k, pos, &lp.w, false, &cols, false, &mut y, T::one());
                (y, Some(cols), None, None)
            }
            Op::Relu { .. } => (x.iter().map(|&v| v.max(T::zero())).collect(), None, None, None),
            Op::MaxPool { c, h, w, size, oh, ow } => {
                let mut y = Vec::with_capacity(c * oh * ow);
                let mut idx = Vec::with_capacity(c * oh * ow);
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = ci * h * w + oy * size * w + ox * size;
                            for dy in 0..size {
                                for dx in 0..size {
                                    let j = ci * h * w + (oy * size + dy) * w + ox * size + dx;
                                    if x[j] > x[best] {
                                        best = j;
                                    }
                                }
                            }
                            y.push(x[best]);
                            idx.push(best as u32);
                        }
                    }
                }
                (y, None, Some(idx), None)
            }
            Op::Dropout { rate, len } => match dropout_rng.as_deref_mut() {
                Some(rng) => {
                    let keep = T::of(1.0 / (1.0 - rate as f64));
                    let mask: Vec<T> = (0..len)
                        .map(|_| if rng.gen::<f32>() < rate { T::zero() } else { keep })
                        .collect();
                    let y = x.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
                    (y, None, None, Some(mask))
                }
                None => (x.clone(), None, None, None),
            },
            Op::Dense { inp, out, p } => {
                let lp = &params[p];
                let mut y = lp.b.clone();
                T::gemm(1, inp, out, x, false, &lp.w, false, &mut y, T::one());
                (y, None, None, None)
            }
        };
        if let Some(ranges) = act_ranges {
            fake_quant(&mut y, ranges[i]);
        }
        trace.acts.push(y);
        trace.cols.push(cols);
        trace.argmax.push(argmax);
        trace.masks.push(mask);
    }
    trace
}

/// Inference-only forward pass returning logits.
pub(crate) fn forward<T: Scalar>(
    plan: &Plan,
    params: &[LayerParams<T>],
    input: &[T],
    act_ranges: Option<&[(f32, f32)]>,
) -> Vec<T> {
    let mut trace = forward_trace(plan, params, input, None, act_ranges);
    trace.acts.pop().expect("non-empty plan")
}

/// Backpropagates `d_logits`, adding parameter gradients into `grads`.
/// Parameters with `trainable[p] == false` receive nothing. Returns the
/// gradient with respect to the input when `want_input` is set.
pub(crate) fn backward<T: Scalar>(
    plan: &Plan,
    params: &[LayerParams<T>],
    trace: &Trace<T>,
    d_logits: &[T],
    grads: &mut [LayerParams<T>],
    trainable: &[bool],
    want_input: bool,
) -> Option<Vec<T>> {
    // ops before the first trainable parameter need no gradient unless the
    // caller wants the input gradient
    let stop = if want_input {
        0
    } else {
        plan.ops
            .iter()
            .position(|op| match op {
                Op::Conv { p, .. } | Op::Dense { p, .. } => trainable[*p],
                _ => false,
            })
            .unwrap_or(plan.ops.len())
    };
    let mut grad = d_logits.to_vec();
    for i in (stop..plan.ops.len()).rev() {
        let x = &trace.acts[i];
        let need_dx = i > stop || want_input;
        grad = match plan.ops[i] {
            Op::Conv {
                c,
                h,
                w,
                f,
                k,
                pad,
                oh,
                ow,
                p,
            } => {
                let pos = oh * ow;
                let ckk = c * k * k;
                let cols = trace.cols[i].as_ref().expect("conv caches its columns");
                if trainable[p] {
                    let g = &mut grads[p];
                    T::gemm(f, pos, ckk, &grad, false, cols, true, &mut g.w, T::one());
                    for (fi, row) in grad.chunks(pos).enumerate() {
                        g.b[fi] = g.b[fi] + row.iter().copied().sum::<T>();
                    }
                }
                if !need_dx {
                    break;
                }
                let mut dcols = vec![T::zero(); ckk * pos];
                T::gemm(ckk, f, pos, &params[p].w, true, &grad, false, &mut dcols, T::zero());
                col2im(&dcols, c, h, w, k, pad, oh, ow)
            }
            Op::Relu { .. } => {
                let y = &trace.acts[i + 1];
                grad.iter()
                    .zip(y)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect()
            }
            Op::MaxPool { c, h, w, .. } => {
                let idx = trace.argmax[i].as_ref().expect("pool caches argmax");
                let mut dx = vec![T::zero(); c * h * w];
                for (&j, &g) in idx.iter().zip(&grad) {
                    dx[j as usize] = dx[j as usize] + g;
                }
                dx
            }
            Op::Dropout { .. } => match &trace.masks[i] {
                Some(mask) => grad.iter().zip(mask).map(|(&g, &m)| g * m).collect(),
                None => grad,
            },
            Op::Dense { inp, out, p } => {
                if trainable[p] {
                    let g = &mut grads[p];
                    T::gemm(inp, 1, out, x, false, &grad, false, &mut g.w, T::one());
                    for (b, &d) in g.b.iter_mut().zip(&grad) {
                        *b = *b + d;
                    }
                }
                if !need_dx {
                    break;
                }
                let mut dx = vec![T::zero(); inp];
                T::gemm(1, out, inp, &grad, false, &params[p].w, true, &mut dx, T::zero());
                dx
            }
        };
    }
    if want_input {
        Some(grad)
    } else {
        None
    }
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`, and its logit gradient.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    let loss = lse - logits[label];
    let mut d: Vec<T> = logits.iter().map(|&v| (v - lse).exp()).collect();
    d[label] = d[label] - T::one();
    (loss, d)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        f64::gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        f64::gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        f64::gemm(2, 2, 2, &a, false, &b, true, &mut c, 1.0);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w, k, pad) = (2, 5, 4, 3, 1);
        let (oh, ow) = (h, w);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * k * k * oh * ow).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = im2col(&x, c, h, w, k, pad, oh, ow)
            .iter()
            .zip(&y)
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .iter()
            .zip(col2im(&y, c, h, w, k, pad, oh, ow))
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0f32, 999.0, -5.0]);
        let s: f32 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5f32, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[0.1f32, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[0.0f32; 10]), 0);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = [0.0f64; 4];
        let (loss, d) = cross_entropy(&logits, 2);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert_eq!(d, vec![0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn fake_quant_snaps_to_grid() {
        let mut v = vec![0.0f32, 0.5, 1.0, 2.0, -1.0];
        fake_quant(&mut v, (0.0, 1.0));
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 128.0 / 255.0).abs() < 1e-6 || (v[1] - 127.0 / 255.0).abs() < 1e-6);
        assert!((v[2] - 1.0).abs() < 1e-6);
        assert!((v[3] - 1.0).abs() < 1e-6);
        assert_eq!(v[4], 0.0);
    }
}
