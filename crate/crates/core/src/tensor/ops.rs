//! Differentiable tensor operations.
//!
//! Every function computes its forward value eagerly; when an input is on a
//! tape, a node with the saved backward context is recorded. Binary
//! operations broadcast with right-aligned shape rules (extent 1 or missing
//! broadcasts); the backward pass reduce-sums over broadcast axes.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::matmul::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::tape::{common_tape, Tape, Vjp};
use crate::tensor::{strides, Tensor};
use crate::SeededRng;

// ---------------------------------------------------------------------------
// broadcasting helpers

/// Broadcast shape of `a` and `b` (right-aligned, extents equal or 1).
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let ea = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let eb = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if ea == eb {
            ea
        } else if ea == 1 {
            eb
        } else if eb == 1 {
            ea
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Strides of `in_shape` viewed under `out_shape`, 0 on broadcast axes.
fn bcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let st = strides(in_shape);
    let pad = out_shape.len() - in_shape.len();
    let mut out = vec![0; out_shape.len()];
    for i in 0..in_shape.len() {
        out[pad + i] = if in_shape[i] == 1 && out_shape[pad + i] != 1 {
            0
        } else {
            st[i]
        };
    }
    out
}

/// Visit every output element in row-major order together with one mapped
/// input offset (per the supplied stride table, 0 meaning broadcast).
fn for_each_offset(out_shape: &[usize], st: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    let mut off = 0usize;
    for idx in 0..numel {
        f(idx, off);
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            off += st[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            coords[ax] = 0;
            off -= st[ax] * out_shape[ax];
        }
    }
}

/// Two-input variant of [`for_each_offset`].
fn for_each_offset2(
    out_shape: &[usize],
    st_a: &[usize],
    st_b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    let (mut a_off, mut b_off) = (0usize, 0usize);
    for idx in 0..numel {
        f(idx, a_off, b_off);
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            a_off += st_a[ax];
            b_off += st_b[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            coords[ax] = 0;
            a_off -= st_a[ax] * out_shape[ax];
            b_off -= st_b[ax] * out_shape[ax];
        }
    }
}

fn maybe_record<S: Scalar>(
    inputs: &[&Tensor<S>],
    name: &'static str,
    out: Tensor<S>,
    make: impl FnOnce() -> Box<dyn Vjp<S>>,
) -> Result<Tensor<S>> {
    match common_tape(inputs)? {
        None => Ok(out),
        Some(tape) => {
            let parents = inputs.iter().map(|t| t.node_id()).collect();
            Tape::record(&tape, name, parents, make(), out)
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise binary ops

#[derive(Clone, Copy, PartialEq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

impl BinKind {
    fn name(self) -> &'static str {
        match self {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        }
    }

    fn apply<S: Scalar>(self, a: S, b: S) -> S {
        match self {
            BinKind::Add => a + b,
            BinKind::Sub => a - b,
            BinKind::Mul => a * b,
        }
    }
}

struct BinVjp<S: Scalar> {
    kind: BinKind,
    a_data: Arc<Vec<S>>,
    b_data: Arc<Vec<S>>,
    a_shape: Vec<usize>,
    b_shape: Vec<usize>,
    out_shape: Vec<usize>,
    a_taped: bool,
    b_taped: bool,
}

impl<S: Scalar> Vjp<S> for BinVjp<S> {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>> {
        let st_a = bcast_strides(&self.a_shape, &self.out_shape);
        let st_b = bcast_strides(&self.b_shape, &self.out_shape);
        let mut ga = if self.a_taped {
            Some(vec![S::zero(); self.a_data.len()])
        } else {
            None
        };
        let mut gb = if self.b_taped {
            Some(vec![S::zero(); self.b_data.len()])
        } else {
            None
        };
        for_each_offset2(&self.out_shape, &st_a, &st_b, |idx, ao, bo| {
            let g = grad[idx];
            if let Some(ga) = ga.as_mut() {
                ga[ao] += match self.kind {
                    BinKind::Add | BinKind::Sub => g,
                    BinKind::Mul => g * self.b_data[bo],
                };
            }
            if let Some(gb) = gb.as_mut() {
                gb[bo] += match self.kind {
                    BinKind::Add => g,
                    BinKind::Sub => -g,
                    BinKind::Mul => g * self.a_data[ao],
                };
            }
        });
        Ok(vec![ga, gb])
    }
}

fn binary<S: Scalar>(kind: BinKind, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let out_shape = broadcast_shapes(kind.name(), a.shape(), b.shape())?;
    let numel: usize = out_shape.iter().product();
    let mut data = vec![S::zero(); numel];
    if a.shape() == b.shape() {
        for ((o, &x), &y) in data.iter_mut().zip(a.data()).zip(b.data()) {
            *o = kind.apply(x, y);
        }
    } else {
        let st_a = bcast_strides(a.shape(), &out_shape);
        let st_b = bcast_strides(b.shape(), &out_shape);
        let (ad, bd) = (a.data(), b.data());
        for_each_offset2(&out_shape, &st_a, &st_b, |idx, ao, bo| {
            data[idx] = kind.apply(ad[ao], bd[bo]);
        });
    }
    let out = Tensor::from_vec(&out_shape, data)?;
    maybe_record(&[a, b], kind.name(), out, || {
        Box::new(BinVjp {
            kind,
            a_data: a.data_arc(),
            b_data: b.data_arc(),
            a_shape: a.shape().to_vec(),
            b_shape: b.shape().to_vec(),
            out_shape: out_shape.clone(),
            a_taped: a.is_on_tape(),
            b_taped: b.is_on_tape(),
        })
    })
}

// ---------------------------------------------------------------------------
// scale

struct ScaleVjp<S: Scalar> {
    c: S,
}

impl<S: Scalar> Vjp<S> for ScaleVjp<S> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>> {
        Ok(vec![Some(grad.iter().map(|&g| g * self.c).collect())])
    }
}

// ---------------------------------------------------------------------------
// matmul

struct MatmulVjp<S: Scalar> {
    a_data: Arc<Vec<S>>,
    b_data: Arc<Vec<S>>,
    a_shape: Vec<usize>,
    b_shape: Vec<usize>,
    batch_shape: Vec<usize>,
    transpose_b: bool,
    a_taped: bool,
    b_taped: bool,
}

struct MatmulDims {
    m: usize,
    k: usize,
    n: usize,
    batch_shape: Vec<usize>,
    st_a: Vec<usize>,
    st_b: Vec<usize>,
}

fn matmul_dims(
    a_shape: &[usize],
    b_shape: &[usize],
    transpose_b: bool,
) -> Result<MatmulDims> {
    if a_shape.len() < 2 || b_shape.len() < 2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a_shape.to_vec(),
            rhs: b_shape.to_vec(),
        });
    }
    let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
    let (bk, n) = if transpose_b {
        (b_shape[b_shape.len() - 1], b_shape[b_shape.len() - 2])
    } else {
        (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1])
    };
    if k != bk {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a_shape.to_vec(),
            rhs: b_shape.to_vec(),
        });
    }
    let batch_a = &a_shape[..a_shape.len() - 2];
    let batch_b = &b_shape[..b_shape.len() - 2];
    let batch_shape = broadcast_shapes("matmul", batch_a, batch_b)?;
    // Batch strides count whole matrices.
    let mat_a = m * k;
    let mat_b = if transpose_b { n * k } else { k * n };
    let st_a: Vec<usize> = bcast_strides(batch_a, &batch_shape)
        .iter()
        .map(|s| s * mat_a)
        .collect();
    let st_b: Vec<usize> = bcast_strides(batch_b, &batch_shape)
        .iter()
        .map(|s| s * mat_b)
        .collect();
    Ok(MatmulDims {
        m,
        k,
        n,
        batch_shape,
        st_a,
        st_b,
    })
}

impl<S: Scalar> Vjp<S> for MatmulVjp<S> {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>> {
        let d = matmul_dims(&self.a_shape, &self.b_shape, self.transpose_b)?;
        debug_assert_eq!(d.batch_shape, self.batch_shape);
        let (m, k, n) = (d.m, d.k, d.n);
        let mut ga = if self.a_taped {
            Some(vec![S::zero(); self.a_data.len()])
        } else {
            None
        };
        let mut gb = if self.b_taped {
            Some(vec![S::zero(); self.b_data.len()])
        } else {
            None
        };
        let mat_out = m * n;
        let mut batch = 0usize;
        for_each_offset2(&d.batch_shape, &d.st_a, &d.st_b, |_, ao, bo| {
            let g = &grad[batch * mat_out..(batch + 1) * mat_out];
            let a = &self.a_data[ao..ao + m * k];
            let b = &self.b_data[bo..bo + if self.transpose_b { n * k } else { k * n }];
            if let Some(ga) = ga.as_mut() {
                let da = &mut ga[ao..ao + m * k];
                if self.transpose_b {
                    gemm_nn(m, n, k, g, b, da);
                } else {
                    gemm_nt(m, n, k, g, b, da);
                }
            }
            if let Some(gb) = gb.as_mut() {
                if self.transpose_b {
                    let db = &mut gb[bo..bo + n * k];
                    gemm_tn(n, m, k, g, a, db);
                } else {
                    let db = &mut gb[bo..bo + k * n];
                    gemm_tn(k, m, n, a, g, db);
                }
            }
            batch += 1;
        });
        Ok(vec![ga, gb])
    }
}

// ---------------------------------------------------------------------------
// movement ops

struct ReshapeVjp {
    in_shape: Vec<usize>,
}

impl<S: Scalar> Vjp<S> for ReshapeVjp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>> {
        debug_assert_eq!(grad.len(), self.in_shape.iter().product::<usize>());
        Ok(vec![Some(grad.to_vec())])
    }
}

struct PermuteVjp {
    axes: Vec<usize>,
    out_shape: Vec<usize>,
}

fn permute_data<S: Scalar>(data: &[S], in_shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<S>) {
    let in_st = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let st_for_out: Vec<usize> = axes.iter().map(|&a| in_st[a]).collect();
    let mut out = vec![S::zero(); data.len()];
    for_each_offset(&out_shape, &st_for_out, |idx, off| {
        out[idx] = data[off];
    });
    (out_shape, out)
}

impl<S: Scalar> Vjp<S> for PermuteVjp {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>> {
        let mut inverse = vec![0usize; self.axes.len()];
        for (i, &a) in self.axes.iter().enumerate() {
            inverse[a] = i;
        }
        let (_, g) = permute_data(grad, &self.out_shape, &inverse);
        Ok(vec![Some(g)])
    }
}

struct TakeFlatVjp {
    indices: Arc<Vec<u32>>,
    in_numel: usize,
}

impl<S: Scalar> Vjp<S> for TakeFlatVjp {
    fn name(&self) -> &'static str {
        "take_flat"
    }

    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>> {
        let mut gx = vec![S::zero(); self.in_numel];
        for (&idx, &g) in self.indices.iter().zip(grad) {
            gx[idx as usize] += g;
        }
        Ok(vec![Some(gx)])
    }
}

// ---------------------------------------------------------------------------
// unary activations

#[derive(Clone, Copy)]
enum UnaryKind {
    Relu,
    Gelu,
    Silu,
    Sigmoid,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid_f(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl UnaryKind {
    fn name(self) -> &'static str {
        match self {
            UnaryKind::Relu => "relu",
            UnaryKind::Gelu => "gelu",
            UnaryKind::Silu => "silu",
            UnaryKind::Sigmoid => "sigmoid",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Relu => x.max(0.0),
            // tanh form of GELU
            UnaryKind::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            UnaryKind::Silu => x * sigmoid_f(x),
            UnaryKind::Sigmoid => sigmoid_f(x),
        }
    }

    fn deriv(self, x: f64) -> f64 {
        match self {
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            UnaryKind::Silu => {
                let s = sigmoid_f(x);
                s * (1.0 + x * (1.0 - s))
            }
            UnaryKind::Sigmoid => {
                let s = sigmoid_f(x);
                s * (1.0 - s)
            }
        }
    }
}

struct UnaryVjp<S: Scalar> {
    kind: UnaryKind,
    x_data: Arc<Vec<S>>,
}

impl<S: Scalar> Vjp<S> for UnaryVjp<S> {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>> {
        let gx = grad
            .iter()
            .zip(self.x_data.iter())
            .map(|(&g, &x)| g * S::from_lossy(self.kind.deriv(x.as_f64())))
            .collect();
        Ok(vec![Some(gx)])
    }
}

fn unary<S: Scalar>(kind: UnaryKind, x: &Tensor<S>) -> Result<Tensor<S>> {
    let data: Vec<S> = x
        .data()
        .iter()
        .map(|&v| S::from_lossy(kind.apply(v.as_f64())))
        .collect();
    let out = Tensor::from_vec(x.shape(), data)?;
    maybe_record(&[x], kind.name(), out, || {
        Box::new(UnaryVjp {
            kind,
            x_data: x.data_arc(),
        })
    })
}

// ---------------------------------------------------------------------------
// prelu

struct PreluVjp<S: Scalar> {
    x_data: Arc<Vec<S>>,
    slope: Arc<Vec<S>>,
    channels: usize,
    x_taped: bool,
    slope_taped: bool,
}

impl<S: Scalar> Vjp<S> for PreluVjp<S> {
    fn name(&self) -> &'static str {
        "prelu"
    }

    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>> {
        let c = self.channels;
        let mut gx = if self.x_taped {
            Some(vec![S::zero(); self.x_data.len()])
        } else {
            None
        };
        let mut gs = if self.slope_taped {
            Some(vec![S::zero(); c])
        } else {
            None
        };
        for (i, (&g, &x)) in grad.iter().zip(self.x_data.iter()).enumerate() {
            let ch = i % c;
            if x > S::zero() {
                if let Some(gx) = gx.as_mut() {
                    gx[i] = g;
                }
            } else {
                if let Some(gx) = gx.as_mut() {
                    gx[i] = g * self.slope[ch];
                }
                if let Some(gs) = gs.as_mut() {
                    gs[ch] += g * x;
                }
            }
        }
        Ok(vec![gx, gs])
    }
}

// ---------------------------------------------------------------------------
// glu

struct GluVjp<S: Scalar> {
    x_data: Arc<Vec<S>>,
    half: usize,
}

impl<S: Scalar> Vjp<S> for GluVjp<S> {
    fn name(&self) -> &'static str {
        "glu"
    }

    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>> {
        let h = self.half;
        let mut gx = vec![S::zero(); self.x_data.len()];
        let rows = self.x_data.len() / (2 * h);
        for r in 0..rows {
            let xrow = &self.x_data[r * 2 * h..(r + 1) * 2 * h];
            let grow = &grad[r * h..(r + 1) * h];
            let gxrow = &mut gx[r * 2 * h..(r + 1) * 2 * h];
            for j in 0..h {
                let a = xrow[j];
                let s = S::from_lossy(sigmoid_f(xrow[h + j].as_f64()));
                gxrow[j] = grow[j] * s;
                gxrow[h + j] = grow[j] * a * s * (S::one() - s);
            }
        }
        Ok(vec![Some(gx)])
    }
}

// ---------------------------------------------------------------------------
// softmax / log_softmax

struct SoftmaxVjp<S: Scalar> {
    out_data: Arc<Vec<S>>,
    shape: Vec<usize>,
    axis: usize,
    log: bool,
}

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let ext = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, ext, inner)
}

impl<S: Scalar> Vjp<S> for SoftmaxVjp<S> {
    fn name(&self) -> &'static str {
        if self.log {
            "log_softmax"
        } else {
            "softmax"
        }
    }

    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>> {
        let (outer, ext, inner) = lane_dims(&self.shape, self.axis);
        let mut gx = vec![S::zero(); grad.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * ext * inner + i;
                let mut dot = S::zero();
                for k in 0..ext {
                    let idx = base + k * inner;
                    dot += if self.log {
                        grad[idx]
                    } else {
                        grad[idx] * self.out_data[idx]
                    };
                }
                for k in 0..ext {
                    let idx = base + k * inner;
                    gx[idx] = if self.log {
                        grad[idx] - self.out_data[idx].exp() * dot
                    } else {
                        self.out_data[idx] * (grad[idx] - dot)
                    };
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

fn softmax_entry<S: Scalar>(x: &Tensor<S>, axis: usize, log: bool) -> Result<Tensor<S>> {
    if axis >= x.shape().len() {
        return Err(Error::InvalidShape {
            op: "softmax",
            msg: format!("axis {axis} out of range"),
            shape: x.shape().to_vec(),
        });
    }
    let (outer, ext, inner) = lane_dims(x.shape(), axis);
    let xd = x.data();
    let mut data = vec![S::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * ext * inner + i;
            let mut mx = S::neg_infinity();
            for k in 0..ext {
                mx = mx.max(xd[base + k * inner]);
            }
            let mut sum = S::zero();
            for k in 0..ext {
                sum += (xd[base + k * inner] - mx).exp();
            }
            if log {
                let lsum = sum.ln();
                for k in 0..ext {
                    let idx = base + k * inner;
                    data[idx] = xd[idx] - mx - lsum;
                }
            } else {
                for k in 0..ext {
                    let idx = base + k * inner;
                    data[idx] = (xd[idx] - mx).exp() / sum;
                }
            }
        }
    }
    let out = Tensor::from_vec(x.shape(), data)?;
    let out_arc = out.data_arc();
    maybe_record(&[x], if log { "log_softmax" } else { "softmax" }, out, move || {
        Box::new(SoftmaxVjp {
            out_data: out_arc,
            shape: x.shape().to_vec(),
            axis,
            log,
        })
    })
}

// ---------------------------------------------------------------------------
// layer norm

struct LayerNormVjp<S: Scalar> {
    xhat: Arc<Vec<S>>,
    inv_std: Vec<S>,
    gamma: Arc<Vec<S>>,
    cols: usize,
    x_taped: bool,
    gamma_taped: bool,
    beta_taped: bool,
}

impl<S: Scalar> Vjp<S> for LayerNormVjp<S> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>> {
        let c = self.cols;
        let rows = grad.len() / c;
        let cn = S::from_lossy(c as f64);
        let mut gx = if self.x_taped {
            Some(vec![S::zero(); grad.len()])
        } else {
            None
        };
        let mut gg = if self.gamma_taped {
            Some(vec![S::zero(); c])
        } else {
            None
        };
        let mut gb = if self.beta_taped {
            Some(vec![S::zero(); c])
        } else {
            None
        };
        for r in 0..rows {
            let g = &grad[r * c..(r + 1) * c];
            let xh = &self.xhat[r * c..(r + 1) * c];
            if let Some(gg) = gg.as_mut() {
                for j in 0..c {
                    gg[j] += g[j] * xh[j];
                }
            }
            if let Some(gb) = gb.as_mut() {
                for j in 0..c {
                    gb[j] += g[j];
                }
            }
            if let Some(gx) = gx.as_mut() {
                let mut mean_gy = S::zero();
                let mut mean_gyxh = S::zero();
                for j in 0..c {
                    let gy = g[j] * self.gamma[j];
                    mean_gy += gy;
                    mean_gyxh += gy * xh[j];
                }
                mean_gy /= cn;
                mean_gyxh /= cn;
                let istd = self.inv_std[r];
                let gxr = &mut gx[r * c..(r + 1) * c];
                for j in 0..c {
                    let gy = g[j] * self.gamma[j];
                    gxr[j] = istd * (gy - mean_gy - xh[j] * mean_gyxh);
                }
            }
        }
        Ok(vec![gx, gg, gb])
    }
}

// ---------------------------------------------------------------------------
// batch norm

struct BatchNormEvalVjp<S: Scalar> {
    scale: Vec<S>, // gamma * inv_std per channel
    xhat: Vec<S>,  // needed for gamma grads
    channels: usize,
    x_taped: bool,
    gamma_taped: bool,
    beta_taped: bool,
}

impl<S: Scalar> Vjp<S> for BatchNormEvalVjp<S> {
    fn name(&self) -> &'static str {
        "batch_norm_eval"
    }

    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>> {
        let c = self.channels;
        let mut gx = if self.x_taped {
            Some(vec![S::zero(); grad.len()])
        } else {
            None
        };
        let mut gg = if self.gamma_taped {
            Some(vec![S::zero(); c])
        } else {
            None
        };
        let mut gb = if self.beta_taped {
            Some(vec![S::zero(); c])
        } else {
            None
        };
        for (i, &g) in grad.iter().enumerate() {
            let ch = i % c;
            if let Some(gx) = gx.as_mut() {
                gx[i] = g * self.scale[ch];
            }
            if let Some(gg) = gg.as_mut() {
                gg[ch] += g * self.xhat[i];
            }
            if let Some(gb) = gb.as_mut() {
                gb[ch] += g;
            }
        }
        // mean/var are running statistics, not differentiated
        Ok(vec![gx, gg, gb, None, None])
    }
}

struct BatchNormTrainVjp<S: Scalar> {
    xhat: Vec<S>,
    inv_std: Vec<S>, // per channel
    gamma: Arc<Vec<S>>,
    channels: usize,
    x_taped: bool,
    gamma_taped: bool,
    beta_taped: bool,
}

impl<S: Scalar> Vjp<S> for BatchNormTrainVjp<S> {
    fn name(&self) -> &'static str {
        "batch_norm_train"
    }

    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>> {
        let c = self.channels;
        let rows = grad.len() / c;
        let rn = S::from_lossy(rows as f64);
        let mut gg = if self.gamma_taped {
            Some(vec![S::zero(); c])
        } else {
            None
        };
        let mut gb = if self.beta_taped {
            Some(vec![S::zero(); c])
        } else {
            None
        };
        let mut sum_g = vec![S::zero(); c];
        let mut sum_gxh = vec![S::zero(); c];
        for (i, &g) in grad.iter().enumerate() {
            let ch = i % c;
            sum_g[ch] += g;
            sum_gxh[ch] += g * self.xhat[i];
        }
        if let Some(gg) = gg.as_mut() {
            gg.copy_from_slice(&sum_gxh);
        }
        if let Some(gb) = gb.as_mut() {
            gb.copy_from_slice(&sum_g);
        }
        let gx = if self.x_taped {
            let mut gx = vec![S::zero(); grad.len()];
            for (i, &g) in grad.iter().enumerate() {
                let ch = i % c;
                let k = self.gamma[ch] * self.inv_std[ch];
                gx[i] = k * (g - sum_g[ch] / rn - self.xhat[i] * (sum_gxh[ch] / rn));
            }
            Some(gx)
        } else {
            None
        };
        Ok(vec![gx, gg, gb])
    }
}

// ---------------------------------------------------------------------------
// reductions

struct MeanAxesVjp {
    in_shape: Vec<usize>,
    out_strides_for_in: Vec<usize>,
    count: usize,
}

impl<S: Scalar> Vjp<S> for MeanAxesVjp {
    fn name(&self) -> &'static str {
        "mean_axes"
    }

    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>> {
        let scale = S::from_lossy(1.0 / self.count as f64);
        let mut gx = vec![S::zero(); self.in_shape.iter().product()];
        for_each_offset(&self.in_shape, &self.out_strides_for_in, |in_idx, out_off| {
            gx[in_idx] = grad[out_off] * scale;
        });
        Ok(vec![Some(gx)])
    }
}

struct SumAllVjp {
    in_numel: usize,
}

impl<S: Scalar> Vjp<S> for SumAllVjp {
    fn name(&self) -> &'static str {
        "sum_all"
    }

    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>> {
        Ok(vec![Some(vec![grad[0]; self.in_numel])])
    }
}

// ---------------------------------------------------------------------------
// dropout

struct DropoutVjp<S: Scalar> {
    mask: Arc<Vec<S>>, // 0 or 1/(1-rate)
}

impl<S: Scalar> Vjp<S> for DropoutVjp<S> {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>> {
        Ok(vec![Some(
            grad.iter().zip(self.mask.iter()).map(|(&g, &m)| g * m).collect(),
        )])
    }
}

// ---------------------------------------------------------------------------
// public surface

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        binary(BinKind::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        binary(BinKind::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        binary(BinKind::Mul, self, other)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor<S>> {
        let cs = S::from_lossy(c);
        let data: Vec<S> = self.data().iter().map(|&v| v * cs).collect();
        let out = Tensor::from_vec(self.shape(), data)?;
        maybe_record(&[self], "scale", out, || Box::new(ScaleVjp { c: cs }))
    }

    pub fn neg(&self) -> Result<Tensor<S>> {
        self.scale(-1.0)
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.matmul_impl(other, false)
    }

    /// `self @ otherᵀ` (transpose over the last two axes of `other`).
    pub fn matmul_nt(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Tensor<S>, transpose_b: bool) -> Result<Tensor<S>> {
        let d = matmul_dims(self.shape(), other.shape(), transpose_b)?;
        let (m, k, n) = (d.m, d.k, d.n);
        let batches: usize = d.batch_shape.iter().product();
        let mut data = vec![S::zero(); batches * m * n];
        let (ad, bd) = (self.data(), other.data());
        let mut batch = 0usize;
        for_each_offset2(&d.batch_shape, &d.st_a, &d.st_b, |_, ao, bo| {
            let out = &mut data[batch * m * n..(batch + 1) * m * n];
            let a = &ad[ao..ao + m * k];
            if transpose_b {
                let b = &bd[bo..bo + n * k];
                gemm_nt(m, k, n, a, b, out);
            } else {
                let b = &bd[bo..bo + k * n];
                gemm_nn(m, k, n, a, b, out);
            }
            batch += 1;
        });
        let mut out_shape = d.batch_shape.clone();
        out_shape.push(m);
        out_shape.push(n);
        let out = Tensor::from_vec(&out_shape, data)?;
        maybe_record(&[self, other], "matmul", out, || {
            Box::new(MatmulVjp {
                a_data: self.data_arc(),
                b_data: other.data_arc(),
                a_shape: self.shape().to_vec(),
                b_shape: other.shape().to_vec(),
                batch_shape: d.batch_shape,
                transpose_b,
                a_taped: self.is_on_tape(),
                b_taped: other.is_on_tape(),
            })
        })
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<S>> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                msg: format!("cannot reshape {:?} to {:?}", self.shape(), new_shape),
                shape: self.shape().to_vec(),
            });
        }
        let mut out = self.detach();
        out.shape = new_shape.to_vec();
        maybe_record(&[self], "reshape", out, || {
            Box::new(ReshapeVjp {
                in_shape: self.shape().to_vec(),
            })
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<S>> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidShape {
                op: "permute",
                msg: format!("invalid axes {axes:?}"),
                shape: self.shape().to_vec(),
            });
        }
        let (out_shape, data) = permute_data(self.data(), self.shape(), axes);
        let out = Tensor::from_vec(&out_shape, data)?;
        maybe_record(&[self], "permute", out, || {
            Box::new(PermuteVjp {
                axes: axes.to_vec(),
                out_shape: out_shape.clone(),
            })
        })
    }

    /// Gather by flat element index: `out[i] = self[indices[i]]`.
    pub fn take_flat(&self, indices: &Arc<Vec<u32>>, out_shape: &[usize]) -> Result<Tensor<S>> {
        let numel: usize = out_shape.iter().product();
        if numel != indices.len() {
            return Err(Error::InvalidShape {
                op: "take_flat",
                msg: format!("{} indices for shape {:?}", indices.len(), out_shape),
                shape: out_shape.to_vec(),
            });
        }
        let xd = self.data();
        let mut data = vec![S::zero(); numel];
        for (o, &idx) in data.iter_mut().zip(indices.iter()) {
            let idx = idx as usize;
            if idx >= xd.len() {
                return Err(Error::InvalidShape {
                    op: "take_flat",
                    msg: format!("index {idx} out of bounds for {} elements", xd.len()),
                    shape: self.shape().to_vec(),
                });
            }
            *o = xd[idx];
        }
        let out = Tensor::from_vec(out_shape, data)?;
        maybe_record(&[self], "take_flat", out, || {
            Box::new(TakeFlatVjp {
                indices: Arc::clone(indices),
                in_numel: self.numel(),
            })
        })
    }

    pub fn relu(&self) -> Result<Tensor<S>> {
        unary(UnaryKind::Relu, self)
    }

    pub fn gelu(&self) -> Result<Tensor<S>> {
        unary(UnaryKind::Gelu, self)
    }

    /// Swish / SiLU: `x * sigmoid(x)`.
    pub fn silu(&self) -> Result<Tensor<S>> {
        unary(UnaryKind::Silu, self)
    }

    pub fn sigmoid(&self) -> Result<Tensor<S>> {
        unary(UnaryKind::Sigmoid, self)
    }

    /// Per-channel parametric ReLU; `slope` has the extent of the last axis.
    pub fn prelu(&self, slope: &Tensor<S>) -> Result<Tensor<S>> {
        let c = *self.shape().last().unwrap_or(&0);
        if slope.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "prelu",
                lhs: self.shape().to_vec(),
                rhs: slope.shape().to_vec(),
            });
        }
        let sd = slope.data();
        let data: Vec<S> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if x > S::zero() { x } else { sd[i % c] * x })
            .collect();
        let out = Tensor::from_vec(self.shape(), data)?;
        maybe_record(&[self, slope], "prelu", out, || {
            Box::new(PreluVjp {
                x_data: self.data_arc(),
                slope: slope.data_arc(),
                channels: c,
                x_taped: self.is_on_tape(),
                slope_taped: slope.is_on_tape(),
            })
        })
    }

    /// Gated linear unit over the last axis: splits `[.., 2h]` into `(a, b)`
    /// and returns `a * sigmoid(b)` of shape `[.., h]`.
    pub fn glu(&self) -> Result<Tensor<S>> {
        let last = *self.shape().last().ok_or_else(|| Error::InvalidShape {
            op: "glu",
            msg: "rank 0".into(),
            shape: vec![],
        })?;
        if last % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "glu",
                msg: "last axis must be even".into(),
                shape: self.shape().to_vec(),
            });
        }
        let h = last / 2;
        let rows = self.numel() / last;
        let xd = self.data();
        let mut data = vec![S::zero(); rows * h];
        for r in 0..rows {
            let xrow = &xd[r * last..(r + 1) * last];
            let orow = &mut data[r * h..(r + 1) * h];
            for j in 0..h {
                orow[j] = xrow[j] * S::from_lossy(sigmoid_f(xrow[h + j].as_f64()));
            }
        }
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = h;
        let out = Tensor::from_vec(&out_shape, data)?;
        maybe_record(&[self], "glu", out, || {
            Box::new(GluVjp {
                x_data: self.data_arc(),
                half: h,
            })
        })
    }

    /// Numerically stable softmax along `axis` (max-subtraction form).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>> {
        softmax_entry(self, axis, false)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<S>> {
        softmax_entry(self, axis, true)
    }

    /// Mean over `axes` (removed from the shape).
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor<S>> {
        let rank = self.shape().len();
        let mut reduce = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::InvalidShape {
                    op: "mean_axes",
                    msg: format!("axis {a} out of range"),
                    shape: self.shape().to_vec(),
                });
            }
            reduce[a] = true;
        }
        let out_shape: Vec<usize> = self
            .shape()
            .iter()
            .zip(&reduce)
            .filter(|(_, &r)| !r)
            .map(|(&e, _)| e)
            .collect();
        let count: usize = self
            .shape()
            .iter()
            .zip(&reduce)
            .filter(|(_, &r)| r)
            .map(|(&e, _)| e)
            .product();
        // Stride of each input axis within the packed output.
        let out_st_full = strides(&out_shape);
        let mut out_strides_for_in = vec![0usize; rank];
        let mut oi = 0;
        for i in 0..rank {
            if !reduce[i] {
                out_strides_for_in[i] = out_st_full[oi];
                oi += 1;
            }
        }
        let mut data = vec![S::zero(); out_shape.iter().product()];
        for_each_offset(self.shape(), &out_strides_for_in, |in_idx, out_off| {
            data[out_off] += self.data()[in_idx];
        });
        let scale = S::from_lossy(1.0 / count.max(1) as f64);
        for v in data.iter_mut() {
            *v *= scale;
        }
        let out = Tensor::from_vec(&out_shape, data)?;
        maybe_record(&[self], "mean_axes", out, || {
            Box::new(MeanAxesVjp {
                in_shape: self.shape().to_vec(),
                out_strides_for_in,
                count: count.max(1),
            })
        })
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum_all(&self) -> Result<Tensor<S>> {
        let mut acc = S::zero();
        for &v in self.data() {
            acc += v;
        }
        let out = Tensor::from_vec(&[], vec![acc])?;
        maybe_record(&[self], "sum_all", out, || {
            Box::new(SumAllVjp {
                in_numel: self.numel(),
            })
        })
    }

    pub fn mean_all(&self) -> Result<Tensor<S>> {
        self.sum_all()?.scale(1.0 / self.numel().max(1) as f64)
    }

    /// Inverted dropout: keep with probability `1-rate`, scale kept values.
    /// Identity when `rate == 0`.
    pub fn dropout(&self, rate: f64, rng: &mut SeededRng) -> Result<Tensor<S>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = S::from_lossy(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..self.numel())
            .map(|_| if rng.uniform() >= rate { keep } else { S::zero() })
            .collect();
        let data: Vec<S> = self.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::from_vec(self.shape(), data)?;
        let mask = Arc::new(mask);
        maybe_record(&[self], "dropout", out, move || Box::new(DropoutVjp { mask }))
    }
}

/// Layer normalization over the last axis with affine parameters.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<Tensor<S>> {
    let c = *x.shape().last().ok_or_else(|| Error::InvalidShape {
        op: "layer_norm",
        msg: "rank 0".into(),
        shape: vec![],
    })?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let rows = x.numel() / c;
    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut data = vec![S::zero(); xd.len()];
    let mut xhat = vec![S::zero(); xd.len()];
    let mut inv_std = vec![S::zero(); rows];
    let cn = S::from_lossy(c as f64);
    let epss = S::from_lossy(eps);
    for r in 0..rows {
        let row = &xd[r * c..(r + 1) * c];
        let mut mean = S::zero();
        for &v in row {
            mean += v;
        }
        mean /= cn;
        let mut var = S::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var /= cn;
        let istd = (var + epss).sqrt().recip();
        inv_std[r] = istd;
        for j in 0..c {
            let xh = (row[j] - mean) * istd;
            xhat[r * c + j] = xh;
            data[r * c + j] = gd[j] * xh + bd[j];
        }
    }
    let out = Tensor::from_vec(x.shape(), data)?;
    let xhat = Arc::new(xhat);
    maybe_record(&[x, gamma, beta], "layer_norm", out, move || {
        Box::new(LayerNormVjp {
            xhat,
            inv_std,
            gamma: gamma.data_arc(),
            cols: c,
            x_taped: x.is_on_tape(),
            gamma_taped: gamma.is_on_tape(),
            beta_taped: beta.is_on_tape(),
        })
    })
}

/// Batch normalization in inference mode: per-channel affine transform with
/// stored running statistics. Channels are the last axis.
pub fn batch_norm_eval<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    eps: f64,
) -> Result<Tensor<S>> {
    let c = *x.shape().last().unwrap_or(&0);
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.shape() != [c] {
            return Err(Error::InvalidShape {
                op: "batch_norm_eval",
                msg: format!("{name} must have shape [{c}]"),
                shape: t.shape().to_vec(),
            });
        }
    }
    let epss = S::from_lossy(eps);
    let inv_std: Vec<S> = running_var
        .data()
        .iter()
        .map(|&v| (v + epss).sqrt().recip())
        .collect();
    let scale: Vec<S> = gamma
        .data()
        .iter()
        .zip(&inv_std)
        .map(|(&g, &i)| g * i)
        .collect();
    let (md, bd) = (running_mean.data(), beta.data());
    let mut data = vec![S::zero(); x.numel()];
    let mut xhat = vec![S::zero(); x.numel()];
    for (i, &v) in x.data().iter().enumerate() {
        let ch = i % c;
        let xh = (v - md[ch]) * inv_std[ch];
        xhat[i] = xh;
        data[i] = scale[ch] * (v - md[ch]) + bd[ch];
    }
    let out = Tensor::from_vec(x.shape(), data)?;
    maybe_record(
        &[x, gamma, beta, running_mean, running_var],
        "batch_norm_eval",
        out,
        move || {
            Box::new(BatchNormEvalVjp {
                scale,
                xhat,
                channels: c,
                x_taped: x.is_on_tape(),
                gamma_taped: gamma.is_on_tape(),
                beta_taped: beta.is_on_tape(),
            })
        },
    )
}

/// Batch normalization in training mode: normalizes with the current batch's
/// biased statistics (computed over all axes but the last) and returns the
/// detached `(mean, var)` so the caller can update running estimates.
pub fn batch_norm_train<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let c = *x.shape().last().unwrap_or(&0);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "batch_norm_train",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let rows = x.numel() / c;
    let rn = S::from_lossy(rows as f64);
    let mut mean = vec![S::zero(); c];
    for (i, &v) in x.data().iter().enumerate() {
        mean[i % c] += v;
    }
    for m in mean.iter_mut() {
        *m /= rn;
    }
    let mut var = vec![S::zero(); c];
    for (i, &v) in x.data().iter().enumerate() {
        let d = v - mean[i % c];
        var[i % c] += d * d;
    }
    for v in var.iter_mut() {
        *v /= rn;
    }
    let epss = S::from_lossy(eps);
    let inv_std: Vec<S> = var.iter().map(|&v| (v + epss).sqrt().recip()).collect();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut data = vec![S::zero(); x.numel()];
    let mut xhat = vec![S::zero(); x.numel()];
    for (i, &v) in x.data().iter().enumerate() {
        let ch = i % c;
        let xh = (v - mean[ch]) * inv_std[ch];
        xhat[i] = xh;
        data[i] = gd[ch] * xh + bd[ch];
    }
    let out = Tensor::from_vec(x.shape(), data)?;
    let mean_t = Tensor::from_vec(&[c], mean)?;
    let var_t = Tensor::from_vec(&[c], var)?;
    let inv_std_saved = inv_std;
    let out = maybe_record(&[x, gamma, beta], "batch_norm_train", out, move || {
        Box::new(BatchNormTrainVjp {
            xhat,
            inv_std: inv_std_saved,
            gamma: gamma.data_arc(),
            channels: c,
            x_taped: x.is_on_tape(),
            gamma_taped: gamma.is_on_tape(),
            beta_taped: beta.is_on_tape(),
        })
    })?;
    Ok((out, mean_t, var_t))
}

/// Row index of the maximum along the last axis (ties -> first).
pub fn argmax_last<S: Scalar>(x: &Tensor<S>) -> Vec<usize> {
    let c = *x.shape().last().unwrap_or(&1);
    x.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::Tape;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn add_broadcast_matches_naive() {
        // [2,3] + [3] with explicit loops as oracle
        let a = Tensor::<f64>::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::from_vec(&[3], vec![10., 20., 30.]).unwrap();
        let y = a.add(&b).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(y.at(&[i, j]), a.at(&[i, j]) + b.at(&[j]));
            }
        }
    }

    #[test]
    fn broadcast_with_interior_one() {
        // [2,1,2] * [3,1] -> [2,3,2]
        let a = Tensor::<f64>::from_vec(&[2, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f64>::from_vec(&[3, 1], vec![1., 10., 100.]).unwrap();
        let y = a.mul(&b).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2]);
        assert_eq!(y.at(&[1, 2, 0]), 3. * 100.);
        assert_eq!(y.at(&[0, 1, 1]), 2. * 10.);
    }

    #[test]
    fn incompatible_shapes_error_names_both() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4]);
        let err = a.add(&b).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = crate::SeededRng::new(5);
        let a: Tensor<f64> = rng.normal_tensor(&[5, 7], 0.0, 1.0);
        let b: Tensor<f64> = rng.normal_tensor(&[7, 3], 0.0, 1.0);
        let y = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for p in 0..7 {
                    acc += a.at(&[i, p]) * b.at(&[p, j]);
                }
                assert!(close(y.at(&[i, j]), acc, 1e-12));
            }
        }
    }

    #[test]
    fn batched_matmul_broadcasts_rank2_rhs() {
        let mut rng = crate::SeededRng::new(6);
        let a: Tensor<f64> = rng.normal_tensor(&[4, 2, 3], 0.0, 1.0);
        let b: Tensor<f64> = rng.normal_tensor(&[3, 5], 0.0, 1.0);
        let y = a.matmul(&b).unwrap();
        assert_eq!(y.shape(), &[4, 2, 5]);
        for t in 0..4 {
            for i in 0..2 {
                for j in 0..5 {
                    let mut acc = 0.0;
                    for p in 0..3 {
                        acc += a.at(&[t, i, p]) * b.at(&[p, j]);
                    }
                    assert!(close(y.at(&[t, i, j]), acc, 1e-12));
                }
            }
        }
    }

    #[test]
    fn matmul_nt_equals_matmul_of_transpose() {
        let mut rng = crate::SeededRng::new(7);
        let a: Tensor<f64> = rng.normal_tensor(&[6, 4], 0.0, 1.0);
        let b: Tensor<f64> = rng.normal_tensor(&[5, 4], 0.0, 1.0);
        let y1 = a.matmul_nt(&b).unwrap();
        let y2 = a.matmul(&b.permute(&[1, 0]).unwrap()).unwrap();
        assert!(y1.max_abs_diff(&y2) < 1e-12);
    }

    #[test]
    fn inner_dim_mismatch_is_error() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 5]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_over_wide_range() {
        let x = Tensor::<f64>::from_vec(&[2, 3], vec![-1e4, 0.0, 1e4, 3.0, 3.0, 3.0]).unwrap();
        let y = x.softmax(1).unwrap();
        for r in 0..2 {
            let s: f64 = (0..3).map(|j| y.at(&[r, j])).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_mask_regime() {
        // [x, x - 1e4] -> [~1, ~0]
        let x = Tensor::<f64>::from_vec(&[1, 2], vec![3.0, 3.0 - 1e4]).unwrap();
        let y = x.softmax(1).unwrap();
        assert!((y.at(&[0, 0]) - 1.0).abs() < 1e-6);
        assert!(y.at(&[0, 1]) < 1e-6);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = crate::SeededRng::new(8);
        let x: Tensor<f64> = rng.normal_tensor(&[3, 5], 0.0, 2.0);
        let shifted = x.add(&Tensor::full(&[3, 5], 123.456)).unwrap();
        let d = x.softmax(1).unwrap().max_abs_diff(&shifted.softmax(1).unwrap());
        assert!(d < 1e-12);
    }

    #[test]
    fn softmax_against_direct_formula() {
        let mut rng = crate::SeededRng::new(9);
        let x: Tensor<f64> = rng.normal_tensor(&[4, 6], 0.0, 1.5);
        let y = x.softmax(1).unwrap();
        for r in 0..4 {
            let exps: Vec<f64> = (0..6).map(|j| x.at(&[r, j]).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..6 {
                assert!(close(y.at(&[r, j]), exps[j] / total, 1e-12));
            }
        }
    }

    #[test]
    fn layer_norm_constant_rows_give_beta() {
        let x = Tensor::<f64>::full(&[2, 4], 7.0);
        let gamma = Tensor::<f64>::full(&[4], 1.0);
        let beta = Tensor::<f64>::from_vec(&[4], vec![0.5, -0.5, 0.0, 2.0]).unwrap();
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for r in 0..2 {
            for j in 0..4 {
                assert!((y.at(&[r, j]) - beta.at(&[j])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut rng = crate::SeededRng::new(10);
        let x: Tensor<f64> = rng.normal_tensor(&[3, 64], 1.0, 2.0);
        let gamma = Tensor::<f64>::full(&[64], 1.0);
        let beta = Tensor::<f64>::zeros(&[64]);
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for r in 0..3 {
            let mean: f64 = (0..64).map(|j| y.at(&[r, j])).sum::<f64>() / 64.0;
            let var: f64 = (0..64).map(|j| (y.at(&[r, j]) - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_norm_eval_matches_hand_formula() {
        let x = Tensor::<f64>::from_vec(&[3, 2], vec![1., 10., 2., 20., 3., 30.]).unwrap();
        let gamma = Tensor::<f64>::from_vec(&[2], vec![2.0, 0.5]).unwrap();
        let beta = Tensor::<f64>::from_vec(&[2], vec![1.0, -1.0]).unwrap();
        let mean = Tensor::<f64>::from_vec(&[2], vec![2.0, 20.0]).unwrap();
        let var = Tensor::<f64>::from_vec(&[2], vec![4.0, 100.0]).unwrap();
        let y = batch_norm_eval(&x, &gamma, &beta, &mean, &var, 1e-5).unwrap();
        let want00 = 2.0 * (1.0 - 2.0) / (4.0f64 + 1e-5).sqrt() + 1.0;
        assert!(close(y.at(&[0, 0]), want00, 1e-9));
        let want21 = 0.5 * (30.0 - 20.0) / (100.0f64 + 1e-5).sqrt() - 1.0;
        assert!(close(y.at(&[2, 1]), want21, 1e-9));
    }

    #[test]
    fn batch_norm_train_normalizes_and_reports_stats() {
        let mut rng = crate::SeededRng::new(11);
        let x: Tensor<f64> = rng.normal_tensor(&[50, 3], 2.0, 3.0);
        let gamma = Tensor::<f64>::full(&[3], 1.0);
        let beta = Tensor::<f64>::zeros(&[3]);
        let (y, mean, var) = batch_norm_train(&x, &gamma, &beta, 1e-5).unwrap();
        for ch in 0..3 {
            let m: f64 = (0..50).map(|r| x.at(&[r, ch])).sum::<f64>() / 50.0;
            assert!(close(mean.at(&[ch]), m, 1e-12));
            let v: f64 = (0..50).map(|r| (x.at(&[r, ch]) - m).powi(2)).sum::<f64>() / 50.0;
            assert!(close(var.at(&[ch]), v, 1e-12));
            let ym: f64 = (0..50).map(|r| y.at(&[r, ch])).sum::<f64>() / 50.0;
            assert!(ym.abs() < 1e-12);
        }
    }

    #[test]
    fn prelu_quarter_slope() {
        let x = Tensor::<f64>::from_vec(&[1, 1], vec![-1.0]).unwrap();
        let slope = Tensor::<f64>::from_vec(&[1], vec![0.25]).unwrap();
        let y = x.prelu(&slope).unwrap();
        assert_eq!(y.at(&[0, 0]), -0.25);
    }

    #[test]
    fn activation_fixed_points() {
        let x = Tensor::<f64>::from_vec(&[3], vec![0.0, -1.0, 2.0]).unwrap();
        assert_eq!(x.relu().unwrap().to_vec(), vec![0.0, 0.0, 2.0]);
        assert_eq!(x.gelu().unwrap().at(&[0]), 0.0);
        assert_eq!(x.silu().unwrap().at(&[0]), 0.0);
        assert_eq!(x.sigmoid().unwrap().at(&[0]), 0.5);
        // silu(x) = x * sigmoid(x)
        let s = x.sigmoid().unwrap();
        let want = x.mul(&s).unwrap();
        assert!(x.silu().unwrap().max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn glu_matches_split_formula() {
        let x = Tensor::<f64>::from_vec(&[2, 4], vec![1., 2., 0., 10., -1., 3., -10., 0.]).unwrap();
        let y = x.glu().unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert!(close(y.at(&[0, 0]), 1.0 / (1.0 + 1.0f64), 1e-12)); // 1*sigmoid(0)
        assert!(close(y.at(&[1, 1]), 3.0 * 0.5, 1e-12)); // 3*sigmoid(0)
    }

    #[test]
    fn mean_axes_and_sum() {
        let x = Tensor::<f64>::from_vec(&[2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        let m = x.mean_axes(&[1, 2]).unwrap();
        assert_eq!(m.shape(), &[2]);
        assert_eq!(m.at(&[0]), 2.5);
        assert_eq!(m.at(&[1]), 6.5);
        assert_eq!(x.sum_all().unwrap().item().unwrap(), 36.0);
        assert_eq!(x.mean_all().unwrap().item().unwrap(), 4.5);
    }

    #[test]
    fn permute_reshape_round_trip_bitwise() {
        let mut rng = crate::SeededRng::new(12);
        let x: Tensor<f32> = rng.normal_tensor(&[3, 4, 5], 0.0, 1.0);
        let p = x.permute(&[2, 0, 1]).unwrap();
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert!(x.bits_eq(&back));
        let r = x.reshape(&[12, 5]).unwrap().reshape(&[3, 4, 5]).unwrap();
        assert!(x.bits_eq(&r));
    }

    #[test]
    fn take_flat_gathers_and_scatter_adds() {
        let tape = Tape::<f64>::new();
        let x0 = Tensor::<f64>::from_vec(&[3], vec![5.0, 7.0, 11.0]).unwrap();
        let x = Tape::leaf(&tape, &x0, true).unwrap();
        let idx = Arc::new(vec![2u32, 0, 2]);
        let y = x.take_flat(&idx, &[3]).unwrap();
        assert_eq!(y.to_vec(), vec![11.0, 5.0, 11.0]);
        let loss = y.sum_all().unwrap();
        let g = Tape::backward(&loss).unwrap().wrt(&x).unwrap();
        // index 2 used twice -> gradient 2
        assert_eq!(g.to_vec(), vec![1.0, 0.0, 2.0]);
    }

    #[test]
    fn backward_simple_products() {
        let tape = Tape::<f64>::new();
        let a = Tape::leaf(&tape, &Tensor::from_vec(&[2], vec![2.0, 3.0]).unwrap(), true).unwrap();
        let b = Tape::leaf(&tape, &Tensor::from_vec(&[2], vec![5.0, 7.0]).unwrap(), true).unwrap();
        let loss = a.mul(&b).unwrap().sum_all().unwrap();
        let grads = Tape::backward(&loss).unwrap();
        assert_eq!(grads.wrt(&a).unwrap().to_vec(), vec![5.0, 7.0]);
        assert_eq!(grads.wrt(&b).unwrap().to_vec(), vec![2.0, 3.0]);
    }

    #[test]
    fn backward_broadcast_reduces() {
        let tape = Tape::<f64>::new();
        let a = Tape::leaf(&tape, &Tensor::zeros(&[2, 3]), true).unwrap();
        let bias = Tape::leaf(&tape, &Tensor::zeros(&[3]), true).unwrap();
        let loss = a.add(&bias).unwrap().sum_all().unwrap();
        let grads = Tape::backward(&loss).unwrap();
        assert_eq!(grads.wrt(&bias).unwrap().to_vec(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = crate::SeededRng::new(13);
        let x: Tensor<f64> = rng.normal_tensor(&[4, 4], 0.0, 1.0);
        let y = x.dropout(0.0, &mut rng).unwrap();
        assert!(x.bits_eq(&y));
    }

    #[test]
    fn dropout_scales_kept_values() {
        let mut rng = crate::SeededRng::new(14);
        let x = Tensor::<f64>::full(&[1000], 1.0);
        let y = x.dropout(0.25, &mut rng).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count();
        assert!(y
            .data()
            .iter()
            .all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
        assert!((600..900).contains(&kept));
    }

    #[test]
    fn argmax_rows() {
        let x = Tensor::<f64>::from_vec(&[2, 3], vec![1., 5., 2., 9., 0., 9.]).unwrap();
        assert_eq!(argmax_last(&x), vec![1, 0]);
    }
}
