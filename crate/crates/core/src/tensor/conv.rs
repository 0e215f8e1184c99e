//! Convolution and pooling operations.
//!
//! Layout is channels-last throughout: activations are `[T, H, W, C]` and
//! kernels are `[Cout, kT, kH, kW, Cin]`. The forward pass lowers each output
//! frame to an im2col matrix and multiplies it against the flattened kernel
//! bank, which keeps the inner loops contiguous; the backward pass rebuilds
//! the same columns and scatter-adds through them.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::matmul::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::tape::{common_tape, Tape, Vjp};
use crate::tensor::Tensor;

/// Stride and zero-padding for a 3-D convolution, in `(t, h, w)` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: (usize, usize, usize),
    pub pad: (usize, usize, usize),
}

fn out_extent(op: &'static str, input: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if s == 0 || k == 0 {
        return Err(Error::InvalidShape {
            op,
            msg: "kernel and stride must be positive".into(),
            shape: vec![input, k, s, p],
        });
    }
    let padded = input + 2 * p;
    if padded < k {
        return Err(Error::InvalidShape {
            op,
            msg: format!("extent {input} with pad {p} smaller than kernel {k}"),
            shape: vec![input],
        });
    }
    Ok((padded - k) / s + 1)
}

struct Conv3dDims {
    t: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    to: usize,
    ho: usize,
    wo: usize,
}

fn conv3d_dims(
    x_shape: &[usize],
    w_shape: &[usize],
    spec: Conv3dSpec,
) -> Result<Conv3dDims> {
    if x_shape.len() != 4 || w_shape.len() != 5 {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            lhs: x_shape.to_vec(),
            rhs: w_shape.to_vec(),
        });
    }
    let (t, h, w, cin) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (cout, kt, kh, kw, wcin) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3], w_shape[4]);
    if cin != wcin {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            lhs: x_shape.to_vec(),
            rhs: w_shape.to_vec(),
        });
    }
    Ok(Conv3dDims {
        t,
        h,
        w,
        cin,
        cout,
        kt,
        kh,
        kw,
        to: out_extent("conv3d", t, kt, spec.stride.0, spec.pad.0)?,
        ho: out_extent("conv3d", h, kh, spec.stride.1, spec.pad.1)?,
        wo: out_extent("conv3d", w, kw, spec.stride.2, spec.pad.2)?,
    })
}

/// Fill `cols` (`[ho*wo, kt*kh*kw*cin]`) for output frame `to_idx`.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    xd: &[S],
    d: &Conv3dDims,
    spec: Conv3dSpec,
    to_idx: usize,
    cols: &mut [S],
) {
    let k_len = d.kt * d.kh * d.kw * d.cin;
    cols.fill(S::zero());
    let t0 = (to_idx * spec.stride.0) as isize - spec.pad.0 as isize;
    let mut pos = 0usize;
    for yo in 0..d.ho {
        let y0 = (yo * spec.stride.1) as isize - spec.pad.1 as isize;
        for xo in 0..d.wo {
            let x0 = (xo * spec.stride.2) as isize - spec.pad.2 as isize;
            let col = &mut cols[pos * k_len..(pos + 1) * k_len];
            let mut ci = 0usize;
            for dt in 0..d.kt {
                let ti = t0 + dt as isize;
                for dy in 0..d.kh {
                    let yi = y0 + dy as isize;
                    for dx in 0..d.kw {
                        let xi = x0 + dx as isize;
                        if ti >= 0
                            && (ti as usize) < d.t
                            && yi >= 0
                            && (yi as usize) < d.h
                            && xi >= 0
                            && (xi as usize) < d.w
                        {
                            let base =
                                ((ti as usize * d.h + yi as usize) * d.w + xi as usize) * d.cin;
                            col[ci..ci + d.cin].copy_from_slice(&xd[base..base + d.cin]);
                        }
                        ci += d.cin;
                    }
                }
            }
            pos += 1;
        }
    }
}

/// Scatter-add `dcols` back into the input gradient for output frame `to_idx`.
#[allow(clippy::too_many_arguments)]
fn col2im_add<S: Scalar>(
    dcols: &[S],
    d: &Conv3dDims,
    spec: Conv3dSpec,
    to_idx: usize,
    dx: &mut [S],
) {
    let k_len = d.kt * d.kh * d.kw * d.cin;
    let t0 = (to_idx * spec.stride.0) as isize - spec.pad.0 as isize;
    let mut pos = 0usize;
    for yo in 0..d.ho {
        let y0 = (yo * spec.stride.1) as isize - spec.pad.1 as isize;
        for xo in 0..d.wo {
            let x0 = (xo * spec.stride.2) as isize - spec.pad.2 as isize;
            let col = &dcols[pos * k_len..(pos + 1) * k_len];
            let mut ci = 0usize;
            for dt in 0..d.kt {
                let ti = t0 + dt as isize;
                for dy in 0..d.kh {
                    let yi = y0 + dy as isize;
                    for dx_ in 0..d.kw {
                        let xi = x0 + dx_ as isize;
                        if ti >= 0
                            && (ti as usize) < d.t
                            && yi >= 0
                            && (yi as usize) < d.h
                            && xi >= 0
                            && (xi as usize) < d.w
                        {
                            let base =
                                ((ti as usize * d.h + yi as usize) * d.w + xi as usize) * d.cin;
                            for c in 0..d.cin {
                                dx[base + c] += col[ci + c];
                            }
                        }
                        ci += d.cin;
                    }
                }
            }
            pos += 1;
        }
    }
}

struct Conv3dVjp<S: Scalar> {
    x_data: Arc<Vec<S>>,
    w_data: Arc<Vec<S>>,
    x_shape: Vec<usize>,
    w_shape: Vec<usize>,
    spec: Conv3dSpec,
    has_bias: bool,
    x_taped: bool,
    w_taped: bool,
    b_taped: bool,
}

impl<S: Scalar> Vjp<S> for Conv3dVjp<S> {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>> {
        let d = conv3d_dims(&self.x_shape, &self.w_shape, self.spec)?;
        let k_len = d.kt * d.kh * d.kw * d.cin;
        let p = d.ho * d.wo;
        let mut dx = if self.x_taped {
            Some(vec![S::zero(); self.x_data.len()])
        } else {
            None
        };
        let mut dw = if self.w_taped {
            Some(vec![S::zero(); self.w_data.len()])
        } else {
            None
        };
        let mut db = if self.b_taped {
            Some(vec![S::zero(); d.cout])
        } else {
            None
        };
        let mut cols = vec![S::zero(); p * k_len];
        let mut dcols = vec![S::zero(); p * k_len];
        for to_idx in 0..d.to {
            let g = &grad[to_idx * p * d.cout..(to_idx + 1) * p * d.cout];
            if dw.is_some() || dx.is_some() {
                im2col(&self.x_data, &d, self.spec, to_idx, &mut cols);
            }
            if let Some(dw) = dw.as_mut() {
                gemm_tn(d.cout, p, k_len, g, &cols, dw);
            }
            if let Some(dx) = dx.as_mut() {
                dcols.fill(S::zero());
                gemm_nn(p, d.cout, k_len, g, &self.w_data, &mut dcols);
                col2im_add(&dcols, &d, self.spec, to_idx, dx);
            }
            if let Some(db) = db.as_mut() {
                for pos in 0..p {
                    for c in 0..d.cout {
                        db[c] += g[pos * d.cout + c];
                    }
                }
            }
        }
        if self.has_bias {
            Ok(vec![dx, dw, db])
        } else {
            Ok(vec![dx, dw])
        }
    }
}

/// 3-D convolution. `x` is `[T, H, W, Cin]`, `weight` is
/// `[Cout, kT, kH, kW, Cin]`; output is `[To, Ho, Wo, Cout]`.
pub fn conv3d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    spec: Conv3dSpec,
) -> Result<Tensor<S>> {
    let d = conv3d_dims(x.shape(), weight.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [d.cout] {
            return Err(Error::InvalidShape {
                op: "conv3d",
                msg: format!("bias must have shape [{}]", d.cout),
                shape: b.shape().to_vec(),
            });
        }
    }
    let k_len = d.kt * d.kh * d.kw * d.cin;
    let p = d.ho * d.wo;
    let mut data = vec![S::zero(); d.to * p * d.cout];
    let mut cols = vec![S::zero(); p * k_len];
    let xd = x.data();
    let wd = weight.data();
    for to_idx in 0..d.to {
        im2col(xd, &d, spec, to_idx, &mut cols);
        let block = &mut data[to_idx * p * d.cout..(to_idx + 1) * p * d.cout];
        gemm_nt(p, k_len, d.cout, &cols, wd, block);
        if let Some(b) = bias {
            let bd = b.data();
            for pos in 0..p {
                for c in 0..d.cout {
                    block[pos * d.cout + c] += bd[c];
                }
            }
        }
    }
    let out = Tensor::from_vec(&[d.to, d.ho, d.wo, d.cout], data)?;
    let mut inputs: Vec<&Tensor<S>> = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    maybe_record_conv(&inputs, "conv3d", out, || {
        Box::new(Conv3dVjp {
            x_data: x.data_arc(),
            w_data: weight.data_arc(),
            x_shape: x.shape().to_vec(),
            w_shape: weight.shape().to_vec(),
            spec,
            has_bias: bias.is_some(),
            x_taped: x.is_on_tape(),
            w_taped: weight.is_on_tape(),
            b_taped: bias.map(|b| b.is_on_tape()).unwrap_or(false),
        })
    })
}

/// Per-frame 2-D convolution: `x` is `[T, H, W, Cin]`, `weight` is
/// `[Cout, kH, kW, Cin]`. Equivalent to [`conv3d`] with a unit time kernel.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<S>> {
    if weight.shape().len() != 4 {
        return Err(Error::InvalidShape {
            op: "conv2d",
            msg: "weight must be [Cout, kH, kW, Cin]".into(),
            shape: weight.shape().to_vec(),
        });
    }
    let ws = weight.shape().to_vec();
    let w5 = weight.reshape(&[ws[0], 1, ws[1], ws[2], ws[3]])?;
    conv3d(
        x,
        &w5,
        bias,
        Conv3dSpec {
            stride: (1, stride.0, stride.1),
            pad: (0, pad.0, pad.1),
        },
    )
}

fn maybe_record_conv<S: Scalar>(
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
// depthwise temporal convolution

struct DwConv1dVjp<S: Scalar> {
    x_data: Arc<Vec<S>>,
    w_data: Arc<Vec<S>>,
    t: usize,
    c: usize,
    k: usize,
    left_pad: usize,
    has_bias: bool,
    x_taped: bool,
    w_taped: bool,
    b_taped: bool,
}

impl<S: Scalar> Vjp<S> for DwConv1dVjp<S> {
    fn name(&self) -> &'static str {
        "dwconv1d"
    }

    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>> {
        let (t, c, k, lp) = (self.t, self.c, self.k, self.left_pad as isize);
        let mut dx = if self.x_taped {
            Some(vec![S::zero(); self.x_data.len()])
        } else {
            None
        };
        let mut dw = if self.w_taped {
            Some(vec![S::zero(); self.w_data.len()])
        } else {
            None
        };
        let mut db = if self.b_taped {
            Some(vec![S::zero(); c])
        } else {
            None
        };
        for ti in 0..t {
            for j in 0..k {
                let src = ti as isize - lp + j as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let src = src as usize;
                for ch in 0..c {
                    let g = grad[ti * c + ch];
                    if let Some(dx) = dx.as_mut() {
                        dx[src * c + ch] += g * self.w_data[ch * k + j];
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[ch * k + j] += g * self.x_data[src * c + ch];
                    }
                }
            }
            if let Some(db) = db.as_mut() {
                for ch in 0..c {
                    db[ch] += grad[ti * c + ch];
                }
            }
        }
        if self.has_bias {
            Ok(vec![dx, dw, db])
        } else {
            Ok(vec![dx, dw])
        }
    }
}

/// Depthwise 1-D convolution along the first axis of a `[T, C]` tensor with
/// per-channel kernels `[C, k]` and zero padding that preserves length.
///
/// With `causal = false` the kernel is centered (`k` must be odd); with
/// `causal = true` all `k-1` pad frames go on the left, so `out[t]` depends
/// only on `in[..=t]`.
pub fn dwconv1d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    causal: bool,
) -> Result<Tensor<S>> {
    if x.shape().len() != 2 || weight.shape().len() != 2 || x.shape()[1] != weight.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "dwconv1d",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let (t, c) = (x.shape()[0], x.shape()[1]);
    let k = weight.shape()[1];
    if !causal && k % 2 == 0 {
        return Err(Error::InvalidShape {
            op: "dwconv1d",
            msg: "centered kernel must be odd".into(),
            shape: weight.shape().to_vec(),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [c] {
            return Err(Error::InvalidShape {
                op: "dwconv1d",
                msg: format!("bias must have shape [{c}]"),
                shape: b.shape().to_vec(),
            });
        }
    }
    let left_pad = if causal { k - 1 } else { (k - 1) / 2 };
    let xd = x.data();
    let wd = weight.data();
    let mut data = vec![S::zero(); t * c];
    for ti in 0..t {
        for j in 0..k {
            let src = ti as isize - left_pad as isize + j as isize;
            if src < 0 || src as usize >= t {
                continue;
            }
            let src = src as usize;
            for ch in 0..c {
                data[ti * c + ch] += wd[ch * k + j] * xd[src * c + ch];
            }
        }
        if let Some(b) = bias {
            let bd = b.data();
            for ch in 0..c {
                data[ti * c + ch] += bd[ch];
            }
        }
    }
    let out = Tensor::from_vec(&[t, c], data)?;
    let mut inputs: Vec<&Tensor<S>> = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    maybe_record_conv(&inputs, "dwconv1d", out, || {
        Box::new(DwConv1dVjp {
            x_data: x.data_arc(),
            w_data: weight.data_arc(),
            t,
            c,
            k,
            left_pad,
            has_bias: bias.is_some(),
            x_taped: x.is_on_tape(),
            w_taped: weight.is_on_tape(),
            b_taped: bias.map(|b| b.is_on_tape()).unwrap_or(false),
        })
    })
}

// ---------------------------------------------------------------------------
// max pooling

struct MaxPool2dVjp {
    argmax: Vec<u32>,
    in_numel: usize,
}

impl<S: Scalar> Vjp<S> for MaxPool2dVjp {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>> {
        let mut dx = vec![S::zero(); self.in_numel];
        for (&idx, &g) in self.argmax.iter().zip(grad) {
            if idx != u32::MAX {
                dx[idx as usize] += g;
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Per-frame spatial max pooling on a `[T, H, W, C]` tensor. Padding
/// positions never win the max.
pub fn maxpool2d<S: Scalar>(
    x: &Tensor<S>,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<S>> {
    if x.shape().len() != 4 {
        return Err(Error::InvalidShape {
            op: "maxpool2d",
            msg: "input must be [T, H, W, C]".into(),
            shape: x.shape().to_vec(),
        });
    }
    let (t, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ho = out_extent("maxpool2d", h, kernel.0, stride.0, pad.0)?;
    let wo = out_extent("maxpool2d", w, kernel.1, stride.1, pad.1)?;
    let xd = x.data();
    let mut data = vec![S::zero(); t * ho * wo * c];
    let mut argmax = vec![u32::MAX; t * ho * wo * c];
    for ti in 0..t {
        for yo in 0..ho {
            let y0 = (yo * stride.0) as isize - pad.0 as isize;
            for xo in 0..wo {
                let x0 = (xo * stride.1) as isize - pad.1 as isize;
                for ch in 0..c {
                    let mut best = S::neg_infinity();
                    let mut best_idx = u32::MAX;
                    for dy in 0..kernel.0 {
                        let yi = y0 + dy as isize;
                        if yi < 0 || yi as usize >= h {
                            continue;
                        }
                        for dx in 0..kernel.1 {
                            let xi = x0 + dx as isize;
                            if xi < 0 || xi as usize >= w {
                                continue;
                            }
                            let idx = ((ti * h + yi as usize) * w + xi as usize) * c + ch;
                            if xd[idx] > best || best_idx == u32::MAX {
                                best = xd[idx];
                                best_idx = idx as u32;
                            }
                        }
                    }
                    let o = ((ti * ho + yo) * wo + xo) * c + ch;
                    data[o] = if best_idx == u32::MAX { S::zero() } else { best };
                    argmax[o] = best_idx;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[t, ho, wo, c], data)?;
    maybe_record_conv(&[x], "maxpool2d", out, move || {
        Box::new(MaxPool2dVjp {
            argmax,
            in_numel: t * h * w * c,
        })
    })
}
