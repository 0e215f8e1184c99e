//! Shifted-window attention hierarchy.
//!
//! Frames arrive from the stem as `[T, H, W, C]` feature maps. A patch
//! partition turns each frame into a token grid; three stages of windowed
//! multi-head self-attention (alternating unshifted and cyclically shifted
//! windows) process the grid, and a patch-merging step after every stage
//! halves the grid while doubling the channels. A final spatial mean pool
//! leaves one feature vector per frame.
//!
//! The structural rearrangements (partition, shift, merge, unfold) are
//! bijections implemented as dedicated tape operations whose backward pass
//! is the inverse rearrangement.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::params::{layer_norm_p, linear, Params};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::tape::{common_tape, Tape, Vjp};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
/// Additive constant masking disallowed attention pairs before softmax.
pub const MASK_VALUE: f64 = -1e4;

// ---------------------------------------------------------------------------
// structural bijections

/// Copy `x` (`[T, gy, gx, C]`) applying `f(out_index) -> in_index` over the
/// flattened grid positions. Both directions of every structural op below
/// reduce to this shape-preserving element copy.
fn copy_by<S: Scalar>(
    data: &[S],
    out_numel: usize,
    mut f: impl FnMut(usize) -> usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); out_numel];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = data[f(i)];
    }
    out
}

struct BijectionVjp<S: Scalar> {
    name: &'static str,
    /// Maps an input-gradient index to the output-gradient index it came
    /// from (the inverse rearrangement).
    inverse: Box<dyn Fn(usize) -> usize + Send>,
    in_numel: usize,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> Vjp<S> for BijectionVjp<S> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>> {
        Ok(vec![Some(copy_by(grad, self.in_numel, &self.inverse))])
    }
}

fn record_bijection<S: Scalar>(
    x: &Tensor<S>,
    name: &'static str,
    out: Tensor<S>,
    inverse: Box<dyn Fn(usize) -> usize + Send>,
) -> Result<Tensor<S>> {
    match common_tape(&[x])? {
        None => Ok(out),
        Some(tape) => {
            let parents = vec![x.node_id()];
            Tape::record(
                &tape,
                name,
                parents,
                Box::new(BijectionVjp {
                    name,
                    inverse,
                    in_numel: x.numel(),
                    _marker: std::marker::PhantomData,
                }),
                out,
            )
        }
    }
}

/// Partition each `[H, W, C]` frame into non-overlapping `p x p` patches:
/// `[T, H, W, C] -> [T, (H/p)*(W/p), p*p*C]`, patch-internal order `(y, x, c)`.
pub fn unfold_patches<S: Scalar>(x: &Tensor<S>, p: usize) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.len() != 4 || p == 0 || s[1] % p != 0 || s[2] % p != 0 {
        return Err(Error::InvalidShape {
            op: "unfold_patches",
            msg: format!("patch size {p} must divide spatial extents"),
            shape: s.to_vec(),
        });
    }
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (gy, gx) = (h / p, w / p);
    let np = gy * gx;
    let plen = p * p * c;
    // out[t, (wy*gx + wx), ((py*p + px)*c + ch)] = x[t, wy*p+py, wx*p+px, ch]
    let fwd = move |o: usize| -> usize {
        let ch = o % c;
        let rest = o / c;
        let px = rest % p;
        let rest = rest / p;
        let py = rest % p;
        let rest = rest / p;
        let wx = rest % gx;
        let rest = rest / gx;
        let wy = rest % gy;
        let ti = rest / gy;
        ((ti * h + wy * p + py) * w + wx * p + px) * c + ch
    };
    let data = copy_by(x.data(), t * np * plen, fwd);
    let out = Tensor::from_vec(&[t, np, plen], data)?;
    let inv = move |i: usize| -> usize {
        let ch = i % c;
        let rest = i / c;
        let xx = rest % w;
        let rest = rest / w;
        let yy = rest % h;
        let ti = rest / h;
        let (wy, py) = (yy / p, yy % p);
        let (wx, px) = (xx / p, xx % p);
        ((ti * gy * gx + wy * gx + wx) * p * p + py * p + px) * c + ch
    };
    record_bijection(x, "unfold_patches", out, Box::new(inv))
}

/// Cyclic roll of the two spatial axes of `[T, gy, gx, C]` by `(dy, dx)`
/// (positive shifts move content toward larger indices, wrapping around).
pub fn cyclic_shift<S: Scalar>(x: &Tensor<S>, dy: isize, dx: isize) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            op: "cyclic_shift",
            msg: "input must be [T, gy, gx, C]".into(),
            shape: s.to_vec(),
        });
    }
    let (gy, gx, c) = (s[1], s[2], s[3]);
    let roll = |v: usize, d: isize, n: usize| -> usize {
        (((v as isize - d).rem_euclid(n as isize)) as usize) % n
    };
    let fwd = move |o: usize| -> usize {
        let ch = o % c;
        let rest = o / c;
        let xx = rest % gx;
        let rest = rest / gx;
        let yy = rest % gy;
        let ti = rest / gy;
        ((ti * gy + roll(yy, dy, gy)) * gx + roll(xx, dx, gx)) * c + ch
    };
    let data = copy_by(x.data(), x.numel(), fwd);
    let out = Tensor::from_vec(s, data)?;
    let inv = move |i: usize| -> usize {
        let ch = i % c;
        let rest = i / c;
        let xx = rest % gx;
        let rest = rest / gx;
        let yy = rest % gy;
        let ti = rest / gy;
        ((ti * gy + roll(yy, -dy, gy)) * gx + roll(xx, -dx, gx)) * c + ch
    };
    record_bijection(x, "cyclic_shift", out, Box::new(inv))
}

/// Group grid tokens into windows: `[T, gy, gx, C] -> [T*nW, m*m, C]` with
/// windows enumerated row-major and tokens row-major within each window.
pub fn window_partition<S: Scalar>(x: &Tensor<S>, m: usize) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.len() != 4 || m == 0 || s[1] % m != 0 || s[2] % m != 0 {
        return Err(Error::InvalidShape {
            op: "window_partition",
            msg: format!("window {m} must divide grid extents"),
            shape: s.to_vec(),
        });
    }
    let (t, gy, gx, c) = (s[0], s[1], s[2], s[3]);
    let (ny, nx) = (gy / m, gx / m);
    let fwd = move |o: usize| -> usize {
        let ch = o % c;
        let rest = o / c;
        let ix = rest % m; // in-window x
        let rest = rest / m;
        let iy = rest % m;
        let rest = rest / m;
        let wx = rest % nx;
        let rest = rest / nx;
        let wy = rest % ny;
        let ti = rest / ny;
        ((ti * gy + wy * m + iy) * gx + wx * m + ix) * c + ch
    };
    let data = copy_by(x.data(), x.numel(), fwd);
    let out = Tensor::from_vec(&[t * ny * nx, m * m, c], data)?;
    let inv = move |i: usize| -> usize {
        let ch = i % c;
        let rest = i / c;
        let xx = rest % gx;
        let rest = rest / gx;
        let yy = rest % gy;
        let ti = rest / gy;
        let (wy, iy) = (yy / m, yy % m);
        let (wx, ix) = (xx / m, xx % m);
        (((ti * ny + wy) * nx + wx) * m * m + iy * m + ix) * c + ch
    };
    record_bijection(x, "window_partition", out, Box::new(inv))
}

/// Inverse of [`window_partition`]: `[T*nW, m*m, C] -> [T, gy, gx, C]`.
pub fn window_reverse<S: Scalar>(
    x: &Tensor<S>,
    m: usize,
    t: usize,
    gy: usize,
    gx: usize,
) -> Result<Tensor<S>> {
    let s = x.shape();
    let (ny, nx) = (gy / m, gx / m);
    if s.len() != 3 || s[0] != t * ny * nx || s[1] != m * m || gy % m != 0 || gx % m != 0 {
        return Err(Error::InvalidShape {
            op: "window_reverse",
            msg: format!("cannot reassemble t={t} gy={gy} gx={gx} m={m}"),
            shape: s.to_vec(),
        });
    }
    let c = s[2];
    let fwd = move |o: usize| -> usize {
        let ch = o % c;
        let rest = o / c;
        let xx = rest % gx;
        let rest = rest / gx;
        let yy = rest % gy;
        let ti = rest / gy;
        let (wy, iy) = (yy / m, yy % m);
        let (wx, ix) = (xx / m, xx % m);
        (((ti * ny + wy) * nx + wx) * m * m + iy * m + ix) * c + ch
    };
    let data = copy_by(x.data(), x.numel(), fwd);
    let out = Tensor::from_vec(&[t, gy, gx, c], data)?;
    let inv = move |i: usize| -> usize {
        let ch = i % c;
        let rest = i / c;
        let ix = rest % m;
        let rest = rest / m;
        let iy = rest % m;
        let rest = rest / m;
        let wx = rest % nx;
        let rest = rest / nx;
        let wy = rest % ny;
        let ti = rest / ny;
        ((ti * gy + wy * m + iy) * gx + wx * m + ix) * c + ch
    };
    record_bijection(x, "window_reverse", out, Box::new(inv))
}

/// Gather the four parity sub-grids and concatenate channels:
/// `[T, gy, gx, C] -> [T, gy/2, gx/2, 4C]` ordered
/// (even-y even-x, odd-y even-x, even-y odd-x, odd-y odd-x).
pub fn merge_concat<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.len() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0 || s[1] == 0 || s[2] == 0 {
        return Err(Error::InvalidShape {
            op: "merge_concat",
            msg: "grid extents must be even".into(),
            shape: s.to_vec(),
        });
    }
    let (t, gy, gx, c) = (s[0], s[1], s[2], s[3]);
    let (hy, hx) = (gy / 2, gx / 2);
    // parity order (dy, dx) of the four concatenated groups
    const PARITY: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];
    let fwd = move |o: usize| -> usize {
        let ch4 = o % (4 * c);
        let rest = o / (4 * c);
        let xx = rest % hx;
        let rest = rest / hx;
        let yy = rest % hy;
        let ti = rest / hy;
        let group = ch4 / c;
        let ch = ch4 % c;
        let (dy, dx) = PARITY[group];
        ((ti * gy + 2 * yy + dy) * gx + 2 * xx + dx) * c + ch
    };
    let data = copy_by(x.data(), x.numel(), fwd);
    let out = Tensor::from_vec(&[t, hy, hx, 4 * c], data)?;
    let inv = move |i: usize| -> usize {
        let ch = i % c;
        let rest = i / c;
        let xx = rest % gx;
        let rest = rest / gx;
        let yy = rest % gy;
        let ti = rest / gy;
        let (dy, dx) = (yy % 2, xx % 2);
        let group = PARITY.iter().position(|&p| p == (dy, dx)).unwrap();
        ((ti * hy + yy / 2) * hx + xx / 2) * (4 * c) + group * c + ch
    };
    record_bijection(x, "merge_concat", out, Box::new(inv))
}

// ---------------------------------------------------------------------------
// attention mask and relative position bias

/// Region labels of the shifted grid. Cells are split at `gy - m` and
/// `gy - shift` per axis; tokens from different regions were not neighbors
/// before the cyclic shift and must not attend to each other.
pub fn shift_region_labels(gy: usize, gx: usize, m: usize, shift: usize) -> Vec<usize> {
    let seg = |v: usize, n: usize| -> usize {
        if v < n - m {
            0
        } else if v < n - shift {
            1
        } else {
            2
        }
    };
    let mut labels = vec![0usize; gy * gx];
    for y in 0..gy {
        for x in 0..gx {
            labels[y * gx + x] = 3 * seg(y, gy) + seg(x, gx);
        }
    }
    labels
}

/// Additive attention mask for shifted windows: `[nW, 1, N, N]` with 0 for
/// allowed pairs and [`MASK_VALUE`] for pairs from different regions.
pub fn build_shift_mask<S: Scalar>(
    gy: usize,
    gx: usize,
    m: usize,
    shift: usize,
) -> Result<Tensor<S>> {
    let labels = shift_region_labels(gy, gx, m, shift);
    let (ny, nx) = (gy / m, gx / m);
    let n = m * m;
    let mut data = vec![S::zero(); ny * nx * n * n];
    for wy in 0..ny {
        for wx in 0..nx {
            let widx = wy * nx + wx;
            for i in 0..n {
                let li = labels[(wy * m + i / m) * gx + wx * m + i % m];
                for j in 0..n {
                    let lj = labels[(wy * m + j / m) * gx + wx * m + j % m];
                    if li != lj {
                        data[(widx * n + i) * n + j] = S::from_lossy(MASK_VALUE);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[ny * nx, 1, n, n], data)
}

/// Flat index into the `(2m-1)^2`-row bias table for token pair `(i, j)`.
pub fn rel_bias_index(m: usize, i: usize, j: usize) -> usize {
    let (yi, xi) = (i / m, i % m);
    let (yj, xj) = (j / m, j % m);
    let dy = yi + m - 1 - yj;
    let dx = xi + m - 1 - xj;
    dy * (2 * m - 1) + dx
}

/// Gathered relative-position bias `[h, N, N]` from the table at `name`
/// (`[(2m-1)^2, h]`).
fn gather_rel_bias<S: Scalar>(
    params: &Params<S>,
    name: &str,
    m: usize,
    heads: usize,
) -> Result<Tensor<S>> {
    let table = params.get(name)?;
    let n = m * m;
    let mut idx = Vec::with_capacity(n * n * heads);
    for i in 0..n {
        for j in 0..n {
            let row = rel_bias_index(m, i, j) as u32;
            for h in 0..heads {
                idx.push(row * heads as u32 + h as u32);
            }
        }
    }
    let gathered = table.take_flat(&Arc::new(idx), &[n, n, heads])?;
    gathered.permute(&[2, 0, 1])
}

// ---------------------------------------------------------------------------
// windowed attention and blocks

/// Multi-head self-attention within (possibly shifted) windows on a token
/// grid `[T, gy, gx, C]`.
#[allow(clippy::too_many_arguments)]
pub fn window_attention<S: Scalar>(
    params: &Params<S>,
    prefix: &str,
    x: &Tensor<S>,
    m: usize,
    shift: usize,
    heads: usize,
) -> Result<Tensor<S>> {
    let s = x.shape().to_vec();
    let (t, gy, gx, c) = (s[0], s[1], s[2], s[3]);
    if c % heads != 0 {
        return Err(Error::InvalidShape {
            op: "window_attention",
            msg: format!("channels {c} not divisible by {heads} heads"),
            shape: s,
        });
    }
    let d = c / heads;
    let n = m * m;

    let shifted = if shift > 0 {
        cyclic_shift(x, -(shift as isize), -(shift as isize))?
    } else {
        x.clone()
    };
    let windows = window_partition(&shifted, m)?; // [B, N, C]
    let b = windows.shape()[0];

    let to_heads = |y: Tensor<S>| -> Result<Tensor<S>> {
        y.reshape(&[b, n, heads, d])?.permute(&[0, 2, 1, 3])
    };
    let q = to_heads(linear(params, &format!("{prefix}.q"), &windows)?)?;
    let k = to_heads(linear(params, &format!("{prefix}.k"), &windows)?)?;
    let v = to_heads(linear(params, &format!("{prefix}.v"), &windows)?)?;

    let mut scores = q.matmul_nt(&k)?.scale(1.0 / (d as f64).sqrt())?; // [B,h,N,N]
    let bias = gather_rel_bias(params, &format!("{prefix}.rel_bias"), m, heads)?;
    scores = scores.add(&bias)?;
    if shift > 0 {
        let mask = build_shift_mask::<S>(gy, gx, m, shift)?; // [nW,1,N,N]
        let nw = mask.shape()[0];
        scores = scores
            .reshape(&[t, nw, heads, n, n])?
            .add(&mask)?
            .reshape(&[b, heads, n, n])?;
    }
    let attn = scores.softmax(3)?;
    let ctx = attn.matmul(&v)?; // [B,h,N,d]
    let merged = ctx.permute(&[0, 2, 1, 3])?.reshape(&[b, n, c])?;
    let projected = linear(params, &format!("{prefix}.proj"), &merged)?;
    let grid = window_reverse(&projected, m, t, gy, gx)?;
    if shift > 0 {
        cyclic_shift(&grid, shift as isize, shift as isize)
    } else {
        Ok(grid)
    }
}

/// One transformer block on the token grid: windowed attention and a 4x MLP,
/// both with pre-norm and residual connections.
fn swin_block<S: Scalar>(
    params: &Params<S>,
    prefix: &str,
    x: &Tensor<S>,
    m: usize,
    shift: usize,
    heads: usize,
) -> Result<Tensor<S>> {
    let normed = layer_norm_p(params, &format!("{prefix}.norm1"), x, LN_EPS)?;
    let attn = window_attention(params, &format!("{prefix}.attn"), &normed, m, shift, heads)?;
    let x = x.add(&attn)?;
    let normed = layer_norm_p(params, &format!("{prefix}.norm2"), &x, LN_EPS)?;
    let h = linear(params, &format!("{prefix}.mlp.fc1"), &normed)?.gelu()?;
    let mlp = linear(params, &format!("{prefix}.mlp.fc2"), &h)?;
    x.add(&mlp)
}

// ---------------------------------------------------------------------------
// stage planning

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub depth: usize,
    pub window: usize,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwinSpec {
    pub patch: usize,
    /// Channels delivered by the stem.
    pub in_channels: usize,
    pub stages: [StageSpec; 3],
}

/// Resolved geometry of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    /// Token grid processed by this stage.
    pub gy: usize,
    pub gx: usize,
    /// Window clamped to the grid.
    pub window: usize,
    /// Shift used by odd blocks (0 when the window covers the grid).
    pub shift: usize,
    /// `true` when the 1x1 grid cannot be spatially merged and the merge
    /// degenerates to a per-token projection C -> 2C.
    pub merge_degenerate: bool,
}

impl StagePlan {
    pub fn tokens(&self) -> usize {
        self.gy * self.gx
    }

    pub fn windows(&self) -> usize {
        (self.gy / self.window) * (self.gx / self.window)
    }

    /// Channels after this stage's merge.
    pub fn out_channels(&self) -> usize {
        2 * self.channels
    }

    pub fn merge_in_dim(&self) -> usize {
        if self.merge_degenerate {
            self.channels
        } else {
            4 * self.channels
        }
    }
}

impl SwinSpec {
    /// Resolve per-stage geometry for a stem output of `h x w` pixels.
    pub fn plan(&self, h: usize, w: usize) -> Result<Vec<StagePlan>> {
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::config(format!(
                "patch size {} must divide stem output {h}x{w}",
                self.patch
            )));
        }
        let (mut gy, mut gx) = (h / self.patch, w / self.patch);
        let mut plans = Vec::with_capacity(3);
        for (i, st) in self.stages.iter().enumerate() {
            if st.channels % st.heads != 0 {
                return Err(Error::config(format!(
                    "stage {} channels {} not divisible by heads {}",
                    i + 1,
                    st.channels,
                    st.heads
                )));
            }
            let window = st.window.min(gy).min(gx);
            if window == 0 || gy % window != 0 || gx % window != 0 {
                return Err(Error::config(format!(
                    "stage {} window {} incompatible with grid {gy}x{gx}",
                    i + 1,
                    st.window
                )));
            }
            let shift = if window < gy.max(gx) { window / 2 } else { 0 };
            let degenerate = gy == 1 && gx == 1;
            if !degenerate && (gy % 2 != 0 || gx % 2 != 0) {
                return Err(Error::config(format!(
                    "stage {} grid {gy}x{gx} cannot be merged",
                    i + 1
                )));
            }
            plans.push(StagePlan {
                channels: st.channels,
                depth: st.depth,
                heads: st.heads,
                gy,
                gx,
                window,
                shift,
                merge_degenerate: degenerate,
            });
            gy = (gy / 2).max(1);
            gx = (gx / 2).max(1);
        }
        for pair in plans.windows(2) {
            if pair[1].channels != 2 * pair[0].channels {
                return Err(Error::config(format!(
                    "stage channels must double: {} then {}",
                    pair[0].channels, pair[1].channels
                )));
            }
        }
        Ok(plans)
    }

    /// Feature width after the final merge.
    pub fn out_dim(&self) -> usize {
        2 * self.stages[2].channels
    }
}

// ---------------------------------------------------------------------------
// init + forward

/// Insert all hierarchy parameters under `prefix` for a stem output of
/// `h x w` pixels.
pub fn init_swin<S: Scalar>(
    params: &mut Params<S>,
    rng: &mut SeededRng,
    prefix: &str,
    spec: &SwinSpec,
    h: usize,
    w: usize,
) -> Result<()> {
    let plans = spec.plan(h, w)?;
    let patch_dim = spec.patch * spec.patch * spec.in_channels;
    params.init_linear(rng, &format!("{prefix}.embed.proj"), patch_dim, plans[0].channels, true)?;
    params.init_layer_norm(&format!("{prefix}.embed.norm"), plans[0].channels)?;
    for (si, plan) in plans.iter().enumerate() {
        let c = plan.channels;
        for bi in 0..plan.depth {
            let bp = format!("{prefix}.s{}.b{}", si + 1, bi);
            params.init_layer_norm(&format!("{bp}.norm1"), c)?;
            for part in ["q", "k", "v", "proj"] {
                params.init_linear(rng, &format!("{bp}.attn.{part}"), c, c, true)?;
            }
            let side = 2 * plan.window - 1;
            params.init_trunc_normal(
                rng,
                format!("{bp}.attn.rel_bias"),
                &[side * side, plan.heads],
            )?;
            params.init_layer_norm(&format!("{bp}.norm2"), c)?;
            params.init_linear(rng, &format!("{bp}.mlp.fc1"), c, 4 * c, true)?;
            params.init_linear(rng, &format!("{bp}.mlp.fc2"), 4 * c, c, true)?;
        }
        let mp = format!("{prefix}.merge{}", si + 1);
        params.init_layer_norm(&format!("{mp}.norm"), plan.merge_in_dim())?;
        params.init_linear(rng, &format!("{mp}.reduce"), plan.merge_in_dim(), 2 * c, false)?;
    }
    Ok(())
}

/// Run the hierarchy on stem features `[T, H, W, Cin]`, returning per-frame
/// vectors `[T, out_dim]`.
pub fn swin_forward<S: Scalar>(
    params: &Params<S>,
    prefix: &str,
    x: &Tensor<S>,
    spec: &SwinSpec,
) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.len() != 4 || s[3] != spec.in_channels {
        return Err(Error::InvalidShape {
            op: "swin_forward",
            msg: format!("expected [T, H, W, {}]", spec.in_channels),
            shape: s.to_vec(),
        });
    }
    let t = s[0];
    let plans = spec.plan(s[1], s[2])?;

    // patch partition + linear embedding
    let tokens = unfold_patches(x, spec.patch)?;
    let embedded = linear(params, &format!("{prefix}.embed.proj"), &tokens)?;
    let embedded = layer_norm_p(params, &format!("{prefix}.embed.norm"), &embedded, LN_EPS)?;
    let mut grid = embedded.reshape(&[t, plans[0].gy, plans[0].gx, plans[0].channels])?;

    for (si, plan) in plans.iter().enumerate() {
        for bi in 0..plan.depth {
            let shift = if bi % 2 == 1 { plan.shift } else { 0 };
            let bp = format!("{prefix}.s{}.b{}", si + 1, bi);
            grid = swin_block(params, &bp, &grid, plan.window, shift, plan.heads)?;
        }
        let mp = format!("{prefix}.merge{}", si + 1);
        let merged_in = if plan.merge_degenerate {
            grid
        } else {
            merge_concat(&grid)?
        };
        let normed = layer_norm_p(params, &format!("{mp}.norm"), &merged_in, LN_EPS)?;
        grid = linear(params, &format!("{mp}.reduce"), &normed)?;
    }

    // spatial mean pool over the remaining grid
    grid.mean_axes(&[1, 2])
}
