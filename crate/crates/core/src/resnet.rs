//! Residual-network baseline front-end.
//!
//! The reference pipeline most lipreading front-ends use: a 3-D stem
//! (5x7x7 convolution, spatial stride 2, batch norm, ReLU, 3x3 max pool)
//! followed by a standard 18-layer residual trunk applied per frame, ending
//! in global average pooling to one 512-wide vector per frame. It exists
//! here as the comparison point for parameter, multiply-accumulate, and
//! latency measurements; it has no temporal module.

use crate::error::{Error, Result};
use crate::model::params::Params;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::stem::{batch_norm_p, BnUpdate, Mode};
use crate::tensor::conv::{conv2d, conv3d, maxpool2d, Conv3dSpec};
use crate::tensor::Tensor;

/// Stage widths of the residual trunk.
pub const STAGE_CHANNELS: [usize; 4] = [64, 128, 256, 512];
/// Basic blocks per stage.
pub const STAGE_DEPTH: usize = 2;
pub const OUT_DIM: usize = 512;

/// Spatial resolution after the stem and after each stage, for an input of
/// `h x w`. Errors if any stage would collapse below 1x1.
pub fn resolutions(h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
    let conv = |n: usize, k: usize, s: usize, p: usize| -> Result<usize> {
        if n + 2 * p < k {
            return Err(Error::config(format!(
                "resnet input too small: extent {n} with kernel {k}, pad {p}"
            )));
        }
        Ok((n + 2 * p - k) / s + 1)
    };
    let mut out = Vec::new();
    // stem convolution (7x7 spatial, stride 2, pad 3), then 3x3/2 max pool
    let (mut hh, mut ww) = (conv(h, 7, 2, 3)?, conv(w, 7, 2, 3)?);
    hh = conv(hh, 3, 2, 1)?;
    ww = conv(ww, 3, 2, 1)?;
    out.push((hh, ww));
    for stage in 0..4 {
        if stage > 0 {
            hh = conv(hh, 3, 2, 1)?;
            ww = conv(ww, 3, 2, 1)?;
        }
        if hh == 0 || ww == 0 {
            return Err(Error::config(format!(
                "resnet stage {} collapses to zero spatial extent",
                stage + 1
            )));
        }
        out.push((hh, ww));
    }
    Ok(out)
}

/// Insert baseline parameters under `prefix`.
pub fn init_resnet<S: Scalar>(
    params: &mut Params<S>,
    rng: &mut SeededRng,
    prefix: &str,
) -> Result<()> {
    let conv_w = |params: &mut Params<S>, rng: &mut SeededRng, name: String, shape: &[usize]| {
        params.init_trunc_normal(rng, name, shape)
    };
    // 3-D stem: 1 -> 64, kernel (5,7,7), no bias (batch norm follows)
    conv_w(params, rng, format!("{prefix}.stem.conv.weight"), &[64, 5, 7, 7, 1])?;
    params.init_batch_norm(&format!("{prefix}.stem.bn"), 64)?;
    let mut cin = 64usize;
    for (si, &cout) in STAGE_CHANNELS.iter().enumerate() {
        for b in 0..STAGE_DEPTH {
            let bp = format!("{prefix}.l{}.b{b}", si + 1);
            let first_in = if b == 0 { cin } else { cout };
            conv_w(params, rng, format!("{bp}.conv1.weight"), &[cout, 3, 3, first_in])?;
            params.init_batch_norm(&format!("{bp}.bn1"), cout)?;
            conv_w(params, rng, format!("{bp}.conv2.weight"), &[cout, 3, 3, cout])?;
            params.init_batch_norm(&format!("{bp}.bn2"), cout)?;
            if b == 0 && (cout != cin || si > 0) {
                conv_w(params, rng, format!("{bp}.ds.conv.weight"), &[cout, 1, 1, cin])?;
                params.init_batch_norm(&format!("{bp}.ds.bn"), cout)?;
            }
        }
        cin = cout;
    }
    Ok(())
}

fn basic_block<S: Scalar>(
    params: &Params<S>,
    bp: &str,
    x: &Tensor<S>,
    stride: usize,
    mode: Mode,
    updates: &mut Option<&mut Vec<BnUpdate<S>>>,
) -> Result<Tensor<S>> {
    let y = conv2d(
        x,
        params.get(&format!("{bp}.conv1.weight"))?,
        None,
        (stride, stride),
        (1, 1),
    )?;
    let y = batch_norm_p(params, &format!("{bp}.bn1"), &y, mode, updates.as_deref_mut())?.relu()?;
    let y = conv2d(
        &y,
        params.get(&format!("{bp}.conv2.weight"))?,
        None,
        (1, 1),
        (1, 1),
    )?;
    let y = batch_norm_p(params, &format!("{bp}.bn2"), &y, mode, updates.as_deref_mut())?;
    let shortcut = if params.contains(&format!("{bp}.ds.conv.weight")) {
        let s = conv2d(
            x,
            params.get(&format!("{bp}.ds.conv.weight"))?,
            None,
            (stride, stride),
            (0, 0),
        )?;
        batch_norm_p(params, &format!("{bp}.ds.bn"), &s, mode, updates.as_deref_mut())?
    } else {
        x.clone()
    };
    y.add(&shortcut)?.relu()
}

/// Run the baseline on `[T, H, W, 1]`, producing `[T, 512]`.
pub fn resnet_forward<S: Scalar>(
    params: &Params<S>,
    prefix: &str,
    x: &Tensor<S>,
    mode: Mode,
    mut updates: Option<&mut Vec<BnUpdate<S>>>,
) -> Result<Tensor<S>> {
    if x.shape().len() != 4 || x.shape()[3] != 1 {
        return Err(Error::InvalidShape {
            op: "resnet_forward",
            msg: "expected [T, H, W, 1]".to_string(),
            shape: x.shape().to_vec(),
        });
    }
    resolutions(x.shape()[1], x.shape()[2])?;
    let spec = Conv3dSpec {
        stride: (1, 2, 2),
        pad: (2, 3, 3),
    };
    let y = conv3d(
        x,
        params.get(&format!("{prefix}.stem.conv.weight"))?,
        None,
        spec,
    )?;
    let y = batch_norm_p(params, &format!("{prefix}.stem.bn"), &y, mode, updates.as_deref_mut())?
        .relu()?;
    // temporal pool extent is 1, so per-frame 2-D pooling is exact
    let mut y = maxpool2d(&y, (3, 3), (2, 2), (1, 1))?;
    for (si, _) in STAGE_CHANNELS.iter().enumerate() {
        for b in 0..STAGE_DEPTH {
            let stride = if b == 0 && si > 0 { 2 } else { 1 };
            let bp = format!("{prefix}.l{}.b{b}", si + 1);
            y = basic_block(params, &bp, &y, stride, mode, &mut updates)?;
        }
    }
    // global average pool over the remaining spatial grid
    y.mean_axes(&[1, 2])
}
