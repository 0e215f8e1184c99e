//! Spatio-temporal front-end stem.
//!
//! A single 3-D convolution over the grayscale clip, batch normalization
//! over the channel axis, and a channel-wise activation. The convolution
//! carries no bias because the batch norm immediately recenters its output.
//! Default geometry keeps the spatial resolution (stride 1) so the patch
//! partition downstream sees the full mouth region; the wider `(5,7,7)`
//! variant halves the spatial size with stride `(1,2,2)`.

use crate::error::{Error, Result};
use crate::model::params::Params;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::conv::{conv3d, Conv3dSpec};
use crate::tensor::ops::{batch_norm_eval, batch_norm_train};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Weight on the batch statistic when updating running estimates:
/// `running = (1 - BN_MOMENTUM) * running + BN_MOMENTUM * batch`.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StemActivation {
    PRelu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StemSpec {
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub pad: (usize, usize, usize),
    pub channels: usize,
    pub activation: StemActivation,
}

impl StemSpec {
    /// Default stem: (3,5,5) kernel, unit stride, resolution-preserving pad.
    pub fn default_24() -> StemSpec {
        StemSpec {
            kernel: (3, 5, 5),
            stride: (1, 1, 1),
            pad: (1, 2, 2),
            channels: 24,
            activation: StemActivation::PRelu,
        }
    }

    /// Wider ablation stem: (5,7,7) kernel with spatial stride 2.
    /// Wider 5x7x7 kernel at the same unit stride, so the spatial grid is
    /// preserved and only the kernel cost changes.
    pub fn wide_577() -> StemSpec {
        StemSpec {
            kernel: (5, 7, 7),
            stride: (1, 1, 1),
            pad: (2, 3, 3),
            channels: 24,
            activation: StemActivation::PRelu,
        }
    }

    pub fn conv_spec(&self) -> Conv3dSpec {
        Conv3dSpec {
            stride: self.stride,
            pad: self.pad,
        }
    }

    /// Output spatial size for an input of `h x w`.
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad.1 - self.kernel.1) / self.stride.1 + 1;
        let ow = (w + 2 * self.pad.2 - self.kernel.2) / self.stride.2 + 1;
        (oh, ow)
    }
}

/// Whether the caller is training (batch statistics) or running inference
/// (frozen running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by one batch-norm application during a training
/// forward pass; the training loop folds them into the running estimates.
pub struct BnUpdate<S: Scalar> {
    pub prefix: String,
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
}

/// Apply the running-statistics update rule to `params` in place.
pub fn apply_bn_updates<S: Scalar>(params: &mut Params<S>, updates: &[BnUpdate<S>]) -> Result<()> {
    for u in updates {
        for (stat, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            let name = format!("{}.{stat}", u.prefix);
            let old = params.get(&name)?;
            let new = old.scale(1.0 - BN_MOMENTUM)?.add(&batch.scale(BN_MOMENTUM)?)?;
            params.set(&name, new)?;
        }
    }
    Ok(())
}

/// Shared batch-norm application used by the stem and the residual baseline:
/// channels-last input of any rank.
pub fn batch_norm_p<S: Scalar>(
    params: &Params<S>,
    prefix: &str,
    x: &Tensor<S>,
    mode: Mode,
    updates: Option<&mut Vec<BnUpdate<S>>>,
) -> Result<Tensor<S>> {
    let gamma = params.get(&format!("{prefix}.gamma"))?;
    let beta = params.get(&format!("{prefix}.beta"))?;
    match mode {
        Mode::Eval => batch_norm_eval(
            x,
            gamma,
            beta,
            params.get(&format!("{prefix}.running_mean"))?,
            params.get(&format!("{prefix}.running_var"))?,
            BN_EPS,
        ),
        Mode::Train => {
            let (y, mean, var) = batch_norm_train(x, gamma, beta, BN_EPS)?;
            if let Some(updates) = updates {
                updates.push(BnUpdate {
                    prefix: prefix.to_string(),
                    mean: mean.detach(),
                    var: var.detach(),
                });
            }
            Ok(y)
        }
    }
}

/// Insert stem parameters under `prefix`.
pub fn init_stem<S: Scalar>(
    params: &mut Params<S>,
    rng: &mut SeededRng,
    prefix: &str,
    spec: StemSpec,
) -> Result<()> {
    let (kt, kh, kw) = spec.kernel;
    params.init_trunc_normal(
        rng,
        format!("{prefix}.conv.weight"),
        &[spec.channels, kt, kh, kw, 1],
    )?;
    params.init_batch_norm(&format!("{prefix}.bn"), spec.channels)?;
    if spec.activation == StemActivation::PRelu {
        params.init_full(format!("{prefix}.act.slope"), &[spec.channels], 0.25)?;
    }
    Ok(())
}

/// Run the stem on a `[T, H, W, 1]` clip, producing `[T, H', W', channels]`.
pub fn stem_forward<S: Scalar>(
    params: &Params<S>,
    prefix: &str,
    x: &Tensor<S>,
    spec: StemSpec,
    mode: Mode,
    updates: Option<&mut Vec<BnUpdate<S>>>,
) -> Result<Tensor<S>> {
    if x.shape().len() != 4 || x.shape()[3] != 1 {
        return Err(Error::InvalidShape {
            op: "stem",
            msg: "input must be [T, H, W, 1]".into(),
            shape: x.shape().to_vec(),
        });
    }
    let w = params.get(&format!("{prefix}.conv.weight"))?;
    let y = conv3d(x, w, None, spec.conv_spec())?;
    let y = batch_norm_p(params, &format!("{prefix}.bn"), &y, mode, updates)?;
    match spec.activation {
        StemActivation::PRelu => y.prelu(params.get(&format!("{prefix}.act.slope"))?),
        StemActivation::Relu => y.relu(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(spec: StemSpec) -> (Params<f64>, SeededRng) {
        let mut rng = SeededRng::new(50);
        let mut p = Params::new();
        init_stem(&mut p, &mut rng, "stem", spec).unwrap();
        (p, rng)
    }

    #[test]
    fn default_stem_preserves_resolution() {
        let spec = StemSpec::default_24();
        let (p, mut rng) = build(spec);
        let x: Tensor<f64> = rng.normal_tensor(&[3, 12, 10, 1], 0.0, 1.0);
        let y = stem_forward(&p, "stem", &x, spec, Mode::Eval, None).unwrap();
        assert_eq!(y.shape(), &[3, 12, 10, 24]);
    }

    #[test]
    fn wide_stem_preserves_resolution() {
        let spec = StemSpec::wide_577();
        let (p, mut rng) = build(spec);
        let x: Tensor<f64> = rng.normal_tensor(&[3, 88, 88, 1], 0.0, 1.0);
        let y = stem_forward(&p, "stem", &x, spec, Mode::Eval, None).unwrap();
        assert_eq!(y.shape(), &[3, 88, 88, 24]);
    }

    #[test]
    fn stem_param_count_matches_by_hand() {
        let (p, _) = build(StemSpec::default_24());
        // conv 24*3*5*5*1 = 1800, bn gamma+beta 48, prelu 24, running stats 48
        assert_eq!(p.total_elems(), 1800 + 48 + 24 + 48);
        assert_eq!(p.trainable_elems(), 1800 + 48 + 24);
    }

    #[test]
    fn fresh_running_stats_make_eval_an_identity_normalization() {
        // With running_mean 0 / running_var 1 / gamma 1 / beta 0, eval BN is
        // (numerically) the identity, so stem == prelu(conv(x)).
        let spec = StemSpec::default_24();
        let (p, mut rng) = build(spec);
        let x: Tensor<f64> = rng.normal_tensor(&[2, 8, 8, 1], 0.0, 1.0);
        let w = p.get("stem.conv.weight").unwrap();
        let conv = conv3d(&x, w, None, spec.conv_spec()).unwrap();
        let slope = p.get("stem.act.slope").unwrap();
        let want = conv
            .scale(1.0 / (1.0f64 + BN_EPS).sqrt())
            .unwrap()
            .prelu(slope)
            .unwrap();
        let got = stem_forward(&p, "stem", &x, spec, Mode::Eval, None).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn train_mode_reports_batch_stats_and_update_moves_running() {
        let spec = StemSpec::default_24();
        let (mut p, mut rng) = build(spec);
        let x: Tensor<f64> = rng.normal_tensor(&[2, 8, 8, 1], 3.0, 1.0);
        let mut ups = Vec::new();
        let _ = stem_forward(&p, "stem", &x, spec, Mode::Train, Some(&mut ups)).unwrap();
        assert_eq!(ups.len(), 1);
        apply_bn_updates(&mut p, &ups).unwrap();
        let rm = p.get("stem.bn.running_mean").unwrap();
        // running mean moved 10% of the way toward the batch mean
        for c in 0..24 {
            let want = 0.1 * ups[0].mean.at(&[c]);
            assert!((rm.at(&[c]) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn lookahead_is_at_most_one_frame() {
        // The (3,5,5) kernel with pad 1 sees one future frame: changing
        // frame t+2 must not affect output frame t.
        let spec = StemSpec::default_24();
        let (p, mut rng) = build(spec);
        let x1: Tensor<f64> = rng.normal_tensor(&[5, 6, 6, 1], 0.0, 1.0);
        let mut xv = x1.to_vec();
        for v in xv.iter_mut().skip(3 * 36) {
            *v += 10.0; // frames 3 and 4 perturbed
        }
        let x2 = Tensor::from_vec(&[5, 6, 6, 1], xv).unwrap();
        let y1 = stem_forward(&p, "stem", &x1, spec, Mode::Eval, None).unwrap();
        let y2 = stem_forward(&p, "stem", &x2, spec, Mode::Eval, None).unwrap();
        // frames 0 and 1 depend only on inputs up to t+1 = 2 -> unchanged
        for t in 0..2 {
            for i in 0..36 * 24 {
                let idx = t * 36 * 24 + i;
                assert_eq!(y1.data()[idx], y2.data()[idx]);
            }
        }
    }
}
