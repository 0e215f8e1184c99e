//! Analytical parameter and multiply-accumulate accounting.
//!
//! Counting conventions (1 MAC = 1 multiply + 1 accumulate; reported FLOP
//! figures elsewhere treat 1 MAC = 1 FLOP):
//! - convolution: output elements x kernel elements x in-channels / groups
//! - linear: output elements x input features
//! - attention: the four projections as linears, plus 2 x B x heads x N^2 x
//!   head-dim for the score and value contractions (B = window count)
//! - relative-position attention additionally pays (2T-1) x C^2 for the
//!   position projection, T x (2T-1) x C for the position scores, and
//!   T^2 x C each for the content scores and the value contraction
//! - normalization, activations, softmax, bias adds, residual adds, pooling:
//!   0 MACs
//!
//! Parameter counts cover trainable tensors only; batch-norm running
//! statistics are excluded. Row names equal the parameter-name prefixes of
//! the modules they describe, so reports can be cross-checked against a
//! built model tensor by tensor.

use crate::error::Result;
use crate::model::{ModelConfig, ModelKind};
use crate::resnet;
use crate::stem::StemActivation;

pub const CONVENTIONS: &str = "conv: out_elems*k_elems*c_in/groups; linear: out_elems*in_features; \
     attention: projections + 2*B*heads*N^2*head_dim; norms, activations, \
     softmax, bias/residual adds, pooling: 0 MACs; 1 MAC = 1 FLOP as reported; \
     params count trainable tensors only (running statistics excluded)";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    /// Parameter-name prefix of the module this row covers.
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug)]
pub struct CostReport {
    pub label: String,
    pub frames: usize,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    /// Aligned text table with totals and the counting conventions.
    pub fn table_string(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain(["module".len(), "total".len()])
            .max()
            .unwrap_or(6);
        let mut s = String::new();
        s.push_str(&format!(
            "model {}  ({} frames)\n{:<name_w$}  {:>12}  {:>16}\n",
            self.label, self.frames, "module", "params", "macs"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<name_w$}  {:>12}  {:>16}\n",
                r.name, r.params, r.macs
            ));
        }
        s.push_str(&format!(
            "{:<name_w$}  {:>12}  {:>16}\n",
            "total",
            self.total_params(),
            self.total_macs()
        ));
        s.push_str(&format!(
            "({:.2} M params, {:.2} G MACs)\nconventions: {}\n",
            self.total_params() as f64 / 1e6,
            self.total_macs() as f64 / 1e9,
            CONVENTIONS
        ));
        s
    }

    pub fn csv_string(&self) -> String {
        let mut s = String::from("module,params,macs\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.name, r.params, r.macs));
        }
        s.push_str(&format!(
            "total,{},{}\n",
            self.total_params(),
            self.total_macs()
        ));
        s
    }
}

fn conv_out(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

/// Cost of the configured model at its configured clip length.
pub fn cost_report(config: &ModelConfig) -> Result<CostReport> {
    cost_report_at(config, config.frames)
}

/// Cost of the configured model for a `frames`-long clip.
pub fn cost_report_at(config: &ModelConfig, frames: usize) -> Result<CostReport> {
    config.validate()?;
    let mut rows = Vec::new();
    match config.kind {
        ModelKind::SwinLip => swinlip_rows(config, frames, &mut rows),
        ModelKind::ResNet18 => resnet_rows(config, frames, &mut rows)?,
    }
    Ok(CostReport {
        label: label_for(config),
        frames,
        rows,
    })
}

fn label_for(config: &ModelConfig) -> String {
    match config.kind {
        ModelKind::ResNet18 => "resnet18".to_string(),
        ModelKind::SwinLip => {
            let mut l = String::from("swinlip");
            if config.stem.kernel != (3, 5, 5) {
                let k = config.stem.kernel;
                l.push_str(&format!("-stem{}{}{}", k.0, k.1, k.2));
            }
            if config.temporal.streaming {
                l.push_str("-streaming");
            }
            l
        }
    }
}

fn swinlip_rows(config: &ModelConfig, frames: usize, rows: &mut Vec<CostRow>) {
    let stem = &config.stem;
    let c0 = stem.channels as u64;
    let t = conv_out(frames, stem.kernel.0, stem.stride.0, stem.pad.0) as u64;
    let (sh, sw) = stem.out_hw(config.height, config.width);
    let k_elems = (stem.kernel.0 * stem.kernel.1 * stem.kernel.2) as u64;

    rows.push(CostRow {
        name: "stem.conv".into(),
        params: c0 * k_elems,
        macs: t * (sh * sw) as u64 * c0 * k_elems,
    });
    rows.push(CostRow {
        name: "stem.bn".into(),
        params: 2 * c0,
        macs: 0,
    });
    if stem.activation == StemActivation::PRelu {
        rows.push(CostRow {
            name: "stem.act".into(),
            params: c0,
            macs: 0,
        });
    }

    let spec = config.swin_spec();
    let plans = spec.plan(sh, sw).expect("validated");
    let patch_dim = (config.patch * config.patch) as u64 * c0;
    let c1 = plans[0].channels as u64;
    let embed_tokens = t * plans[0].tokens() as u64;
    rows.push(CostRow {
        name: "swin.embed".into(),
        // patch projection with bias, plus its layer norm
        params: patch_dim * c1 + c1 + 2 * c1,
        macs: embed_tokens * c1 * patch_dim,
    });

    for (si, plan) in plans.iter().enumerate() {
        let c = plan.channels as u64;
        let heads = plan.heads as u64;
        let tokens = t * plan.tokens() as u64;
        let n = (plan.window * plan.window) as u64;
        let b = t * plan.windows() as u64;
        let bias_table = (2 * plan.window as u64 - 1).pow(2) * heads;
        for bi in 0..plan.depth {
            // norm1 + q/k/v/proj (each C^2 + C) + rel-bias + norm2 + mlp
            let params = 2 * c
                + 4 * (c * c + c)
                + bias_table
                + 2 * c
                + (c * 4 * c + 4 * c)
                + (4 * c * c + c);
            let macs = 4 * tokens * c * c   // q, k, v, out projections
                + 2 * b * n * n * c          // scores and value contraction
                + 8 * tokens * c * c; // two mlp linears at ratio 4
            rows.push(CostRow {
                name: format!("swin.s{}.b{bi}", si + 1),
                params,
                macs,
            });
        }
        let merge_in = plan.merge_in_dim() as u64;
        let merge_out = plan.out_channels() as u64;
        let merge_tokens = if plan.merge_degenerate {
            tokens
        } else {
            tokens / 4
        };
        rows.push(CostRow {
            name: format!("swin.merge{}", si + 1),
            params: 2 * merge_in + merge_in * merge_out,
            macs: merge_tokens * merge_out * merge_in,
        });
    }

    let tc = config.temporal.dim as u64;
    let hidden = config.temporal.hidden as u64;
    let kernel = config.temporal.kernel as u64;
    for bi in 0..config.temporal.blocks {
        let bp = format!("tmp.b{bi}");
        let ffn_row = |name: String| CostRow {
            name,
            params: 2 * tc + (tc * hidden + hidden) + (hidden * tc + tc),
            macs: t * tc * hidden + t * hidden * tc,
        };
        rows.push(ffn_row(format!("{bp}.ffn1")));
        if !config.temporal.streaming {
            rows.push(CostRow {
                name: format!("{bp}.mhsa"),
                params: 2 * tc + 4 * (tc * tc + tc) + tc * tc + 2 * tc,
                macs: 4 * t * tc * tc            // q, k, v, out projections
                    + (2 * t - 1) * tc * tc       // position projection
                    + t * t * tc                  // content scores
                    + t * (2 * t - 1) * tc        // position scores
                    + t * t * tc, // value contraction
            });
        }
        rows.push(CostRow {
            name: format!("{bp}.conv"),
            params: 2 * tc
                + (tc * 2 * tc + 2 * tc)
                + (tc * kernel + tc)
                + (tc * tc + tc),
            macs: t * 2 * tc * tc + t * tc * kernel + t * tc * tc,
        });
        rows.push(ffn_row(format!("{bp}.ffn2")));
        rows.push(CostRow {
            name: format!("{bp}.final_norm"),
            params: 2 * tc,
            macs: 0,
        });
    }
}

fn resnet_rows(config: &ModelConfig, frames: usize, rows: &mut Vec<CostRow>) -> Result<()> {
    let res = resnet::resolutions(config.height, config.width)?;
    let t = frames as u64;
    // 3-D stem: kernel (5,7,7), stride (1,2,2), pad (2,3,3); temporal extent
    // is preserved
    let conv_h = conv_out(config.height, 7, 2, 3) as u64;
    let conv_w = conv_out(config.width, 7, 2, 3) as u64;
    rows.push(CostRow {
        name: "res.stem".into(),
        params: 64 * 5 * 7 * 7 + 2 * 64,
        macs: t * conv_h * conv_w * 64 * (5 * 7 * 7),
    });
    let mut cin = 64u64;
    for (si, &cout) in resnet::STAGE_CHANNELS.iter().enumerate() {
        let cout = cout as u64;
        let (h, w) = res[si + 1];
        let hw = (h * w) as u64;
        for b in 0..resnet::STAGE_DEPTH {
            let first = b == 0;
            let block_in = if first { cin } else { cout };
            let mut params = cout * 9 * block_in + 2 * cout + cout * 9 * cout + 2 * cout;
            let mut macs = t * hw * cout * 9 * block_in + t * hw * cout * 9 * cout;
            if first && si > 0 {
                params += cout * block_in + 2 * cout;
                macs += t * hw * cout * block_in;
            }
            rows.push(CostRow {
                name: format!("res.l{}.b{b}", si + 1),
                params,
                macs,
            });
        }
        cin = cout;
    }
    Ok(())
}

/// Rows whose parameter counts differ between two reports, as
/// `(name, params_a, params_b)`; a missing row reports 0 on its absent side.
pub fn param_diff(a: &CostReport, b: &CostReport) -> Vec<(String, u64, u64)> {
    let mut out = Vec::new();
    let find = |rows: &[CostRow], name: &str| -> Option<u64> {
        rows.iter().find(|r| r.name == name).map(|r| r.params)
    };
    for r in &a.rows {
        let other = find(&b.rows, &r.name).unwrap_or(0);
        if r.params != other {
            out.push((r.name.clone(), r.params, other));
        }
    }
    for r in &b.rows {
        if find(&a.rows, &r.name).is_none() && r.params != 0 {
            out.push((r.name.clone(), 0, r.params));
        }
    }
    out
}
