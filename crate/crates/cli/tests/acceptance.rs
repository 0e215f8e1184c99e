//! Acceptance gate: evaluates the eleven ship criteria sequentially and
//! prints exactly one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails.
//!
//! Budgets are the frozen cost targets for this model family; oracles
//! (dense attention, brute-force masking, finite differences) are
//! implemented here from first principles, independent of the library
//! code they audit.

use std::time::Instant;

use swinlip_core::cost::{cost_report, cost_report_at, param_diff};
use swinlip_core::harness::{
    audit_options, bench_model, gradcheck_model, overfit_model, OverfitOptions,
};
use swinlip_core::model::params::{is_trainable_name, Params};
use swinlip_core::model::store::{load_model, save_model};
use swinlip_core::model::{Model, ModelConfig};
use swinlip_core::stem::Mode;
use swinlip_core::swin::{
    build_shift_mask, cyclic_shift, window_attention, window_partition, window_reverse,
    MASK_VALUE,
};
use swinlip_core::temporal::{init_temporal, temporal_forward, TemporalSpec};
use swinlip_core::tensor::gradcheck::{check_gradients, GradCheckOptions};
use swinlip_core::tensor::io::{load_tensor, save_tensor};
use swinlip_core::{SeededRng, Tensor};

type Outcome = Result<String, String>;

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("parameter budget", c01_parameter_budget),
        ("compute budget", c02_compute_budget),
        ("streaming deltas", c03_streaming_deltas),
        ("stem ablation", c04_stem_ablation),
        ("baseline costs", c05_baseline_costs),
        ("latency ordering", c06_latency_ordering),
        ("attention oracle", c07_attention_oracle),
        ("gradient suite", c08_gradient_suite),
        ("streaming causality", c09_streaming_causality),
        ("trainability", c10_trainability),
        ("round-trip exactness", c11_round_trips),
    ];

    let mut failed = 0usize;
    for (i, (title, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = run();
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => {
                println!("criterion {:>2} PASS ({title}, {secs:.1}s): {detail}", i + 1)
            }
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL ({title}, {secs:.1}s): {detail}", i + 1)
            }
        }
    }

    if failed > 0 {
        println!("acceptance: {failed} of 11 criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all 11 criteria passed");
}

// ---------------------------------------------------------------------------
// helpers

fn er<T>(r: swinlip_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn within_pct(value: f64, target: f64, pct: f64) -> Result<(), String> {
    let dev = 100.0 * (value - target).abs() / target;
    if dev <= pct {
        Ok(())
    } else {
        Err(format!(
            "{value} deviates {dev:.2}% from {target} (allowed {pct}%)"
        ))
    }
}

/// Total trainable elements of a freshly built model.
fn built_trainable(config: &ModelConfig) -> Result<u64, String> {
    let model: Model<f32> = er(Model::build(config))?;
    Ok(model
        .params
        .iter()
        .filter(|(n, _)| is_trainable_name(n))
        .map(|(_, t)| t.numel() as u64)
        .sum())
}

fn check_budget_and_build(
    config: &ModelConfig,
    params_target: f64,
    params_pct: f64,
    macs_target: f64,
    macs_pct: f64,
) -> Result<(u64, u64), String> {
    let report = er(cost_report(config))?;
    let (params, macs) = (report.total_params(), report.total_macs());
    within_pct(params as f64, params_target, params_pct)
        .map_err(|e| format!("params: {e}"))?;
    within_pct(macs as f64, macs_target, macs_pct).map_err(|e| format!("macs: {e}"))?;
    let built = built_trainable(config)?;
    if built != params {
        return Err(format!(
            "built model has {built} trainable parameters, analytic table says {params}"
        ));
    }
    Ok((params, macs))
}

// ---------------------------------------------------------------------------
// criteria 1-5: analytic budgets

fn c01_parameter_budget() -> Outcome {
    let config = ModelConfig::swinlip();
    let report = er(cost_report(&config))?;
    print!("{}", report.table_string());
    let total = report.total_params();
    within_pct(total as f64, 12.46e6, 3.0)?;
    let built = built_trainable(&config)?;
    if built != total {
        return Err(format!(
            "built model has {built} trainable parameters, analytic table says {total}"
        ));
    }
    Ok(format!(
        "trainable parameters {total} within 3% of 12.46M; built model matches the \
         per-module table exactly (breakdown above)"
    ))
}

fn c02_compute_budget() -> Outcome {
    let report = er(cost_report_at(&ModelConfig::swinlip(), 29))?;
    let macs = report.total_macs();
    within_pct(macs as f64, 1.92e9, 5.0)?;
    Ok(format!(
        "{macs} MACs for a 29x88x88x1 clip within 5% of 1.92G (1 MAC = 1 FLOP)"
    ))
}

fn c03_streaming_deltas() -> Outcome {
    let full_cfg = ModelConfig::swinlip();
    let stream_cfg = ModelConfig::streaming();
    let (params, macs) = check_budget_and_build(&stream_cfg, 9.82e6, 3.0, 1.84e9, 5.0)?;

    // the whole saving must sit in temporal-attention rows
    let full = er(cost_report(&full_cfg))?;
    let stream = er(cost_report(&stream_cfg))?;
    let diff = param_diff(&full, &stream);
    let mut delta_sum = 0u64;
    for (name, a, b) in &diff {
        if !(name.starts_with("tmp.") && name.ends_with(".mhsa")) {
            return Err(format!("unexpected row differs: {name} ({a} vs {b})"));
        }
        delta_sum += a - b;
    }
    let total_delta = full.total_params() - stream.total_params();
    if delta_sum != total_delta {
        return Err(format!(
            "attention rows account for {delta_sum} of the {total_delta} saved parameters"
        ));
    }

    // streaming weights are a strict subset of the full model's
    let full_model: Model<f32> = er(Model::build(&full_cfg))?;
    let stream_model: Model<f32> = er(Model::build(&stream_cfg))?;
    for (name, t) in stream_model.params.iter() {
        let full_t = full_model
            .params
            .get(name)
            .map_err(|_| format!("streaming tensor {name} missing from the full model"))?;
        if full_t.shape() != t.shape() {
            return Err(format!("tensor {name} changes shape between variants"));
        }
    }
    if stream_model.params.len() >= full_model.params.len() {
        return Err("streaming store is not a strict subset".to_string());
    }

    Ok(format!(
        "{params} params / {macs} MACs within 3%/5% of 9.82M/1.84G; removing attention \
         saves {total_delta} params, all in temporal-attention rows; streaming weights \
         are a strict subset of the full store"
    ))
}

fn c04_stem_ablation() -> Outcome {
    let (params, macs) = check_budget_and_build(
        &ModelConfig::stem_577(),
        12.47e6,
        3.0,
        2.84e9,
        5.0,
    )?;
    let base = er(cost_report(&ModelConfig::swinlip()))?;
    let wide = er(cost_report(&ModelConfig::stem_577()))?;
    let diff = param_diff(&base, &wide);
    if diff.len() != 1 || diff[0].0 != "stem.conv" {
        let names: Vec<&str> = diff.iter().map(|(n, _, _)| n.as_str()).collect();
        return Err(format!("expected only stem.conv to differ, got {names:?}"));
    }
    Ok(format!(
        "(5,7,7) stride-1 stem gives {params} params / {macs} MACs within 3%/5% of \
         12.47M/2.84G; only the stem convolution row differs from the base model"
    ))
}

fn c05_baseline_costs() -> Outcome {
    let (params, macs) = check_budget_and_build(
        &ModelConfig::resnet18(),
        11.18e6,
        5.0,
        9.2e9,
        10.0,
    )?;
    Ok(format!(
        "residual baseline front-end: {params} params / {macs} MACs for a 29-frame \
         clip, within 5%/10% of 11.18M/9.2G"
    ))
}

// ---------------------------------------------------------------------------
// criterion 6: latency

fn c06_latency_ordering() -> Outcome {
    const T_SWEEP: [usize; 4] = [29, 58, 116, 232];
    const REPS: usize = 5;
    const WARMUP: usize = 2;

    let swin_cfg = ModelConfig::swinlip();
    let res_cfg = ModelConfig::resnet18();
    let mut swin_means = Vec::new();
    let mut res_means = Vec::new();
    for &t in &T_SWEEP {
        let s = er(bench_model::<f32>(&swin_cfg, t, REPS, WARMUP))?;
        println!("  {}", s.summary());
        let r = er(bench_model::<f32>(&res_cfg, t, REPS, WARMUP))?;
        println!("  {}", r.summary());
        if s.mean_ms >= r.mean_ms {
            return Err(format!(
                "not faster at T={t}: {:.1} ms vs baseline {:.1} ms",
                s.mean_ms, r.mean_ms
            ));
        }
        swin_means.push(s.mean_ms);
        res_means.push(r.mean_ms);
    }

    let mut ratios = Vec::new();
    for pair in swin_means.windows(2) {
        let ratio = pair[1] / pair[0];
        if ratio > 2.5 {
            return Err(format!(
                "latency grew {ratio:.2}x when doubling T (allowed 2.5x); means {swin_means:?}"
            ));
        }
        ratios.push(format!("{ratio:.2}"));
    }

    let pairs: Vec<String> = T_SWEEP
        .iter()
        .zip(swin_means.iter().zip(&res_means))
        .map(|(t, (s, r))| format!("T={t}: {s:.0} vs {r:.0} ms"))
        .collect();
    Ok(format!(
        "faster than the baseline at every length ({}); doubling-T growth ratios {} all <= 2.5",
        pairs.join(", "),
        ratios.join(", ")
    ))
}

// ---------------------------------------------------------------------------
// criterion 7: attention oracle

/// Dense multi-head self-attention over `n` tokens, written as plain loops.
/// `weights[i]` are `[c, c]` matrices and `biases[i]` length-`c` vectors for
/// q, k, v, out; `rel` is the `[(2m-1)^2, heads]` bias table for an `m x m`
/// token grid in row-major order.
#[allow(clippy::too_many_arguments)]
fn dense_attention(
    tokens: &[f64],
    n: usize,
    c: usize,
    heads: usize,
    m: usize,
    weights: [&Tensor<f64>; 4],
    biases: [&Tensor<f64>; 4],
    rel: &Tensor<f64>,
) -> Vec<f64> {
    let d = c / heads;
    let project = |wi: usize, tok: usize, out: usize| -> f64 {
        let mut acc = biases[wi].at(&[out]);
        for p in 0..c {
            acc += tokens[tok * c + p] * weights[wi].at(&[p, out]);
        }
        acc
    };
    let mut ctx = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for (j, score) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for dd in 0..d {
                    dot += project(0, i, h * d + dd) * project(1, j, h * d + dd);
                }
                // relative-position bias looked up by 2-D displacement
                let (yi, xi) = (i / m, i % m);
                let (yj, xj) = (j / m, j % m);
                let row = (yi + m - 1 - yj) * (2 * m - 1) + (xi + m - 1 - xj);
                *score = dot / (d as f64).sqrt() + rel.at(&[row, h]);
            }
            let peak = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = scores.iter().map(|&s| (s - peak).exp()).collect();
            let total: f64 = exps.iter().sum();
            for dd in 0..d {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += exps[j] / total * project(2, j, h * d + dd);
                }
                ctx[i * c + h * d + dd] = acc;
            }
        }
    }
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for o in 0..c {
            let mut acc = biases[3].at(&[o]);
            for p in 0..c {
                acc += ctx[i * c + p] * weights[3].at(&[p, o]);
            }
            out[i * c + o] = acc;
        }
    }
    out
}

fn c07_attention_oracle() -> Outcome {
    // (a) whole-grid window, zero shift == dense attention, 20 seeds
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let m = [2, 3, 4][(seed % 3) as usize];
        let heads = [1, 2, 4][((seed / 3) % 3) as usize];
        let d = [4, 8][(seed % 2) as usize];
        let c = heads * d;
        let n = m * m;

        let mut rng = SeededRng::new(0xacce97 + seed);
        let mut p = Params::<f64>::new();
        for part in ["q", "k", "v", "proj"] {
            er(p.init_linear(&mut rng, &format!("a.{part}"), c, c, true))?;
        }
        let side = 2 * m - 1;
        er(p.init_trunc_normal(&mut rng, "a.rel_bias", &[side * side, heads]))?;
        // amplify so the bias visibly shapes the attention pattern
        let big = er(er(p.get("a.rel_bias"))?.scale(40.0))?;
        er(p.set("a.rel_bias", big))?;

        let frames = 2;
        let x: Tensor<f64> = rng.normal_tensor(&[frames, m, m, c], 0.0, 1.0);
        let got = er(window_attention(&p, "a", &x, m, 0, heads))?;

        let weights = [
            er(p.get("a.q.weight"))?,
            er(p.get("a.k.weight"))?,
            er(p.get("a.v.weight"))?,
            er(p.get("a.proj.weight"))?,
        ];
        let biases = [
            er(p.get("a.q.bias"))?,
            er(p.get("a.k.bias"))?,
            er(p.get("a.v.bias"))?,
            er(p.get("a.proj.bias"))?,
        ];
        let rel = er(p.get("a.rel_bias"))?;
        for f in 0..frames {
            let mut tokens = vec![0.0; n * c];
            for i in 0..n {
                for ch in 0..c {
                    tokens[i * c + ch] = x.at(&[f, i / m, i % m, ch]);
                }
            }
            let want = dense_attention(&tokens, n, c, heads, m, weights, biases, rel);
            for i in 0..n {
                for ch in 0..c {
                    let diff = (got.at(&[f, i / m, i % m, ch]) - want[i * c + ch]).abs();
                    worst = worst.max(diff);
                }
            }
        }
        if worst > 1e-5 {
            return Err(format!(
                "windowed attention deviates from the dense oracle by {worst:.2e} at seed {seed}"
            ));
        }
    }

    // (b) shift masks match a brute-force region oracle on every preset
    // geometry (plus extras). A pair of tokens in the same shifted window may
    // attend iff their pre-shift displacement equals their in-window
    // displacement, i.e. the wrap-around did not tear them apart.
    let mut geoms: Vec<(usize, usize, usize, usize)> = vec![
        (6, 6, 3, 1),
        (8, 8, 2, 1),
        (10, 10, 5, 2),
        (12, 12, 4, 2),
    ];
    for config in [
        ModelConfig::swinlip(),
        ModelConfig::streaming(),
        ModelConfig::stem_577(),
        ModelConfig::gradcheck_reduced(),
        ModelConfig::overfit_reduced(),
    ] {
        let (h, w) = config.stem.out_hw(config.height, config.width);
        for plan in er(config.swin_spec().plan(h, w))? {
            if plan.shift > 0 {
                geoms.push((plan.gy, plan.gx, plan.window, plan.shift));
            }
        }
    }
    geoms.sort_unstable();
    geoms.dedup();

    for &(gy, gx, m, shift) in &geoms {
        let mask = er(build_shift_mask::<f64>(gy, gx, m, shift))?;
        let n = m * m;
        let wx_count = gx / m;
        // original grid position feeding shifted position (y, x)
        let src = |y: usize, x: usize| ((y + shift) % gy, (x + shift) % gx);
        for w in 0..(gy / m) * wx_count {
            let (wy, wx) = (w / wx_count, w % wx_count);
            for i in 0..n {
                let (yi, xi) = (wy * m + i / m, wx * m + i % m);
                let (syi, sxi) = src(yi, xi);
                for j in 0..n {
                    let (yj, xj) = (wy * m + j / m, wx * m + j % m);
                    let (syj, sxj) = src(yj, xj);
                    let allowed = (syi as isize - syj as isize == yi as isize - yj as isize)
                        && (sxi as isize - sxj as isize == xi as isize - xj as isize);
                    let got = mask.at(&[w, 0, i, j]);
                    let want = if allowed { 0.0 } else { MASK_VALUE };
                    if got != want {
                        return Err(format!(
                            "mask mismatch at grid {gy}x{gx} window {m} shift {shift}, \
                             window {w}, pair ({i},{j}): got {got}, oracle says {want}"
                        ));
                    }
                }
            }
        }
    }

    Ok(format!(
        "whole-grid windowed attention matches the dense oracle within 1e-5 \
         (worst {worst:.1e} over 20 seeds); shift masks match the brute-force \
         region oracle exactly on {} geometries",
        geoms.len()
    ))
}

// ---------------------------------------------------------------------------
// criterion 8: gradients

fn c08_gradient_suite() -> Outcome {
    let report = er(gradcheck_model(
        &ModelConfig::gradcheck_reduced(),
        audit_options(),
    ))?;
    let worst = report
        .worst()
        .ok_or_else(|| "no tensors were checked".to_string())?
        .clone();
    if !report.pass(1e-4) {
        let offenders: Vec<String> = report
            .tensors
            .iter()
            .filter(|t| t.rel_err >= 1e-4)
            .map(|t| format!("{} ({:.2e})", t.name, t.rel_err))
            .collect();
        return Err(format!("tensors over tolerance: {}", offenders.join(", ")));
    }

    // negative control: a corrupted analytic gradient must be caught
    let x0 = er(Tensor::from_vec(&[3], vec![0.3f64, -0.7, 1.1]))?;
    let corrupted = er(x0.scale(1.5))?; // true gradient of 0.5*|x|^2 is x
    let control = er(check_gradients(
        &[("w".to_string(), x0)],
        &[corrupted],
        |vals: &[Tensor<f64>]| {
            Ok(vals[0].data().iter().map(|v| 0.5 * v * v).sum::<f64>())
        },
        GradCheckOptions::default(),
    ))?;
    if control.pass(1e-4) {
        return Err("corrupted-gradient control was not flagged".to_string());
    }

    Ok(format!(
        "end-to-end finite-difference audit over {} parameter tensors (every layer \
         type in the model): worst {} at {:.2e} < 1e-4; corrupted-gradient control \
         correctly rejected",
        report.tensors.len(),
        worst.name,
        worst.rel_err
    ))
}

// ---------------------------------------------------------------------------
// criterion 9: causality

fn c09_streaming_causality() -> Outcome {
    let spec = TemporalSpec {
        dim: 512,
        heads: 16,
        hidden: 512,
        kernel: 15,
        blocks: 2,
        dropout: 0.0,
        streaming: true,
    };
    let mut rng = SeededRng::new(0xca05);
    let mut p = Params::<f32>::new();
    er(init_temporal(&mut p, &mut rng, "tmp", &spec))?;

    for trial in 0..50usize {
        let t = 6 + trial % 12;
        let split = 1 + (trial * 7) % (t - 1); // frames < split must survive
        let x: Tensor<f32> = rng.normal_tensor(&[t, 512], 0.0, 1.0);
        let y = er(temporal_forward(&p, "tmp", &x, &spec, Mode::Eval, None))?;

        let mut edited = x.to_vec();
        let replacement: Tensor<f32> =
            rng.normal_tensor(&[t - split, 512], 0.0, 1.0);
        edited[split * 512..].copy_from_slice(replacement.data());
        let x2 = er(Tensor::from_vec(&[t, 512], edited))?;
        let y2 = er(temporal_forward(&p, "tmp", &x2, &spec, Mode::Eval, None))?;

        let (a, b) = (y.data(), y2.data());
        for r in 0..split {
            for ch in 0..512 {
                if a[r * 512 + ch].to_bits() != b[r * 512 + ch].to_bits() {
                    return Err(format!(
                        "trial {trial}: editing frames {split}.. changed frame {r}"
                    ));
                }
            }
        }
        // sanity: the edit must reach its own frames
        if a[split * 512..] == b[split * 512..] {
            return Err(format!("trial {trial}: edited frames produced no change"));
        }
    }
    Ok(
        "50 random suffix edits left every earlier frame of the streaming temporal \
         stack bitwise unchanged (and always changed the edited frames)"
            .to_string(),
    )
}

// ---------------------------------------------------------------------------
// criterion 10: trainability

fn c10_trainability() -> Outcome {
    let mut details = Vec::new();
    for streaming in [false, true] {
        let result = er(overfit_model(&OverfitOptions {
            streaming,
            ..OverfitOptions::default()
        }))?;
        let label = if streaming { "streaming" } else { "full" };
        if !(result.reached_target
            && result.accuracy == 1.0
            && result.final_loss < 0.1
            && result.steps <= 200)
        {
            return Err(format!(
                "{label} variant: loss {:.3}, accuracy {:.2} after {} steps",
                result.final_loss, result.accuracy, result.steps
            ));
        }
        details.push(format!(
            "{label}: accuracy 1.00 at loss {:.3} in {} steps",
            result.final_loss, result.steps
        ));
    }
    Ok(format!(
        "both variants memorize the 16-clip synthetic task ({})",
        details.join("; ")
    ))
}

// ---------------------------------------------------------------------------
// criterion 11: round trips

fn c11_round_trips() -> Outcome {
    let mut rng = SeededRng::new(0x1904);

    // cyclic shift / unshift on awkward (non-divisible) extents
    let x: Tensor<f32> = rng.normal_tensor(&[2, 7, 9, 5], 0.0, 1.0);
    let back = er(cyclic_shift(&er(cyclic_shift(&x, -3, -4))?, 3, 4))?;
    if !back.bits_eq(&x) {
        return Err("cyclic shift/unshift is not a bitwise identity".to_string());
    }

    // window partition / reverse
    let grid: Tensor<f32> = rng.normal_tensor(&[3, 8, 8, 16], 0.0, 1.0);
    let windows = er(window_partition(&grid, 4))?;
    let restored = er(window_reverse(&windows, 4, 3, 8, 8))?;
    if !restored.bits_eq(&grid) {
        return Err("window partition/reverse is not a bitwise identity".to_string());
    }

    // checkpoint save / load
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = ModelConfig::overfit_reduced();
    let model: Model<f32> = er(Model::build(&config))?;
    let ckpt = dir.path().join("model.slwz");
    er(save_model(&ckpt, &model))?;
    let loaded: Model<f32> = er(load_model(&ckpt, &config))?;
    if loaded.params.len() != model.params.len() {
        return Err("checkpoint round-trip changed the tensor count".to_string());
    }
    for (name, t) in model.params.iter() {
        if !er(loaded.params.get(name))?.bits_eq(t) {
            return Err(format!("checkpoint round-trip changed tensor {name}"));
        }
    }

    // tensor file write / read at both precisions
    let t32: Tensor<f32> = rng.normal_tensor(&[4, 3, 2], 0.0, 1.0);
    let p32 = dir.path().join("t32.slt");
    er(save_tensor(&p32, &t32))?;
    if !er(load_tensor::<f32>(&p32))?.bits_eq(&t32) {
        return Err("f32 tensor file round-trip is not bitwise".to_string());
    }
    let t64: Tensor<f64> = rng.normal_tensor(&[5, 1, 7], 0.0, 1.0);
    let p64 = dir.path().join("t64.slt");
    er(save_tensor(&p64, &t64))?;
    if !er(load_tensor::<f64>(&p64))?.bits_eq(&t64) {
        return Err("f64 tensor file round-trip is not bitwise".to_string());
    }

    Ok(
        "window partition/reverse, cyclic shift/unshift, checkpoint save/load, and \
         tensor-file write/read are all bitwise identities"
            .to_string(),
    )
}
