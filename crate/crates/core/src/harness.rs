//! Runnable experiments behind the command-line interface: wall-clock
//! latency measurement, a finite-difference audit of the whole model's
//! gradients, and a small synthetic overfitting run that exercises the full
//! training loop (tape, optimizer, batch-norm statistics).

use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::params::{linear, Params};
use crate::model::{forward_clip, Model, ModelConfig};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::stem::{apply_bn_updates, BnUpdate, Mode};
use crate::tensor::gradcheck::{check_gradients, CheckReport, GradCheckOptions};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// latency

/// Timing floor: fewer repetitions or warm-ups than this give numbers too
/// noisy to compare.
pub const MIN_REPS: usize = 5;
pub const MIN_WARMUP: usize = 2;

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub label: String,
    pub frames: usize,
    pub reps: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// Free-text hardware / threading note.
    pub machine: String,
}

impl BenchResult {
    pub fn summary(&self) -> String {
        format!(
            "{} @ {} frames: mean {:.1} ms, std {:.1} ms, min {:.1} ms, max {:.1} ms \
             ({} reps, {} warmup, {})",
            self.label,
            self.frames,
            self.mean_ms,
            self.std_ms,
            self.min_ms,
            self.max_ms,
            self.reps,
            self.warmup,
            self.machine
        )
    }

    /// One CSV row matching the header `model,T,mean_ms,std_ms,reps`.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.3},{:.3},{}",
            self.label, self.frames, self.mean_ms, self.std_ms, self.reps
        )
    }
}

fn machine_note() -> String {
    format!(
        "{}-{}, 1 thread",
        std::env::consts::ARCH,
        std::env::consts::OS
    )
}

/// Time inference-mode forward passes of a freshly built model on one
/// random clip of `frames` frames. The repetition and warm-up floors keep
/// the numbers comparable across invocations.
pub fn bench_model<S: Scalar>(
    config: &ModelConfig,
    frames: usize,
    reps: usize,
    warmup: usize,
) -> Result<BenchResult> {
    if reps < MIN_REPS {
        return Err(Error::config(format!(
            "bench needs at least {MIN_REPS} repetitions (got {reps})"
        )));
    }
    if warmup < MIN_WARMUP {
        return Err(Error::config(format!(
            "bench needs at least {MIN_WARMUP} warm-up runs (got {warmup})"
        )));
    }
    let model: Model<S> = Model::build(config)?;
    let mut rng = SeededRng::new(config.seed ^ 0xb13c);
    let x: Tensor<S> = rng.normal_tensor(&[frames, config.height, config.width, 1], 0.0, 1.0);
    for _ in 0..warmup {
        model.forward(&x, Mode::Eval, None, None)?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        let y = model.forward(&x, Mode::Eval, None, None)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        // consume the output so the pass cannot be elided
        let _ = y.at(&[0, 0]);
    }
    let mean = times.iter().sum::<f64>() / reps as f64;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (reps - 1) as f64;
    Ok(BenchResult {
        label: crate::cost::cost_report(config)?.label,
        frames,
        reps,
        warmup,
        mean_ms: mean,
        std_ms: var.sqrt(),
        min_ms: times.iter().fold(f64::INFINITY, |a, &b| a.min(b)),
        max_ms: times.iter().fold(0.0f64, |a, &b| a.max(b)),
        machine: machine_note(),
    })
}

// ---------------------------------------------------------------------------
// gradient audit

/// Scalar loss used by the gradient audit: the model output contracted
/// against a fixed random tensor, which gives every output element a
/// distinct weight.
fn audit_loss<SR: Scalar>(
    params: &Params<SR>,
    config: &ModelConfig,
    x: &Tensor<SR>,
    probe: &Tensor<SR>,
) -> Result<Tensor<SR>> {
    // training-mode forward so the batch-statistics path is differentiated
    let y = forward_clip(params, config, x, Mode::Train, None, None)?;
    y.mul(probe)?.mean_all()
}

/// Options for the whole-model audit: a small step keeps finite differences
/// from straddling the stem activation's kink (batch norm centers its
/// pre-activations at zero), which f64 precision comfortably affords.
pub fn audit_options() -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-6,
        ..GradCheckOptions::default()
    }
}

/// Finite-difference audit of every trainable parameter of the configured
/// model (f64). Returns the per-tensor worst relative errors.
pub fn gradcheck_model(config: &ModelConfig, opts: GradCheckOptions) -> Result<CheckReport> {
    config.validate()?;
    let model: Model<f64> = Model::build(config)?;
    let mut rng = SeededRng::new(config.seed ^ 0x96ad);
    let x: Tensor<f64> =
        rng.normal_tensor(&[config.frames, config.height, config.width, 1], 0.0, 1.0);
    let out_dim = model.output_dim();
    let probe: Tensor<f64> = rng.normal_tensor(&[config.frames, out_dim], 0.0, 1.0);

    // analytic gradients from one taped pass
    let tape = Tape::<f64>::new();
    let taped = model.params.bind_to_tape(&tape)?;
    let loss = audit_loss(&taped, &model.config, &x, &probe)?;
    let grads = Tape::backward(&loss)?;

    let mut names = Vec::new();
    let mut analytic = Vec::new();
    for (name, t) in taped.iter() {
        if !crate::model::params::is_trainable_name(name) {
            continue;
        }
        names.push((name.clone(), t.detach()));
        analytic.push(grads.wrt(t)?);
    }

    let base = model.params.clone();
    let config = model.config.clone();
    check_gradients(
        &names,
        &analytic,
        |values: &[Tensor<f64>]| {
            let mut p = base.clone();
            for ((name, _), v) in names.iter().zip(values) {
                p.set(name, v.clone())?;
            }
            Ok(audit_loss(&p, &config, &x, &probe)?.item()?)
        },
        opts,
    )
}

// ---------------------------------------------------------------------------
// synthetic overfit

#[derive(Clone, Debug)]
pub struct OverfitOptions {
    pub streaming: bool,
    pub seed: u64,
    pub max_steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub target_loss: f64,
}

impl Default for OverfitOptions {
    fn default() -> Self {
        OverfitOptions {
            streaming: false,
            seed: 0,
            max_steps: 200,
            batch: 8,
            learning_rate: 0.02,
            momentum: 0.9,
            clip_norm: 1.0,
            target_loss: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OverfitResult {
    pub steps: usize,
    pub final_loss: f64,
    pub accuracy: f64,
    pub reached_target: bool,
    /// Mean minibatch loss per step.
    pub losses: Vec<f64>,
    /// Full-dataset inference-mode accuracy after each step.
    pub accuracies: Vec<f64>,
}

pub const OVERFIT_CLIPS: usize = 16;
pub const OVERFIT_CLASSES: usize = 2;

/// Synthetic two-class motion dataset: class 0 shows a bright bar sweeping
/// horizontally, class 1 vertically, over per-clip Gaussian noise.
pub fn synthetic_clips(
    rng: &mut SeededRng,
    n: usize,
    t: usize,
    h: usize,
    w: usize,
) -> Vec<(Tensor<f32>, usize)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % OVERFIT_CLASSES;
        let noise: Tensor<f32> = rng.normal_tensor(&[t, h, w, 1], 0.0, 0.2);
        let mut data = noise.to_vec();
        let stride_frac = |frame: usize, extent: usize| -> (usize, usize) {
            let pos = (frame * extent) / t.max(1);
            (pos, (pos + extent / 8).min(extent))
        };
        for f in 0..t {
            match class {
                0 => {
                    let (x0, x1) = stride_frac(f, w);
                    for y in 0..h {
                        for x in x0..x1 {
                            data[(f * h + y) * w + x] += 1.0;
                        }
                    }
                }
                _ => {
                    let (y0, y1) = stride_frac(f, h);
                    for y in y0..y1 {
                        for x in 0..w {
                            data[(f * h + y) * w + x] += 1.0;
                        }
                    }
                }
            }
        }
        out.push((Tensor::from_vec(&[t, h, w, 1], data).unwrap(), class));
    }
    out
}

fn class_logits<S: Scalar>(
    params: &Params<S>,
    config: &ModelConfig,
    x: &Tensor<S>,
    mode: Mode,
    updates: Option<&mut Vec<BnUpdate<S>>>,
) -> Result<Tensor<S>> {
    let y = forward_clip(params, config, x, mode, updates, None)?;
    let pooled = y.mean_axes(&[0])?.reshape(&[1, config.temporal.dim])?;
    linear(params, "head", &pooled) // [1, classes]
}

fn cross_entropy<S: Scalar>(logits: &Tensor<S>, class: usize) -> Result<Tensor<S>> {
    let logp = logits.log_softmax(1)?;
    let idx = std::sync::Arc::new(vec![class as u32]);
    logp.take_flat(&idx, &[1])?.mean_all()?.neg()
}

/// Drive the reduced model to memorize the synthetic dataset. Exercises the
/// full loop: taped forward/backward, SGD with momentum, and running-stat
/// updates.
pub fn overfit_model(opts: &OverfitOptions) -> Result<OverfitResult> {
    let mut config = ModelConfig::overfit_reduced();
    config.temporal.streaming = opts.streaming;
    config.seed = opts.seed;
    config.validate()?;

    let model: Model<f32> = Model::build(&config)?;
    let mut params = model.params;
    let mut rng = SeededRng::new(opts.seed ^ 0x0f17);
    params.init_linear(&mut rng, "head", config.temporal.dim, OVERFIT_CLASSES, true)?;

    let clips = synthetic_clips(
        &mut rng,
        OVERFIT_CLIPS,
        config.frames,
        config.height,
        config.width,
    );

    let mut velocity: Vec<(String, Vec<f32>)> = params
        .iter()
        .filter(|(n, _)| crate::model::params::is_trainable_name(n))
        .map(|(n, t)| (n.clone(), vec![0.0f32; t.numel()]))
        .collect();

    let mut losses = Vec::new();
    let mut accuracies = Vec::new();
    let mut reached = false;
    let mut steps = 0;
    'train: for step in 0..opts.max_steps {
        let tape = Tape::<f32>::new();
        let taped = params.bind_to_tape(&tape)?;
        let mut updates = Vec::new();
        let mut batch_loss: Option<Tensor<f32>> = None;
        for i in 0..opts.batch {
            let (clip, class) = &clips[(step * opts.batch + i) % clips.len()];
            let logits = class_logits(&taped, &config, clip, Mode::Train, Some(&mut updates))?;
            let ce = cross_entropy(&logits, *class)?;
            batch_loss = Some(match batch_loss {
                Some(acc) => acc.add(&ce)?,
                None => ce,
            });
        }
        let loss = batch_loss.expect("batch >= 1").scale(1.0 / opts.batch as f64)?;
        let loss_value = loss.item()? as f64;
        losses.push(loss_value);
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at step {step}: loss {loss_value}"
            )));
        }

        let grads = Tape::backward(&loss)?;
        // global-norm clipping keeps early steps stable
        let mut sq_norm = 0.0f64;
        for (name, _) in velocity.iter() {
            let g = grads.wrt(taped.get(name)?)?;
            sq_norm += g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        }
        let norm = sq_norm.sqrt();
        let clip_scale = if norm > opts.clip_norm {
            (opts.clip_norm / norm) as f32
        } else {
            1.0
        };
        for (name, vel) in velocity.iter_mut() {
            let g = grads.wrt(taped.get(name)?)?;
            let w = params.get(name)?;
            let mut new_w = w.to_vec();
            for ((wv, vv), gv) in new_w.iter_mut().zip(vel.iter_mut()).zip(g.data()) {
                *vv = opts.momentum as f32 * *vv + clip_scale * *gv;
                *wv -= opts.learning_rate as f32 * *vv;
            }
            params.set(name, Tensor::from_vec(w.shape(), new_w)?)?;
        }
        apply_bn_updates(&mut params, &updates)?;
        steps = step + 1;
        accuracies.push(dataset_accuracy(&params, &config, &clips)?);

        if loss_value < opts.target_loss {
            reached = true;
            break 'train;
        }
    }

    Ok(OverfitResult {
        steps,
        final_loss: *losses.last().unwrap_or(&f64::NAN),
        accuracy: *accuracies.last().unwrap_or(&0.0),
        reached_target: reached,
        losses,
        accuracies,
    })
}

/// Inference-mode accuracy over the whole dataset.
fn dataset_accuracy(
    params: &Params<f32>,
    config: &ModelConfig,
    clips: &[(Tensor<f32>, usize)],
) -> Result<f64> {
    let mut correct = 0usize;
    for (clip, class) in clips {
        let logits = class_logits(params, config, clip, Mode::Eval, None)?;
        let pred = crate::tensor::ops::argmax_last(&logits)[0];
        if pred == *class {
            correct += 1;
        }
    }
    Ok(correct as f64 / clips.len() as f64)
}
