//! `swinlip` — build, inspect, run, benchmark, and sanity-check the visual
//! speech encoders in this workspace.
//!
//! Exit codes: 0 success, 1 numeric failure (tolerances, divergence),
//! 2 configuration problems, 3 I/O or file-format problems.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use swinlip_core::cost::{cost_report, cost_report_at};
use swinlip_core::harness::{
    audit_options, bench_model, gradcheck_model, overfit_model, OverfitOptions,
};
use swinlip_core::model::store::{load_model, save_model};
use swinlip_core::model::{Model, ModelConfig};
use swinlip_core::stem::Mode;
use swinlip_core::tensor::io::{load_tensor, save_tensor};
use swinlip_core::{Error, Result, Scalar, SeededRng, Tensor};

#[derive(Parser)]
#[command(
    name = "swinlip",
    version,
    about = "Visual speech encoder toolkit: describe, forward, bench, gradcheck, overfit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

/// Model selection shared by all subcommands.
#[derive(Args)]
struct ModelArgs {
    /// Built-in preset: swinlip, streaming, stem577, resnet18, gradcheck,
    /// or overfit.
    #[arg(long, default_value = "swinlip", conflicts_with = "config")]
    preset: String,

    /// `key = value` configuration file (unset keys fall back to the
    /// swinlip defaults).
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<ModelConfig> {
        let config = match &self.config {
            Some(path) => ModelConfig::from_file(path)?,
            None => ModelConfig::preset(&self.preset)?,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the per-module parameter and multiply-accumulate budget.
    Describe {
        #[command(flatten)]
        model: ModelArgs,
        /// Cost the model at this clip length instead of the configured one.
        #[arg(long)]
        frames: Option<usize>,
        /// Also write the breakdown as `module,params,macs` CSV to this file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },

    /// Encode one clip `[T, H, W, 1]` into per-frame features `[T, D]`.
    Forward {
        #[command(flatten)]
        model: ModelArgs,
        /// Input tensor file; mutually exclusive with --random-frames.
        #[arg(long, conflicts_with = "random_frames")]
        input: Option<PathBuf>,
        /// Synthesize a random clip with this many frames instead of
        /// reading one.
        #[arg(long)]
        random_frames: Option<usize>,
        /// Write the `[T, D]` features to this tensor file.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Load weights from this checkpoint instead of initializing fresh.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Save the model weights to this checkpoint after the run.
        #[arg(long)]
        save: Option<PathBuf>,
        /// Arithmetic width: f32 or f64.
        #[arg(long, default_value = "f32")]
        precision: String,
    },

    /// Time forward passes over one or more clip lengths.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated clip lengths to time (timed ascending).
        #[arg(long = "t-values", default_value = "29", value_delimiter = ',')]
        t_values: Vec<usize>,
        /// Timed repetitions per clip length (minimum 5).
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Untimed warm-up repetitions per clip length (minimum 2).
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// Also write rows as `model,T,mean_ms,std_ms,reps` CSV to this file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },

    /// Audit analytic gradients against central finite differences (f64).
    Gradcheck {
        /// Preset to audit; the reduced `gradcheck` preset keeps the run
        /// in seconds while touching every layer type.
        #[arg(long, default_value = "gradcheck", conflicts_with = "config")]
        preset: String,
        /// `key = value` configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Maximum relative error allowed before the command fails.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Override the config's seed for weights and probe data.
        #[arg(long)]
        seed: Option<u64>,
        /// Central-difference step.
        #[arg(long)]
        step: Option<f64>,
        /// Coordinates probed per tensor.
        #[arg(long)]
        max_coords: Option<usize>,
        /// Print every tensor's error, not just the worst ones.
        #[arg(long)]
        verbose: bool,
    },

    /// Train the reduced encoder to memorize a tiny synthetic two-class
    /// motion dataset; fails if it cannot.
    Overfit {
        /// Use the streaming (attention-free, causal) temporal variant.
        #[arg(long)]
        streaming: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Step budget.
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Clips per optimizer step; the default sweeps the whole dataset
        /// in a fixed order every step.
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0.02)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        /// Global gradient-norm ceiling.
        #[arg(long, default_value_t = 1.0)]
        clip_norm: f64,
        /// Stop once the mean minibatch loss drops below this.
        #[arg(long, default_value_t = 0.1)]
        target_loss: f64,
        /// Also write the trace as `step,loss,accuracy` CSV to this file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::Tape(_) | Error::Numeric(_) => 1,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Describe { model, frames, csv } => describe(&model, frames, csv.as_deref()),
        Command::Forward {
            model,
            input,
            random_frames,
            output,
            weights,
            save,
            precision,
        } => {
            let config = model.resolve()?;
            let io = ForwardIo {
                input,
                random_frames,
                output,
                weights,
                save,
            };
            match precision.as_str() {
                "f32" => forward::<f32>(&config, &io),
                "f64" => forward::<f64>(&config, &io),
                other => Err(Error::config(format!(
                    "unknown precision `{other}` (expected f32 or f64)"
                ))),
            }
        }
        Command::Bench {
            model,
            t_values,
            reps,
            warmup,
            csv,
        } => bench(&model, t_values, reps, warmup, csv.as_deref()),
        Command::Gradcheck {
            preset,
            config,
            tolerance,
            seed,
            step,
            max_coords,
            verbose,
        } => gradcheck(
            &preset,
            config.as_deref(),
            tolerance,
            seed,
            step,
            max_coords,
            verbose,
        ),
        Command::Overfit {
            streaming,
            seed,
            steps,
            batch,
            lr,
            momentum,
            clip_norm,
            target_loss,
            csv,
        } => overfit(
            OverfitOptions {
                streaming,
                seed,
                max_steps: steps,
                batch,
                learning_rate: lr,
                momentum,
                clip_norm,
                target_loss,
            },
            csv.as_deref(),
        ),
    }
}

fn describe(model: &ModelArgs, frames: Option<usize>, csv: Option<&Path>) -> Result<()> {
    let config = model.resolve()?;
    let report = match frames {
        Some(t) => cost_report_at(&config, t)?,
        None => cost_report(&config)?,
    };
    print!("{}", report.table_string());
    if let Some(path) = csv {
        std::fs::write(path, report.csv_string())?;
        println!("csv written to {}", path.display());
    }
    Ok(())
}

struct ForwardIo {
    input: Option<PathBuf>,
    random_frames: Option<usize>,
    output: Option<PathBuf>,
    weights: Option<PathBuf>,
    save: Option<PathBuf>,
}

fn forward<S: Scalar>(config: &ModelConfig, io: &ForwardIo) -> Result<()> {
    let model: Model<S> = match &io.weights {
        Some(path) => load_model(path, config)?,
        None => Model::build(config)?,
    };

    let x: Tensor<S> = match (&io.input, io.random_frames) {
        (Some(path), _) => load_tensor(path)?,
        (None, frames) => {
            let t = frames.unwrap_or(config.frames);
            let mut rng = SeededRng::new(config.seed ^ 0x5eed);
            rng.normal_tensor(&[t, config.height, config.width, 1], 0.0, 1.0)
        }
    };
    let t0 = std::time::Instant::now();
    let y = model.forward(&x, Mode::Eval, None, None)?;
    let elapsed_ms = t0.elapsed().as_secs_f64() * 1e3;

    let (frames, dim) = (y.shape()[0], y.shape()[1]);
    let data = y.data();
    let mean: f64 = data.iter().map(|&v| v.as_f64()).sum::<f64>() / data.len() as f64;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in data {
        let v = v.as_f64();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    println!(
        "encoded {} frames -> [{frames}, {dim}] features in {elapsed_ms:.1} ms \
         (mean {mean:+.6}, min {lo:+.6}, max {hi:+.6})",
        x.shape()[0]
    );

    if let Some(path) = &io.output {
        save_tensor(path, &y)?;
        println!("features written to {}", path.display());
    }
    if let Some(path) = &io.save {
        save_model(path, &model)?;
        println!("checkpoint written to {}", path.display());
    }
    Ok(())
}

fn bench(
    model: &ModelArgs,
    mut t_values: Vec<usize>,
    reps: usize,
    warmup: usize,
    csv: Option<&Path>,
) -> Result<()> {
    let config = model.resolve()?;
    t_values.sort_unstable();
    t_values.dedup();
    let mut rows = vec!["model,T,mean_ms,std_ms,reps".to_string()];
    for &t in &t_values {
        let result = bench_model::<f32>(&config, t, reps, warmup)?;
        println!("{}", result.summary());
        rows.push(result.csv_row());
    }
    if let Some(path) = csv {
        std::fs::write(path, rows.join("\n") + "\n")?;
        println!("csv written to {}", path.display());
    }
    Ok(())
}

fn gradcheck(
    preset: &str,
    config: Option<&Path>,
    tolerance: f64,
    seed: Option<u64>,
    step: Option<f64>,
    max_coords: Option<usize>,
    verbose: bool,
) -> Result<()> {
    let mut config = match config {
        Some(path) => ModelConfig::from_file(path)?,
        None => ModelConfig::preset(preset)?,
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;

    let mut opts = audit_options();
    if let Some(s) = step {
        opts.step = s;
    }
    if let Some(m) = max_coords {
        opts.max_coords = m;
    }

    let report = gradcheck_model(&config, opts)?;
    if verbose {
        for t in &report.tensors {
            println!(
                "{:<40} rel_err {:>12.3e}  ({} coords)",
                t.name, t.rel_err, t.coords_checked
            );
        }
    }
    let checked = report.tensors.len();
    match report.worst() {
        Some(worst) => println!(
            "checked {checked} tensors; worst {} at rel_err {:.3e}",
            worst.name, worst.rel_err
        ),
        None => println!("checked 0 tensors"),
    }
    if report.pass(tolerance) {
        println!("gradcheck passed (tolerance {tolerance:.1e})");
        Ok(())
    } else {
        let offenders: Vec<String> = report
            .tensors
            .iter()
            .filter(|t| t.rel_err >= tolerance)
            .map(|t| format!("{} ({:.3e})", t.name, t.rel_err))
            .collect();
        Err(Error::Numeric(format!(
            "gradient audit failed at tolerance {tolerance:.1e}: {}",
            offenders.join(", ")
        )))
    }
}

fn overfit(opts: OverfitOptions, csv: Option<&Path>) -> Result<()> {
    let target_loss = opts.target_loss;
    let result = overfit_model(&opts)?;
    let mut rows = vec!["step,loss,accuracy".to_string()];
    for (i, (loss, acc)) in result.losses.iter().zip(&result.accuracies).enumerate() {
        println!("step {:>3}  loss {loss:.4}  accuracy {acc:.2}", i + 1);
        rows.push(format!("{},{loss:.6},{acc:.4}", i + 1));
    }
    println!(
        "finished after {} steps: loss {:.4}, training accuracy {:.2}",
        result.steps, result.final_loss, result.accuracy
    );
    if let Some(path) = csv {
        std::fs::write(path, rows.join("\n") + "\n")?;
        println!("csv written to {}", path.display());
    }
    if result.reached_target && result.accuracy == 1.0 {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "failed to memorize the dataset (loss {:.4} vs target {target_loss}, accuracy {:.2})",
            result.final_loss, result.accuracy
        )))
    }
}
