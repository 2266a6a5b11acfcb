use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use picanet::pipeline::bench::{bench_attend_pool, BenchConfig};
use picanet::pipeline::checkpoint;
use picanet::pipeline::config::load_config;
use picanet::pipeline::data::{synth_dataset, DatasetManifest};
use picanet::pipeline::gradsuite::{run_suite, EPS, MODEL_EPS};
use picanet::pipeline::train::{train, Precision, FINAL_CHECKPOINT, LOG_FILE};
use picanet::pipeline::{evaluate, infer};
use picanet::{DType, Error, Scalar};

#[derive(Parser)]
#[command(
    name = "picanet",
    version,
    about = "Pixel-wise contextual attention saliency network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file with [model] and [train] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train a model; writes the CSV log and checkpoints into --out.
    Train {
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint; prints the metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write metrics.json, per_image.csv and pr_curve.svg here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict one image and dump attention maps for chosen pixels.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pixel `y,x` in image coordinates; repeatable.
        #[arg(long = "pixel", value_parser = parse_pixel)]
        pixels: Vec<(usize, usize)>,
    },
    /// Time batched attention pooling against the per-pixel loop.
    Bench {
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 30)]
        trials: usize,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference check of every registered gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Only run checks whose name contains this.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
}

fn parse_pixel(s: &str) -> Result<(usize, usize), String> {
    let (y, x) = s.split_once(',').ok_or("expected y,x")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(y)?, p(x)?))
}

fn run_train<T: Scalar>(
    data: &Path,
    out: &Path,
    run: &picanet::pipeline::RunConfig,
) -> anyhow::Result<()> {
    let manifest = DatasetManifest::load(data)?;
    let samples = manifest.load_samples::<T>()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.toml"), run.to_toml()?).context("writing config.toml")?;
    let outcome = train::<T>(&run.train, &run.model, &samples, Some(out))?;
    let last = outcome.log.last();
    println!(
        "trained {} steps on {} images; final loss {}; log {}; checkpoint {}",
        run.train.steps,
        samples.len(),
        last.map_or("n/a".into(), |r| format!("{:.5}", r.total)),
        out.join(LOG_FILE).display(),
        out.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn run_eval<T: Scalar>(ckpt: &Path, data: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let (model, _) = checkpoint::load::<T>(ckpt)?;
    let samples = DatasetManifest::load(data)?.load_samples::<T>()?;
    let report = evaluate(&model, &samples)?;
    if let Some(dir) = out {
        report.write(dir)?;
    }
    println!("{}", report.to_json());
    Ok(())
}

fn run_infer<T: Scalar>(
    ckpt: &Path,
    image: &Path,
    out: &Path,
    pixels: &[(usize, usize)],
) -> anyhow::Result<()> {
    let (model, _) = checkpoint::load::<T>(ckpt)?;
    let result = infer(&model, image, out, pixels)?;
    println!("{}", result.saliency.display());
    for (png, txt) in &result.attention {
        println!("{} {}", png.display(), txt.display());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            out,
            count,
            size,
            seed,
            split,
        } => {
            let m = synth_dataset(&out, &split, seed, count, size)?;
            println!("wrote {} pairs to {}", m.len(), out.display());
        }
        Command::Train { data, out, cfg } => {
            let run = load_config(cfg.config.as_deref(), &cfg.overrides)?;
            match run.train.precision {
                Precision::F32 => run_train::<f32>(&data, &out, &run)?,
                Precision::F64 => run_train::<f64>(&data, &out, &run)?,
            }
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            out,
        } => match checkpoint::stored_dtype(&ckpt)? {
            DType::F32 => run_eval::<f32>(&ckpt, &data, out.as_deref())?,
            DType::F64 => run_eval::<f64>(&ckpt, &data, out.as_deref())?,
        },
        Command::Infer {
            checkpoint: ckpt,
            image,
            out,
            pixels,
        } => match checkpoint::stored_dtype(&ckpt)? {
            DType::F32 => run_infer::<f32>(&ckpt, &image, &out, &pixels)?,
            DType::F64 => run_infer::<f64>(&ckpt, &image, &out, &pixels)?,
        },
        Command::Bench {
            warmup,
            trials,
            json,
        } => {
            let report = bench_attend_pool(BenchConfig {
                warmup,
                trials,
                ..BenchConfig::default()
            })?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{}", report.summary());
            }
        }
        Command::Gradcheck {
            seeds,
            filter,
            tolerance,
        } => {
            let results = run_suite(seeds, filter.as_deref())?;
            let mut failed = Vec::new();
            for r in &results {
                let ok = r.max_error < tolerance;
                println!(
                    "{:<16} seeds {:>3}  max rel err {:.3e}  {:>6.2}s  {}",
                    r.name,
                    r.seeds,
                    r.max_error,
                    r.seconds,
                    if ok { "ok" } else { "FAIL" }
                );
                if !ok {
                    failed.push(r.name.clone());
                }
            }
            println!("eps {EPS:e} (whole model {MODEL_EPS:e}), tolerance {tolerance:e}");
            if !failed.is_empty() {
                anyhow::bail!("gradient check failed for {}", failed.join(", "));
            }
        }
    }
    Ok(())
}

/// 2 for configuration problems, 3 for a diverged loss, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NanLoss { .. }) => 3,
        Some(Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
