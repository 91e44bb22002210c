use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use flowreg::check::{run_checks, CheckOptions};
use flowreg::data::{generate_phantom, write_dataset, Dataset};
use flowreg::metrics::evaluate_set;
use flowreg::tensor::{DType, Real};
use flowreg::train::{evaluate, load_data, load_models, train, translate_dir, Direction, Mode, TrainConfig};

#[derive(Parser)]
#[command(name = "flowreg", version, about = "Unpaired slice-stack translation with invertible flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-domain slice dataset with a manifest.
    Phantom {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        subjects: usize,
        #[arg(long, default_value_t = 10)]
        slices: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a JSON configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Translate every PNG in a directory with a trained checkpoint.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = "A2B")]
        direction: Direction,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted PNGs against same-named references.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "A2B")]
        direction: String,
    },
    /// Run the invariant suites and print a JSON verdict.
    Check {
        #[arg(long)]
        suite: Option<String>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("FLOWREG_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().with_context(|| format!("FLOWREG_THREADS={v:?} is not a number"))?;
    if n == 0 {
        bail!("FLOWREG_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn train_and_evaluate<T: Real>(config: TrainConfig) -> Result<()> {
    let out = config.out.clone();
    let ckpt = train::<T>(config)?;
    println!("checkpoint: {}", ckpt.display());
    let (config, models) = load_models::<T>(&ckpt)?;
    let Dataset { test_a, test_b, .. } = load_data(&config)?;
    if test_a.is_empty() || test_a.len() != test_b.len() {
        return Ok(());
    }
    let ev = evaluate(&models.gens, &test_a, &test_b)?;
    println!(
        "A2B ssim {:.4} psnr {:.2} dB | B2A ssim {:.4} psnr {:.2} dB | copy ssim {:.4}",
        ev.a2b.ssim.mean, ev.a2b.psnr_db.mean, ev.b2a.ssim.mean, ev.b2a.psnr_db.mean, ev.copy_a2b.ssim.mean
    );
    write_json(&out.join("eval.json"), &ev)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Phantom {
            seed,
            subjects,
            slices,
            size,
            out,
        } => {
            let ds: Dataset = generate_phantom(seed, subjects, slices, size)?.into();
            let manifest = write_dataset(&ds, &out)?;
            println!("{}", manifest.display());
        }
        Command::Train { config, mode, seed, out } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            if let Some(data) = cfg.data.as_mut().filter(|d| d.is_relative()) {
                if let Some(base) = config.parent() {
                    *data = base.join(&*data);
                }
            }
            cfg.validate()?;
            match cfg.precision {
                DType::F32 => train_and_evaluate::<f32>(cfg)?,
                DType::F64 => train_and_evaluate::<f64>(cfg)?,
            }
        }
        Command::Translate { ckpt, dir, direction, out } => {
            let n = translate_dir(&ckpt, &dir, direction, &out)?;
            println!("translated {n} images ({direction}) into {}", out.display());
        }
        Command::Evaluate {
            pred,
            reference,
            out,
            direction,
        } => {
            let report = evaluate_set(&pred, &reference, &direction)?;
            write_json(&out, &report)?;
            println!(
                "{} images: mse {:.5} psnr {:.2} dB ssim {:.4}",
                report.images.len(),
                report.mse.mean,
                report.psnr_db.mean,
                report.ssim.mean
            );
        }
        Command::Check { suite, inject_fault } => {
            let report = run_checks(suite.as_deref(), CheckOptions { inject_fault })?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.passed {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
