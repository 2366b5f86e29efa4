use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cmtkd_core::quant::design_gaussian_levels;
use cmtkd_train::config::ExperimentConfig;
use cmtkd_train::experiment::{evaluate_checkpoint, run_experiment};
use cmtkd_train::generate::{generate, GeneratorConfig};

#[derive(Parser)]
#[command(name = "cmtkd", version, about = "Multi-teacher distillation of low bit-width networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the networks described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset file or data directory.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write a synthetic dataset (train.cmtd and test.cmtd) into a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        /// Image size as HxW.
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Test images per class (defaults to a quarter of --per-class).
        #[arg(long)]
        test_per_class: Option<usize>,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        /// Pixel noise level (overrides the generator default).
        #[arg(long)]
        noise: Option<f64>,
        /// Largest distractor blend weight (overrides the generator default).
        #[arg(long)]
        distractor: Option<f64>,
    },
    /// Print the MSE-optimal uniform levels for a unit Gaussian.
    DesignLevels {
        #[arg(long)]
        bits: u8,
        /// Quantize max(x, 0) instead of x.
        #[arg(long)]
        half_wave: bool,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    Ok((p(h)?, p(w)?))
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let summary = run_experiment(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Evaluate { checkpoint, data } => {
            let r = evaluate_checkpoint(&checkpoint, &data)?;
            println!("top1_student {}", r.top1_student);
            println!("top5_student {}{}", r.top5_student, if r.top5_trivial { " (fewer than 5 classes)" } else { "" });
            if let (Some(t1), Some(t5)) = (r.top1_combined_teacher, r.top5_combined_teacher) {
                println!("top1_combined_teacher {t1}");
                println!("top5_combined_teacher {t5}");
            }
            println!("matches_recorded {}", r.matches_recorded());
        }
        Command::GenData {
            out,
            classes,
            per_class,
            size: (h, w),
            seed,
            test_per_class,
            channels,
            noise,
            distractor,
        } => {
            let mut g = GeneratorConfig::new(classes, per_class, [h, w], seed);
            g.channels = channels;
            if let Some(t) = test_per_class {
                g.test_per_class = t;
            }
            g.noise = noise.unwrap_or(g.noise);
            g.distractor = distractor.unwrap_or(g.distractor);
            let splits = generate(&g)?;
            splits.save(&out)?;
            println!("wrote {} train and {} test images to {}", splits.train.len(), splits.test.len(), out.display());
        }
        Command::DesignLevels { bits, half_wave } => {
            let l = design_gaussian_levels(bits, half_wave)?;
            let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.9}")).collect::<Vec<_>>().join(" ");
            println!("bits {bits} {}", if half_wave { "half-wave" } else { "full-wave" });
            println!("step {:.9}", l.step);
            println!("levels {}", fmt(&l.levels));
            println!("thresholds {}", fmt(&l.thresholds));
            println!("mse {:.9}", l.mse);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
