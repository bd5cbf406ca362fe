//! `irsoftmax`: train, evaluate, gradient-check and run the imbalance study.
//!
//! Exit status: 0 on success, 1 on other failures (I/O, failed gradient
//! check), 2 on configuration errors, 3 on numeric failure during training.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use irsoftmax::config::ExperimentConfig;
use irsoftmax::experiment::{self, TOY_IMBALANCE_CONFIG};
use irsoftmax::gradcheck::{gradcheck, GradcheckOptions};
use irsoftmax::train::EpochRecord;
use irsoftmax::Error;

#[derive(Parser)]
#[command(name = "irsoftmax", version, about = "Deep-embedding loss lab: train, eval, gradcheck, toy-imbalance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress per-epoch progress.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train per config and write all run artifacts.
    Train(Common),
    /// Re-evaluate the checkpoint in the output directory.
    Eval(Common),
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Only check losses whose name contains this string.
        #[arg(long)]
        losses: Option<String>,
        #[arg(long, default_value_t = 100)]
        points: usize,
        /// Failure injection: offset added to each analytic gradient.
        #[arg(long, default_value_t = 0.0, hide = true)]
        perturb: f64,
    },
    /// Softmax vs IR-Softmax on balanced and imbalanced data.
    ToyImbalance(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } => 3,
        _ => 1,
    }
}

fn load(common: &Common, fallback: Option<&str>) -> Result<ExperimentConfig, Error> {
    let mut cfg = match (&common.config, fallback) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(text)) => {
            let overrides = std::env::vars().filter(|(k, _)| k.starts_with(irsoftmax::config::ENV_PREFIX));
            ExperimentConfig::parse(text, overrides, std::path::Path::new("."))?
        }
        (None, None) => return Err(Error::Config("--config is required".into())),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.eval.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress(quiet: bool) -> impl FnMut(&EpochRecord) {
    move |r: &EpochRecord| {
        if !quiet {
            let worst = r.weight_center_gaps.values().copied().fold(0.0, f64::max);
            eprintln!("{} epoch {:>3}  loss {:.6}  max gap {:.4}", r.phase, r.epoch, r.mean_loss, worst);
        }
    }
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load(&common, None)?;
            let out = experiment::run(&cfg, progress(common.quiet))?;
            experiment::write_run(&cfg.eval.out_dir, &cfg, &out)?;
            println!("accuracy {:.4}", out.report.accuracy);
            println!("artifacts in {}", cfg.eval.out_dir.display());
            Ok(true)
        }
        Command::Eval(common) => {
            let cfg = load(&common, None)?;
            let report = experiment::eval_checkpoint(&cfg.eval.out_dir, &cfg)?;
            println!("accuracy {:.4}  mAP {:.4}", report.accuracy, report.map);
            for op in &report.vr_at_far {
                println!("VR@FAR {:<8} {:.4}", op.far_target, op.rate);
            }
            for op in &report.dir_at_far {
                println!("DIR@FAR {:<7} {:.4}", op.far_target, op.rate);
            }
            Ok(true)
        }
        Command::Gradcheck {
            common,
            losses,
            points,
            perturb,
        } => {
            let opts = GradcheckOptions {
                seed: common.seed.unwrap_or(0),
                points,
                filter: losses,
                perturb,
                ..Default::default()
            };
            let report = gradcheck(&opts)?;
            for c in &report.checks {
                println!(
                    "{:<22} {:>4} points  max rel error {:.3e}  {}",
                    c.name,
                    c.points,
                    c.max_rel_error,
                    if c.passed { "ok" } else { "FAIL" }
                );
            }
            Ok(report.passed())
        }
        Command::ToyImbalance(common) => {
            let cfg = load(&common, Some(TOY_IMBALANCE_CONFIG))?;
            let quiet = common.quiet;
            let s = experiment::toy_imbalance(&cfg, Some(&cfg.eval.out_dir), |name, r| {
                if !quiet {
                    eprintln!("{name}: accuracy {:.4}", r.accuracy);
                }
            })?;
            let verdict = |ok: bool| if ok { "yes" } else { "no" };
            println!("minority class {}", s.minority_class);
            println!(
                "softmax gap {:.4} rad, recall {:.4}",
                s.softmax_minority_gap, s.softmax_minority_recall
            );
            println!("ir gap      {:.4} rad, recall {:.4}", s.ir_minority_gap, s.ir_minority_recall);
            println!("softmax gap >= 2x ir gap: {}", verdict(s.gap_ratio_ok));
            println!("ir gap <= 0.15 rad:       {}", verdict(s.ir_gap_ok));
            println!("ir recall >= softmax:     {}", verdict(s.recall_ok));
            println!("artifacts in {}", cfg.eval.out_dir.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
