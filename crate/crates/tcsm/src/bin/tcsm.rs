use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tcsm::commands::{self, Overrides};
use tcsm::config::parse_mode;
use tcsm::CliError;
use tcsm_core::metrics::Scores;
use tcsm_core::trainer::TrainMode;

#[derive(Parser)]
#[command(name = "tcsm", version, about = "Transformation-consistent semi-supervised segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// key = value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (the dataset directory for `generate`)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// supervised, supervised_plus_reg or semi
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<TrainMode>,
    #[arg(long, global = true)]
    labeled_fraction: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    num_images: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and split a synthetic dataset
    Generate,
    /// Train one model
    Train,
    /// Evaluate a checkpoint on the validation pool
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of every differentiable operation
    Gradcheck {
        /// Append an operation with a deliberately wrong backward rule
        #[arg(long, hide = true)]
        corrupt_fixture: bool,
    },
    /// Train and evaluate every (mode, labeled fraction, seed) cell
    Sweep {
        /// Comma-separated seeds
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated modes
        #[arg(long)]
        modes: Option<String>,
        /// Comma-separated labeled fractions
        #[arg(long)]
        fractions: Option<String>,
    },
}

fn fmt_scores(s: &Scores) -> String {
    format!("ja={:.4} di={:.4} ac={:.4} se={:.4} sp={:.4}", s.ja, s.di, s.ac, s.se, s.sp)
}

fn run(cli: Cli) -> Result<i32, CliError> {
    let c = cli.common;
    let ov = Overrides {
        seed: c.seed,
        out: c.out.clone(),
        data: c.data,
        mode: c.mode,
        labeled_fraction: c.labeled_fraction,
        epochs: c.epochs,
        num_images: c.num_images,
    };
    match cli.command {
        Command::Generate => {
            let mut cfg = commands::resolve(c.config.as_deref(), &ov)?;
            if let Some(out) = c.out {
                cfg.data_dir = out;
            }
            let s = commands::cmd_generate(&cfg, &cfg.data_dir)?;
            println!(
                "{}: {} labeled, {} unlabeled, {} validation ({}x{})",
                cfg.data_dir.display(),
                s.labeled,
                s.unlabeled,
                s.validation,
                cfg.gen.image_size,
                cfg.gen.image_size
            );
        }
        Command::Train => {
            let cfg = commands::resolve(c.config.as_deref(), &ov)?;
            let s = commands::cmd_train(&cfg, |r| {
                let val = r.val.as_ref().map_or(String::new(), fmt_scores);
                println!(
                    "epoch {:>3} iter {:>5} lr {:.5} lambda {:.4} loss {:.5} (sup {:.5} cons {:.5}) {val}",
                    r.epoch, r.iter, r.lr, r.lambda, r.loss_total, r.loss_sup, r.loss_cons
                );
            })?;
            if let Some(v) = s.final_val {
                println!("final {}", fmt_scores(&v));
            }
            if let Some(e) = s.best_epoch {
                println!("best epoch {e}");
            }
        }
        Command::Eval { checkpoint } => {
            let cfg = commands::resolve(c.config.as_deref(), &ov)?;
            let r = commands::cmd_eval(&cfg, &checkpoint)?;
            println!("mean   {} dice_per_case={:.4}", fmt_scores(&r.mean), r.mean_dice);
            println!("pooled {}", fmt_scores(&r.pooled));
        }
        Command::Gradcheck { corrupt_fixture } => {
            let report = commands::cmd_gradcheck(c.seed.unwrap_or(0), corrupt_fixture)?;
            for op in &report.checks {
                println!(
                    "{:<20} {:>5} coords  max rel err {:.3e}  tol {:.0e}  {}",
                    op.name,
                    op.coords,
                    op.max_rel_error,
                    op.tolerance,
                    if op.passed() { "ok" } else { "FAIL" }
                );
            }
            if !report.passed() {
                eprintln!("gradient check failed");
                return Ok(2);
            }
        }
        Command::Sweep { seeds, modes, fractions } => {
            let mut cfg = commands::resolve(c.config.as_deref(), &ov)?;
            for (key, v) in [("sweep_seeds", seeds), ("sweep_modes", modes), ("sweep_fractions", fractions)] {
                if let Some(v) = v {
                    cfg.set(key, &v).map_err(|e| CliError::Usage(format!("--{}: {e}", &key[6..])))?;
                }
            }
            cfg.validate()?;
            let summary = commands::cmd_sweep(&cfg, |r| {
                println!("{} lf={} seed={} {}", r.mode.name(), r.labeled_fraction, r.seed, fmt_scores(&r.scores));
            })?;
            for s in summary {
                println!(
                    "{:<20} lf={:<5} runs={} ja={:.4}±{:.4}",
                    s.mode.name(),
                    s.labeled_fraction,
                    s.runs,
                    s.stats[0].0,
                    s.stats[0].1
                );
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
