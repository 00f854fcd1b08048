//! The five commands, independent of argument parsing.

use std::fs;
use std::path::{Path, PathBuf};

use tcsm_core::data::generate_split;
use tcsm_core::gradcheck::{self, GradcheckReport};
use tcsm_core::metrics::{evaluate, MetricReport, Scores};
use tcsm_core::trainer::{train, EpochRecord, TrainMode, Trainer};

use crate::checkpoint::{load_params, save_params};
use crate::config::RunConfig;
use crate::dataset::{load_split, write_dataset};
use crate::error::{CliError, Result};
use crate::report::{read_sweep, summarize, write_eval, write_summary, write_sweep, MetricsLog, SummaryRow, SweepRow};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CKPT_FINAL: &str = "ckpt_final.tcsm";
pub const CKPT_BEST: &str = "ckpt_best.tcsm";
pub const EVAL_FILE: &str = "eval.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub mode: Option<TrainMode>,
    pub labeled_fraction: Option<f64>,
    pub epochs: Option<usize>,
    pub num_images: Option<usize>,
}

pub fn resolve(config: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = ov.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = &ov.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = &ov.data {
        cfg.data_dir = v.clone();
    }
    if let Some(v) = ov.mode {
        cfg.train.mode = v;
    }
    if let Some(v) = ov.labeled_fraction {
        cfg.labeled_fraction = v;
    }
    if let Some(v) = ov.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = ov.num_images {
        cfg.gen.num_images = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(CliError::io(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateSummary {
    pub labeled: usize,
    pub unlabeled: usize,
    pub validation: usize,
}

/// Writes a generated, split dataset to `dir`.
pub fn cmd_generate(cfg: &RunConfig, dir: &Path) -> Result<GenerateSummary> {
    let ds = generate_split(&cfg.gen, cfg.labeled_fraction, cfg.val_fraction, cfg.split_seed)?;
    mkdir(dir)?;
    write_dataset(dir, &ds)?;
    cfg.write_resolved(dir)?;
    Ok(GenerateSummary {
        labeled: ds.labeled.len(),
        unlabeled: ds.unlabeled.len(),
        validation: ds.validation.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_val: Option<Scores>,
    pub best_epoch: Option<usize>,
}

/// Trains on `cfg.data_dir`, writing the metrics log and checkpoints to
/// `cfg.out_dir`. `ckpt_best` is rewritten whenever validation JA improves.
pub fn cmd_train(cfg: &RunConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainSummary> {
    let ds = load_split(&cfg.data_dir, cfg.labeled_fraction, cfg.val_fraction, cfg.split_seed)?;
    mkdir(&cfg.out_dir)?;
    cfg.write_resolved(&cfg.out_dir)?;
    let mut log = MetricsLog::create(&cfg.out_dir.join(METRICS_FILE))?;
    let mut trainer = Trainer::new(&ds, cfg.net, cfg.train_config())?;
    let mut best: Option<(usize, f64)> = None;
    let mut last = None;
    while !trainer.is_done() {
        let rec = trainer.run_epoch()?;
        log.push(&rec)?;
        if let Some(v) = rec.val {
            if best.is_none_or(|(_, ja)| v.ja > ja) {
                best = Some((rec.epoch, v.ja));
                save_params(&cfg.out_dir.join(CKPT_BEST), trainer.params())?;
            }
        }
        on_epoch(&rec);
        last = Some(rec);
    }
    save_params(&cfg.out_dir.join(CKPT_FINAL), trainer.params())?;
    Ok(TrainSummary {
        epochs: cfg.train.epochs,
        final_val: last.and_then(|r| r.val),
        best_epoch: best.map(|b| b.0),
    })
}

/// Evaluates a checkpoint on the validation pool and writes `eval.csv`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<MetricReport> {
    let params = load_params(checkpoint)?;
    params.check_against(&cfg.net)?;
    let ds = load_split(&cfg.data_dir, cfg.labeled_fraction, cfg.val_fraction, cfg.split_seed)?;
    let report = evaluate(&params, &cfg.net, &ds.validation)?;
    mkdir(&cfg.out_dir)?;
    cfg.write_resolved(&cfg.out_dir)?;
    write_eval(&cfg.out_dir.join(EVAL_FILE), &report)?;
    Ok(report)
}

pub fn cmd_gradcheck(seed: u64, include_corrupted: bool) -> Result<GradcheckReport> {
    Ok(gradcheck::run(seed, include_corrupted)?)
}

/// Runs every missing `(mode, labeled_fraction, seed)` cell, rewriting the
/// sorted table after each one, then writes the summary.
pub fn cmd_sweep(cfg: &RunConfig, mut on_cell: impl FnMut(&SweepRow)) -> Result<Vec<SummaryRow>> {
    mkdir(&cfg.out_dir)?;
    cfg.write_resolved(&cfg.out_dir)?;
    let table = cfg.out_dir.join(SWEEP_FILE);
    let mut rows = if table.exists() { read_sweep(&table)? } else { Vec::new() };
    for &lf in &cfg.sweep_fractions {
        let mut ds = None;
        for &mode in &cfg.sweep_modes {
            for &seed in &cfg.sweep_seeds {
                let probe = SweepRow {
                    mode,
                    labeled_fraction: lf,
                    seed,
                    scores: Scores::default(),
                };
                if rows.iter().any(|r| r.cell() == probe.cell()) {
                    continue;
                }
                if ds.is_none() {
                    ds = Some(load_split(&cfg.data_dir, lf, cfg.val_fraction, cfg.split_seed)?);
                }
                let ds = ds.as_ref().expect("loaded above");
                let mut tc = cfg.train_config();
                tc.mode = mode;
                tc.seed = seed;
                let outcome = train(ds, &cfg.net, &tc)?;
                let report = evaluate(&outcome.params, &cfg.net, &ds.validation)?;
                let row = SweepRow {
                    scores: report.mean,
                    ..probe
                };
                rows.push(row);
                write_sweep(&table, &rows)?;
                on_cell(&row);
            }
        }
    }
    write_sweep(&table, &rows)?;
    let summary = summarize(&rows);
    write_summary(&cfg.out_dir.join(SWEEP_SUMMARY_FILE), &summary)?;
    Ok(summary)
}
