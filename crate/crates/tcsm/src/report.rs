//! CSV outputs: the per-epoch metrics log, evaluation reports and sweep
//! tables. Floats are written in Rust's shortest round-trip form, so equal
//! runs give byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use tcsm_core::metrics::{MetricReport, Scores};
use tcsm_core::trainer::{EpochRecord, TrainMode};

use crate::config::parse_mode;
use crate::error::{CliError, Result};

pub const METRICS_HEADER: [&str; 12] = [
    "epoch", "iter", "lr", "lambda", "loss_sup", "loss_cons", "loss_total", "val_ja", "val_di", "val_ac", "val_se",
    "val_sp",
];
pub const EVAL_HEADER: [&str; 7] = ["id", "ja", "di", "ac", "se", "sp", "dice"];
pub const SWEEP_HEADER: [&str; 8] = ["mode", "labeled_fraction", "seed", "ja", "di", "ac", "se", "sp"];
pub const SUMMARY_HEADER: [&str; 14] = [
    "mode",
    "labeled_fraction",
    "runs",
    "ja_mean",
    "ja_std",
    "di_mean",
    "di_std",
    "ac_mean",
    "ac_std",
    "se_mean",
    "se_std",
    "sp_mean",
    "sp_std",
    "seeds",
];

fn scores_cols(s: Option<Scores>) -> [String; 5] {
    match s {
        Some(s) => [s.ja, s.di, s.ac, s.se, s.sp].map(|v| v.to_string()),
        None => Default::default(),
    }
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(CliError::csv(path))?;
    w.write_record(header).map_err(CliError::csv(path))?;
    for r in rows {
        w.write_record(&r).map_err(CliError::csv(path))?;
    }
    w.flush().map_err(CliError::io(path))
}

/// Streams one row per epoch.
pub struct MetricsLog {
    writer: csv::Writer<std::fs::File>,
    path: std::path::PathBuf,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path).map_err(CliError::csv(path))?;
        writer.write_record(METRICS_HEADER).map_err(CliError::csv(path))?;
        Ok(MetricsLog {
            writer,
            path: path.to_path_buf(),
        })
    }

    pub fn push(&mut self, r: &EpochRecord) -> Result<()> {
        let mut row = vec![
            r.epoch.to_string(),
            r.iter.to_string(),
            r.lr.to_string(),
            r.lambda.to_string(),
            r.loss_sup.to_string(),
            r.loss_cons.to_string(),
            r.loss_total.to_string(),
        ];
        row.extend(scores_cols(r.val));
        self.writer.write_record(&row).map_err(CliError::csv(&self.path))?;
        self.writer.flush().map_err(CliError::io(&self.path))
    }
}

/// Per-image rows followed by `mean` (of the per-image rows) and `pooled`
/// (from summed confusion counts) summary rows.
pub fn write_eval(path: &Path, report: &MetricReport) -> Result<()> {
    let row = |id: String, s: &Scores| {
        let mut r = vec![id];
        r.extend(scores_cols(Some(*s)));
        r.push(s.di.to_string());
        r
    };
    let mut rows: Vec<Vec<String>> = report
        .ids
        .iter()
        .zip(&report.per_image)
        .map(|(id, s)| row(id.to_string(), s))
        .collect();
    let mut mean = row("mean".into(), &report.mean);
    mean[6] = report.mean_dice.to_string();
    rows.push(mean);
    rows.push(row("pooled".into(), &report.pooled));
    write_rows(path, &EVAL_HEADER, rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub mode: TrainMode,
    pub labeled_fraction: f64,
    pub seed: u64,
    pub scores: Scores,
}

impl SweepRow {
    pub fn cell(&self) -> (TrainMode, u64, u64) {
        (self.mode, self.labeled_fraction.to_bits(), self.seed)
    }
}

fn mode_rank(m: TrainMode) -> usize {
    TrainMode::ALL.iter().position(|&x| x == m).unwrap_or(0)
}

fn sort_rows(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| {
        (mode_rank(a.mode), a.labeled_fraction, a.seed)
            .partial_cmp(&(mode_rank(b.mode), b.labeled_fraction, b.seed))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(CliError::csv(path))?;
    let bad = |msg: String| CliError::Config(format!("{}: {msg}", path.display()));
    if r.headers().map_err(CliError::csv(path))?.iter().collect::<Vec<_>>() != SWEEP_HEADER {
        return Err(bad("unexpected header".into()));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(CliError::csv(path))?;
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(format!("bad number {:?}", &rec[i])));
        rows.push(SweepRow {
            mode: parse_mode(&rec[0]).map_err(bad)?,
            labeled_fraction: num(1)?,
            seed: rec[2].parse().map_err(|_| bad(format!("bad seed {:?}", &rec[2])))?,
            scores: Scores {
                ja: num(3)?,
                di: num(4)?,
                ac: num(5)?,
                se: num(6)?,
                sp: num(7)?,
            },
        });
    }
    Ok(rows)
}

/// Rewrites the whole table, sorted by mode, fraction and seed.
pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut rows = rows.to_vec();
    sort_rows(&mut rows);
    write_rows(
        path,
        &SWEEP_HEADER,
        rows.iter().map(|r| {
            let mut v = vec![r.mode.name().to_string(), r.labeled_fraction.to_string(), r.seed.to_string()];
            v.extend(scores_cols(Some(r.scores)));
            v
        }),
    )
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub mode: TrainMode,
    pub labeled_fraction: f64,
    pub runs: usize,
    /// `(mean, std)` for ja, di, ac, se, sp.
    pub stats: [(f64, f64); 5],
    pub seeds: Vec<u64>,
}

pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(usize, u64), Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((mode_rank(r.mode), r.labeled_fraction.to_bits()))
            .or_default()
            .push(r);
    }
    let mut out: Vec<SummaryRow> = groups
        .into_values()
        .map(|g| {
            let pick = |f: fn(&Scores) -> f64| mean_std(&g.iter().map(|r| f(&r.scores)).collect::<Vec<_>>());
            let mut seeds: Vec<u64> = g.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            SummaryRow {
                mode: g[0].mode,
                labeled_fraction: g[0].labeled_fraction,
                runs: g.len(),
                stats: [pick(|s| s.ja), pick(|s| s.di), pick(|s| s.ac), pick(|s| s.se), pick(|s| s.sp)],
                seeds,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        (mode_rank(a.mode), a.labeled_fraction)
            .partial_cmp(&(mode_rank(b.mode), b.labeled_fraction))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    out
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_rows(
        path,
        &SUMMARY_HEADER,
        rows.iter().map(|s| {
            let mut v = vec![s.mode.name().to_string(), s.labeled_fraction.to_string(), s.runs.to_string()];
            for (m, sd) in s.stats {
                v.push(m.to_string());
                v.push(sd.to_string());
            }
            v.push(s.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" "));
            v
        }),
    )
}
