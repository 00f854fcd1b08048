//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; unknown keys and repeated keys
//! are errors. Command-line flags are applied on top of the file, and every
//! command writes the fully resolved configuration next to its outputs.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tcsm_core::data::GenSpec;
use tcsm_core::losses::{default_rampup_epochs, RampUpSchedule};
use tcsm_core::segnet::SegNetConfig;
use tcsm_core::trainer::{CePass, TrainConfig, TrainMode};
use tcsm_core::transforms::SamplingSet;

use crate::error::{CliError, Result};

pub const RESOLVED_FILE: &str = "config.resolved.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub gen: GenSpec,
    pub labeled_fraction: f64,
    pub val_fraction: f64,
    pub split_seed: u64,
    pub net: SegNetConfig,
    pub train: TrainConfig,
    /// `None` follows the epoch count.
    pub rampup_epochs: Option<usize>,
    pub sweep_seeds: Vec<u64>,
    pub sweep_modes: Vec<TrainMode>,
    pub sweep_fractions: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            gen: GenSpec::default(),
            labeled_fraction: 0.1,
            val_fraction: 0.1,
            split_seed: 0,
            net: SegNetConfig::default(),
            train: TrainConfig::default(),
            rampup_epochs: None,
            sweep_seeds: vec![0, 1, 2],
            sweep_modes: vec![TrainMode::Supervised, TrainMode::Semi],
            sweep_fractions: vec![0.1],
        }
    }
}

fn parse<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| format!("bad value {value:?}: {e}"))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("bad boolean {value:?}")),
    }
}

fn parse_list<T>(value: &str, item: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(item)
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err("empty list".into());
    }
    Ok(items)
}

pub fn parse_mode(value: &str) -> Result<TrainMode, String> {
    TrainMode::parse(value).ok_or_else(|| format!("unknown mode {value:?} (supervised, supervised_plus_reg, semi)"))
}

fn ce_pass_name(p: CePass) -> &'static str {
    match p {
        CePass::A => "a",
        CePass::B => "b",
    }
}

fn set_name(s: SamplingSet) -> &'static str {
    match s {
        SamplingSet::FlipAndRotations => "flip_rot",
        SamplingSet::Full => "full",
        SamplingSet::IdentityOnly => "identity",
    }
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key; the error names the problem without the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "num_images" => self.gen.num_images = parse(value)?,
            "image_size" => self.gen.image_size = parse(value)?,
            "min_shapes" => self.gen.min_shapes = parse(value)?,
            "max_shapes" => self.gen.max_shapes = parse(value)?,
            "fg_mean" => self.gen.fg_mean = parse(value)?,
            "fg_std" => self.gen.fg_std = parse(value)?,
            "bg_mean" => self.gen.bg_mean = parse(value)?,
            "bg_std" => self.gen.bg_std = parse(value)?,
            "texture_sigma" => self.gen.noise_sigma = parse(value)?,
            "distractors" => self.gen.distractors = parse(value)?,
            "data_seed" => self.gen.seed = parse(value)?,
            "labeled_fraction" => self.labeled_fraction = parse(value)?,
            "val_fraction" => self.val_fraction = parse(value)?,
            "split_seed" => self.split_seed = parse(value)?,
            "in_channels" => self.net.in_channels = parse(value)?,
            "base_channels" => self.net.base_channels = parse(value)?,
            "depth" => self.net.depth = parse(value)?,
            "num_classes" => self.net.num_classes = parse(value)?,
            "dropout_rate" => self.net.dropout_rate = parse(value)?,
            "kernel_size" => self.net.kernel_size = parse(value)?,
            "seed" => self.train.seed = parse(value)?,
            "epochs" => self.train.epochs = parse(value)?,
            "batch_size" => self.train.batch_size = parse(value)?,
            "labeled_per_batch" => self.train.labeled_per_batch = parse(value)?,
            "lr0" => self.train.lr0 = parse(value)?,
            "momentum" => self.train.momentum = parse(value)?,
            "lr_power" => self.train.lr_power = parse(value)?,
            "input_noise_sigma" => self.train.noise_sigma = parse(value)?,
            "consistency_weight" => self.train.schedule.k = parse(value)?,
            "rampup_epochs" => {
                self.rampup_epochs = if value == "auto" { None } else { Some(parse(value)?) };
            }
            "mode" => self.train.mode = parse_mode(value)?,
            "ce_pass" => {
                self.train.ce_pass = match value {
                    "a" => CePass::A,
                    "b" => CePass::B,
                    _ => return Err(format!("bad ce_pass {value:?} (a, b)")),
                }
            }
            "transform_set" => {
                self.train.transform_set = match value {
                    "flip_rot" => SamplingSet::FlipAndRotations,
                    "full" => SamplingSet::Full,
                    "identity" => SamplingSet::IdentityOnly,
                    _ => return Err(format!("bad transform_set {value:?} (flip_rot, full, identity)")),
                }
            }
            "augment" => self.train.augment = parse_bool(value)?,
            "sweep_seeds" => self.sweep_seeds = parse_list(value, parse)?,
            "sweep_modes" => self.sweep_modes = parse_list(value, parse_mode)?,
            "sweep_fractions" => self.sweep_fractions = parse_list(value, parse)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let g = &self.gen;
        let n = &self.net;
        let t = &self.train;
        vec![
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("num_images", g.num_images.to_string()),
            ("image_size", g.image_size.to_string()),
            ("min_shapes", g.min_shapes.to_string()),
            ("max_shapes", g.max_shapes.to_string()),
            ("fg_mean", g.fg_mean.to_string()),
            ("fg_std", g.fg_std.to_string()),
            ("bg_mean", g.bg_mean.to_string()),
            ("bg_std", g.bg_std.to_string()),
            ("texture_sigma", g.noise_sigma.to_string()),
            ("distractors", g.distractors.to_string()),
            ("data_seed", g.seed.to_string()),
            ("labeled_fraction", self.labeled_fraction.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("split_seed", self.split_seed.to_string()),
            ("in_channels", n.in_channels.to_string()),
            ("base_channels", n.base_channels.to_string()),
            ("depth", n.depth.to_string()),
            ("num_classes", n.num_classes.to_string()),
            ("dropout_rate", n.dropout_rate.to_string()),
            ("kernel_size", n.kernel_size.to_string()),
            ("seed", t.seed.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("labeled_per_batch", t.labeled_per_batch.to_string()),
            ("lr0", t.lr0.to_string()),
            ("momentum", t.momentum.to_string()),
            ("lr_power", t.lr_power.to_string()),
            ("input_noise_sigma", t.noise_sigma.to_string()),
            ("consistency_weight", t.schedule.k.to_string()),
            ("rampup_epochs", self.rampup_epochs.map_or("auto".into(), |e| e.to_string())),
            ("mode", t.mode.name().to_string()),
            ("ce_pass", ce_pass_name(t.ce_pass).to_string()),
            ("transform_set", set_name(t.transform_set).to_string()),
            ("augment", t.augment.to_string()),
            ("sweep_seeds", join(&self.sweep_seeds, u64::to_string)),
            ("sweep_modes", join(&self.sweep_modes, |m| m.name().to_string())),
            ("sweep_fractions", join(&self.sweep_fractions, f64::to_string)),
        ]
    }

    /// Applies the lines of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| CliError::ConfigLine { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let key = key.trim();
            if seen.iter().any(|k| k == key) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            self.set(key, value).map_err(|m| err(format!("{key}: {m}")))?;
            seen.push(key.to_string());
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_FILE);
        fs::write(&path, self.to_text()).map_err(CliError::io(&path))
    }

    /// Training settings with the ramp-up horizon filled in.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train;
        t.schedule = RampUpSchedule {
            k: t.schedule.k,
            rampup_epochs: self.rampup_epochs.unwrap_or_else(|| default_rampup_epochs(t.epochs)),
        };
        t
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.net.validate()?;
        self.train_config().validate()?;
        tcsm_core::data::split_sizes(self.gen.num_images, self.labeled_fraction, self.val_fraction)?;
        if self.sweep_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(CliError::Config("sweep_fractions must lie in (0, 1]".into()));
        }
        Ok(())
    }
}
