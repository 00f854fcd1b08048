//! A small UNet-style encoder/decoder producing per-pixel class
//! probabilities.
//!
//! Each encoder level is two `conv -> relu` blocks followed by 2x2 max
//! pooling; the bottleneck is two more blocks; each decoder level upsamples,
//! concatenates the matching encoder activation and applies two blocks.
//! Dropout sits before the final 1x1 convolution, and Gaussian noise is
//! added to the input; both are active only in [`Mode::Train`].

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{RngStream, StreamKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of down/up-sampling levels.
    pub depth: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub kernel_size: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            in_channels: 1,
            base_channels: 8,
            depth: 2,
            num_classes: 2,
            dropout_rate: 0.3,
            kernel_size: 3,
        }
    }
}

/// One convolution of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::invalid("depth must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::invalid(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by `2^depth`.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let unit = 1usize << self.depth;
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return Err(Error::shape(
                "segnet",
                format!("input {h}x{w} is not divisible by 2^depth = {unit}"),
            ));
        }
        if (h >> self.depth) < 1 {
            return Err(Error::shape("segnet", "input too small for depth"));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Every convolution in forward order.
    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        let k = self.kernel_size;
        let spec = |name: String, cin, cout, kernel| ConvSpec {
            name,
            in_channels: cin,
            out_channels: cout,
            kernel,
        };
        let mut specs = Vec::new();
        let mut cin = self.in_channels;
        for l in 0..self.depth {
            specs.push(spec(format!("enc{l}.conv1"), cin, self.width(l), k));
            specs.push(spec(format!("enc{l}.conv2"), self.width(l), self.width(l), k));
            cin = self.width(l);
        }
        let mid = self.width(self.depth);
        specs.push(spec("mid.conv1".to_string(), cin, mid, k));
        specs.push(spec("mid.conv2".to_string(), mid, mid, k));
        let mut below = mid;
        for l in (0..self.depth).rev() {
            specs.push(spec(format!("dec{l}.conv1"), below + self.width(l), self.width(l), k));
            specs.push(spec(format!("dec{l}.conv2"), self.width(l), self.width(l), k));
            below = self.width(l);
        }
        specs.push(spec("head".to_string(), below, self.num_classes, 1));
        specs
    }
}

/// Network parameters in a fixed order: for each convolution of
/// [`SegNetConfig::conv_specs`], its `.weight` then its `.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        Params { entries }
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.clear_grad());
    }

    /// Errors unless names and shapes are exactly those `config` produces.
    pub fn check_against(&self, config: &SegNetConfig) -> Result<()> {
        let expected = expected_shapes(config);
        if expected.len() != self.entries.len() {
            return Err(Error::shape(
                "params",
                format!("expected {} tensors, found {}", expected.len(), self.entries.len()),
            ));
        }
        for ((name, shape), (have_name, t)) in expected.iter().zip(&self.entries) {
            if name != have_name || shape[..] != *t.shape() {
                return Err(Error::shape(
                    "params",
                    format!("expected {name} {:?}, found {have_name} {:?}", shape, t.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Puts every tensor on `tape` as a gradient-tracking leaf.
    pub fn register(&self, tape: &mut Tape) -> Result<ParamVars> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                let mut leaf = t.clone();
                leaf.clear_grad();
                tape.leaf(leaf.with_requires_grad(true))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamVars { vars })
    }

    /// Copies accumulated tape gradients into the parameter tensors,
    /// replacing any previous gradient.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &ParamVars) -> Result<()> {
        if vars.vars.len() != self.entries.len() {
            return Err(Error::shape("collect_grads", "variable count mismatch"));
        }
        for ((_, t), &v) in self.entries.iter_mut().zip(&vars.vars) {
            t.clear_grad();
            match tape.grad(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&alloc::vec![0.0; t.len()])?,
            }
        }
        Ok(())
    }
}

/// Tape handles of a registered [`Params`], in parameter order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    /// Wraps handles recorded by the caller, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        ParamVars { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn expected_shapes(config: &SegNetConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for s in config.conv_specs() {
        out.push((
            format!("{}.weight", s.name),
            alloc::vec![s.out_channels, s.in_channels, s.kernel, s.kernel],
        ));
        out.push((format!("{}.bias", s.name), alloc::vec![s.out_channels]));
    }
    out
}

/// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
pub fn init_params(config: &SegNetConfig, seed: u64) -> Result<Params> {
    config.validate()?;
    let mut rng = RngStream::new(seed, StreamKind::Init);
    let mut entries = Vec::new();
    for (name, shape) in expected_shapes(config) {
        let t = if shape.len() == 4 {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let std = math::sqrt(2.0 / fan_in);
            Tensor::from_fn(&shape, |_| std * rng.normal())
        } else {
            Tensor::zeros(&shape)
        };
        entries.push((name, t.with_requires_grad(true)));
    }
    Ok(Params { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Stochastic perturbations applied in training mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbSpec {
    pub noise_sigma: f64,
    pub dropout_rate: f64,
}

impl PerturbSpec {
    pub const NONE: PerturbSpec = PerturbSpec {
        noise_sigma: 0.0,
        dropout_rate: 0.0,
    };
}

/// Streams feeding the input noise and the dropout masks.
#[derive(Debug, Clone)]
pub struct PerturbRngs {
    pub noise: RngStream,
    pub dropout: RngStream,
}

impl PerturbRngs {
    pub fn new(seed: u64) -> Self {
        PerturbRngs {
            noise: RngStream::new(seed, StreamKind::Noise),
            dropout: RngStream::new(seed, StreamKind::Dropout),
        }
    }
}

/// Records one network evaluation on `tape` and returns the softmax output
/// `[N, num_classes, H, W]`.
pub fn forward(
    tape: &mut Tape,
    config: &SegNetConfig,
    params: &ParamVars,
    input: Var,
    perturb: &PerturbSpec,
    mode: Mode,
    rngs: &mut PerturbRngs,
) -> Result<Var> {
    let (_, c, h, w) = tape.value(input).dims4("segnet")?;
    if c != config.in_channels {
        return Err(Error::shape(
            "segnet",
            format!("input has {c} channels, network expects {}", config.in_channels),
        ));
    }
    config.check_extent(h, w)?;
    let expected = 2 * config.conv_specs().len();
    if params.vars.len() != expected {
        return Err(Error::shape(
            "segnet",
            format!("{} parameter tensors registered, network needs {expected}", params.vars.len()),
        ));
    }
    let training = mode == Mode::Train;
    let pad = (config.kernel_size - 1) / 2;
    let mut layer = 0;
    let mut conv = |tape: &mut Tape, x: Var, relu: bool| -> Result<Var> {
        let (wv, bv) = (params.vars[2 * layer], params.vars[2 * layer + 1]);
        layer += 1;
        let k = tape.value(wv).shape()[2];
        let y = tape.conv2d(x, wv, bv, 1, if k == 1 { 0 } else { pad })?;
        if relu {
            tape.relu(y)
        } else {
            Ok(y)
        }
    };

    let mut x = input;
    if training {
        x = tape.add_gaussian_noise(x, perturb.noise_sigma, &mut rngs.noise)?;
    }
    let mut skips = Vec::with_capacity(config.depth);
    for _ in 0..config.depth {
        x = conv(tape, x, true)?;
        x = conv(tape, x, true)?;
        skips.push(x);
        x = tape.maxpool2(x)?;
    }
    x = conv(tape, x, true)?;
    x = conv(tape, x, true)?;
    while let Some(skip) = skips.pop() {
        x = tape.upsample2(x)?;
        x = tape.concat_channels(x, skip)?;
        x = conv(tape, x, true)?;
        x = conv(tape, x, true)?;
    }
    if training {
        x = tape.dropout(x, perturb.dropout_rate, &mut rngs.dropout, true)?;
    }
    let logits = conv(tape, x, false)?;
    tape.softmax_channels(logits)
}

/// Deterministic evaluation-mode probabilities for an `N,C,H,W` batch.
pub fn predict_batch(params: &Params, config: &SegNetConfig, batch: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut vars = Vec::with_capacity(params.len());
    for (_, t) in params.iter() {
        vars.push(tape.constant(t.clone())?);
    }
    let pv = ParamVars { vars };
    let input = tape.constant(batch.clone())?;
    // eval mode never draws from these streams
    let mut rngs = PerturbRngs::new(0);
    let out = forward(&mut tape, config, &pv, input, &PerturbSpec::NONE, Mode::Eval, &mut rngs)?;
    Ok(tape.value(out).clone())
}
