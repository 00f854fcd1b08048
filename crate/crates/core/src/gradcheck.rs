//! Central finite-difference checks of the tape's backward rules.
//!
//! Every check builds a scalar from its inputs (non-scalar outputs are
//! projected onto a fixed random tensor), compares the tape gradient with
//! `(L(x + h) - L(x - h)) / 2h` coordinate by coordinate, and reports the
//! largest relative error
//!
//! ```text
//! |analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)
//! ```
//!
//! The floor keeps coordinates whose true gradient is (near) zero from
//! turning round-off into huge relative errors.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{RngStream, StreamKind};
use crate::segnet::{init_params, ParamVars, PerturbRngs, SegNetConfig};
use crate::tensor::Tensor;
use crate::trainer::{objective, CePass, StepInputs, TrainConfig, TrainMode};
use crate::transforms::TransformOp;

/// Finite-difference step.
pub const STEP: f64 = 1e-6;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-3;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-4;
/// Parameter coordinates sampled by the whole-network check.
pub const NETWORK_COORDS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradcheckReport {
    pub checks: Vec<OpCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(OpCheck::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &OpCheck> {
        self.checks.iter().filter(|c| !c.passed())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn scalar_loss(tape: &mut Tape, out: Var, projection: &Option<Tensor>) -> Result<Var> {
    match projection {
        None => Ok(out),
        Some(r) => {
            let r = tape.constant(r.clone())?;
            let prod = tape.mul(out, r)?;
            tape.sum(prod)
        }
    }
}

fn loss_value(inputs: &[Tensor], build: &Build<'_>, projection: &Option<Tensor>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    let loss = scalar_loss(&mut tape, out, projection)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares tape and finite-difference gradients of `build` with respect to
/// every input, or `max_coords` coordinates drawn from `rng` when given.
pub fn check(
    name: &str,
    inputs: &[Tensor],
    build: &Build<'_>,
    tolerance: f64,
    max_coords: Option<usize>,
    rng: &mut RngStream,
) -> Result<OpCheck> {
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    let projection = if tape.value(out).len() == 1 {
        None
    } else {
        let shape = tape.value(out).shape().to_vec();
        Some(Tensor::from_fn(&shape, |_| rng.uniform_range(-1.0, 1.0)))
    };
    let loss = scalar_loss(&mut tape, out, &projection)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    let coords = match max_coords {
        Some(m) if m < all.len() => {
            let mut picked = all;
            rng.shuffle(&mut picked);
            picked.truncate(m);
            picked
        }
        _ => all,
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for &(i, j) in &coords {
        let x0 = work[i].data()[j];
        work[i].data_mut()[j] = x0 + STEP;
        let up = loss_value(&work, build, &projection)?;
        work[i].data_mut()[j] = x0 - STEP;
        let down = loss_value(&work, build, &projection)?;
        work[i].data_mut()[j] = x0;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic[i][j], numeric));
    }
    if !worst.is_finite() {
        return Err(Error::NonFinite { op: "gradcheck" });
    }
    Ok(OpCheck {
        name: name.to_string(),
        max_rel_error: worst,
        coords: coords.len(),
        tolerance,
    })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut RngStream) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(lo, hi))
}

/// Values bounded away from zero, so ReLU kinks stay out of reach of the step.
fn away_from_zero(shape: &[usize], rng: &mut RngStream) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform_range(0.1, 1.0);
        if rng.uniform() < 0.5 {
            -m
        } else {
            m
        }
    })
}

/// Distinct values spaced far beyond the step, shuffled, so pooling windows
/// have a clear maximum.
fn distinct(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.3).collect();
    rng.shuffle(&mut v);
    Tensor::new(shape.to_vec(), v).expect("length matches shape")
}

fn square_backward() -> crate::autodiff::BackwardFn {
    Box::new(|inputs, _out, g| vec![inputs[0].data().iter().zip(g).map(|(x, g)| 2.0 * x * g).collect()])
}

/// A custom op whose backward rule is off by ten percent; its check must fail.
pub fn corrupted_check(rng: &mut RngStream) -> Result<OpCheck> {
    let x = uniform(&[3, 4], -1.0, 1.0, rng);
    check(
        "custom_corrupted",
        &[x],
        &|tape, v| {
            let out = Tensor::new(
                tape.value(v[0]).shape().to_vec(),
                tape.value(v[0]).data().iter().map(|x| x * x).collect(),
            )?;
            tape.custom(
                &[v[0]],
                out,
                Box::new(|inputs, _out, g| {
                    vec![inputs[0].data().iter().zip(g).map(|(x, g)| 2.2 * x * g).collect()]
                }),
            )
        },
        OP_TOLERANCE,
        None,
        rng,
    )
}

/// Checks every differentiable tape operation.
pub fn check_ops(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = RngStream::new(seed, StreamKind::Scratch);
    let r = &mut rng;
    let tol = OP_TOLERANCE;
    let mut out = Vec::new();

    let (x, w, b) = (
        uniform(&[2, 2, 5, 5], -1.0, 1.0, r),
        uniform(&[3, 2, 3, 3], -1.0, 1.0, r),
        uniform(&[3], -1.0, 1.0, r),
    );
    let inputs = [x, w, b];
    out.push(check("conv2d", &inputs, &|t, v| t.conv2d(v[0], v[1], v[2], 1, 1), tol, None, r)?);
    out.push(check("conv2d_stride2", &inputs, &|t, v| t.conv2d(v[0], v[1], v[2], 2, 0), tol, None, r)?);
    let w1 = uniform(&[3, 2, 1, 1], -1.0, 1.0, r);
    let inputs = [inputs[0].clone(), w1, inputs[2].clone()];
    out.push(check("conv2d_1x1", &inputs, &|t, v| t.conv2d(v[0], v[1], v[2], 1, 0), tol, None, r)?);

    let x = away_from_zero(&[2, 3, 4, 4], r);
    out.push(check("relu", &[x], &|t, v| t.relu(v[0]), tol, None, r)?);

    let x = distinct(&[2, 2, 4, 6], r);
    out.push(check("maxpool2", &[x], &|t, v| t.maxpool2(v[0]), tol, None, r)?);

    let x = uniform(&[2, 2, 3, 3], -1.0, 1.0, r);
    out.push(check("upsample2", &[x], &|t, v| t.upsample2(v[0]), tol, None, r)?);

    let x = uniform(&[2, 3, 4, 4], -1.0, 1.0, r);
    let drop_rng = RngStream::new(seed, StreamKind::Dropout);
    out.push(check(
        "dropout",
        &[x.clone()],
        &|t, v| t.dropout(v[0], 0.3, &mut drop_rng.clone(), true),
        tol,
        None,
        r,
    )?);
    let noise_rng = RngStream::new(seed, StreamKind::Noise);
    out.push(check(
        "gaussian_noise",
        &[x],
        &|t, v| t.add_gaussian_noise(v[0], 0.1, &mut noise_rng.clone()),
        tol,
        None,
        r,
    )?);

    let x = uniform(&[2, 3, 3, 3], -2.0, 2.0, r);
    out.push(check("softmax_channels", &[x], &|t, v| t.softmax_channels(v[0]), tol, None, r)?);

    let (a, b) = (uniform(&[2, 2, 3, 3], -1.0, 1.0, r), uniform(&[2, 1, 3, 3], -1.0, 1.0, r));
    out.push(check("concat_channels", &[a, b], &|t, v| t.concat_channels(v[0], v[1]), tol, None, r)?);

    let x = uniform(&[TransformOp::ALL.len(), 2, 4, 4], -1.0, 1.0, r);
    out.push(check(
        "transform_samples",
        &[x],
        &|t, v| t.transform_samples(v[0], &TransformOp::ALL),
        tol,
        None,
        r,
    )?);

    let (a, b) = (uniform(&[3, 4], -1.0, 1.0, r), uniform(&[3, 4], -1.0, 1.0, r));
    let pair = [a, b];
    out.push(check("add", &pair, &|t, v| t.add(v[0], v[1]), tol, None, r)?);
    out.push(check("mul", &pair, &|t, v| t.mul(v[0], v[1]), tol, None, r)?);
    out.push(check("scale", &pair[..1], &|t, v| t.scale(v[0], -1.7), tol, None, r)?);
    out.push(check("sum", &pair[..1], &|t, v| t.sum(v[0]), tol, None, r)?);
    out.push(check(
        "weighted_sum",
        &pair,
        &|t, v| {
            let (a, b) = (t.sum(v[0])?, t.sum(v[1])?);
            t.weighted_sum(&[(a, 1.0), (b, 0.37)])
        },
        tol,
        None,
        r,
    )?);

    let (n, h, w) = (3, 4, 4);
    let probs = uniform(&[n, 2, h, w], 0.05, 0.95, r);
    let labels = Tensor::from_fn(&[n, h, w], |_| if r.uniform() < 0.5 { 0.0 } else { 1.0 });
    let labeled = [true, false, true];
    out.push(check(
        "supervised_ce",
        &[probs],
        &|t, v| t.supervised_ce(v[0], &labels, &labeled),
        tol,
        None,
        r,
    )?);

    let (a, b) = (uniform(&[2, 2, 3, 3], 0.0, 1.0, r), uniform(&[2, 2, 3, 3], 0.0, 1.0, r));
    out.push(check("consistency_mse", &[a, b], &|t, v| t.consistency_mse(v[0], v[1]), tol, None, r)?);

    let x = uniform(&[3, 4], -1.0, 1.0, r);
    out.push(check(
        "custom",
        &[x],
        &|t, v| {
            let out = Tensor::new(
                t.value(v[0]).shape().to_vec(),
                t.value(v[0]).data().iter().map(|x| x * x).collect(),
            )?;
            t.custom(&[v[0]], out, square_backward())
        },
        tol,
        None,
        r,
    )?);
    Ok(out)
}

/// Whole training objective (both passes, noise, dropout, both loss terms)
/// of a depth-1 network on one 8x8 image, against sampled parameters.
pub fn check_network(seed: u64) -> Result<OpCheck> {
    let net = SegNetConfig {
        depth: 1,
        base_channels: 4,
        ..SegNetConfig::default()
    };
    let params = init_params(&net, seed)?;
    let mut rng = RngStream::new(seed, StreamKind::Scratch);
    let image = uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut rng);
    let labels = Tensor::from_fn(&[1, 8, 8], |i| if (i / 8) >= 2 && (i / 8) < 6 && (i % 8) >= 3 { 1.0 } else { 0.0 });
    let inputs = StepInputs {
        images: image,
        labels,
        labeled: vec![true],
    };
    let config = TrainConfig {
        mode: TrainMode::Semi,
        ce_pass: CePass::B,
        seed,
        ..TrainConfig::default()
    };
    let ops = [TransformOp::Rot90];
    let rngs = PerturbRngs::new(seed);
    let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    check(
        "network",
        &tensors,
        &|tape, vars| {
            let pv = ParamVars::from_vars(vars.to_vec());
            let obj = objective(tape, &net, &pv, &inputs, &ops, &config, 1.0, &mut rngs.clone())?;
            Ok(obj.total)
        },
        NETWORK_TOLERANCE,
        Some(NETWORK_COORDS),
        &mut rng,
    )
}

/// Every operation check followed by the whole-network check; with
/// `include_corrupted` a deliberately wrong custom op is appended.
pub fn run(seed: u64, include_corrupted: bool) -> Result<GradcheckReport> {
    let mut checks = check_ops(seed)?;
    checks.push(check_network(seed)?);
    if include_corrupted {
        let mut rng = RngStream::indexed(seed, StreamKind::Scratch, 1);
        checks.push(corrupted_check(&mut rng)?);
    }
    Ok(GradcheckReport { checks })
}
