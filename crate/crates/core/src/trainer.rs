//! The training loop.
//!
//! Each step draws one transform per sample and evaluates the network twice
//! with independent noise/dropout draws:
//!
//! * pass A transforms the *output*: `z = op(f(x))`
//! * pass B transforms the *input*: `z~ = f(op(x))`
//!
//! The consistency loss compares `z` and `z~` on every sample of the batch;
//! the cross-entropy term compares one pass (B by default) with `op(y)` on
//! the labeled samples. The weighted sum is minimised with momentum SGD and
//! a polynomially decaying learning rate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::data::{augment, SemiDataset};
use crate::error::{Error, Result};
use crate::losses::{rampup_weight, total_loss, LossBreakdown, RampUpSchedule};
use crate::math;
use crate::metrics::{evaluate, MetricReport, Scores};
use crate::optim::SgdMomentum;
use crate::rng::{RngStream, StreamKind};
use crate::segnet::{self, init_params, Mode, ParamVars, Params, PerturbRngs, PerturbSpec, SegNetConfig};
use crate::tensor::Tensor;
use crate::transforms::{SamplingSet, TransformOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Cross-entropy on labeled data only.
    Supervised,
    /// Labeled data only, with the consistency term.
    SupervisedPlusReg,
    /// Balanced labeled/unlabeled batches with the consistency term.
    Semi,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::Supervised, TrainMode::SupervisedPlusReg, TrainMode::Semi];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Supervised => "supervised",
            TrainMode::SupervisedPlusReg => "supervised_plus_reg",
            TrainMode::Semi => "semi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn uses_consistency(self) -> bool {
        self != TrainMode::Supervised
    }
}

/// Which pass the cross-entropy term reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CePass {
    /// `op(f(x))`, transform after the network.
    A,
    /// `f(op(x))`, transform before the network.
    B,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub labeled_per_batch: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub lr_power: f64,
    pub noise_sigma: f64,
    pub schedule: RampUpSchedule,
    pub seed: u64,
    pub mode: TrainMode,
    pub ce_pass: CePass,
    pub transform_set: SamplingSet,
    /// Random flip/rotate/rescale of every sample before batching.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 10,
            labeled_per_batch: 5,
            lr0: 0.01,
            momentum: 0.9,
            lr_power: 0.9,
            noise_sigma: 0.1,
            schedule: RampUpSchedule::for_epochs(1.0, 30),
            seed: 0,
            mode: TrainMode::Semi,
            ce_pass: CePass::B,
            transform_set: SamplingSet::FlipAndRotations,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.labeled_per_batch == 0 || self.labeled_per_batch > self.batch_size {
            return Err(Error::invalid(format!(
                "labeled_per_batch must be in 1..={}, got {}",
                self.batch_size, self.labeled_per_batch
            )));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(0.0..1.0).contains(&self.momentum) || !(self.lr_power >= 0.0) {
            return Err(Error::invalid("lr0 > 0, 0 <= momentum < 1 and lr_power >= 0 required"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and >= 0"));
        }
        if self.schedule.rampup_epochs == 0 {
            return Err(Error::invalid("rampup_epochs must be at least 1"));
        }
        Ok(())
    }

    /// Consistency weight in effect during a zero-based epoch.
    pub fn lambda(&self, epoch: usize) -> f64 {
        if self.mode.uses_consistency() {
            rampup_weight(epoch, &self.schedule)
        } else {
            0.0
        }
    }
}

/// `lr0 * (1 - iteration / total)^power`.
pub fn poly_lr(iteration: usize, total_iterations: usize, lr0: f64, power: f64) -> Result<f64> {
    if iteration >= total_iterations {
        return Err(Error::invalid(format!(
            "iteration {iteration} is past the schedule of {total_iterations}"
        )));
    }
    Ok(lr0 * math::powf(1.0 - iteration as f64 / total_iterations as f64, power))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchEntry {
    Labeled(usize),
    Unlabeled(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub entries: Vec<BatchEntry>,
}

impl Batch {
    pub fn labeled_count(&self) -> usize {
        self.entries.iter().filter(|e| matches!(e, BatchEntry::Labeled(_))).count()
    }
}

/// Steps per epoch: enough batches to cover the training pool once.
pub fn batches_per_epoch(dataset: &SemiDataset, config: &TrainConfig) -> usize {
    let pool = dataset.labeled.len() + dataset.unlabeled.len();
    pool.div_ceil(config.batch_size).max(1)
}

/// `count` pool indices: concatenated fresh shuffles of `0..pool`.
fn draw_cycled(pool: usize, count: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut perm: Vec<usize> = (0..pool).collect();
        rng.shuffle(&mut perm);
        let take = (count - out.len()).min(pool);
        out.extend_from_slice(&perm[..take]);
    }
    out
}

/// One epoch of batches. In semi mode each batch holds `labeled_per_batch`
/// labeled and `batch_size - labeled_per_batch` unlabeled samples; in the
/// supervised modes (or when there are no unlabeled images) batches are
/// fully labeled. Each pool is read as reshuffled passes, so the smaller pool
/// repeats within an epoch.
pub fn make_batches(dataset: &SemiDataset, config: &TrainConfig, rng: &mut RngStream) -> Result<Vec<Batch>> {
    if dataset.labeled.is_empty() {
        return Err(Error::invalid("labeled set is empty"));
    }
    let bpe = batches_per_epoch(dataset, config);
    let balanced = config.mode == TrainMode::Semi && !dataset.unlabeled.is_empty();
    let per_lab = if balanced { config.labeled_per_batch } else { config.batch_size };
    let per_unl = config.batch_size - per_lab;
    let lab = draw_cycled(dataset.labeled.len(), bpe * per_lab, rng);
    let unl = if per_unl > 0 {
        draw_cycled(dataset.unlabeled.len(), bpe * per_unl, rng)
    } else {
        Vec::new()
    };
    Ok((0..bpe)
        .map(|b| Batch {
            entries: lab[b * per_lab..(b + 1) * per_lab]
                .iter()
                .map(|&i| BatchEntry::Labeled(i))
                .chain(unl[b * per_unl..(b + 1) * per_unl].iter().map(|&i| BatchEntry::Unlabeled(i)))
                .collect(),
        })
        .collect())
}

/// Independent randomness for each concern of training.
#[derive(Debug, Clone)]
pub struct Streams {
    pub batch_order: RngStream,
    pub transform: RngStream,
    pub augment: RngStream,
    pub perturb: PerturbRngs,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams {
            batch_order: RngStream::new(seed, StreamKind::BatchOrder),
            transform: RngStream::new(seed, StreamKind::Transform),
            augment: RngStream::new(seed, StreamKind::Augment),
            perturb: PerturbRngs::new(seed),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: Params,
    pub optimizer: SgdMomentum,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub iteration: usize,
    pub total_iterations: usize,
    pub streams: Streams,
}

impl TrainState {
    pub fn new(net: &SegNetConfig, config: &TrainConfig, total_iterations: usize) -> Result<Self> {
        let params = init_params(net, config.seed)?;
        let optimizer = SgdMomentum::new(&params, config.momentum);
        Ok(TrainState {
            params,
            optimizer,
            epoch: 0,
            iteration: 0,
            total_iterations,
            streams: Streams::new(config.seed),
        })
    }
}

/// Tensors for one step, already augmented.
#[derive(Debug, Clone)]
pub struct StepInputs {
    /// `[N, C, H, W]`
    pub images: Tensor,
    /// `[N, H, W]`; rows of unlabeled samples are zero and never read.
    pub labels: Tensor,
    pub labeled: Vec<bool>,
}

/// Gathers (and optionally augments) the samples of `batch`.
pub fn assemble(dataset: &SemiDataset, batch: &Batch, config: &TrainConfig, rng: &mut RngStream) -> Result<StepInputs> {
    let n = dataset.image_size;
    let mut images = Vec::with_capacity(batch.entries.len());
    let mut labels = Vec::with_capacity(batch.entries.len());
    let mut labeled = Vec::with_capacity(batch.entries.len());
    for entry in &batch.entries {
        let (image, mask) = match *entry {
            BatchEntry::Labeled(i) => {
                let s = dataset
                    .labeled
                    .get(i)
                    .ok_or_else(|| Error::invalid(format!("labeled index {i} out of range")))?;
                (&s.image, Some(&s.mask))
            }
            BatchEntry::Unlabeled(i) => {
                let s = dataset
                    .unlabeled
                    .get(i)
                    .ok_or_else(|| Error::invalid(format!("unlabeled index {i} out of range")))?;
                (&s.image, None)
            }
        };
        let (img, msk) = if config.augment {
            augment(image, mask, rng)?
        } else {
            (image.clone(), mask.cloned())
        };
        labeled.push(msk.is_some());
        labels.push(msk.unwrap_or_else(|| Tensor::zeros(&[n, n])));
        images.push(img);
    }
    Ok(StepInputs {
        images: Tensor::stack(&images.iter().collect::<Vec<_>>())?,
        labels: Tensor::stack(&labels.iter().collect::<Vec<_>>())?,
        labeled,
    })
}

fn transform_each(t: &Tensor, ops: &[TransformOp]) -> Result<Tensor> {
    let per = t.len() / ops.len().max(1);
    let mut data = Vec::with_capacity(t.len());
    for (i, op) in ops.iter().enumerate() {
        data.extend(op.apply_slice(&t.data()[i * per..(i + 1) * per], &t.shape()[1..])?);
    }
    Tensor::new(t.shape().to_vec(), data)
}

/// Handles to the recorded objective.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub supervised: Var,
    pub consistency: Option<Var>,
    /// `op(f(x))`, when pass A ran.
    pub pass_a: Option<Var>,
    /// `f(op(x))`, when pass B ran.
    pub pass_b: Option<Var>,
}

/// Records the full training objective for fixed transforms and streams.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    tape: &mut Tape,
    net: &SegNetConfig,
    params: &ParamVars,
    inputs: &StepInputs,
    ops: &[TransformOp],
    config: &TrainConfig,
    lambda: f64,
    rngs: &mut PerturbRngs,
) -> Result<Objective> {
    if ops.len() != inputs.labeled.len() {
        return Err(Error::shape("objective", "one transform per sample required"));
    }
    let perturb = PerturbSpec {
        noise_sigma: config.noise_sigma,
        dropout_rate: net.dropout_rate,
    };
    let consistency = config.mode.uses_consistency();
    let run_a = consistency || config.ce_pass == CePass::A;
    let run_b = consistency || config.ce_pass == CePass::B;

    let pass_a = if run_a {
        let x = tape.constant(inputs.images.clone())?;
        let p = segnet::forward(tape, net, params, x, &perturb, Mode::Train, rngs)?;
        Some(tape.transform_samples(p, ops)?)
    } else {
        None
    };
    let pass_b = if run_b {
        let x = tape.constant(transform_each(&inputs.images, ops)?)?;
        Some(segnet::forward(tape, net, params, x, &perturb, Mode::Train, rngs)?)
    } else {
        None
    };
    let cons = match (consistency, pass_a, pass_b) {
        (true, Some(a), Some(b)) => Some(tape.consistency_mse(a, b)?),
        _ => None,
    };
    let ce_probs = match config.ce_pass {
        CePass::A => pass_a,
        CePass::B => pass_b,
    }
    .ok_or_else(|| Error::invalid("cross-entropy pass was not evaluated"))?;
    let labels = transform_each(&inputs.labels, ops)?;
    let sup = tape.supervised_ce(ce_probs, &labels, &inputs.labeled)?;
    let mut terms = vec![(sup, 1.0)];
    if let Some(c) = cons {
        terms.push((c, lambda));
    }
    let total = tape.weighted_sum(&terms)?;
    Ok(Objective {
        total,
        supervised: sup,
        consistency: cons,
        pass_a,
        pass_b,
    })
}

/// What one step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub losses: LossBreakdown,
    pub lr: f64,
    /// Transforms pass A applied to its outputs.
    pub pass_a_ops: Option<Vec<TransformOp>>,
    /// Transforms pass B applied to its inputs.
    pub pass_b_ops: Option<Vec<TransformOp>>,
}

/// One optimisation step on `batch`.
pub fn train_step(
    state: &mut TrainState,
    dataset: &SemiDataset,
    batch: &Batch,
    net: &SegNetConfig,
    config: &TrainConfig,
    lambda: f64,
) -> Result<StepReport> {
    let diverged = |state: &TrainState, e: Error| match e {
        Error::NonFinite { op } => Error::Diverged {
            iteration: state.iteration,
            seed: config.seed,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    };
    let lr = poly_lr(state.iteration, state.total_iterations, config.lr0, config.lr_power)?;
    let inputs = assemble(dataset, batch, config, &mut state.streams.augment)?;
    let ops: Vec<TransformOp> = (0..batch.entries.len())
        .map(|_| TransformOp::sample(&mut state.streams.transform, config.transform_set))
        .collect();

    let mut tape = Tape::new();
    let pv = state.params.register(&mut tape)?;
    let obj = objective(&mut tape, net, &pv, &inputs, &ops, config, lambda, &mut state.streams.perturb)
        .map_err(|e| diverged(state, e))?;
    let sup = tape.value(obj.supervised).data()[0];
    let cons = obj.consistency.map_or(0.0, |c| tape.value(c).data()[0]);
    let losses = total_loss(sup, cons, lambda).map_err(|e| diverged(state, e))?;
    tape.backward(obj.total).map_err(|e| diverged(state, e))?;
    state.params.collect_grads(&tape, &pv)?;
    drop(tape);
    state.optimizer.step(&mut state.params, lr)?;
    if state.params.iter().any(|(_, t)| !t.all_finite()) {
        return Err(diverged(state, Error::NonFinite { op: "sgd" }));
    }
    state.iteration += 1;
    Ok(StepReport {
        losses,
        lr,
        pass_a_ops: obj.pass_a.map(|_| ops.clone()),
        pass_b_ops: obj.pass_b.map(|_| ops),
    })
}

/// Per-epoch summary: mean losses over the epoch's steps and validation
/// scores (mean of per-image scores) at the end of the epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    /// Steps completed so far.
    pub iter: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub lambda: f64,
    pub loss_sup: f64,
    pub loss_cons: f64,
    pub loss_total: f64,
    pub val: Option<Scores>,
    pub report: Option<MetricReport>,
}

/// Epoch-at-a-time driver, so callers can checkpoint between epochs.
pub struct Trainer<'a> {
    dataset: &'a SemiDataset,
    net: SegNetConfig,
    config: TrainConfig,
    state: TrainState,
    batches_per_epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a SemiDataset, net: SegNetConfig, config: TrainConfig) -> Result<Self> {
        net.validate()?;
        config.validate()?;
        net.check_extent(dataset.image_size, dataset.image_size)?;
        if dataset.labeled.is_empty() {
            return Err(Error::invalid("labeled set is empty"));
        }
        if let Some(s) = dataset.labeled.first() {
            if s.image.shape()[0] != net.in_channels {
                return Err(Error::shape("trainer", "image channels do not match the network"));
            }
        }
        let bpe = batches_per_epoch(dataset, &config);
        let state = TrainState::new(&net, &config, bpe * config.epochs)?;
        Ok(Trainer {
            dataset,
            net,
            config,
            state,
            batches_per_epoch: bpe,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn params(&self) -> &Params {
        &self.state.params
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    /// Runs the next epoch; `on_step` sees every step report.
    pub fn run_epoch_with(&mut self, mut on_step: impl FnMut(&StepReport)) -> Result<EpochRecord> {
        if self.is_done() {
            return Err(Error::invalid("all epochs already ran"));
        }
        let epoch = self.state.epoch;
        let lambda = self.config.lambda(epoch);
        let batches = make_batches(self.dataset, &self.config, &mut self.state.streams.batch_order)?;
        let (mut sup, mut cons, mut total, mut lr) = (0.0, 0.0, 0.0, 0.0);
        for batch in &batches {
            let report = train_step(&mut self.state, self.dataset, batch, &self.net, &self.config, lambda)?;
            sup += report.losses.supervised;
            cons += report.losses.consistency;
            total += report.losses.total;
            lr = report.lr;
            on_step(&report);
        }
        self.state.epoch += 1;
        let k = batches.len() as f64;
        let report = if self.dataset.validation.is_empty() {
            None
        } else {
            Some(evaluate(&self.state.params, &self.net, &self.dataset.validation)?)
        };
        Ok(EpochRecord {
            epoch: epoch + 1,
            iter: self.state.iteration,
            lr,
            lambda,
            loss_sup: sup / k,
            loss_cons: cons / k,
            loss_total: total / k,
            val: report.as_ref().map(|r| r.mean),
            report,
        })
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        self.run_epoch_with(|_| {})
    }

    pub fn into_params(self) -> Params {
        self.state.params
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Params,
    pub log: Vec<EpochRecord>,
    /// Epoch (one-based) and parameters with the highest validation JA.
    pub best: Option<(usize, Params)>,
}

/// Runs every epoch.
pub fn train(dataset: &SemiDataset, net: &SegNetConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(dataset, *net, *config)?;
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Params)> = None;
    while !trainer.is_done() {
        let rec = trainer.run_epoch()?;
        if let Some(v) = rec.val {
            if best.as_ref().is_none_or(|b| v.ja > b.1) {
                best = Some((rec.epoch, v.ja, trainer.params().clone()));
            }
        }
        log.push(rec);
    }
    Ok(TrainOutcome {
        params: trainer.into_params(),
        log,
        best: best.map(|(e, _, p)| (e, p)),
    })
}

/// Eval-mode class probabilities `[num_classes, H, W]` for one `[C, H, W]`
/// image: no transforms, noise or dropout.
pub fn predict(params: &Params, net: &SegNetConfig, image: &Tensor) -> Result<Tensor> {
    let batch = Tensor::stack(&[image])?;
    if batch.rank() != 4 {
        return Err(Error::shape("predict", format!("image must be [C, H, W], got {:?}", image.shape())));
    }
    segnet::predict_batch(params, net, &batch)?.index_first(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, split, GenSpec};

    fn toy(labeled_fraction: f64) -> SemiDataset {
        let pairs = generate(&GenSpec {
            num_images: 20,
            image_size: 16,
            ..GenSpec::default()
        })
        .unwrap();
        split(pairs, labeled_fraction, 0.1, 1).unwrap()
    }

    #[test]
    fn poly_lr_examples() {
        assert_eq!(poly_lr(0, 1000, 0.01, 0.9).unwrap(), 0.01);
        assert!((poly_lr(500, 1000, 0.01, 1.0).unwrap() - 0.005).abs() < 1e-18);
        assert!((poly_lr(900, 1000, 0.01, 0.9).unwrap() - 0.001_258_925_411_794_167_2).abs() < 1e-15);
        assert!(poly_lr(1000, 1000, 0.01, 0.9).is_err());
    }

    #[test]
    fn lr_strictly_decreasing() {
        let lrs: Vec<f64> = (0..50).map(|i| poly_lr(i, 50, 0.01, 0.9).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn balanced_and_supervised_batches() {
        let ds = toy(0.2);
        let mut rng = RngStream::new(0, StreamKind::BatchOrder);
        let cfg = TrainConfig::default();
        for b in make_batches(&ds, &cfg, &mut rng).unwrap() {
            assert_eq!(b.entries.len(), 10);
            assert_eq!(b.labeled_count(), 5);
        }
        let sup = TrainConfig {
            mode: TrainMode::Supervised,
            ..cfg
        };
        for b in make_batches(&ds, &sup, &mut rng).unwrap() {
            assert_eq!(b.labeled_count(), 10);
        }
    }

    #[test]
    fn modes_round_trip_names() {
        for m in TrainMode::ALL {
            assert_eq!(TrainMode::parse(m.name()), Some(m));
        }
        assert_eq!(TrainMode::parse("bogus"), None);
    }

    #[test]
    fn rejects_bad_config() {
        let c = TrainConfig {
            labeled_per_batch: 11,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
