//! Confusion-matrix segmentation scores and inference post-processing
//! (probability thresholding and hole filling).

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::segnet::{predict_batch, Params, SegNetConfig};
use crate::tensor::Tensor;

/// Default foreground threshold on the class-1 probability.
pub const THRESHOLD: f64 = 0.5;

/// A binary `height x width` map, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("mask", format!("{height}x{width} mask with {} values", data.len())));
        }
        Ok(Mask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// Reads an `[H, W]` or `[1, H, W]` tensor holding only 0 and 1.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w] | [1, h, w] => (*h, *w),
            s => return Err(Error::shape("mask", format!("expected [H, W], got {s:?}"))),
        };
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    Ok(false)
                } else if v == 1.0 {
                    Ok(true)
                } else {
                    Err(Error::invalid(format!("mask value {v} is not binary")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Mask::new(h, w, data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.height, self.width], |i| self.data[i] as u8 as f64)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl core::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

/// Jaccard, Dice, accuracy, sensitivity and specificity.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Scores {
    pub ja: f64,
    pub di: f64,
    pub ac: f64,
    pub se: f64,
    pub sp: f64,
}

impl Scores {
    pub fn mean(items: &[Scores]) -> Option<Scores> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let sum = |f: fn(&Scores) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(Scores {
            ja: sum(|s| s.ja),
            di: sum(|s| s.di),
            ac: sum(|s| s.ac),
            se: sum(|s| s.se),
            sp: sum(|s| s.sp),
        })
    }
}

pub fn confusion(pred: &Mask, truth: &Mask) -> Result<ConfusionCounts> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::shape(
            "confusion",
            format!("{}x{} vs {}x{}", pred.height, pred.width, truth.height, truth.width),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `num / den`, with `0 / 0` read as a perfect score.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(c: &ConfusionCounts) -> Scores {
    Scores {
        ja: ratio(c.tp, c.tp + c.fn_ + c.fp),
        di: ratio(2 * c.tp, 2 * c.tp + c.fn_ + c.fp),
        ac: ratio(c.tp + c.tn, c.total()),
        se: ratio(c.tp, c.tp + c.fn_),
        sp: ratio(c.tn, c.tn + c.fp),
    }
}

/// Foreground wherever the class-1 probability of a `[C, H, W]` map is at
/// least `tau`.
pub fn threshold(probs: &Tensor, tau: f64) -> Result<Mask> {
    let (c, h, w) = match probs.shape() {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape("threshold", format!("expected [C, H, W], got {s:?}"))),
    };
    if c < 2 {
        return Err(Error::shape("threshold", "need a class-1 channel"));
    }
    let fg = &probs.data()[h * w..2 * h * w];
    Mask::new(h, w, fg.iter().map(|&p| p >= tau).collect())
}

/// Fills background regions that are not 4-connected to the image border.
pub fn fill_holes(mask: &Mask) -> Mask {
    let (h, w) = (mask.height, mask.width);
    if h == 0 || w == 0 {
        return mask.clone();
    }
    let mut outside = vec![false; h * w];
    let mut queue = VecDeque::new();
    let seed = |r: usize, c: usize, outside: &mut Vec<bool>, queue: &mut VecDeque<(usize, usize)>| {
        let i = r * w + c;
        if !mask.data[i] && !outside[i] {
            outside[i] = true;
            queue.push_back((r, c));
        }
    };
    for c in 0..w {
        seed(0, c, &mut outside, &mut queue);
        seed(h - 1, c, &mut outside, &mut queue);
    }
    for r in 0..h {
        seed(r, 0, &mut outside, &mut queue);
        seed(r, w - 1, &mut outside, &mut queue);
    }
    while let Some((r, c)) = queue.pop_front() {
        if r > 0 {
            seed(r - 1, c, &mut outside, &mut queue);
        }
        if r + 1 < h {
            seed(r + 1, c, &mut outside, &mut queue);
        }
        if c > 0 {
            seed(r, c - 1, &mut outside, &mut queue);
        }
        if c + 1 < w {
            seed(r, c + 1, &mut outside, &mut queue);
        }
    }
    Mask {
        height: h,
        width: w,
        data: outside.into_iter().map(|o| !o).collect(),
    }
}

/// Threshold then fill holes.
pub fn postprocess(probs: &Tensor) -> Result<Mask> {
    Ok(fill_holes(&threshold(probs, THRESHOLD)?))
}

/// Validation scores aggregated per image and over pooled pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub ids: Vec<u32>,
    pub per_image: Vec<Scores>,
    /// Scores of the summed confusion counts.
    pub pooled: Scores,
    /// Mean of the per-image scores.
    pub mean: Scores,
    /// Dice per image, same order as `ids`.
    pub per_case_dice: Vec<f64>,
    pub mean_dice: f64,
}

impl MetricReport {
    pub fn from_counts(ids: Vec<u32>, counts: &[ConfusionCounts]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("cannot report on an empty validation set"));
        }
        let per_image: Vec<Scores> = counts.iter().map(metrics).collect();
        let pooled = metrics(&counts.iter().fold(ConfusionCounts::default(), |a, &b| a + b));
        let mean = Scores::mean(&per_image).unwrap_or_default();
        let per_case_dice: Vec<f64> = per_image.iter().map(|s| s.di).collect();
        let mean_dice = per_case_dice.iter().sum::<f64>() / per_case_dice.len() as f64;
        Ok(MetricReport {
            ids,
            per_image,
            pooled,
            mean,
            per_case_dice,
            mean_dice,
        })
    }
}

const EVAL_CHUNK: usize = 16;

/// Single eval-mode pass per image, then [`postprocess`] and scoring.
pub fn evaluate(params: &Params, config: &SegNetConfig, validation: &[LabeledSample]) -> Result<MetricReport> {
    if validation.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let mut counts = Vec::with_capacity(validation.len());
    for chunk in validation.chunks(EVAL_CHUNK) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let probs = predict_batch(params, config, &Tensor::stack(&images)?)?;
        for (i, sample) in chunk.iter().enumerate() {
            let pred = postprocess(&probs.index_first(i)?)?;
            counts.push(confusion(&pred, &Mask::from_tensor(&sample.mask)?)?);
        }
    }
    MetricReport::from_counts(validation.iter().map(|s| s.id).collect(), &counts)
}
