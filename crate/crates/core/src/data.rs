//! Synthetic single-channel segmentation data, the labeled / unlabeled /
//! validation split, and train-time augmentation.
//!
//! Each image is a textured background with one to three anti-aliased
//! ellipses (the targets) and a few small bright spots that are not part of
//! the mask. Image `i` draws from its own stream derived from
//! `(seed, i)`, so the dataset is independent of generation order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{RngStream, StreamKind};
use crate::tensor::Tensor;
use crate::transforms::{SamplingSet, TransformOp};

/// Generator parameters. Intensities are in raw units before per-image
/// standardisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenSpec {
    pub num_images: usize,
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub fg_mean: f64,
    /// Spread of each ellipse's intensity around `fg_mean`.
    pub fg_std: f64,
    pub bg_mean: f64,
    /// Spread of each image's background level around `bg_mean`.
    pub bg_std: f64,
    /// Per-pixel Gaussian texture noise.
    pub noise_sigma: f64,
    /// Bright Gaussian blobs outside the targets.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            num_images: 200,
            image_size: 32,
            min_shapes: 1,
            max_shapes: 3,
            fg_mean: 1.0,
            fg_std: 0.2,
            bg_mean: 0.0,
            bg_std: 0.2,
            noise_sigma: 0.3,
            distractors: 6,
            seed: 0,
        }
    }
}

/// Foreground share every generated mask must fall in.
pub const FG_FRACTION_RANGE: (f64, f64) = (0.05, 0.60);
/// Distractor blob radius range in pixels.
pub const DISTRACTOR_RADIUS: (f64, f64) = (0.6, 3.0);
const SUPERSAMPLE: usize = 4;
const MAX_ATTEMPTS: usize = 1000;

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 {
            return Err(Error::invalid(format!("image_size {} is too small", self.image_size)));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::invalid("need 1 <= min_shapes <= max_shapes"));
        }
        for (name, v) in [
            ("fg_std", self.fg_std),
            ("bg_std", self.bg_std),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: u32,
    /// `[1, H, W]`
    pub image: Tensor,
    /// `[H, W]` of 0/1
    pub mask: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSample {
    pub id: u32,
    pub image: Tensor,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    intensity: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a) * (u / self.a) + (v / self.b) * (v / self.b) <= 1.0
    }
}

/// Generates `spec.num_images` standardised `(image, mask)` pairs.
pub fn generate(spec: &GenSpec) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    (0..spec.num_images)
        .map(|i| generate_one(spec, i as u32))
        .collect()
}

/// The `index`-th image of [`generate`], on its own.
pub fn generate_one(spec: &GenSpec, index: u32) -> Result<LabeledSample> {
    let n = spec.image_size;
    let nf = n as f64;
    let mut rng = RngStream::indexed(spec.seed, StreamKind::Generate, index);
    for _ in 0..MAX_ATTEMPTS {
        let count = spec.min_shapes + rng.below(spec.max_shapes - spec.min_shapes + 1);
        let ellipses: Vec<Ellipse> = (0..count)
            .map(|_| {
                let angle = rng.uniform_range(0.0, core::f64::consts::PI);
                Ellipse {
                    cx: rng.uniform_range(0.2, 0.8) * nf,
                    cy: rng.uniform_range(0.2, 0.8) * nf,
                    a: rng.uniform_range(0.08, 0.25) * nf,
                    b: rng.uniform_range(0.08, 0.25) * nf,
                    cos: math::cos(angle),
                    sin: math::sin(angle),
                    intensity: spec.fg_mean + spec.fg_std * rng.normal(),
                }
            })
            .collect();
        let bg = spec.bg_mean + spec.bg_std * rng.normal();

        let mut image = vec![0.0; n * n];
        let mut mask = vec![0.0; n * n];
        let sub = SUPERSAMPLE as f64;
        for r in 0..n {
            for c in 0..n {
                let mut inside = 0usize;
                let mut value = 0.0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = c as f64 + (sx as f64 + 0.5) / sub;
                        let y = r as f64 + (sy as f64 + 0.5) / sub;
                        match ellipses.iter().find(|e| e.contains(x, y)) {
                            Some(e) => {
                                inside += 1;
                                value += e.intensity;
                            }
                            None => value += bg,
                        }
                    }
                }
                let total = (SUPERSAMPLE * SUPERSAMPLE) as f64;
                image[r * n + c] = value / total;
                mask[r * n + c] = if 2 * inside >= SUPERSAMPLE * SUPERSAMPLE { 1.0 } else { 0.0 };
            }
        }
        let fraction = mask.iter().sum::<f64>() / (n * n) as f64;
        if fraction < FG_FRACTION_RANGE.0 || fraction > FG_FRACTION_RANGE.1 {
            continue;
        }

        for _ in 0..spec.distractors {
            // Gaussian blob centred on background
            let (cy, cx) = loop {
                let (y, x) = (rng.below(n), rng.below(n));
                if mask[y * n + x] == 0.0 {
                    break (y as f64 + 0.5, x as f64 + 0.5);
                }
            };
            let radius = rng.uniform_range(DISTRACTOR_RADIUS.0, DISTRACTOR_RADIUS.1);
            let peak = spec.fg_mean - bg + spec.fg_std * rng.normal();
            let reach = (radius * 3.0) as usize + 1;
            let (r0, c0) = (cy as usize, cx as usize);
            for r in r0.saturating_sub(reach)..(r0 + reach + 1).min(n) {
                for c in c0.saturating_sub(reach)..(c0 + reach + 1).min(n) {
                    let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                    let d2 = dy * dy + dx * dx;
                    image[r * n + c] += peak * math::exp(-d2 / (2.0 * radius * radius));
                }
            }
        }
        if spec.noise_sigma > 0.0 {
            for v in &mut image {
                *v += spec.noise_sigma * rng.normal();
            }
        }
        standardize(&mut image);
        return Ok(LabeledSample {
            id: index,
            image: Tensor::new(vec![1, n, n], image)?,
            mask: Tensor::new(vec![n, n], mask)?,
        });
    }
    Err(Error::invalid(format!(
        "could not place shapes with foreground fraction in {:?} after {MAX_ATTEMPTS} attempts",
        FG_FRACTION_RANGE
    )))
}

/// Zero mean, unit (population) variance. Constant inputs are only centred.
pub fn standardize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter_mut().for_each(|v| *v -= mean);
    let var = values.iter().map(|v| v * v).sum::<f64>() / n;
    if var > 0.0 {
        let sd = math::sqrt(var);
        values.iter_mut().for_each(|v| *v /= sd);
    }
    // recentre after scaling so rounding in the division does not leave a bias
    let mean = values.iter().sum::<f64>() / n;
    values.iter_mut().for_each(|v| *v -= mean);
}

/// How a dataset was produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    pub gen: GenSpec,
    pub split_seed: u64,
    pub labeled_fraction: f64,
    pub val_fraction: f64,
}

/// Labeled, unlabeled and validation pools.
///
/// Unlabeled samples carry no mask. The masks of unlabeled images are kept
/// aside in `diagnostic_masks` so a dataset can be re-split with a different
/// label budget; the training loop never reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiDataset {
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<UnlabeledSample>,
    pub validation: Vec<LabeledSample>,
    pub image_size: usize,
    pub provenance: Option<Provenance>,
    diagnostic_masks: Vec<(u32, Tensor)>,
}

impl SemiDataset {
    /// Checks the pool invariants: square equal-sized images, binary masks
    /// of matching extent, and disjoint ids.
    pub fn new(
        labeled: Vec<LabeledSample>,
        unlabeled: Vec<UnlabeledSample>,
        validation: Vec<LabeledSample>,
        provenance: Option<Provenance>,
        diagnostic_masks: Vec<(u32, Tensor)>,
    ) -> Result<Self> {
        let first = labeled
            .first()
            .map(|s| &s.image)
            .or(unlabeled.first().map(|s| &s.image))
            .or(validation.first().map(|s| &s.image))
            .ok_or_else(|| Error::invalid("dataset has no images"))?;
        let (ch, size) = match first.shape() {
            [c, h, w] if h == w => (*c, *h),
            s => return Err(Error::shape("dataset", format!("images must be [C, N, N], got {s:?}"))),
        };
        let img_shape = [ch, size, size];
        let check_mask = |m: &Tensor| -> Result<()> {
            if m.shape() != [size, size] || m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::shape("dataset", "masks must be binary [N, N]"));
            }
            Ok(())
        };
        let mut ids = Vec::new();
        for s in labeled.iter().chain(&validation) {
            if s.image.shape() != img_shape {
                return Err(Error::shape("dataset", format!("image {} has shape {:?}", s.id, s.image.shape())));
            }
            check_mask(&s.mask)?;
            ids.push(s.id);
        }
        for s in &unlabeled {
            if s.image.shape() != img_shape {
                return Err(Error::shape("dataset", format!("image {} has shape {:?}", s.id, s.image.shape())));
            }
            ids.push(s.id);
        }
        for (_, m) in &diagnostic_masks {
            check_mask(m)?;
        }
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("sample ids must be unique across pools"));
        }
        Ok(SemiDataset {
            labeled,
            unlabeled,
            validation,
            image_size: size,
            provenance,
            diagnostic_masks,
        })
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len() + self.validation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Masks of unlabeled images, for diagnostics and re-splitting only.
    pub fn diagnostic_masks(&self) -> &[(u32, Tensor)] {
        &self.diagnostic_masks
    }

    /// Every `(image, mask)` pair ordered by id, using diagnostic masks for
    /// the unlabeled pool.
    pub fn all_pairs(&self) -> Result<Vec<LabeledSample>> {
        let mut pairs: Vec<LabeledSample> = self.labeled.iter().chain(&self.validation).cloned().collect();
        for u in &self.unlabeled {
            let mask = self
                .diagnostic_masks
                .iter()
                .find(|(id, _)| *id == u.id)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| Error::invalid(format!("no diagnostic mask for unlabeled image {}", u.id)))?;
            pairs.push(LabeledSample {
                id: u.id,
                image: u.image.clone(),
                mask,
            });
        }
        pairs.sort_by_key(|s| s.id);
        Ok(pairs)
    }
}

/// Pool sizes for `n` images: `(validation, labeled)`; the rest is unlabeled.
pub fn split_sizes(n: usize, labeled_fraction: f64, val_fraction: f64) -> Result<(usize, usize)> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::invalid(format!("labeled_fraction {labeled_fraction} not in (0, 1]")));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid(format!("val_fraction {val_fraction} not in (0, 1)")));
    }
    let n_val = math::round(val_fraction * n as f64) as usize;
    let n_lab = (math::round(labeled_fraction * n as f64) as usize).min(n.saturating_sub(n_val));
    if n_val == 0 || n_lab == 0 {
        return Err(Error::invalid(format!(
            "{n} images give {n_lab} labeled and {n_val} validation images"
        )));
    }
    Ok((n_val, n_lab))
}

/// Shuffled split. The first `val_fraction` of the permutation is
/// validation, the next `labeled_fraction` is labeled (capped at what is
/// left), the remainder unlabeled. With a fixed seed, validation does not
/// depend on `labeled_fraction` and labeled sets grow by inclusion.
pub fn split(pairs: Vec<LabeledSample>, labeled_fraction: f64, val_fraction: f64, seed: u64) -> Result<SemiDataset> {
    let (n_val, n_lab) = split_sizes(pairs.len(), labeled_fraction, val_fraction)?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    RngStream::new(seed, StreamKind::Split).shuffle(&mut order);
    let mut role = vec![0u8; pairs.len()];
    for (rank, &i) in order.iter().enumerate() {
        role[i] = if rank < n_val {
            0
        } else if rank < n_val + n_lab {
            1
        } else {
            2
        };
    }
    let (mut labeled, mut unlabeled, mut validation, mut diag) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (s, r) in pairs.into_iter().zip(role) {
        match r {
            0 => validation.push(s),
            1 => labeled.push(s),
            _ => {
                diag.push((s.id, s.mask));
                unlabeled.push(UnlabeledSample { id: s.id, image: s.image });
            }
        }
    }
    SemiDataset::new(labeled, unlabeled, validation, None, diag)
}

/// Generates and splits in one go, recording provenance.
pub fn generate_split(spec: &GenSpec, labeled_fraction: f64, val_fraction: f64, split_seed: u64) -> Result<SemiDataset> {
    let mut ds = split(generate(spec)?, labeled_fraction, val_fraction, split_seed)?;
    ds.provenance = Some(Provenance {
        gen: *spec,
        split_seed,
        labeled_fraction,
        val_fraction,
    });
    Ok(ds)
}

/// Scale range for [`augment`].
pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);

/// Random flip/rotation (any of the eight) and a random rescale, applied
/// identically to the image and (if given) its mask.
pub fn augment(image: &Tensor, mask: Option<&Tensor>, rng: &mut RngStream) -> Result<(Tensor, Option<Tensor>)> {
    let op = TransformOp::sample(rng, SamplingSet::Full);
    let scale = rng.uniform_range(SCALE_RANGE.0, SCALE_RANGE.1);
    augment_with(image, mask, op, scale)
}

/// Deterministic core of [`augment`]: transform by `op`, resize by `scale`
/// (bilinear for the image, nearest for the mask), then centre crop or
/// zero-pad back to the original extent.
pub fn augment_with(image: &Tensor, mask: Option<&Tensor>, op: TransformOp, scale: f64) -> Result<(Tensor, Option<Tensor>)> {
    let (ch, n) = match image.shape() {
        [c, h, w] if h == w => (*c, *h),
        s => return Err(Error::shape("augment", format!("image must be [C, N, N], got {s:?}"))),
    };
    if let Some(m) = mask {
        if m.shape() != [n, n] {
            return Err(Error::shape("augment", format!("mask {:?} vs image {:?}", m.shape(), image.shape())));
        }
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("scale {scale} must be positive")));
    }
    let img = op.apply(image)?;
    let msk = mask.map(|m| op.apply(m)).transpose()?;
    let m = (math::round(scale * n as f64) as usize).max(1);
    if m == n {
        return Ok((img, msk));
    }
    let mut out_img = Vec::with_capacity(ch * n * n);
    for plane in img.data().chunks_exact(n * n) {
        out_img.extend(fit(&resize_bilinear(plane, n, m), m, n));
    }
    let out_mask = msk
        .map(|mt| Tensor::new(vec![n, n], fit(&resize_nearest(mt.data(), n, m), m, n)))
        .transpose()?;
    Ok((Tensor::new(vec![ch, n, n], out_img)?, out_mask))
}

fn resize_bilinear(src: &[f64], n: usize, m: usize) -> Vec<f64> {
    let ratio = n as f64 / m as f64;
    let coord = |d: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = math::floor(s) as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(m * m);
    for r in 0..m {
        let (r0, r1, fr) = coord(r);
        for c in 0..m {
            let (c0, c1, fc) = coord(c);
            let top = src[r0 * n + c0] * (1.0 - fc) + src[r0 * n + c1] * fc;
            let bot = src[r1 * n + c0] * (1.0 - fc) + src[r1 * n + c1] * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    out
}

fn resize_nearest(src: &[f64], n: usize, m: usize) -> Vec<f64> {
    let ratio = n as f64 / m as f64;
    let idx = |d: usize| ((math::floor((d as f64 + 0.5) * ratio)) as usize).min(n - 1);
    let mut out = Vec::with_capacity(m * m);
    for r in 0..m {
        for c in 0..m {
            out.push(src[idx(r) * n + idx(c)]);
        }
    }
    out
}

/// Centre crop (m > n) or zero-pad (m < n) an `m x m` plane to `n x n`.
fn fit(src: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    if m >= n {
        let off = (m - n) / 2;
        for r in 0..n {
            out[r * n..(r + 1) * n].copy_from_slice(&src[(r + off) * m + off..][..n]);
        }
    } else {
        let off = (n - m) / 2;
        for r in 0..m {
            out[(r + off) * n + off..][..m].copy_from_slice(&src[r * m..(r + 1) * m]);
        }
    }
    out
}
