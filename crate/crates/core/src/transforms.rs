//! The eight symmetries of a square acting on the last two axes of a tensor.
//!
//! `FlipRotK` means: rotate by `K` quarter turns counter-clockwise, then flip
//! horizontally. Every element is an exact index permutation, so applying
//! an element and then its inverse restores the input bit for bit.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransformOp {
    Rot0,
    Rot90,
    Rot180,
    Rot270,
    Flip,
    FlipRot90,
    FlipRot180,
    FlipRot270,
}

/// Which elements [`TransformOp::sample`] draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingSet {
    /// The four rotations plus a plain horizontal flip.
    #[default]
    FlipAndRotations,
    /// All eight group elements.
    Full,
    /// Always `Rot0`; disables the transform without touching other code paths.
    IdentityOnly,
}

impl SamplingSet {
    pub fn ops(self) -> &'static [TransformOp] {
        use TransformOp::*;
        match self {
            SamplingSet::FlipAndRotations => &[Rot0, Rot90, Rot180, Rot270, Flip],
            SamplingSet::Full => &TransformOp::ALL,
            SamplingSet::IdentityOnly => &[Rot0],
        }
    }
}

impl TransformOp {
    pub const ALL: [TransformOp; 8] = [
        TransformOp::Rot0,
        TransformOp::Rot90,
        TransformOp::Rot180,
        TransformOp::Rot270,
        TransformOp::Flip,
        TransformOp::FlipRot90,
        TransformOp::FlipRot180,
        TransformOp::FlipRot270,
    ];

    /// `(flip, quarter_turns)` with the op equal to `flip? ∘ rot^quarter_turns`.
    pub fn parts(self) -> (bool, u8) {
        let idx = self as u8;
        (idx >= 4, idx % 4)
    }

    pub fn from_parts(flip: bool, quarter_turns: u8) -> Self {
        Self::ALL[(flip as usize) * 4 + (quarter_turns % 4) as usize]
    }

    /// The element `c` with `c.apply(x) == a.apply(b.apply(x))`.
    pub fn compose(a: TransformOp, b: TransformOp) -> TransformOp {
        let (fa, ka) = a.parts();
        let (fb, kb) = b.parts();
        // R^k F = F R^-k
        if fb {
            Self::from_parts(fa ^ fb, (kb + 4 - ka) % 4)
        } else {
            Self::from_parts(fa, (ka + kb) % 4)
        }
    }

    pub fn inverse(self) -> TransformOp {
        match self.parts() {
            (false, k) => Self::from_parts(false, (4 - k) % 4),
            // flips with any rotation are involutions
            (true, _) => self,
        }
    }

    /// Input coordinate that lands on output `(row, col)` for an `n x n` plane.
    #[inline]
    pub fn source_coord(self, n: usize, row: usize, col: usize) -> (usize, usize) {
        let (flip, k) = self.parts();
        let (mut r, mut c) = if flip { (row, n - 1 - col) } else { (row, col) };
        for _ in 0..k {
            // one counter-clockwise quarter turn: out[r][c] = in[c][n-1-r]
            (r, c) = (c, n - 1 - r);
        }
        (r, c)
    }

    /// Output-to-input index table for one `n x n` plane.
    pub fn index_map(self, n: usize) -> Vec<usize> {
        let mut map = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let (sr, sc) = self.source_coord(n, r, c);
                map.push(sr * n + sc);
            }
        }
        map
    }

    /// Permutes the last two axes of `data` (of logical `shape`).
    pub fn apply_slice<T: Copy>(self, data: &[T], shape: &[usize]) -> Result<Vec<T>> {
        let n = square_extent(shape)?;
        let plane = n * n;
        if data.len() % plane.max(1) != 0 || shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "transform",
                format!("{} values do not fit shape {:?}", data.len(), shape),
            ));
        }
        if self == TransformOp::Rot0 {
            return Ok(data.to_vec());
        }
        let map = self.index_map(n);
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.chunks_exact(plane) {
            out.extend(map.iter().map(|&src| chunk[src]));
        }
        Ok(out)
    }

    pub fn apply(self, t: &Tensor) -> Result<Tensor> {
        Tensor::new(t.shape().to_vec(), self.apply_slice(t.data(), t.shape())?)
    }

    /// One draw from `set`, uniform over its elements.
    pub fn sample(rng: &mut RngStream, set: SamplingSet) -> TransformOp {
        let ops = set.ops();
        if ops.len() == 1 {
            return ops[0];
        }
        ops[rng.below(ops.len())]
    }
}

fn square_extent(shape: &[usize]) -> Result<usize> {
    match shape {
        [.., h, w] if h == w => Ok(*h),
        [.., h, w] => Err(Error::shape(
            "transform",
            format!("spatial extents must be square, got {h}x{w}"),
        )),
        _ => Err(Error::shape(
            "transform",
            format!("need at least two axes, got shape {:?}", shape),
        )),
    }
}
