//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Operations are recorded on a [`Tape`] as they execute; each returns a
//! [`Var`] handle to its output. [`Tape::backward`] walks the tape in reverse
//! recording order, visiting every node once, and accumulates
//! `d loss / d node` into the gradient buffer of every node that requires a
//! gradient. Inputs always precede outputs on the tape, so a single reverse
//! sweep is a valid topological order.
//!
//! Every forward result and every propagated gradient is checked for
//! NaN/Inf; a non-finite value is reported as [`Error::NonFinite`].

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::gemm::{gemm, MatRef};
use crate::math;
use crate::rng::RngStream;
use crate::tensor::{Tensor, TensorView};
use crate::transforms::TransformOp;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied backward rule: `(inputs, output, d loss / d output)` to one
/// gradient buffer per input.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>>>;

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        /// im2col buffer, `patch x (n * oh * ow)` row-major
        cols: Vec<f64>,
    },
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    /// Elementwise multiplication by a fixed mask (dropout).
    Mask {
        input: Var,
        mask: Vec<f64>,
    },
    /// Additive constant (noise); gradient passes through.
    Shift(Var),
    SoftmaxChannels(Var),
    ConcatChannels(Var, Var),
    TransformSamples {
        input: Var,
        ops: Vec<TransformOp>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
    SupervisedCe {
        probs: Var,
        targets: Vec<usize>,
        labeled: Vec<bool>,
        norm: f64,
    },
    ConsistencyMse(Var, Var),
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Minimum probability inside the cross-entropy logarithm.
pub const CE_PROB_FLOOR: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Tensors held elsewhere are untouched.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Zeroes every gradient accumulator on the tape; values are untouched.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Records a leaf. Gradients accumulate into it iff it requires them.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        t.ensure_finite("leaf")?;
        Ok(self.push(t, Op::Leaf))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Result<Var> {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad())
    }

    fn record(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Result<Var> {
        let t = Tensor::new(shape, data)?.with_requires_grad(self.requires(inputs));
        t.ensure_finite(name)?;
        Ok(self.push(t, op))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4("conv2d")?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4("conv2d")?;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be odd and square, got {kh}x{kw}")));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{cout}]", self.value(bias).shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let k = kh;
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::shape("conv2d", format!("input {h}x{w} smaller than kernel {k}")));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad: padding,
            oh: (h + 2 * padding - k) / stride + 1,
            ow: (w + 2 * padding - k) / stride + 1,
        };
        let cols = im2col(self.value(input).data(), &geom);
        let (patch, ncols) = (geom.patch(), geom.cols());
        let mut out_mat = vec![0.0; cout * ncols];
        let bias_data = self.value(bias).data();
        for (co, row) in out_mat.chunks_exact_mut(ncols).enumerate() {
            row.iter_mut().for_each(|v| *v = bias_data[co]);
        }
        gemm(
            cout,
            patch,
            ncols,
            MatRef::row_major(self.value(weight).data(), patch),
            MatRef::row_major(&cols, ncols),
            1.0,
            &mut out_mat,
        );
        let out = channel_major_to_batch(&out_mat, n, cout, geom.oh * geom.ow);
        self.record(
            "conv2d",
            vec![n, cout, geom.oh, geom.ow],
            out,
            &[input, weight, bias],
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = x.shape().to_vec();
        self.record("relu", shape, out, &[input], Op::Relu(input))
    }

    /// 2x2 non-overlapping max pooling. Ties go to the first element of the
    /// window in row-major order.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2", format!("extents must be even, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        self.record("maxpool2", vec![n, c, oh, ow], out, &[input], Op::MaxPool2 { input, argmax })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("upsample2")?;
        let x = self.value(input).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                let row = &x[base + (oy / 2) * w..base + (oy / 2 + 1) * w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        self.record("upsample2", vec![n, c, oh, ow], out, &[input], Op::Upsample2(input))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Evaluation mode (and `rate == 0`) is the identity and draws nothing.
    pub fn dropout(&mut self, input: Var, rate: f64, rng: &mut RngStream, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - rate);
        let x = self.value(input);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = x.shape().to_vec();
        self.record("dropout", shape, out, &[input], Op::Mask { input, mask })
    }

    /// Adds i.i.d. `N(0, sigma^2)` noise. `sigma == 0` is the identity.
    pub fn add_gaussian_noise(&mut self, input: Var, sigma: f64, rng: &mut RngStream) -> Result<Var> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("noise sigma must be finite and >= 0, got {sigma}")));
        }
        if sigma == 0.0 {
            return Ok(input);
        }
        let x = self.value(input);
        let out = x.data().iter().map(|&v| v + sigma * rng.normal()).collect();
        let shape = x.shape().to_vec();
        self.record("add_gaussian_noise", shape, out, &[input], Op::Shift(input))
    }

    /// Per-pixel softmax over the channel axis of an `N,C,H,W` tensor.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("softmax_channels")?;
        if c < 2 {
            return Err(Error::shape("softmax_channels", format!("need at least 2 channels, got {c}")));
        }
        let x = self.value(input).data();
        let hw = h * w;
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mut max = f64::NEG_INFINITY;
                for ch in 0..c {
                    max = max.max(x[base + ch * hw + p]);
                }
                let mut total = 0.0;
                for ch in 0..c {
                    let e = math::exp(x[base + ch * hw + p] - max);
                    out[base + ch * hw + p] = e;
                    total += e;
                }
                for ch in 0..c {
                    out[base + ch * hw + p] /= total;
                }
            }
        }
        self.record("softmax_channels", vec![n, c, h, w], out, &[input], Op::SoftmaxChannels(input))
    }

    /// Concatenates two `N,C,H,W` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4("concat_channels")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let hw = h * w;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&xa[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&xb[s * cb * hw..(s + 1) * cb * hw]);
        }
        self.record("concat_channels", vec![n, ca + cb, h, w], out, &[a, b], Op::ConcatChannels(a, b))
    }

    /// Applies `ops[i]` to sample `i` of an `N,...,H,W` tensor.
    pub fn transform_samples(&mut self, input: Var, ops: &[TransformOp]) -> Result<Var> {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        if shape.first() != Some(&ops.len()) {
            return Err(Error::shape(
                "transform_samples",
                format!("{} ops for shape {:?}", ops.len(), shape),
            ));
        }
        let per = x.len() / ops.len().max(1);
        let mut out = Vec::with_capacity(x.len());
        for (i, op) in ops.iter().enumerate() {
            out.extend(op.apply_slice(&x.data()[i * per..(i + 1) * per], &shape[1..])?);
        }
        self.record(
            "transform_samples",
            shape,
            out,
            &[input],
            Op::TransformSamples {
                input,
                ops: ops.to_vec(),
            },
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        self.record("add", shape, out, &[a, b], Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.value(a).shape().to_vec();
        self.record("mul", shape, out, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x * factor).collect();
        let shape = self.value(a).shape().to_vec();
        self.record("scale", shape, out, &[a], Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.record("sum", Vec::new(), vec![s], &[a], Op::Sum(a))
    }

    /// `sum_i weight_i * term_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, wgt) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::shape("weighted_sum", format!("terms must be scalars, got {:?}", t.shape())));
            }
            if !wgt.is_finite() {
                return Err(Error::NonFinite { op: "weighted_sum" });
            }
            total += wgt * t.data()[0];
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.record("weighted_sum", Vec::new(), vec![total], &inputs, Op::WeightedSum(terms.to_vec()))
    }

    /// Mean of `-ln p[true class]` over the pixels of labeled samples.
    ///
    /// `labels` is `N,H,W` of class ids; samples with `labeled[i] == false`
    /// contribute nothing, not even through their label values.
    pub fn supervised_ce(&mut self, probs: Var, labels: &Tensor, labeled: &[bool]) -> Result<Var> {
        let (n, c, h, w) = self.value(probs).dims4("supervised_ce")?;
        if labels.shape() != [n, h, w] || labeled.len() != n {
            return Err(Error::shape(
                "supervised_ce",
                format!(
                    "probs {:?}, labels {:?}, {} labeled flags",
                    self.value(probs).shape(),
                    labels.shape(),
                    labeled.len()
                ),
            ));
        }
        let count = labeled.iter().filter(|&&l| l).count();
        if count == 0 {
            return Err(Error::NoLabeledSamples);
        }
        let hw = h * w;
        let mut targets = vec![0usize; n * hw];
        for (i, &is_labeled) in labeled.iter().enumerate() {
            if !is_labeled {
                continue;
            }
            for p in 0..hw {
                let y = labels.data()[i * hw + p];
                if !(y >= 0.0 && y == math::floor(y) && (y as usize) < c) {
                    return Err(Error::invalid(format!("label {y} is not a class id below {c}")));
                }
                targets[i * hw + p] = y as usize;
            }
        }
        let norm = (count * hw) as f64;
        let pv = self.value(probs).data();
        let mut total = 0.0;
        for (i, &is_labeled) in labeled.iter().enumerate() {
            if !is_labeled {
                continue;
            }
            for p in 0..hw {
                let prob = pv[(i * c + targets[i * hw + p]) * hw + p];
                total -= math::ln(prob.max(CE_PROB_FLOOR));
            }
        }
        self.record(
            "supervised_ce",
            Vec::new(),
            vec![total / norm],
            &[probs],
            Op::SupervisedCe {
                probs,
                targets,
                labeled: labeled.to_vec(),
                norm,
            },
        )
    }

    /// `sum (a - b)^2 / (N * C * H * W)`; gradients flow into both arguments.
    pub fn consistency_mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("consistency_mse", a, b)?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        if xa.is_empty() {
            return Err(Error::shape("consistency_mse", "empty operands"));
        }
        let total: f64 = xa.iter().zip(xb).map(|(x, y)| (x - y) * (x - y)).sum();
        let m = xa.len() as f64;
        self.record("consistency_mse", Vec::new(), vec![total / m], &[a, b], Op::ConsistencyMse(a, b))
    }

    /// Records an operation with a caller-supplied forward value and
    /// backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, backward: BackwardFn) -> Result<Var> {
        let shape = output.shape().to_vec();
        self.record(
            "custom",
            shape,
            output.into_data(),
            inputs,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    /// Accumulates `d loss / d v` into every reachable node that requires a
    /// gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.requires_grad() {
            return Ok(());
        }
        self.nodes[loss.0].value.accumulate_grad(&[1.0])?;
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if matches!(node.op, Op::Leaf) || !node.value.requires_grad() {
                continue;
            }
            let Some(g) = node.value.take_grad() else {
                continue;
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            propagate(&node.op, &node.value, &g, before)?;
            node.value.put_grad(Some(g));
        }
        Ok(())
    }
}

/// Output positions `ox` whose input index `ox * stride + k - pad` lies in
/// `0..len`, as a half-open range.
fn valid_range(len: usize, out: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.cols();
    let ohw = g.oh * g.ow;
    let mut cols = vec![0.0; g.patch() * ncols];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            let (oy0, oy1) = valid_range(g.h, g.oh, g.stride, ky, g.pad);
            for kx in 0..g.k {
                let (ox0, ox1) = valid_range(g.w, g.ow, g.stride, kx, g.pad);
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.n {
                    let plane = &x[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let src_row = &plane[iy * g.w..][..g.w];
                        let drow = &mut dst[b * ohw + oy * g.ow..][ox0..ox1];
                        let ix0 = ox0 * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            drow.copy_from_slice(&src_row[ix0..ix0 + drow.len()]);
                        } else {
                            for (j, d) in drow.iter_mut().enumerate() {
                                *d = src_row[ix0 + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_acc(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncols = g.cols();
    let ohw = g.oh * g.ow;
    for ci in 0..g.cin {
        for ky in 0..g.k {
            let (oy0, oy1) = valid_range(g.h, g.oh, g.stride, ky, g.pad);
            for kx in 0..g.k {
                let (ox0, ox1) = valid_range(g.w, g.ow, g.stride, kx, g.pad);
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.n {
                    let plane = &mut dx[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let srow = &src[b * ohw + oy * g.ow..][ox0..ox1];
                        let ix0 = ox0 * g.stride + kx - g.pad;
                        let prow = &mut plane[iy * g.w..][..g.w];
                        if g.stride == 1 {
                            for (d, &v) in prow[ix0..ix0 + srow.len()].iter_mut().zip(srow) {
                                *d += v;
                            }
                        } else {
                            for (j, &v) in srow.iter().enumerate() {
                                prow[ix0 + j * g.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[C, N*HW]` to `[N, C, HW]`.
fn channel_major_to_batch(m: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c * hw];
    for ch in 0..c {
        for b in 0..n {
            out[(b * c + ch) * hw..][..hw].copy_from_slice(&m[ch * n * hw + b * hw..][..hw]);
        }
    }
    out
}

/// `[N, C, HW]` to `[C, N*HW]`.
fn batch_to_channel_major(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c * hw];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * hw + b * hw..][..hw].copy_from_slice(&x[(b * c + ch) * hw..][..hw]);
        }
    }
    out
}

fn acc(before: &mut [Node], v: Var, g: &[f64]) -> Result<()> {
    let t = &mut before[v.0].value;
    if t.requires_grad() {
        t.accumulate_grad(g)?;
    }
    Ok(())
}

fn acc_with(before: &mut [Node], v: Var, f: impl FnOnce(&TensorView, &mut [f64])) {
    let t = &mut before[v.0].value;
    if !t.requires_grad() {
        return;
    }
    let (view, g) = t.split_for_grad();
    f(&view, g);
}

fn propagate(op: &Op, out: &Tensor, g: &[f64], before: &mut [Node]) -> Result<()> {
    match op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => {
            let (patch, ncols) = (geom.patch(), geom.cols());
            let gmat = batch_to_channel_major(g, geom.n, geom.cout, geom.oh * geom.ow);
            if before[bias.0].value.requires_grad() {
                let gb: Vec<f64> = gmat.chunks_exact(ncols).map(|r| r.iter().sum()).collect();
                acc(before, *bias, &gb)?;
            }
            if before[weight.0].value.requires_grad() {
                let mut gw = vec![0.0; geom.cout * patch];
                gemm(
                    geom.cout,
                    ncols,
                    patch,
                    MatRef::row_major(&gmat, ncols),
                    MatRef::transposed(cols, ncols),
                    0.0,
                    &mut gw,
                );
                acc(before, *weight, &gw)?;
            }
            if before[input.0].value.requires_grad() {
                let mut gcols = vec![0.0; patch * ncols];
                gemm(
                    patch,
                    geom.cout,
                    ncols,
                    MatRef::transposed(before[weight.0].value.data(), patch),
                    MatRef::row_major(&gmat, ncols),
                    0.0,
                    &mut gcols,
                );
                let mut gx = vec![0.0; geom.n * geom.cin * geom.h * geom.w];
                col2im_acc(&gcols, geom, &mut gx);
                acc(before, *input, &gx)?;
            }
        }
        Op::Relu(x) => acc_with(before, *x, |xt, gx| {
            for ((d, &xv), &gv) in gx.iter_mut().zip(xt.data()).zip(g) {
                if xv > 0.0 {
                    *d += gv;
                }
            }
        }),
        Op::MaxPool2 { input, argmax } => acc_with(before, *input, |_, gx| {
            for (&src, &gv) in argmax.iter().zip(g) {
                gx[src] += gv;
            }
        }),
        Op::Upsample2(x) => {
            let (n, c, h, w) = before[x.0].value.dims4("upsample2")?;
            acc_with(before, *x, |_, gx| {
                let ow = 2 * w;
                for plane in 0..n * c {
                    let gplane = &g[plane * 4 * h * w..][..4 * h * w];
                    let dst = &mut gx[plane * h * w..][..h * w];
                    for oy in 0..2 * h {
                        for ox in 0..ow {
                            dst[(oy / 2) * w + ox / 2] += gplane[oy * ow + ox];
                        }
                    }
                }
            });
        }
        Op::Mask { input, mask } => acc_with(before, *input, |_, gx| {
            for ((d, &m), &gv) in gx.iter_mut().zip(mask).zip(g) {
                *d += m * gv;
            }
        }),
        Op::Shift(x) => acc(before, *x, g)?,
        Op::SoftmaxChannels(x) => {
            let (n, c, h, w) = out.dims4("softmax_channels")?;
            let y = out.data();
            let hw = h * w;
            acc_with(before, *x, |_, gx| {
                for b in 0..n {
                    let base = b * c * hw;
                    for p in 0..hw {
                        let dot: f64 = (0..c).map(|ch| g[base + ch * hw + p] * y[base + ch * hw + p]).sum();
                        for ch in 0..c {
                            let idx = base + ch * hw + p;
                            gx[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            });
        }
        Op::ConcatChannels(a, b) => {
            let (n, ca, h, w) = before[a.0].value.dims4("concat_channels")?;
            let cb = before[b.0].value.dims4("concat_channels")?.1;
            let hw = h * w;
            let (mut ga, mut gb) = (Vec::with_capacity(n * ca * hw), Vec::with_capacity(n * cb * hw));
            for s in 0..n {
                let chunk = &g[s * (ca + cb) * hw..(s + 1) * (ca + cb) * hw];
                ga.extend_from_slice(&chunk[..ca * hw]);
                gb.extend_from_slice(&chunk[ca * hw..]);
            }
            acc(before, *a, &ga)?;
            acc(before, *b, &gb)?;
        }
        Op::TransformSamples { input, ops } => {
            let shape = out.shape();
            let per = g.len() / ops.len();
            let mut gx = Vec::with_capacity(g.len());
            for (i, op) in ops.iter().enumerate() {
                gx.extend(op.inverse().apply_slice(&g[i * per..(i + 1) * per], &shape[1..])?);
            }
            acc(before, *input, &gx)?;
        }
        Op::Add(a, b) => {
            acc(before, *a, g)?;
            acc(before, *b, g)?;
        }
        Op::Mul(a, b) => {
            let (xa, xb) = (before[a.0].value.data().to_vec(), before[b.0].value.data().to_vec());
            let ga: Vec<f64> = g.iter().zip(&xb).map(|(gv, y)| gv * y).collect();
            let gb: Vec<f64> = g.iter().zip(&xa).map(|(gv, x)| gv * x).collect();
            acc(before, *a, &ga)?;
            acc(before, *b, &gb)?;
        }
        Op::Scale(a, factor) => {
            let ga: Vec<f64> = g.iter().map(|v| v * factor).collect();
            acc(before, *a, &ga)?;
        }
        Op::Sum(a) => {
            let n = before[a.0].value.len();
            acc(before, *a, &vec![g[0]; n])?;
        }
        Op::WeightedSum(terms) => {
            for &(v, wgt) in terms {
                acc(before, v, &[wgt * g[0]])?;
            }
        }
        Op::SupervisedCe {
            probs,
            targets,
            labeled,
            norm,
        } => {
            let (_, c, h, w) = before[probs.0].value.dims4("supervised_ce")?;
            let hw = h * w;
            acc_with(before, *probs, |pt, gp| {
                let pv = pt.data();
                for (i, &is_labeled) in labeled.iter().enumerate() {
                    if !is_labeled {
                        continue;
                    }
                    for p in 0..hw {
                        let idx = (i * c + targets[i * hw + p]) * hw + p;
                        // the floor is flat, so its derivative is zero
                        if pv[idx] > CE_PROB_FLOOR {
                            gp[idx] -= g[0] / (norm * pv[idx]);
                        }
                    }
                }
            });
        }
        Op::ConsistencyMse(a, b) => {
            let (xa, xb) = (before[a.0].value.data(), before[b.0].value.data());
            let scale = 2.0 * g[0] / xa.len() as f64;
            let ga: Vec<f64> = xa.iter().zip(xb).map(|(x, y)| scale * (x - y)).collect();
            let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
            acc(before, *a, &ga)?;
            acc(before, *b, &gb)?;
        }
        Op::Custom { inputs, backward } => {
            let grads = {
                let refs: Vec<&Tensor> = inputs.iter().map(|v| &before[v.0].value).collect();
                backward(&refs, out, g)
            };
            if grads.len() != inputs.len() {
                return Err(Error::shape("custom", "backward returned wrong number of gradients"));
            }
            for (v, gv) in inputs.iter().zip(grads) {
                acc(before, *v, &gv)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKind;

    fn param(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true)).unwrap()
    }

    #[test]
    fn conv_of_ones_centre_is_nine() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(&[1])).unwrap();
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
        assert_eq!(tape.value(y).data()[4], 9.0);
        assert_eq!(tape.value(y).data()[0], 4.0);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut tape = Tape::new();
        let xt = Tensor::from_fn(&[2, 1, 5, 5], |i| (i as f64 * 0.37).sin());
        let x = tape.constant(xt.clone()).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(Tensor::new(vec![1, 1, 3, 3], k).unwrap()).unwrap();
        let b = tape.constant(Tensor::zeros(&[1])).unwrap();
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), xt.data());
    }

    #[test]
    fn conv_shape_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[1])).unwrap();
        assert!(matches!(tape.conv2d(x, w, b, 1, 1), Err(Error::Shape { .. })));
        let w2 = tape.constant(Tensor::zeros(&[1, 2, 2, 2])).unwrap();
        assert!(matches!(tape.conv2d(x, w2, b, 1, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::new();
        let x = param(&mut tape, &[3], vec![-1.0, 0.0, 2.0]);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let neg = param(&mut tape, &[4], vec![-1.0, -2.0, -0.5, -3.0]);
        let r = tape.relu(neg).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0; 4]);
        assert_eq!(tape.grad(neg).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn maxpool_single_window_and_ties() {
        let mut tape = Tape::new();
        let x = param(&mut tape, &[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let c = param(&mut tape, &[1, 1, 4, 4], vec![5.0; 16]);
        let p = tape.maxpool2(c).unwrap();
        assert_eq!(tape.value(p).data(), &[5.0; 4]);
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(c).unwrap();
        for (i, &gv) in g.iter().enumerate() {
            let (r, col) = (i / 4, i % 4);
            let first = r % 2 == 0 && col % 2 == 0;
            assert_eq!(gv, if first { 1.0 } else { 0.0 });
        }
        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 4])).unwrap();
        assert!(tape.maxpool2(odd).is_err());
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        let u = tape.upsample2(one).unwrap();
        assert_eq!(tape.value(u).data(), &[1.0; 4]);
        let xt = Tensor::from_fn(&[2, 3, 3, 5], |i| (i as f64 * 1.3).cos());
        let x = tape.constant(xt.clone()).unwrap();
        let u = tape.upsample2(x).unwrap();
        let p = tape.maxpool2(u).unwrap();
        assert_eq!(tape.value(p), &xt);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut tape = Tape::new();
        let mut rng = RngStream::new(1, StreamKind::Dropout);
        let x = tape.constant(Tensor::from_fn(&[10], |i| i as f64)).unwrap();
        assert_eq!(tape.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.3, &mut rng, false).unwrap(), x);
        assert!(tape.dropout(x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_zero_fraction() {
        let mut tape = Tape::new();
        let mut rng = RngStream::new(11, StreamKind::Dropout);
        let x = tape.constant(Tensor::full(&[1_000_000], 1.0)).unwrap();
        let y = tape.dropout(x, 0.3, &mut rng, true).unwrap();
        let zeros = tape.value(y).data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / 1e6;
        assert!((frac - 0.3).abs() < 0.005, "{frac}");
        let kept = tape.value(y).data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((kept - 1.0 / 0.7).abs() < 1e-15);
    }

    #[test]
    fn dropout_and_noise_replay_bit_exactly() {
        let run = || {
            let mut tape = Tape::new();
            let mut d = RngStream::new(5, StreamKind::Dropout);
            let mut n = RngStream::new(5, StreamKind::Noise);
            let x = tape.constant(Tensor::from_fn(&[64], |i| i as f64 * 0.1)).unwrap();
            let y = tape.dropout(x, 0.3, &mut d, true).unwrap();
            let z = tape.add_gaussian_noise(y, 0.1, &mut n).unwrap();
            tape.value(z).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn noise_moments_and_gradient() {
        let mut tape = Tape::new();
        let mut rng = RngStream::new(2, StreamKind::Noise);
        let x = param(&mut tape, &[1_000_000], vec![0.0; 1_000_000]);
        let same = tape.add_gaussian_noise(x, 0.0, &mut rng).unwrap();
        assert_eq!(same, x);
        let y = tape.add_gaussian_noise(x, 0.1, &mut rng).unwrap();
        let d = tape.value(y).data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (d.len() - 1) as f64;
        assert!((var.sqrt() - 0.1).abs() < 0.002, "{}", var.sqrt());
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::new(vec![1, 2, 1, 2], vec![0.3, 0.0, 0.3, math::ln(3.0)]).unwrap())
            .unwrap();
        let y = tape.softmax_channels(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[2] - 0.5).abs() < 1e-15);
        assert!((d[1] - 0.25).abs() < 1e-12 && (d[3] - 0.75).abs() < 1e-12);

        let base = Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.71).sin() * 3.0);
        let shifted = Tensor::new(base.shape().to_vec(), base.data().iter().map(|v| v + 17.5).collect()).unwrap();
        let a = tape.constant(base).unwrap();
        let b = tape.constant(shifted).unwrap();
        let sa = tape.softmax_channels(a).unwrap();
        let sb = tape.softmax_channels(b).unwrap();
        assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-12);
        let one = tape.constant(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        assert!(tape.softmax_channels(one).is_err());
    }

    #[test]
    fn backward_simple_losses() {
        let mut tape = Tape::new();
        let xt: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let x = param(&mut tape, &[6], xt.clone());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let x = param(&mut tape, &[6], xt.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &xt[..]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = param(&mut tape, &[2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        assert!(Tape::new().backward(Var(0)).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = param(&mut tape, &[2], vec![1e308, 1e308]);
        let y = tape.scale(x, 10.0);
        assert!(matches!(y, Err(Error::NonFinite { op: "scale" })));
        assert!(tape.leaf(Tensor::new(vec![1], vec![f64::NAN]).unwrap()).is_err());
    }

    #[test]
    fn zero_grad_keeps_values() {
        let mut tape = Tape::new();
        let x = param(&mut tape, &[2], vec![3.0, 4.0]);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.zero_grad();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
        assert_eq!(tape.value(x).data(), &[3.0, 4.0]);
    }
}
