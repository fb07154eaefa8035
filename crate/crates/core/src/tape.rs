//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in construction order. Because an
//! operation can only consume values that already exist, that order is a
//! topological order and [`Tape::backward`] simply walks it in reverse.
//! Nodes created from constants (images, targets) do not track gradients,
//! and neither does anything computed purely from them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{col2im_add, im2col, Patch};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Margin function of the batch-hard triplet loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TripletMargin {
    /// `ln(1 + e^z)`.
    Soft,
    /// `max(0, m + z)`.
    Hard(f64),
}

/// Stride/padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

/// Stride/padding/output-padding of a transposed convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeconvSpec {
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl DeconvSpec {
    /// Output extent for an input extent and kernel size.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::Config("deconv2d: stride must be >= 1".into()));
        }
        if self.out_pad >= self.stride {
            return Err(Error::Config(format!(
                "deconv2d: output padding {} must be smaller than stride {}",
                self.out_pad, self.stride
            )));
        }
        let full = (input.max(1) - 1) * self.stride + kernel + self.out_pad;
        if input == 0 || full <= 2 * self.pad {
            return Err(Error::Config(format!(
                "deconv2d: input extent {input}, kernel {kernel}, padding {} give an empty output",
                self.pad
            )));
        }
        Ok(full - 2 * self.pad)
    }

    /// Picks the output padding that maps `input` onto exactly `output`.
    pub fn for_output(input: usize, output: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        for out_pad in 0..stride.max(1) {
            let spec = DeconvSpec { stride, pad, out_pad };
            if spec.output_extent(input, kernel).ok() == Some(output) {
                return Ok(spec);
            }
        }
        Err(Error::Config(format!(
            "deconv2d: no output padding maps extent {input} to {output} with kernel {kernel}, stride {stride}, padding {pad}"
        )))
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        patch: Patch,
        cols: Vec<T>,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        patch: Patch,
    },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    ConcatBatch(Vec<Var>),
    SliceBatch {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    RowNorms {
        x: Var,
        squared: bool,
    },
    NormalizeRows(Var),
    PairwiseDistance(Var),
    BatchHard {
        d: Var,
        /// (anchor, hardest positive, hardest negative, dl/dz)
        terms: Vec<(usize, usize, usize, T)>,
    },
}

/// An append-only record of operations supporting one backward sweep.
pub struct Tape<T: Real> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    ops: Vec<Op<T>>,
    tracked: Vec<bool>,
    swept: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            tracked: Vec::new(),
            swept: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.tracked.push(tracked);
        Var(self.values.len() - 1)
    }

    /// A trainable (gradient-tracking) leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Gradient accumulated by the last backward sweep, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.tracked[v.0]
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.tracked[v.0])
    }

    /// Clears all gradients so that another backward sweep may run.
    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.swept = false;
    }

    // ---------------------------------------------------------------- ops

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, cin, h, wd] = self.value(x).dims4(OP)?;
        let [cout, wcin, kh, kw] = self.value(w).dims4(OP)?;
        if wcin != cin {
            return Err(Error::dim(OP, "in_channels", cin, wcin));
        }
        if spec.stride == 0 {
            return Err(Error::Config("conv2d: stride must be >= 1".into()));
        }
        if kh > h + 2 * spec.pad {
            return Err(Error::dim(OP, "height", kh, h + 2 * spec.pad));
        }
        if kw > wd + 2 * spec.pad {
            return Err(Error::dim(OP, "width", kw, wd + 2 * spec.pad));
        }
        if let Some(b) = b {
            let got = self.value(b).numel();
            if got != cout {
                return Err(Error::dim(OP, "bias", cout, got));
            }
        }
        let patch = Patch {
            channels: cin,
            in_h: h,
            in_w: wd,
            out_h: (h + 2 * spec.pad - kh) / spec.stride + 1,
            out_w: (wd + 2 * spec.pad - kw) / spec.stride + 1,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.pad,
        };
        let (rows, hw) = (patch.rows(), patch.cols());
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let plane = cin * h * wd;
        let mut out = vec![T::zero(); n * cout * hw];
        let mut cols = Vec::new();
        if !patch.is_pointwise() {
            cols = vec![T::zero(); n * rows * hw];
        }
        for s in 0..n {
            let src = if patch.is_pointwise() {
                &xin[s * plane..(s + 1) * plane]
            } else {
                let dst = &mut cols[s * rows * hw..(s + 1) * rows * hw];
                im2col(&xin[s * plane..(s + 1) * plane], &patch, dst);
                &*dst
            };
            let y = &mut out[s * cout * hw..(s + 1) * cout * hw];
            T::gemm(
                cout,
                rows,
                hw,
                T::one(),
                wt,
                (rows, 1),
                src,
                (hw, 1),
                T::zero(),
                y,
                (hw, 1),
            );
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), hw);
        }
        let tracked = self.any_tracked(&[x, w]) || b.is_some_and(|b| self.tracked[b.0]);
        let value = Tensor::new(&[n, cout, patch.out_h, patch.out_w], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, patch, cols }, tracked))
    }

    /// Transposed convolution with kernel layout `[Cin, Cout, kh, kw]`.
    ///
    /// This is the adjoint of [`conv2d`](Self::conv2d) with the same kernel
    /// memory, stride and padding; `out_pad` extends the output on the
    /// bottom/right so the extent is `(H - 1) * stride - 2 * pad + kh + out_pad`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: DeconvSpec) -> Result<Var> {
        const OP: &str = "deconv2d";
        let [n, cin, h, wd] = self.value(x).dims4(OP)?;
        let [wcin, cout, kh, kw] = self.value(w).dims4(OP)?;
        if wcin != cin {
            return Err(Error::dim(OP, "in_channels", cin, wcin));
        }
        let out_h = spec.output_extent(h, kh)?;
        let out_w = spec.output_extent(wd, kw)?;
        if let Some(b) = b {
            let got = self.value(b).numel();
            if got != cout {
                return Err(Error::dim(OP, "bias", cout, got));
            }
        }
        // Correlation geometry from the (larger) output grid back onto the input grid.
        let patch = Patch {
            channels: cout,
            in_h: out_h,
            in_w: out_w,
            out_h: h,
            out_w: wd,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.pad,
        };
        let (rows, hw) = (patch.rows(), patch.cols());
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let oplane = cout * out_h * out_w;
        let mut out = vec![T::zero(); n * oplane];
        let mut cols = vec![T::zero(); rows * hw];
        for s in 0..n {
            let xs = &xin[s * cin * hw..(s + 1) * cin * hw];
            T::gemm(
                rows,
                cin,
                hw,
                T::one(),
                wt,
                (1, rows),
                xs,
                (hw, 1),
                T::zero(),
                &mut cols,
                (hw, 1),
            );
            col2im_add(&cols, &patch, &mut out[s * oplane..(s + 1) * oplane]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), out_h * out_w);
        }
        let tracked = self.any_tracked(&[x, w]) || b.is_some_and(|b| self.tracked[b.0]);
        let value = Tensor::new(&[n, cout, out_h, out_w], out)?;
        Ok(self.push(value, Op::Deconv2d { x, w, b, patch }, tracked))
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = self.value(x);
        let value = Tensor::new(src.shape(), src.data().iter().map(|&v| f(v)).collect()).expect("same shape");
        let tracked = self.tracked[x.0];
        self.push(value, op, tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, Op::Abs(x), |v| v.abs())
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    fn zip(&mut self, a: Var, b: Var, op_name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                op_name,
                format!("operand shapes differ: {:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", Op::Mul(a, b), |p, q| p * q)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let tracked = self.tracked[x.0];
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        let tracked = self.tracked[x.0];
        self.push(Tensor::scalar(s), Op::Mean(x), tracked)
    }

    /// Non-overlapping or strided max pooling without padding.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        const OP: &str = "max_pool2d";
        let [n, c, h, w] = self.value(x).dims4(OP)?;
        if kernel == 0 || stride == 0 {
            return Err(Error::Config("max_pool2d: kernel and stride must be >= 1".into()));
        }
        if kernel > h {
            return Err(Error::dim(OP, "height", kernel, h));
        }
        if kernel > w {
            return Err(Error::dim(OP, "width", kernel, w));
        }
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let tracked = self.tracked[x.0];
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, tracked))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let tracked = self.tracked[x.0];
        let value = Tensor::new(&[n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), tracked))
    }

    /// `y = x W^T + b` with `x: [N, D]`, `W: [O, D]`, `b: [O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "dense";
        let [n, d] = self.value(x).dims2(OP)?;
        let [o, wd] = self.value(w).dims2(OP)?;
        if wd != d {
            return Err(Error::dim(OP, "in_features", d, wd));
        }
        let mut out = vec![T::zero(); n * o];
        T::gemm(
            n,
            d,
            o,
            T::one(),
            self.value(x).data(),
            (d, 1),
            self.value(w).data(),
            (1, d),
            T::zero(),
            &mut out,
            (o, 1),
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != o {
                return Err(Error::dim(OP, "bias", o, bias.len()));
            }
            for row in out.chunks_exact_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bias) {
                    *v += bb;
                }
            }
        }
        let tracked = self.any_tracked(&[x, w]) || b.is_some_and(|b| self.tracked[b.0]);
        let value = Tensor::new(&[n, o], out)?;
        Ok(self.push(value, Op::Dense { x, w, b }, tracked))
    }

    /// Channels `[start, start + len)` of an `[N, C, H, W]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("slice_channels")?;
        if start + len > c {
            return Err(Error::dim("slice_channels", "channels", c, start + len));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            out.extend_from_slice(&src[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        let tracked = self.tracked[x.0];
        let value = Tensor::new(&[n, len, h, w], out)?;
        Ok(self.push(value, Op::SliceChannels { x, start }, tracked))
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat_batch(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat_batch", "no inputs"))?;
        let tail = self.value(first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &v in xs {
            let t = self.value(v);
            if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                return Err(Error::shape(
                    "concat_batch",
                    format!("trailing extents differ: {:?} vs {:?}", t.shape(), tail),
                ));
            }
            lead += t.shape()[0];
            out.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let tracked = self.any_tracked(xs);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::ConcatBatch(xs.to_vec()), tracked))
    }

    /// Rows `[start, start + len)` along the leading axis.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let lead = *t
            .shape()
            .first()
            .ok_or_else(|| Error::shape("slice_batch", "scalar input"))?;
        if start + len > lead {
            return Err(Error::dim("slice_batch", "batch", lead, start + len));
        }
        let inner = t.numel() / lead.max(1);
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        let tracked = self.tracked[x.0];
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::SliceBatch { x, start }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked[x.0];
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Per-row Euclidean norm `sqrt(sum x^2 + eps)` (or the plain sum of
    /// squares when `squared`) over `rows` equal contiguous chunks.
    pub fn row_norms(&mut self, x: Var, rows: usize, squared: bool) -> Result<Var> {
        let t = self.value(x);
        if rows == 0 || !t.numel().is_multiple_of(rows) {
            return Err(Error::dim("row_norms", "rows", rows, t.numel()));
        }
        let eps = norm_eps::<T>();
        let data = t
            .data()
            .chunks_exact(t.numel() / rows)
            .map(|r| {
                let ss: T = r.iter().map(|&v| v * v).sum();
                if squared {
                    ss
                } else {
                    (ss + eps).sqrt()
                }
            })
            .collect();
        let tracked = self.tracked[x.0];
        let value = Tensor::new(&[rows], data)?;
        Ok(self.push(value, Op::RowNorms { x, squared }, tracked))
    }

    /// Scales each row of `x: [R, D]` to unit length, `x / sqrt(sum x^2 + eps)`.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let [_, d] = self.value(x).dims2("normalize_rows")?;
        let eps = norm_eps::<T>();
        let mut out = self.value(x).clone();
        for r in out.data_mut().chunks_exact_mut(d.max(1)) {
            let n = (r.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            for v in r {
                *v /= n;
            }
        }
        let tracked = self.tracked[x.0];
        Ok(self.push(out, Op::NormalizeRows(x), tracked))
    }

    /// Row-wise Euclidean distance between two equally shaped `[R, D]` tensors.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let [rows, _] = self.value(a).dims2("l2_distance")?;
        let diff = self.sub(a, b)?;
        self.row_norms(diff, rows, false)
    }

    /// All-pairs Euclidean distances of the rows of `x: [B, D]`.
    pub fn pairwise_distance(&mut self, x: Var) -> Result<Var> {
        let [b, d] = self.value(x).dims2("pairwise_distance")?;
        let eps = norm_eps::<T>();
        let e = self.value(x).data();
        let mut out = vec![T::zero(); b * b];
        for i in 0..b {
            for j in 0..b {
                let ss: T = (0..d).map(|k| (e[i * d + k] - e[j * d + k]).powi(2)).sum();
                out[i * b + j] = (ss + eps).sqrt();
            }
        }
        let tracked = self.tracked[x.0];
        let value = Tensor::new(&[b, b], out)?;
        Ok(self.push(value, Op::PairwiseDistance(x), tracked))
    }

    /// Batch-hard triplet loss over a `[B, B]` distance matrix, averaged over anchors.
    pub fn batch_hard_triplet(&mut self, dist: Var, labels: &[u32], margin: TripletMargin) -> Result<Var> {
        let [b, b2] = self.value(dist).dims2("batch_hard_triplet")?;
        if b != b2 {
            return Err(Error::dim("batch_hard_triplet", "columns", b, b2));
        }
        if labels.len() != b {
            return Err(Error::dim("batch_hard_triplet", "labels", b, labels.len()));
        }
        validate_pk_labels(labels)?;
        let d = self.value(dist).data();
        let mut total = T::zero();
        let mut terms = Vec::with_capacity(b);
        for a in 0..b {
            let row = &d[a * b..(a + 1) * b];
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..b {
                if j == a {
                    continue;
                }
                if labels[j] == labels[a] {
                    if pos.is_none_or(|p| row[j] > row[p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|q| row[j] < row[q]) {
                    neg = Some(j);
                }
            }
            let (p, q) = (pos.expect("validated"), neg.expect("validated"));
            let z = row[p] - row[q];
            let (loss, slope) = match margin {
                TripletMargin::Soft => (softplus(z), sigmoid(z)),
                TripletMargin::Hard(m) => {
                    let v = T::of(m) + z;
                    if v > T::zero() {
                        (v, T::one())
                    } else {
                        (T::zero(), T::zero())
                    }
                }
            };
            total += loss;
            terms.push((a, p, q, slope));
        }
        let inv = T::one() / T::of(b as f64);
        let tracked = self.tracked[dist.0];
        Ok(self.push(Tensor::scalar(total * inv), Op::BatchHard { d: dist, terms }, tracked))
    }

    // ----------------------------------------------------------- backward

    /// Backpropagates from a single-element node.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let n = self.value(root).numel();
        if n != 1 {
            return Err(Error::Tape(format!("backward needs a scalar root, got {n} elements")));
        }
        self.backward_with_seed(root, vec![T::one()])
    }

    /// Backpropagates an arbitrary output cotangent `seed` from `root`.
    pub fn backward_with_seed(&mut self, root: Var, seed: Vec<T>) -> Result<()> {
        if self.swept {
            return Err(Error::Tape(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if seed.len() != self.value(root).numel() {
            return Err(Error::dim("backward", "seed", self.value(root).numel(), seed.len()));
        }
        self.swept = true;
        self.grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.tracked[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let values = &self.values;
        let grads = &mut self.grads;
        let tracked = &self.tracked;
        let want = |v: &Var| tracked[v.0];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, patch, cols } => {
                let (rows, hw) = (patch.rows(), patch.cols());
                let n = values[x.0].shape()[0];
                let cout = values[w.0].shape()[0];
                let plane = patch.channels * patch.in_h * patch.in_w;
                if want(w) {
                    let xin = values[x.0].data();
                    let dw = acc(grads, *w, cout * rows);
                    for s in 0..n {
                        let gy = &g[s * cout * hw..(s + 1) * cout * hw];
                        let src = if patch.is_pointwise() {
                            &xin[s * plane..(s + 1) * plane]
                        } else {
                            &cols[s * rows * hw..(s + 1) * rows * hw]
                        };
                        T::gemm(
                            cout,
                            hw,
                            rows,
                            T::one(),
                            gy,
                            (hw, 1),
                            src,
                            (1, hw),
                            T::one(),
                            dw,
                            (rows, 1),
                        );
                    }
                }
                if let Some(b) = b.filter(|b| want(b)) {
                    bias_grad(acc(grads, b, cout), g, hw);
                }
                if want(x) {
                    let wt = values[w.0].data();
                    let dx = acc(grads, *x, n * plane);
                    let mut dcols = if patch.is_pointwise() {
                        Vec::new()
                    } else {
                        vec![T::zero(); rows * hw]
                    };
                    for s in 0..n {
                        let gy = &g[s * cout * hw..(s + 1) * cout * hw];
                        let dxs = &mut dx[s * plane..(s + 1) * plane];
                        if patch.is_pointwise() {
                            T::gemm(
                                rows,
                                cout,
                                hw,
                                T::one(),
                                wt,
                                (1, rows),
                                gy,
                                (hw, 1),
                                T::one(),
                                dxs,
                                (hw, 1),
                            );
                        } else {
                            T::gemm(
                                rows,
                                cout,
                                hw,
                                T::one(),
                                wt,
                                (1, rows),
                                gy,
                                (hw, 1),
                                T::zero(),
                                &mut dcols,
                                (hw, 1),
                            );
                            col2im_add(&dcols, patch, dxs);
                        }
                    }
                }
            }
            Op::Deconv2d { x, w, b, patch } => {
                let (rows, hw) = (patch.rows(), patch.cols());
                let n = values[x.0].shape()[0];
                let cin = values[x.0].shape()[1];
                let oplane = patch.channels * patch.in_h * patch.in_w;
                if let Some(b) = b.filter(|b| want(b)) {
                    bias_grad(acc(grads, b, patch.channels), g, patch.in_h * patch.in_w);
                }
                if want(x) || want(w) {
                    let mut dcols = vec![T::zero(); rows * hw];
                    for s in 0..n {
                        im2col(&g[s * oplane..(s + 1) * oplane], patch, &mut dcols);
                        if want(w) {
                            let xs = &values[x.0].data()[s * cin * hw..(s + 1) * cin * hw];
                            let dw = acc(grads, *w, cin * rows);
                            T::gemm(
                                cin,
                                hw,
                                rows,
                                T::one(),
                                xs,
                                (hw, 1),
                                &dcols,
                                (1, hw),
                                T::one(),
                                dw,
                                (rows, 1),
                            );
                        }
                        if want(x) {
                            let wt = values[w.0].data();
                            let dx = acc(grads, *x, n * cin * hw);
                            let dxs = &mut dx[s * cin * hw..(s + 1) * cin * hw];
                            T::gemm(
                                cin,
                                rows,
                                hw,
                                T::one(),
                                wt,
                                (rows, 1),
                                &dcols,
                                (hw, 1),
                                T::one(),
                                dxs,
                                (hw, 1),
                            );
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = values[x.0].data();
                let dx = acc(grads, *x, xv.len());
                for ((d, &v), &gy) in dx.iter_mut().zip(xv).zip(g) {
                    if v > T::zero() {
                        *d += gy;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = values[i].data();
                let dx = acc(grads, *x, y.len());
                for ((d, &s), &gy) in dx.iter_mut().zip(y).zip(g) {
                    *d += gy * s * (T::one() - s);
                }
            }
            Op::Abs(x) => {
                let xv = values[x.0].data();
                let dx = acc(grads, *x, xv.len());
                for ((d, &v), &gy) in dx.iter_mut().zip(xv).zip(g) {
                    if v > T::zero() {
                        *d += gy;
                    } else if v < T::zero() {
                        *d -= gy;
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.ops[i], Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if want(a) {
                    for (d, &gy) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                        *d += gy;
                    }
                }
                if want(b) {
                    for (d, &gy) in acc(grads, *b, g.len()).iter_mut().zip(g) {
                        *d += sign * gy;
                    }
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    let bv = values[b.0].data();
                    for ((d, &gy), &o) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *d += gy * o;
                    }
                }
                if want(b) {
                    let av = values[a.0].data();
                    for ((d, &gy), &o) in acc(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                        *d += gy * o;
                    }
                }
            }
            Op::Scale(x, c) => {
                for (d, &gy) in acc(grads, *x, g.len()).iter_mut().zip(g) {
                    *d += gy * *c;
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = values[x.0].numel();
                let gy = if matches!(self.ops[i], Op::Mean(_)) {
                    g[0] / T::of(n as f64)
                } else {
                    g[0]
                };
                for d in acc(grads, *x, n).iter_mut() {
                    *d += gy;
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let dx = acc(grads, *x, values[x.0].numel());
                for (&idx, &gy) in argmax.iter().zip(g) {
                    dx[idx] += gy;
                }
            }
            Op::GlobalAvgPool(x) => {
                let t = &values[x.0];
                let hw = t.numel() / g.len();
                let inv = T::one() / T::of(hw as f64);
                let dx = acc(grads, *x, t.numel());
                for (plane, &gy) in dx.chunks_exact_mut(hw).zip(g) {
                    for d in plane {
                        *d += gy * inv;
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let [n, d] = [values[x.0].shape()[0], values[x.0].shape()[1]];
                let o = values[w.0].shape()[0];
                if want(x) {
                    let wt = values[w.0].data();
                    let dx = acc(grads, *x, n * d);
                    T::gemm(n, o, d, T::one(), g, (o, 1), wt, (d, 1), T::one(), dx, (d, 1));
                }
                if want(w) {
                    let xv = values[x.0].data();
                    let dw = acc(grads, *w, o * d);
                    T::gemm(o, n, d, T::one(), g, (1, o), xv, (d, 1), T::one(), dw, (d, 1));
                }
                if let Some(b) = b.filter(|b| want(b)) {
                    let db = acc(grads, b, o);
                    for row in g.chunks_exact(o) {
                        for (dd, &gy) in db.iter_mut().zip(row) {
                            *dd += gy;
                        }
                    }
                }
            }
            Op::SliceChannels { x, start } => {
                let s = values[x.0].shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let len = values[i].shape()[1];
                let dx = acc(grads, *x, n * c * hw);
                for smp in 0..n {
                    let dst = &mut dx[(smp * c + start) * hw..(smp * c + start + len) * hw];
                    for (d, &gy) in dst.iter_mut().zip(&g[smp * len * hw..(smp + 1) * len * hw]) {
                        *d += gy;
                    }
                }
            }
            Op::ConcatBatch(xs) => {
                let mut off = 0;
                for x in xs {
                    let len = values[x.0].numel();
                    if want(x) {
                        for (d, &gy) in acc(grads, *x, len).iter_mut().zip(&g[off..off + len]) {
                            *d += gy;
                        }
                    }
                    off += len;
                }
            }
            Op::SliceBatch { x, start } => {
                let t = &values[x.0];
                let inner = t.numel() / t.shape()[0].max(1);
                let dx = acc(grads, *x, t.numel());
                for (d, &gy) in dx[start * inner..start * inner + g.len()].iter_mut().zip(g) {
                    *d += gy;
                }
            }
            Op::Reshape(x) => {
                for (d, &gy) in acc(grads, *x, g.len()).iter_mut().zip(g) {
                    *d += gy;
                }
            }
            Op::RowNorms { x, squared } => {
                let xv = values[x.0].data();
                let norms = values[i].data();
                let cols = xv.len() / norms.len();
                let dx = acc(grads, *x, xv.len());
                for (r, (&nrm, &gy)) in norms.iter().zip(g).enumerate() {
                    let coef = if *squared { gy + gy } else { gy / nrm };
                    for (d, &v) in dx[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(&xv[r * cols..(r + 1) * cols])
                    {
                        *d += coef * v;
                    }
                }
            }
            Op::NormalizeRows(x) => {
                // dx = (g - y (y . g)) / n, with n = |x| recovered from x / y.
                let xv = values[x.0].data();
                let y = values[i].data();
                let d = values[x.0].shape()[1].max(1);
                let eps = norm_eps::<T>();
                let dx = acc(grads, *x, xv.len());
                for r in 0..xv.len() / d {
                    let span = r * d..(r + 1) * d;
                    let n = (xv[span.clone()].iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
                    let yg: T = y[span.clone()].iter().zip(&g[span.clone()]).map(|(&a, &b)| a * b).sum();
                    for k in span {
                        dx[k] += (g[k] - y[k] * yg) / n;
                    }
                }
            }
            Op::PairwiseDistance(x) => {
                let e = values[x.0].data();
                let dist = values[i].data();
                let b = values[x.0].shape()[0];
                let d = values[x.0].shape()[1];
                let dx = acc(grads, *x, e.len());
                for p in 0..b {
                    for q in 0..b {
                        let gy = g[p * b + q];
                        if p == q || gy == T::zero() {
                            continue;
                        }
                        let coef = gy / dist[p * b + q];
                        for k in 0..d {
                            let diff = coef * (e[p * d + k] - e[q * d + k]);
                            dx[p * d + k] += diff;
                            dx[q * d + k] -= diff;
                        }
                    }
                }
            }
            Op::BatchHard { d, terms } => {
                let b = terms.len();
                let scale = g[0] / T::of(b as f64);
                let dd = acc(grads, *d, b * b);
                for &(a, p, q, slope) in terms {
                    dd[a * b + p] += scale * slope;
                    dd[a * b + q] -= scale * slope;
                }
            }
        }
    }
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], hw: usize) {
    let c = bias.len();
    for (idx, plane) in out.chunks_exact_mut(hw).enumerate() {
        let bb = bias[idx % c];
        for v in plane {
            *v += bb;
        }
    }
}

fn bias_grad<T: Real>(db: &mut [T], g: &[T], hw: usize) {
    let c = db.len();
    for (idx, plane) in g.chunks_exact(hw).enumerate() {
        db[idx % c] += plane.iter().copied().sum::<T>();
    }
}

/// Guard added under square roots so norms are differentiable at zero.
pub fn norm_eps<T: Real>() -> T {
    T::of(1e-12)
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(v: T) -> T {
    // ln(1 + e^v) = max(v, 0) + ln(1 + e^-|v|)
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

/// Every label must occur at least twice, with at least two distinct labels.
pub fn validate_pk_labels(labels: &[u32]) -> Result<()> {
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    let mut distinct = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        if j - i < 2 {
            return Err(Error::Sampling(format!(
                "identity {} occurs only once in the batch; batch-hard mining needs a positive",
                sorted[i]
            )));
        }
        distinct += 1;
        i = j;
    }
    if distinct < 2 {
        return Err(Error::Sampling(format!(
            "batch holds only identity {}; batch-hard mining needs a negative",
            sorted.first().copied().unwrap_or_default()
        )));
    }
    Ok(())
}
