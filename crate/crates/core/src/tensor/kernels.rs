//! Forward and backward numeric kernels.
//!
//! All kernels are pure functions of their inputs. Matrix products go through
//! `matrixmultiply`'s strided GEMM, so transposed operands never get copied.

use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Spatial padding mode for `conv2d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    Valid,
    Same,
}

impl Padding {
    pub fn name(self) -> &'static str {
        match self {
            Padding::Valid => "valid",
            Padding::Same => "same",
        }
    }
}

/// Output extent and leading pad for one spatial axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be at least 1"));
    }
    match padding {
        Padding::Valid => {
            if kernel > input || kernel == 0 {
                return Err(Error::shape("conv2d", format!("kernel extent {kernel} exceeds input extent {input}")));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = (out.saturating_sub(1) * stride + kernel).saturating_sub(input);
            if kernel == 0 || kernel > input + needed {
                return Err(Error::shape("conv2d", format!("kernel extent {kernel} exceeds padded input")));
            }
            // extra pad goes on the bottom/right when the total is odd
            Ok((out, needed / 2))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    rsa: isize,
    csa: isize,
    b: &[Real],
    rsb: isize,
    csb: isize,
    c: &mut [Real],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    // SAFETY: the caller guarantees `a` covers m×k with strides (rsa, csa), `b`
    // covers k×n with (rsb, csb), and `c` is a contiguous m×n row-major buffer.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1);
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1);
    }
}

fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.dims() {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, format!("expected a rank-2 operand, got {}", t.shape()))),
    }
}

/// Matrix product with optional transposition of either operand.
pub fn matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
    let (ar, ac) = as_matrix("matmul", a)?;
    let (br, bc) = as_matrix("matmul", b)?;
    let (m, k, rsa, csa) = if trans_a { (ac, ar, 1, ac as isize) } else { (ar, ac, ac as isize, 1) };
    let (k2, n, rsb, csb) = if trans_b { (bc, br, 1, bc as isize) } else { (br, bc, bc as isize, 1) };
    if k != k2 {
        return Err(Error::ShapeMismatch { op: "matmul", lhs: a.shape().clone(), rhs: b.shape().clone() });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), rsa, csa, b.data(), rsb, csb, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Static geometry of one convolution.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    pad_t: usize,
    pad_l: usize,
}

impl ConvGeom {
    fn new(x_dims: &[usize], k_dims: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let (&[n, h, w, cin], &[kh, kw, kcin, cout]) = (x_dims, k_dims) else {
            return Err(Error::shape("conv2d", format!("expected NHWC input and HWIO kernel, got {x_dims:?} and {k_dims:?}")));
        };
        if cin != kcin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: Shape::new(x_dims.to_vec())?,
                rhs: Shape::new(k_dims.to_vec())?,
            });
        }
        let (ho, pad_t) = conv_out_extent(h, kh, stride, padding)?;
        let (wo, pad_l) = conv_out_extent(w, kw, stride, padding)?;
        Ok(ConvGeom { n, h, w, cin, kh, kw, cout, stride, ho, wo, pad_t, pad_l })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Calls `f(col_offset, input_offset)` for every in-bounds patch element.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let plen = self.patch_len();
        for b in 0..self.n {
            for oh in 0..self.ho {
                for ow in 0..self.wo {
                    let row = ((b * self.ho + oh) * self.wo + ow) * plen;
                    for ki in 0..self.kh {
                        let ih = (oh * self.stride + ki) as isize - self.pad_t as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        for kj in 0..self.kw {
                            let iw = (ow * self.stride + kj) as isize - self.pad_l as isize;
                            if iw < 0 || iw >= self.w as isize {
                                continue;
                            }
                            let col = row + (ki * self.kw + kj) * self.cin;
                            let src = ((b * self.h + ih as usize) * self.w + iw as usize) * self.cin;
                            f(col, src, self.cin);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[Real]) -> Vec<Real> {
        let mut cols = vec![0.0; self.rows() * self.patch_len()];
        self.for_each_tap(|col, src, len| cols[col..col + len].copy_from_slice(&x[src..src + len]));
        cols
    }

    fn col2im(&self, cols: &[Real]) -> Vec<Real> {
        let mut x = vec![0.0; self.n * self.h * self.w * self.cin];
        self.for_each_tap(|col, src, len| {
            for (d, s) in x[src..src + len].iter_mut().zip(&cols[col..col + len]) {
                *d += s;
            }
        });
        x
    }
}

/// 2-D cross-correlation, NHWC input and HWIO kernel.
pub fn conv2d(x: &Tensor, k: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let g = ConvGeom::new(x.dims(), k.dims(), stride, padding)?;
    let cols = g.im2col(x.data());
    let mut out = vec![0.0; g.rows() * g.cout];
    let plen = g.patch_len();
    gemm(g.rows(), plen, g.cout, &cols, plen as isize, 1, k.data(), g.cout as isize, 1, &mut out);
    Tensor::new(vec![g.n, g.ho, g.wo, g.cout], out)
}

/// Gradient of `conv2d` with respect to its input, given the upstream gradient.
pub fn conv2d_backprop_input(upstream: &Tensor, k: &Tensor, input_dims: &[usize], stride: usize, padding: Padding) -> Result<Tensor> {
    let g = ConvGeom::new(input_dims, k.dims(), stride, padding)?;
    check_conv_upstream(&g, upstream)?;
    let plen = g.patch_len();
    let mut dcols = vec![0.0; g.rows() * plen];
    // dcols = U · Kᵀ, with K viewed as [plen × cout]
    gemm(g.rows(), g.cout, plen, upstream.data(), g.cout as isize, 1, k.data(), 1, g.cout as isize, &mut dcols);
    Tensor::new(input_dims.to_vec(), g.col2im(&dcols))
}

/// Gradient of `conv2d` with respect to its kernel, given the upstream gradient.
pub fn conv2d_backprop_filter(x: &Tensor, upstream: &Tensor, kernel_dims: &[usize], stride: usize, padding: Padding) -> Result<Tensor> {
    let g = ConvGeom::new(x.dims(), kernel_dims, stride, padding)?;
    check_conv_upstream(&g, upstream)?;
    let plen = g.patch_len();
    let cols = g.im2col(x.data());
    let mut dk = vec![0.0; plen * g.cout];
    // dK = colsᵀ · U
    gemm(plen, g.rows(), g.cout, &cols, 1, plen as isize, upstream.data(), g.cout as isize, 1, &mut dk);
    Tensor::new(kernel_dims.to_vec(), dk)
}

fn check_conv_upstream(g: &ConvGeom, upstream: &Tensor) -> Result<()> {
    let expect = [g.n, g.ho, g.wo, g.cout];
    if upstream.dims() != expect {
        return Err(Error::ShapeMismatch { op: "conv2d_backprop", lhs: upstream.shape().clone(), rhs: Shape::new(expect.to_vec())? });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        }
    }

    fn apply(self, a: Real, b: Real) -> Real {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

/// Result shape of a binary elementwise op: equal shapes, or one side scalar.
pub fn binary_shape(op: BinaryOp, a: &Shape, b: &Shape) -> Result<Shape> {
    if a == b || b.is_scalar() {
        Ok(a.clone())
    } else if a.is_scalar() {
        Ok(b.clone())
    } else {
        Err(Error::ShapeMismatch { op: op.name(), lhs: a.clone(), rhs: b.clone() })
    }
}

pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = binary_shape(op, a.shape(), b.shape())?;
    let data = if a.shape() == b.shape() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| op.apply(x, y)).collect()
    } else if b.shape().is_scalar() {
        let y = b.item();
        a.data().iter().map(|&x| op.apply(x, y)).collect()
    } else {
        let x = a.item();
        b.data().iter().map(|&y| op.apply(x, y)).collect()
    };
    Tensor::from_shape(shape, data)
}

/// Sum of same-shape tensors, accumulated left to right.
pub fn add_n(xs: &[&Tensor]) -> Result<Tensor> {
    let (first, rest) = xs.split_first().ok_or_else(|| Error::shape("add_n", "needs at least one input"))?;
    let mut acc = first.data().to_vec();
    for x in rest {
        if x.shape() != first.shape() {
            return Err(Error::ShapeMismatch { op: "add_n", lhs: first.shape().clone(), rhs: x.shape().clone() });
        }
        for (a, &v) in acc.iter_mut().zip(x.data()) {
            *a += v;
        }
    }
    Tensor::from_shape(first.shape().clone(), acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Relu,
    Sqrt,
    Square,
    Reciprocal,
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Relu => "relu",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Square => "square",
            UnaryOp::Reciprocal => "reciprocal",
        }
    }
}

/// Pointwise unary op. In checked mode domain violations are errors rather than NaN/Inf.
pub fn unary(op: UnaryOp, x: &Tensor, checked: bool) -> Result<Tensor> {
    if checked {
        match op {
            UnaryOp::Sqrt => {
                if let Some(v) = x.data().iter().find(|v| **v < 0.0) {
                    return Err(Error::Domain { op: "sqrt", detail: format!("negative input {v}") });
                }
            }
            UnaryOp::Reciprocal => {
                if x.data().iter().any(|v| *v == 0.0) {
                    return Err(Error::Domain { op: "reciprocal", detail: "zero input".into() });
                }
            }
            _ => {}
        }
    }
    Ok(match op {
        UnaryOp::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        UnaryOp::Sqrt => x.map(Real::sqrt),
        UnaryOp::Square => x.map(|v| v * v),
        UnaryOp::Reciprocal => x.map(|v| 1.0 / v),
    })
}

/// `upstream ⊙ 1[x > 0]`.
pub fn relu_grad(upstream: &Tensor, x: &Tensor) -> Result<Tensor> {
    if upstream.shape() != x.shape() {
        return Err(Error::ShapeMismatch { op: "relu_grad", lhs: upstream.shape().clone(), rhs: x.shape().clone() });
    }
    let data = upstream.data().iter().zip(x.data()).map(|(&u, &v)| if v > 0.0 { u } else { 0.0 }).collect();
    Tensor::from_shape(x.shape().clone(), data)
}

fn last_axis(op: &'static str, x: &Tensor, v: &Tensor) -> Result<usize> {
    let c = *x.dims().last().ok_or_else(|| Error::shape(op, "input must have rank ≥ 1"))?;
    if v.dims() != [c] {
        return Err(Error::ShapeMismatch { op, lhs: x.shape().clone(), rhs: v.shape().clone() });
    }
    Ok(c)
}

/// Adds a vector along the last axis.
pub fn bias_add(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let c = last_axis("bias_add", x, b)?;
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        row.iter_mut().zip(b.data()).for_each(|(o, bv)| *o += bv);
    }
    Tensor::from_shape(x.shape().clone(), out)
}

/// Multiplies by a vector along the last axis.
pub fn scale_channels(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let c = last_axis("scale_channels", x, g)?;
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        row.iter_mut().zip(g.data()).for_each(|(o, gv)| *o *= gv);
    }
    Tensor::from_shape(x.shape().clone(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Sum,
    Mean,
}

fn check_axes(op: &'static str, rank: usize, axes: &[usize]) -> Result<()> {
    for (i, &a) in axes.iter().enumerate() {
        if a >= rank {
            return Err(Error::InvalidAxis { op, axis: a, rank });
        }
        if axes[..i].contains(&a) {
            return Err(Error::shape(op, format!("axis {a} listed twice")));
        }
    }
    Ok(())
}

/// Shape of a reduction result.
pub fn reduce_shape(input: &Shape, axes: &[usize], keep_dims: bool) -> Result<Shape> {
    check_axes("reduce", input.rank(), axes)?;
    let dims = input
        .dims()
        .iter()
        .enumerate()
        .filter_map(|(i, &d)| match (axes.contains(&i), keep_dims) {
            (false, _) => Some(d),
            (true, true) => Some(1),
            (true, false) => None,
        })
        .collect::<Vec<_>>();
    Shape::new(dims)
}

/// Row-major strides for `dims`, with zero stride wherever `zero` says so.
fn strides_with_zeros(dims: &[usize], zero: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut strides = vec![0; dims.len()];
    let mut acc = 1;
    for i in (0..dims.len()).rev() {
        if !zero(i) {
            strides[i] = acc;
            acc *= dims[i];
        }
    }
    strides
}

/// Walks every multi-index of `dims` in row-major order, yielding the offset
/// into a second tensor described by `strides`.
fn for_each_offset(dims: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = dims.iter().product();
    if total == 0 {
        return;
    }
    let rank = dims.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for flat in 0..total {
        f(flat, off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < dims[ax] {
                break;
            }
            off -= strides[ax] * dims[ax];
            idx[ax] = 0;
        }
    }
}

pub fn reduce(op: ReduceOp, x: &Tensor, axes: &[usize], keep_dims: bool) -> Result<Tensor> {
    let out_shape = reduce_shape(x.shape(), axes, keep_dims)?;
    let strides = strides_with_zeros(x.dims(), |i| axes.contains(&i));
    let mut out = vec![0.0; out_shape.numel()];
    let src = x.data();
    for_each_offset(x.dims(), &strides, |flat, off| out[off] += src[flat]);
    if op == ReduceOp::Mean {
        let count: usize = axes.iter().map(|&a| x.dims()[a]).product();
        let inv = 1.0 / count as Real;
        out.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::from_shape(out_shape, out)
}

/// Expands `x` to `dims` by repeating it along `axes`. `x` must have the shape
/// of `dims` with those axes removed or set to one.
pub fn broadcast(x: &Tensor, dims: &[usize], axes: &[usize]) -> Result<Tensor> {
    let target = Shape::new(dims.to_vec())?;
    let dropped = reduce_shape(&target, axes, false)?;
    let kept = reduce_shape(&target, axes, true)?;
    if x.shape() != &dropped && x.shape() != &kept {
        return Err(Error::ShapeMismatch { op: "broadcast", lhs: x.shape().clone(), rhs: target });
    }
    let strides = strides_with_zeros(dims, |i| axes.contains(&i));
    let mut out = vec![0.0; target.numel()];
    let src = x.data();
    for_each_offset(dims, &strides, |flat, off| out[flat] = src[off]);
    Tensor::from_shape(target, out)
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op, lhs: a.shape().clone(), rhs: b.shape().clone() });
    }
    Ok(())
}

fn log_softmax_row(row: &[Real], out: &mut [Real]) {
    let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let lse = row.iter().map(|&z| (z - max).exp()).sum::<Real>().ln();
    for (o, &z) in out.iter_mut().zip(row) {
        *o = z - max - lse;
    }
}

/// Batch-mean of `-Σ_k labels · log softmax(logits)`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &Tensor, checked: bool) -> Result<Tensor> {
    check_same("softmax_cross_entropy", logits, labels)?;
    let (n, k) = as_matrix("softmax_cross_entropy", logits)?;
    let mut logp = vec![0.0; k];
    let mut total = 0.0;
    for (r, (row, lab)) in logits.data().chunks_exact(k).zip(labels.data().chunks_exact(k)).enumerate() {
        if checked {
            let s: Real = lab.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Domain { op: "softmax_cross_entropy", detail: format!("label row {r} sums to {s}") });
            }
        }
        log_softmax_row(row, &mut logp);
        total -= lab.iter().zip(&logp).map(|(y, lp)| if *y == 0.0 { 0.0 } else { y * lp }).sum::<Real>();
    }
    Ok(Tensor::scalar(total / n as Real))
}

/// Gradient of `softmax_cross_entropy` scaled by the scalar upstream gradient,
/// with respect to the logits (`wrt_labels == false`) or the labels.
pub fn softmax_cross_entropy_grad(upstream: &Tensor, logits: &Tensor, labels: &Tensor, wrt_labels: bool) -> Result<Tensor> {
    check_same("softmax_cross_entropy_grad", logits, labels)?;
    let (n, k) = as_matrix("softmax_cross_entropy_grad", logits)?;
    let scale = upstream.item() / n as Real;
    let mut out = vec![0.0; n * k];
    for ((row, lab), o) in logits.data().chunks_exact(k).zip(labels.data().chunks_exact(k)).zip(out.chunks_exact_mut(k)) {
        log_softmax_row(row, o);
        for (ov, y) in o.iter_mut().zip(lab) {
            *ov = if wrt_labels { -scale * *ov } else { scale * (ov.exp() - y) };
        }
    }
    Tensor::from_shape(logits.shape().clone(), out)
}

fn pool_dims(x: &Tensor, size: usize, stride: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let &[n, h, w, c] = x.dims() else {
        return Err(Error::shape("max_pool2d", format!("expected NHWC input, got {}", x.shape())));
    };
    let (ho, _) = conv_out_extent(h, size, stride, Padding::Valid)?;
    let (wo, _) = conv_out_extent(w, size, stride, Padding::Valid)?;
    Ok((n, h, w, c, ho, wo))
}

/// Flat input offset of the maximum in every pooling window (first on ties).
fn pool_argmax(x: &Tensor, size: usize, stride: usize) -> Result<(Vec<usize>, Shape)> {
    let (n, h, w, c, ho, wo) = pool_dims(x, size, stride)?;
    let src = x.data();
    let mut arg = Vec::with_capacity(n * ho * wo * c);
    for b in 0..n {
        for oh in 0..ho {
            for ow in 0..wo {
                for ch in 0..c {
                    let mut best = ((b * h + oh * stride) * w + ow * stride) * c + ch;
                    for i in 0..size {
                        for j in 0..size {
                            let off = ((b * h + oh * stride + i) * w + ow * stride + j) * c + ch;
                            if src[off] > src[best] {
                                best = off;
                            }
                        }
                    }
                    arg.push(best);
                }
            }
        }
    }
    Ok((arg, Shape::new(vec![n, ho, wo, c])?))
}

pub fn max_pool2d(x: &Tensor, size: usize, stride: usize) -> Result<Tensor> {
    let (arg, shape) = pool_argmax(x, size, stride)?;
    let src = x.data();
    Tensor::from_shape(shape, arg.into_iter().map(|i| src[i]).collect())
}

pub fn max_pool2d_grad(upstream: &Tensor, x: &Tensor, size: usize, stride: usize) -> Result<Tensor> {
    let (arg, shape) = pool_argmax(x, size, stride)?;
    if upstream.shape() != &shape {
        return Err(Error::ShapeMismatch { op: "max_pool2d_grad", lhs: upstream.shape().clone(), rhs: shape });
    }
    let mut out = vec![0.0; x.numel()];
    for (&i, &u) in arg.iter().zip(upstream.data()) {
        out[i] += u;
    }
    Tensor::from_shape(x.shape().clone(), out)
}

/// Residual shortcut for a downsampling block: spatial subsampling by `stride`
/// followed by zero-padding the channel axis up to `channels_out`.
pub fn shortcut_pad(x: &Tensor, stride: usize, channels_out: usize) -> Result<Tensor> {
    let &[n, h, w, c] = x.dims() else {
        return Err(Error::shape("shortcut_pad", format!("expected NHWC input, got {}", x.shape())));
    };
    if stride == 0 || channels_out < c {
        return Err(Error::shape("shortcut_pad", format!("cannot map {c} channels to {channels_out} with stride {stride}")));
    }
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut out = vec![0.0; n * ho * wo * channels_out];
    let src = x.data();
    for b in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                let s = ((b * h + i * stride) * w + j * stride) * c;
                let d = ((b * ho + i) * wo + j) * channels_out;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    Tensor::new(vec![n, ho, wo, channels_out], out)
}

/// Adjoint of `shortcut_pad` back onto an input of shape `input_dims`.
pub fn shortcut_pad_grad(upstream: &Tensor, stride: usize, input_dims: &[usize]) -> Result<Tensor> {
    let &[n, h, w, c] = input_dims else {
        return Err(Error::shape("shortcut_pad_grad", format!("expected NHWC input dims, got {input_dims:?}")));
    };
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let &[un, uh, uw, cout] = upstream.dims() else {
        return Err(Error::shape("shortcut_pad_grad", "upstream must be NHWC"));
    };
    if (un, uh, uw) != (n, ho, wo) || cout < c {
        return Err(Error::ShapeMismatch { op: "shortcut_pad_grad", lhs: upstream.shape().clone(), rhs: Shape::new(input_dims.to_vec())? });
    }
    let mut out = vec![0.0; n * h * w * c];
    let src = upstream.data();
    for b in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                let d = ((b * h + i * stride) * w + j * stride) * c;
                let s = ((b * ho + i) * wo + j) * cout;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    Tensor::new(input_dims.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[Real]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_reference() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&a, &eye, false, false).unwrap().data(), a.data());
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let expect = naive_matmul(a.data(), b.data(), 2, 2, 2);
        assert_eq!(expect, vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul(&a, &b, false, false).unwrap().data(), &expect[..]);
        let z = Tensor::zeros(&Shape::new(vec![2, 3]).unwrap());
        assert!(matmul(&a, &z, false, false).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_transposes_match_reference() {
        let a = t(&[3, 2], &[1.0, -2.0, 0.5, 3.0, 4.0, -1.0]);
        let b = t(&[3, 4], &(0..12).map(|v| v as Real * 0.25 - 1.0).collect::<Vec<_>>());
        // aᵀ·b
        let at: Vec<Real> = (0..2).flat_map(|j| (0..3).map(move |i| (i, j))).map(|(i, j)| a.data()[i * 2 + j]).collect();
        let got = matmul(&a, &b, true, false).unwrap();
        assert_eq!(got.dims(), &[2, 4]);
        assert_eq!(got.data(), &naive_matmul(&at, b.data(), 2, 3, 4)[..]);
        // b·bᵀ
        let bt: Vec<Real> = (0..4).flat_map(|j| (0..3).map(move |i| (i, j))).map(|(i, j)| b.data()[i * 4 + j]).collect();
        let got = matmul(&b, &b, false, true).unwrap();
        assert_eq!(got.data(), &naive_matmul(b.data(), &bt, 3, 4, 3)[..]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t(&[2, 3], &[0.0; 6]);
        let msg = matmul(&a, &a, false, false).unwrap_err().to_string();
        assert!(msg.contains("[2x3]"), "{msg}");
    }

    #[test]
    fn conv2d_unit_kernel_scales() {
        let x = Tensor::full(&Shape::new(vec![1, 3, 3, 1]).unwrap(), 1.0);
        let k = t(&[1, 1, 1, 1], &[2.0]);
        let y = conv2d(&x, &k, 1, Padding::Valid).unwrap();
        assert_eq!(y.dims(), &[1, 3, 3, 1]);
        assert!(y.data().iter().all(|v| *v == 2.0));
    }

    #[test]
    fn conv2d_sliding_window_oracle() {
        let x = t(&[1, 3, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let k = t(&[2, 2, 1, 1], &[1.0; 4]);
        let y = conv2d(&x, &k, 1, Padding::Valid).unwrap();
        assert_eq!(y.dims(), &[1, 2, 2, 1]);
        assert_eq!(y.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv2d_same_padding_extents() {
        assert_eq!(conv_out_extent(4, 3, 2, Padding::Same).unwrap(), (2, 0));
        assert_eq!(conv_out_extent(5, 3, 1, Padding::Same).unwrap(), (5, 1));
        // odd total pad puts the extra row at the bottom
        assert_eq!(conv_out_extent(4, 2, 1, Padding::Same).unwrap(), (4, 0));
        assert!(conv_out_extent(2, 3, 1, Padding::Valid).is_err());
    }

    #[test]
    fn elementwise_basics() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(unary(UnaryOp::Relu, &x, false).unwrap().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(unary(UnaryOp::Square, &t(&[1], &[3.0]), false).unwrap().data(), &[9.0]);
        let y = binary(BinaryOp::Add, &t(&[2], &[1.0, 2.0]), &Tensor::scalar(1.0)).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0]);
        assert!(binary(BinaryOp::Add, &t(&[2], &[1.0, 2.0]), &t(&[3], &[0.0; 3])).is_err());
    }

    #[test]
    fn checked_mode_reports_domain_errors() {
        let x = t(&[2], &[-1.0, 4.0]);
        assert!(matches!(unary(UnaryOp::Sqrt, &x, true), Err(Error::Domain { .. })));
        assert!(unary(UnaryOp::Sqrt, &x, false).unwrap().data()[0].is_nan());
        assert!(unary(UnaryOp::Reciprocal, &t(&[1], &[0.0]), true).is_err());
    }

    #[test]
    fn reductions() {
        let x = t(&[2, 2], &[2.0, 4.0, 4.0, 8.0]);
        assert_eq!(reduce(ReduceOp::Mean, &x, &[0], false).unwrap().data(), &[3.0, 6.0]);
        let z = Tensor::zeros(&Shape::new(vec![3, 2]).unwrap());
        assert_eq!(reduce(ReduceOp::Sum, &z, &[0, 1], false).unwrap().item(), 0.0);
        let y = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut acc = 0.0;
        for v in y.data() {
            acc += v;
        }
        assert_eq!(reduce(ReduceOp::Mean, &y, &[0, 1], false).unwrap().item(), acc / 4.0);
        assert_eq!(reduce(ReduceOp::Sum, &y, &[1], true).unwrap().dims(), &[2, 1]);
        assert!(matches!(reduce(ReduceOp::Sum, &y, &[2], false), Err(Error::InvalidAxis { .. })));
    }

    #[test]
    fn broadcast_is_adjoint_of_sum() {
        let v = t(&[3], &[1.0, 2.0, 3.0]);
        let b = broadcast(&v, &[2, 3], &[0]).unwrap();
        assert_eq!(b.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let back = reduce(ReduceOp::Sum, &b, &[0], false).unwrap();
        assert_eq!(back.data(), &[2.0, 4.0, 6.0]);
        let col = t(&[2, 1], &[5.0, 7.0]);
        assert_eq!(broadcast(&col, &[2, 2], &[1]).unwrap().data(), &[5.0, 5.0, 7.0, 7.0]);
    }

    #[test]
    fn softmax_cross_entropy_cases() {
        let logits = Tensor::zeros(&Shape::new(vec![1, 4]).unwrap());
        let labels = t(&[1, 4], &[0.0, 1.0, 0.0, 0.0]);
        let l = softmax_cross_entropy(&logits, &labels, true).unwrap().item();
        assert!((l - (4.0 as Real).ln()).abs() < 1e-12);
        let l = softmax_cross_entropy(&t(&[1, 2], &[1000.0, 0.0]), &t(&[1, 2], &[1.0, 0.0]), true).unwrap().item();
        assert!(l.is_finite() && l.abs() < 1e-12);
        assert!(softmax_cross_entropy(&logits, &t(&[1, 4], &[0.5; 4]), true).is_err());
    }

    #[test]
    fn max_pool_forward_and_grad() {
        let x = t(&[1, 2, 2, 1], &[1.0, 5.0, 3.0, 2.0]);
        assert_eq!(max_pool2d(&x, 2, 2).unwrap().data(), &[5.0]);
        let g = max_pool2d_grad(&Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap(), &x, 2, 2).unwrap();
        assert_eq!(g.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn shortcut_pad_roundtrip() {
        let x = t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let y = shortcut_pad(&x, 2, 3).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 3]);
        assert_eq!(y.data(), &[1.0, 0.0, 0.0]);
        let g = shortcut_pad_grad(&t(&[1, 1, 1, 3], &[7.0, 8.0, 9.0]), 2, &[1, 2, 2, 1]).unwrap();
        assert_eq!(g.data(), &[7.0, 0.0, 0.0, 0.0]);
    }
}
