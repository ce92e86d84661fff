//! Dense row-major tensors and the kernels every layer is built on.
//!
//! Activations are laid out NHWC and convolution weights as
//! `(kh, kw, Cin, Cout)`, so one im2col row is a contiguous receptive field
//! and a convolution is a single GEMM against the reshaped weights.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::Range;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::parallel;

/// Element type of a [`Tensor`]. Training runs in `f32`; gradient checks in `f64`.
pub trait Scalar:
    Float + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` on strided views (matrixmultiply calling convention).
    ///
    /// # Safety
    /// Every strided index addressed for the given dimensions must be in bounds
    /// of the corresponding pointer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Batch of feature maps in NHWC order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape4 {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape4 {
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::size(format!(
                "NHWC dimensions must be positive, got [{n}, {h}, {w}, {c}]"
            )));
        }
        Ok(Shape4 { n, h, w, c })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    pub fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        if self.data.len() > PREVIEW {
            write!(f, "{head:?}..")
        } else {
            write!(f, "{head:?}")
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::size("tensor shape must have at least one dimension"));
    }
    if shape.contains(&0) {
        return Err(Error::size(format!(
            "tensor dimensions must be positive, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl<F: Scalar> Tensor<F> {
    /// Wraps `data` (row-major) with the given shape.
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::size(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: F) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, F::zero())
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::from_vec(shape, values.iter().map(|&v| F::from_f64(v)).collect())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::size(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Interprets the tensor as an NHWC batch.
    pub fn shape4(&self) -> Result<Shape4> {
        match *self.shape.as_slice() {
            [n, h, w, c] => Shape4::new(n, h, w, c),
            _ => Err(Error::size(format!(
                "expected a rank-4 NHWC tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Interprets the tensor as a matrix `[rows, cols]`.
    pub fn shape2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::size(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::size(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    /// Inner product over all elements, accumulated in `f64`.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::size(format!(
                "dot shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Debug-build check that no NaN or infinity has been produced.
    #[track_caller]
    pub fn debug_assert_finite(&self, what: &str) {
        debug_assert!(self.is_finite(), "non-finite values in {what}");
        let _ = what;
    }

    /// Channels `[start, start + count)` of an NHWC tensor.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Self> {
        let s = self.shape4()?;
        if count == 0 || start + count > s.c {
            return Err(Error::size(format!(
                "channel range {start}..{} out of bounds for {} channels",
                start + count,
                s.c
            )));
        }
        let mut data = Vec::with_capacity(s.pixels() * count);
        for px in self.data.chunks_exact(s.c) {
            data.extend_from_slice(&px[start..start + count]);
        }
        Tensor::from_vec(&[s.n, s.h, s.w, count], data)
    }
}

/// Borrowed strided matrix, used to express transposes without copying.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a, F> {
    data: &'a [F],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, F: Scalar> MatView<'a, F> {
    pub(crate) fn row_major(data: &'a [F], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix view length mismatch");
        MatView {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        MatView {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = a * b + beta * c` with `c` row-major `[a.rows, b.cols]`.
pub(crate) fn gemm_into<F: Scalar>(a: MatView<'_, F>, b: MatView<'_, F>, beta: F, c: &mut [F]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output length mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = beta * *v);
        return;
    }
    // SAFETY: both views were built from slices of exactly rows * cols elements
    // with row-major or transposed strides, so every addressed index is in bounds;
    // `c` has m * n elements with row stride n.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product `a[M,K] x b[K,N]`.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = a.shape2()?;
    let (k2, n) = b.shape2()?;
    if k != k2 {
        return Err(Error::size(format!(
            "matmul inner dimensions differ: [{m}, {k}] x [{k2}, {n}]"
        )));
    }
    let mut out = vec![F::zero(); m * n];
    gemm_into(
        MatView::row_major(a.data(), m, k),
        MatView::row_major(b.data(), k, n),
        F::zero(),
        &mut out,
    );
    Tensor::from_vec(&[m, n], out)
}

/// Sliding-window geometry shared by im2col and col2im.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: Shape4,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn out_extent(len: usize, k: usize, stride: usize, pad: usize, axis: &str) -> Result<usize> {
    let padded = len + 2 * pad;
    if k == 0 || stride == 0 {
        return Err(Error::Geometry(format!(
            "kernel and stride must be positive (kernel {k}, stride {stride})"
        )));
    }
    if padded < k {
        return Err(Error::Geometry(format!(
            "kernel {k} larger than padded {axis} {padded}"
        )));
    }
    if !(padded - k).is_multiple_of(stride) {
        return Err(Error::Geometry(format!(
            "{axis} {len} with kernel {k}, pad {pad}, stride {stride} gives a non-integral output"
        )));
    }
    Ok((padded - k) / stride + 1)
}

impl ConvGeometry {
    pub fn new(input: Shape4, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        let out_h = out_extent(input.h, kh, stride, pad, "height")?;
        let out_w = out_extent(input.w, kw, stride, pad, "width")?;
        Ok(ConvGeometry {
            input,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    /// Number of im2col rows (`N * Ho * Wo`).
    pub fn rows(&self) -> usize {
        self.input.n * self.out_h * self.out_w
    }

    /// Length of one im2col row (`kh * kw * C`).
    pub fn cols(&self) -> usize {
        self.kh * self.kw * self.input.c
    }

    /// Visits the receptive field of output row `row`: `f(col_offset, pixel_offset)`
    /// for every in-bounds kernel tap. Padded taps are skipped.
    #[inline]
    fn for_each_tap(&self, row: usize, mut f: impl FnMut(usize, usize)) {
        let Shape4 { h, w, c, .. } = self.input;
        let ox = row % self.out_w;
        let oy = (row / self.out_w) % self.out_h;
        let n = row / (self.out_w * self.out_h);
        let y0 = (oy * self.stride) as isize - self.pad as isize;
        let x0 = (ox * self.stride) as isize - self.pad as isize;
        for ky in 0..self.kh {
            let y = y0 + ky as isize;
            if y < 0 || y >= h as isize {
                continue;
            }
            for kx in 0..self.kw {
                let x = x0 + kx as isize;
                if x < 0 || x >= w as isize {
                    continue;
                }
                let pixel = ((n * h + y as usize) * w + x as usize) * c;
                f((ky * self.kw + kx) * c, pixel);
            }
        }
    }

    /// Writes im2col rows `rows` of `x` into `out` (`rows.len() * cols()` elements).
    pub(crate) fn im2col_rows<F: Scalar>(&self, x: &[F], rows: Range<usize>, out: &mut [F]) {
        let c = self.input.c;
        let cols = self.cols();
        debug_assert_eq!(out.len(), rows.len() * cols);
        out.iter_mut().for_each(|v| *v = F::zero());
        for (local, row) in rows.enumerate() {
            let dst = &mut out[local * cols..(local + 1) * cols];
            self.for_each_tap(row, |col, pixel| {
                dst[col..col + c].copy_from_slice(&x[pixel..pixel + c]);
            });
        }
    }

    /// Scatter-adds column rows `rows` back onto the image gradient `dx`.
    pub(crate) fn col2im_rows_add<F: Scalar>(&self, cols_data: &[F], rows: Range<usize>, dx: &mut [F]) {
        let c = self.input.c;
        let cols = self.cols();
        for (local, row) in rows.enumerate() {
            let src = &cols_data[local * cols..(local + 1) * cols];
            self.for_each_tap(row, |col, pixel| {
                for (d, s) in dx[pixel..pixel + c].iter_mut().zip(&src[col..col + c]) {
                    *d = *d + *s;
                }
            });
        }
    }
}

/// Unrolls every receptive field of `x` into a row of `[N*Ho*Wo, kh*kw*C]`,
/// flattened in `(kh, kw, C)` order. Out-of-bounds taps read as zero.
pub fn im2col<F: Scalar>(x: &Tensor<F>, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Tensor<F>> {
    let geom = ConvGeometry::new(x.shape4()?, kh, kw, stride, pad)?;
    let mut out = vec![F::zero(); geom.rows() * geom.cols()];
    geom.im2col_rows(x.data(), 0..geom.rows(), &mut out);
    Tensor::from_vec(&[geom.rows(), geom.cols()], out)
}

/// Adjoint of [`im2col`]: sums every column entry back onto the pixel it was read from.
pub fn col2im<F: Scalar>(cols: &Tensor<F>, geom: &ConvGeometry) -> Result<Tensor<F>> {
    let (r, c) = cols.shape2()?;
    if r != geom.rows() || c != geom.cols() {
        return Err(Error::size(format!(
            "col2im expects [{}, {}], got [{r}, {c}]",
            geom.rows(),
            geom.cols()
        )));
    }
    let mut dx = vec![F::zero(); geom.input.pixels() * geom.input.c];
    geom.col2im_rows_add(cols.data(), 0..r, &mut dx);
    Tensor::from_vec(&geom.input.dims(), dx)
}

fn gate_shapes<F: Scalar>(x: &Tensor<F>, map: &Tensor<F>) -> Result<Shape4> {
    let xs = x.shape4()?;
    let ms = map.shape4()?;
    if ms.c != 1 || (xs.n, xs.h, xs.w) != (ms.n, ms.h, ms.w) {
        return Err(Error::size(format!(
            "gate map {:?} does not match feature map {:?}",
            map.shape(),
            x.shape()
        )));
    }
    Ok(xs)
}

/// `out[n,h,w,c] = x[n,h,w,c] * map[n,h,w,0]`.
pub fn broadcast_mul<F: Scalar>(x: &Tensor<F>, map: &Tensor<F>) -> Result<Tensor<F>> {
    let s = gate_shapes(x, map)?;
    let mut out = x.data().to_vec();
    for (px, &g) in out.chunks_exact_mut(s.c).zip(map.data()) {
        px.iter_mut().for_each(|v| *v = *v * g);
    }
    Tensor::from_vec(x.shape(), out)
}

/// Gradients of [`broadcast_mul`]: `(d/dx, d/dmap)` given the upstream gradient.
pub fn broadcast_mul_backward<F: Scalar>(
    x: &Tensor<F>,
    map: &Tensor<F>,
    grad: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let s = gate_shapes(x, map)?;
    if grad.shape() != x.shape() {
        return Err(Error::size("gate gradient shape differs from its input"));
    }
    let dx = broadcast_mul(grad, map)?;
    let dmap: Vec<F> = grad
        .data()
        .chunks_exact(s.c)
        .zip(x.data().chunks_exact(s.c))
        .map(|(g, v)| g.iter().zip(v).map(|(&a, &b)| a * b).sum())
        .collect();
    Ok((dx, Tensor::from_vec(map.shape(), dmap)?))
}

/// Concatenates NHWC tensors along the channel axis, in argument order.
pub fn concat_channels<F: Scalar>(parts: &[Tensor<F>]) -> Result<Tensor<F>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::size("concat needs at least one tensor"))?
        .shape4()?;
    let mut shapes = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape4()?;
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::size(format!(
                "concat spatial mismatch: {:?} vs {:?}",
                p.shape(),
                parts[0].shape()
            )));
        }
        shapes.push(s.c);
    }
    let total: usize = shapes.iter().sum();
    let mut data = Vec::with_capacity(first.pixels() * total);
    for px in 0..first.pixels() {
        for (p, &c) in parts.iter().zip(&shapes) {
            data.extend_from_slice(&p.data()[px * c..(px + 1) * c]);
        }
    }
    Tensor::from_vec(&[first.n, first.h, first.w, total], data)
}

/// Inverse of [`concat_channels`]: splits channels into consecutive groups of the given widths.
pub fn split_channels<F: Scalar>(x: &Tensor<F>, widths: &[usize]) -> Result<Vec<Tensor<F>>> {
    let s = x.shape4()?;
    if widths.iter().sum::<usize>() != s.c {
        return Err(Error::size(format!(
            "split widths {widths:?} do not cover {} channels",
            s.c
        )));
    }
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let part = x.slice_channels(start, w);
            start += w;
            part
        })
        .collect()
}

/// Number of im2col rows handled per GEMM tile. Fixed so that reduction
/// order, and therefore every result bit, is independent of thread count.
pub(crate) const ROW_TILE: usize = 1024;

/// Splits `0..rows` into fixed-size tiles.
pub(crate) fn row_tiles(rows: usize) -> Vec<Range<usize>> {
    (0..rows)
        .step_by(ROW_TILE)
        .map(|s| s..(s + ROW_TILE).min(rows))
        .collect()
}

/// Runs `f` on each tile, possibly in parallel, collecting results in tile order.
pub(crate) fn map_tiles<T: Send>(rows: usize, f: impl Fn(Range<usize>) -> T + Sync + Send) -> Vec<T> {
    parallel::map(row_tiles(rows), f)
}

/// Index of the largest entry of each row of `[N, K]`; ties go to the lower index.
pub fn argmax_rows<F: Scalar>(t: &Tensor<F>) -> Result<Vec<usize>> {
    let (_, k) = t.shape2()?;
    Ok(t
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
        })
        .collect())
}
