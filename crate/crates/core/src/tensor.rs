//! Dense 4-D tensors in `(n, c, h, w)` row-major layout.
//!
//! Everything that flows between layers is a [`Tensor`]: feature maps,
//! parameters (a fully connected weight is stored as `(out, in, 1, 1)`),
//! and gradients. Training runs in `f32`; the gradient checker instantiates
//! the same code with `f64`.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type usable by every kernel in the crate.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Sum + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` over strided row/column views.
    ///
    /// # Safety
    /// Strides and extents must address memory inside each slice; the safe
    /// wrapper [`gemm`] checks this.
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

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A borrowed strided matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Contiguous row-major view.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef { data, rows, cols, row_stride: cols, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn fits(&self) -> bool {
        if self.rows == 0 || self.cols == 0 {
            return true;
        }
        let last = (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
        last < self.data.len()
    }
}

fn dot<T: Scalar>(x: &[T], xs: usize, y: &[T], ys: usize, len: usize) -> T {
    if xs == 1 && ys == 1 {
        let mut acc = [T::zero(); 4];
        let (xc, yc) = (x[..len].chunks_exact(4), y[..len].chunks_exact(4));
        let (xr, yr) = (xc.remainder(), yc.remainder());
        for (a, b) in xc.zip(yc) {
            for k in 0..4 {
                acc[k] = acc[k] + a[k] * b[k];
            }
        }
        let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for (&a, &b) in xr.iter().zip(yr) {
            sum = sum + a * b;
        }
        sum
    } else {
        (0..len).fold(T::zero(), |acc, k| acc + x[k * xs] * y[k * ys])
    }
}

fn gemv<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, out: &mut [T]) {
    for i in 0..a.rows {
        let row = &a.data[i * a.row_stride..];
        for j in 0..b.cols {
            let col = &b.data[j * b.col_stride..];
            let v = alpha * dot(row, a.col_stride, col, b.row_stride, a.cols);
            let o = &mut out[i * b.cols + j];
            *o = if beta == T::zero() { v } else { beta * *o + v };
        }
    }
}

/// `out = alpha * a * b + beta * out` where `out` is contiguous row-major.
pub fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, out: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.fits() && b.fits(), "gemm operand view out of bounds");
    assert!(out.len() >= a.rows * b.cols, "gemm output too small");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for v in &mut out[..a.rows * b.cols] {
            *v = *v * beta;
        }
        return;
    }
    if b.cols == 1 || a.rows == 1 {
        // matrix-vector shapes waste most of a packed kernel
        gemv(alpha, a, b, beta, out);
        return;
    }
    // SAFETY: bounds of all three views were checked above.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Extents of a 4-D tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Elements in one sample (`c * h * w`).
    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    fn extent(&self, axis: Axis) -> usize {
        match axis {
            Axis::N => self.n,
            Axis::C => self.c,
            Axis::H => self.h,
            Axis::W => self.w,
        }
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    N,
    C,
    H,
    W,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Tensor { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.len() {
            return Err(Error::Length { expected: shape.len(), actual: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    /// Rank-1 convenience: a `(len, 1, 1, 1)` tensor.
    pub fn vector(data: Vec<T>) -> Self {
        let n = data.len();
        Tensor { shape: Shape::new(n, 1, 1, 1), data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    /// Slice holding sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Reinterprets the extents without moving data.
    pub fn reshape(mut self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.len() != self.data.len() {
            return Err(Error::Length { expected: shape.len(), actual: self.data.len() });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect() }
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Sums or averages over `axes`, keeping them as extent-1 dimensions.
    pub fn reduce(&self, axes: &[Axis], kind: Reduction) -> Result<Tensor<T>> {
        if axes.is_empty() {
            return Err(Error::config("reduce requires at least one axis"));
        }
        let keep = |a: Axis| !axes.contains(&a);
        let s = self.shape;
        let out_shape = Shape::new(
            if keep(Axis::N) { s.n } else { 1 },
            if keep(Axis::C) { s.c } else { 1 },
            if keep(Axis::H) { s.h } else { 1 },
            if keep(Axis::W) { s.w } else { 1 },
        );
        let mut out = Tensor::zeros(out_shape);
        let mut idx = 0;
        for n in 0..s.n {
            let on = if keep(Axis::N) { n } else { 0 };
            for c in 0..s.c {
                let oc = if keep(Axis::C) { c } else { 0 };
                for h in 0..s.h {
                    let oh = if keep(Axis::H) { h } else { 0 };
                    for w in 0..s.w {
                        let ow = if keep(Axis::W) { w } else { 0 };
                        let o = out.offset(on, oc, oh, ow);
                        out.data[o] = out.data[o] + self.data[idx];
                        idx += 1;
                    }
                }
            }
        }
        if kind == Reduction::Mean {
            let count: usize = axes
                .iter()
                .fold(Vec::<Axis>::new(), |mut seen, &a| {
                    if !seen.contains(&a) {
                        seen.push(a);
                    }
                    seen
                })
                .iter()
                .map(|&a| s.extent(a))
                .product();
            let inv = T::one() / T::from_usize(count).unwrap();
            for v in &mut out.data {
                *v = *v * inv;
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).abs()).fold(T::zero(), T::max)
    }
}

/// Kernel window geometry shared by convolution and pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub const fn square(k: usize, stride: usize, pad: usize) -> Self {
        Window { kh: k, kw: k, stride, pad }
    }

    /// `floor((h + 2p - k) / s) + 1` for both spatial axes.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let extent = |len: usize, k: usize| -> Option<usize> {
            let padded = len + 2 * self.pad;
            if self.stride == 0 || padded < k {
                None
            } else {
                Some((padded - k) / self.stride + 1)
            }
        };
        match (extent(h, self.kh), extent(w, self.kw)) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
            _ => Err(Error::shape(
                "window",
                format!(
                    "non-positive output extent: input {h}x{w}, kernel {}x{}, stride {}, pad {} gives oh={}, ow={}",
                    self.kh,
                    self.kw,
                    self.stride,
                    self.pad,
                    signed_extent(h, self.kh, self.stride, self.pad),
                    signed_extent(w, self.kw, self.stride, self.pad),
                ),
            )),
        }
    }
}

fn signed_extent(len: usize, k: usize, s: usize, p: usize) -> i64 {
    if s == 0 {
        return 0;
    }
    let num = len as i64 + 2 * p as i64 - k as i64;
    num.div_euclid(s as i64) + 1
}

/// Row-major patch matrix produced by [`im2col`].
#[derive(Clone, Debug, PartialEq)]
pub struct ColMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ColMatrix<T> {
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn view(&self) -> MatRef<'_, T> {
        MatRef::new(&self.data, self.rows, self.cols)
    }
}

/// Unrolls receptive fields into columns.
///
/// Rows index `(channel, ky, kx)`, columns index `(sample, oy, ox)`.
/// Positions outside the input read as zero.
pub fn im2col<T: Scalar>(x: &Tensor<T>, win: Window) -> Result<ColMatrix<T>> {
    let s = x.shape();
    let (oh, ow) = win.output_extent(s.h, s.w)?;
    let rows = s.c * win.kh * win.kw;
    let plane = oh * ow;
    let cols = s.n * plane;
    let mut data = vec![T::zero(); rows * cols];
    for n in 0..s.n {
        let sample = x.sample(n);
        im2col_into(sample, s.c, s.h, s.w, win, oh, ow, &mut data, cols, n * plane);
    }
    Ok(ColMatrix { rows, cols, data })
}

/// Writes one sample's patches into `dst` (row stride `ld`) starting at column `col0`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col_into<T: Scalar>(
    sample: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    oh: usize,
    ow: usize,
    dst: &mut [T],
    ld: usize,
    col0: usize,
) {
    let pad = win.pad as isize;
    let stride = win.stride as isize;
    for ch in 0..c {
        let src = &sample[ch * h * w..(ch + 1) * h * w];
        for u in 0..win.kh {
            for v in 0..win.kw {
                let row = (ch * win.kh + u) * win.kw + v;
                let out = &mut dst[row * ld + col0..row * ld + col0 + oh * ow];
                for i in 0..oh {
                    let y = i as isize * stride - pad + u as isize;
                    let line = &mut out[i * ow..(i + 1) * ow];
                    if y < 0 || y >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let row_src = &src[y as usize * w..(y as usize + 1) * w];
                    for (j, slot) in line.iter_mut().enumerate() {
                        let xx = j as isize * stride - pad + v as isize;
                        *slot = if xx < 0 || xx >= w as isize { T::zero() } else { row_src[xx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps.
pub fn col2im<T: Scalar>(cols: &ColMatrix<T>, input: Shape, win: Window) -> Result<Tensor<T>> {
    let (oh, ow) = win.output_extent(input.h, input.w)?;
    let expected_rows = input.c * win.kh * win.kw;
    let expected_cols = input.n * oh * ow;
    if cols.rows != expected_rows || cols.cols != expected_cols {
        return Err(Error::shape(
            "col2im",
            format!("matrix is {}x{}, expected {expected_rows}x{expected_cols}", cols.rows, cols.cols),
        ));
    }
    let mut out = Tensor::zeros(input);
    let len = input.sample_len();
    for n in 0..input.n {
        let dst = &mut out.data[n * len..(n + 1) * len];
        col2im_add(&cols.data, cols.cols, n * oh * ow, input.c, input.h, input.w, win, oh, ow, dst);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add<T: Scalar>(
    src: &[T],
    ld: usize,
    col0: usize,
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    oh: usize,
    ow: usize,
    dst: &mut [T],
) {
    let pad = win.pad as isize;
    let stride = win.stride as isize;
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for u in 0..win.kh {
            for v in 0..win.kw {
                let row = (ch * win.kh + u) * win.kw + v;
                let cols = &src[row * ld + col0..row * ld + col0 + oh * ow];
                for i in 0..oh {
                    let y = i as isize * stride - pad + u as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for j in 0..ow {
                        let xx = j as isize * stride - pad + v as isize;
                        if xx >= 0 && xx < w as isize {
                            let d = &mut plane[y as usize * w + xx as usize];
                            *d = *d + cols[i * ow + j];
                        }
                    }
                }
            }
        }
    }
}
