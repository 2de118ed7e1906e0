//! Forward and backward kernels for the fixed layer vocabulary.
//!
//! Every kernel is a free function over [`Tensor`]s so it can be tested in
//! isolation; [`crate::layers::ArchGraph`] wires them together and keeps the
//! caches each backward needs.

use crate::data::Rng;
use crate::error::{Error, Result};
use crate::tensor::{col2im_add, gemm, im2col_into, MatRef, Scalar, Shape, Tensor, Window};

fn check_spatial(layer: &str, x: Shape) -> Result<()> {
    if x.is_empty() {
        return Err(Error::shape(layer, format!("zero-extent input {x}")));
    }
    Ok(())
}

/// Standard convolution. `weight` is `(cout, cin, kh, kw)`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    check_spatial("conv2d", xs)?;
    if xs.c != ws.c {
        return Err(Error::shape("conv2d", format!("expected {} input channels, got {}", ws.c, xs.c)));
    }
    let win = Window { kh: ws.h, kw: ws.w, stride, pad };
    let (oh, ow) = win.output_extent(xs.h, xs.w)?;
    let plane = oh * ow;
    let k = ws.c * ws.h * ws.w;
    let mut out = Tensor::zeros([xs.n, ws.n, oh, ow]);
    let pointwise = ws.h == 1 && ws.w == 1 && stride == 1 && pad == 0;
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * plane] };
    let wmat = MatRef::new(weight.data(), ws.n, k);
    let out_len = ws.n * plane;
    for n in 0..xs.n {
        let sample = x.sample(n);
        let cols = if pointwise {
            MatRef::new(sample, k, plane)
        } else {
            im2col_into(sample, xs.c, xs.h, xs.w, win, oh, ow, &mut col, plane, 0);
            MatRef::new(&col, k, plane)
        };
        let dst = &mut out.data_mut()[n * out_len..(n + 1) * out_len];
        gemm(T::one(), wmat, cols, T::zero(), dst);
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                let bv = b.data()[co];
                for v in chunk {
                    *v = *v + bv;
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dweight: Tensor<T>,
    pub dbias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    pad: usize,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    let win = Window { kh: ws.h, kw: ws.w, stride, pad };
    let (oh, ow) = win.output_extent(xs.h, xs.w)?;
    let plane = oh * ow;
    let k = ws.c * ws.h * ws.w;
    let pointwise = ws.h == 1 && ws.w == 1 && stride == 1 && pad == 0;
    let mut dweight = Tensor::zeros(ws);
    let mut dbias = has_bias.then(|| Tensor::zeros([ws.n, 1, 1, 1]));
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * plane] };
    let mut dcol = vec![T::zero(); k * plane];
    let wmat = MatRef::new(weight.data(), ws.n, k);
    let dy_len = ws.n * plane;
    let sample_len = xs.sample_len();
    for n in 0..xs.n {
        let g = &dy.data()[n * dy_len..(n + 1) * dy_len];
        let gmat = MatRef::new(g, ws.n, plane);
        let sample = x.sample(n);
        let cols = if pointwise {
            MatRef::new(sample, k, plane)
        } else {
            im2col_into(sample, xs.c, xs.h, xs.w, win, oh, ow, &mut col, plane, 0);
            MatRef::new(&col, k, plane)
        };
        gemm(T::one(), gmat, cols.t(), T::one(), dweight.data_mut());
        if let Some(db) = dbias.as_mut() {
            for (co, chunk) in g.chunks(plane).enumerate() {
                let s = chunk.iter().fold(T::zero(), |a, &b| a + b);
                db.data_mut()[co] = db.data()[co] + s;
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx.data_mut()[n * sample_len..(n + 1) * sample_len];
            if pointwise {
                gemm(T::one(), wmat.t(), gmat, T::zero(), dst);
            } else {
                gemm(T::one(), wmat.t(), gmat, T::zero(), &mut dcol);
                col2im_add(&dcol, plane, 0, xs.c, xs.h, xs.w, win, oh, ow, dst);
            }
        }
    }
    Ok(ConvGrads { dx, dweight, dbias })
}

/// Per-channel convolution. `weight` is `(c, 1, kh, kw)`.
pub fn depthwise_conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    check_spatial("depthwise_conv2d", xs)?;
    if xs.c != ws.n || ws.c != 1 {
        return Err(Error::shape("depthwise_conv2d", format!("expected {} input channels, got {}", ws.n, xs.c)));
    }
    let win = Window { kh: ws.h, kw: ws.w, stride, pad };
    let (oh, ow) = win.output_extent(xs.h, xs.w)?;
    let mut out = Tensor::zeros([xs.n, xs.c, oh, ow]);
    let kk = ws.h * ws.w;
    let (h, w) = (xs.h as isize, xs.w as isize);
    for n in 0..xs.n {
        for c in 0..xs.c {
            let src = &x.data()[(n * xs.c + c) * xs.plane()..(n * xs.c + c + 1) * xs.plane()];
            let kern = &weight.data()[c * kk..(c + 1) * kk];
            let base = (n * xs.c + c) * oh * ow;
            let dst = &mut out.data_mut()[base..base + oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = T::zero();
                    for u in 0..ws.h {
                        let y = (i * stride + u) as isize - pad as isize;
                        if y < 0 || y >= h {
                            continue;
                        }
                        for v in 0..ws.w {
                            let xx = (j * stride + v) as isize - pad as isize;
                            if xx >= 0 && xx < w {
                                acc = acc + kern[u * ws.w + v] * src[y as usize * xs.w + xx as usize];
                            }
                        }
                    }
                    dst[i * ow + j] = acc;
                }
            }
        }
    }
    Ok(out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let xs = x.shape();
    let ws = weight.shape();
    let ds = dy.shape();
    let (oh, ow) = (ds.h, ds.w);
    let kk = ws.h * ws.w;
    let mut dw = Tensor::zeros(ws);
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    let (h, w) = (xs.h as isize, xs.w as isize);
    for n in 0..xs.n {
        for c in 0..xs.c {
            let off = (n * xs.c + c) * xs.plane();
            let src = &x.data()[off..off + xs.plane()];
            let kern = &weight.data()[c * kk..(c + 1) * kk];
            let g = &dy.data()[(n * xs.c + c) * oh * ow..(n * xs.c + c + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let gv = g[i * ow + j];
                    for u in 0..ws.h {
                        let y = (i * stride + u) as isize - pad as isize;
                        if y < 0 || y >= h {
                            continue;
                        }
                        for v in 0..ws.w {
                            let xx = (j * stride + v) as isize - pad as isize;
                            if xx < 0 || xx >= w {
                                continue;
                            }
                            let p = y as usize * xs.w + xx as usize;
                            let widx = c * kk + u * ws.w + v;
                            dw.data_mut()[widx] = dw.data()[widx] + gv * src[p];
                            if let Some(dx) = dx.as_mut() {
                                let d = &mut dx.data_mut()[off + p];
                                *d = *d + gv * kern[u * ws.w + v];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running buffers.
    Train,
    /// Normalize with the running buffers.
    Infer,
}

/// Values the batch-norm backward pass needs.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: BnMode,
}

pub struct BnParams<'a, T> {
    pub gamma: &'a Tensor<T>,
    pub beta: &'a Tensor<T>,
    pub running_mean: &'a mut Tensor<T>,
    pub running_var: &'a mut Tensor<T>,
}

/// Batch normalization over `(n, h, w)` per channel.
///
/// In train mode the running buffers move as
/// `running = momentum * running + (1 - momentum) * batch` using the biased
/// batch variance.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    p: BnParams<'_, T>,
    mode: BnMode,
    eps: f64,
    momentum: f64,
) -> Result<(Tensor<T>, BnCache<T>)> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::config(format!("batch norm eps must be positive, got {eps}")));
    }
    let s = x.shape();
    check_spatial("batch_norm", s)?;
    for (what, t) in [("gamma", p.gamma.len()), ("beta", p.beta.len())] {
        if t != s.c {
            return Err(Error::shape("batch_norm", format!("{what} has {t} entries, expected {}", s.c)));
        }
    }
    if p.running_mean.len() != s.c || p.running_var.len() != s.c {
        return Err(Error::shape("batch_norm", format!("running stats must have {} entries", s.c)));
    }
    let plane = s.plane();
    let m = s.n * plane;
    let eps_t = T::from_f64_lossy(eps);
    let mut out = Tensor::zeros(s);
    let mut xhat = Tensor::zeros(s);
    let mut inv_std = vec![T::zero(); s.c];
    let mom = T::from_f64_lossy(momentum);
    #[allow(clippy::needless_range_loop)]
    for c in 0..s.c {
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut sum = T::zero();
                for n in 0..s.n {
                    let off = (n * s.c + c) * plane;
                    sum = x.data()[off..off + plane].iter().fold(sum, |a, &b| a + b);
                }
                let mean = sum / T::from_usize(m).unwrap();
                let mut sq = T::zero();
                for n in 0..s.n {
                    let off = (n * s.c + c) * plane;
                    sq = x.data()[off..off + plane].iter().fold(sq, |a, &b| a + (b - mean) * (b - mean));
                }
                let var = sq / T::from_usize(m).unwrap();
                let rm = &mut p.running_mean.data_mut()[c];
                *rm = mom * *rm + (T::one() - mom) * mean;
                let rv = &mut p.running_var.data_mut()[c];
                *rv = mom * *rv + (T::one() - mom) * var;
                (mean, var)
            }
            BnMode::Infer => (p.running_mean.data()[c], p.running_var.data()[c]),
        };
        let istd = T::one() / (var + eps_t).sqrt();
        inv_std[c] = istd;
        let g = p.gamma.data()[c];
        let b = p.beta.data()[c];
        for n in 0..s.n {
            let off = (n * s.c + c) * plane;
            for i in off..off + plane {
                let xh = (x.data()[i] - mean) * istd;
                xhat.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + b;
            }
        }
    }
    Ok((out, BnCache { xhat, inv_std, mode }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = dy.shape();
    let plane = s.plane();
    let m = T::from_usize(s.n * plane).unwrap();
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros([s.c, 1, 1, 1]);
    let mut dbeta = Tensor::zeros([s.c, 1, 1, 1]);
    for c in 0..s.c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..s.n {
            let off = (n * s.c + c) * plane;
            for i in off..off + plane {
                sum_dy = sum_dy + dy.data()[i];
                sum_dy_xhat = sum_dy_xhat + dy.data()[i] * cache.xhat.data()[i];
            }
        }
        dgamma.data_mut()[c] = sum_dy_xhat;
        dbeta.data_mut()[c] = sum_dy;
        let g = gamma.data()[c];
        let istd = cache.inv_std[c];
        for n in 0..s.n {
            let off = (n * s.c + c) * plane;
            for i in off..off + plane {
                dx.data_mut()[i] = match cache.mode {
                    BnMode::Train => g * istd / m * (m * dy.data()[i] - sum_dy - cache.xhat.data()[i] * sum_dy_xhat),
                    BnMode::Infer => g * istd * dy.data()[i],
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let a = T::from_f64_lossy(slope);
    x.map(|v| if v >= T::zero() { v } else { a * v })
}

pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, slope: f64, dy: &Tensor<T>) -> Tensor<T> {
    let a = T::from_f64_lossy(slope);
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v < T::zero() {
            *d = *d * a;
        }
    }
    dx
}

/// Softmax across channels of a `(n, c, 1, 1)` tensor.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::shape("softmax", format!("softmax needs a (n, c, 1, 1) input, got {s}")));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(s.c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(out)
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let c = y.shape().c;
    let mut dx = Tensor::zeros(y.shape());
    for ((yr, gr), dr) in y.data().chunks(c).zip(dy.data().chunks(c)).zip(dx.data_mut().chunks_mut(c)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &g)| a + p * g);
        for i in 0..c {
            dr[i] = yr[i] * (gr[i] - dot);
        }
    }
    dx
}

/// Max pooling; padded cells never win. Returns the output and, per output
/// cell, the winning offset inside its input plane (first maximum in
/// row-major order on ties).
pub fn max_pool<T: Scalar>(x: &Tensor<T>, win: Window) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    check_spatial("max_pool", s)?;
    if win.pad >= win.kh || win.pad >= win.kw {
        return Err(Error::config(format!("max_pool padding {} must be smaller than the kernel", win.pad)));
    }
    let (oh, ow) = win.output_extent(s.h, s.w)?;
    let mut out = Tensor::zeros([s.n, s.c, oh, ow]);
    let mut argmax = vec![0usize; s.n * s.c * oh * ow];
    let (h, w) = (s.h as isize, s.w as isize);
    for plane_idx in 0..s.n * s.c {
        let src = &x.data()[plane_idx * s.plane()..(plane_idx + 1) * s.plane()];
        for i in 0..oh {
            for j in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_at = usize::MAX;
                for u in 0..win.kh {
                    let y = (i * win.stride + u) as isize - win.pad as isize;
                    if y < 0 || y >= h {
                        continue;
                    }
                    for v in 0..win.kw {
                        let xx = (j * win.stride + v) as isize - win.pad as isize;
                        if xx < 0 || xx >= w {
                            continue;
                        }
                        let p = y as usize * s.w + xx as usize;
                        if best_at == usize::MAX || src[p] > best {
                            best = src[p];
                            best_at = p;
                        }
                    }
                }
                let o = plane_idx * oh * ow + i * ow + j;
                out.data_mut()[o] = best;
                argmax[o] = best_at;
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool_backward<T: Scalar>(input: Shape, argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input);
    let out_plane = dy.shape().plane();
    for (o, (&g, &a)) in dy.data().iter().zip(argmax).enumerate() {
        let plane_idx = o / out_plane;
        let d = &mut dx.data_mut()[plane_idx * input.plane() + a];
        *d = *d + g;
    }
    dx
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = T::one() / T::from_usize(s.plane()).unwrap();
    let data = x.data().chunks(s.plane()).map(|p| p.iter().fold(T::zero(), |a, &b| a + b) * inv).collect();
    Tensor::from_vec([s.n, s.c, 1, 1], data).expect("pooled length")
}

pub fn global_avg_pool_backward<T: Scalar>(input: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let inv = T::one() / T::from_usize(input.plane()).unwrap();
    let mut dx = Tensor::zeros(input);
    for (p, &g) in dx.data_mut().chunks_mut(input.plane()).zip(dy.data()) {
        p.fill(g * inv);
    }
    dx
}

/// Half-open region `[floor(i*len/target), floor((i+1)*len/target))`.
fn adaptive_region(i: usize, len: usize, target: usize) -> (usize, usize) {
    (i * len / target, (i + 1) * len / target)
}

pub fn adaptive_avg_pool<T: Scalar>(x: &Tensor<T>, th: usize, tw: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    check_spatial("adaptive_avg_pool", s)?;
    if th == 0 || tw == 0 || th > s.h || tw > s.w {
        return Err(Error::shape("adaptive_avg_pool", format!("target {th}x{tw} does not fit input {}x{}", s.h, s.w)));
    }
    let mut out = Tensor::zeros([s.n, s.c, th, tw]);
    for plane_idx in 0..s.n * s.c {
        let src = &x.data()[plane_idx * s.plane()..(plane_idx + 1) * s.plane()];
        for i in 0..th {
            let (y0, y1) = adaptive_region(i, s.h, th);
            for j in 0..tw {
                let (x0, x1) = adaptive_region(j, s.w, tw);
                let mut acc = T::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc = acc + src[y * s.w + xx];
                    }
                }
                let count = T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                out.data_mut()[plane_idx * th * tw + i * tw + j] = acc / count;
            }
        }
    }
    Ok(out)
}

pub fn adaptive_avg_pool_backward<T: Scalar>(input: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let (th, tw) = (dy.shape().h, dy.shape().w);
    let mut dx = Tensor::zeros(input);
    for plane_idx in 0..input.n * input.c {
        let dst = &mut dx.data_mut()[plane_idx * input.plane()..(plane_idx + 1) * input.plane()];
        for i in 0..th {
            let (y0, y1) = adaptive_region(i, input.h, th);
            for j in 0..tw {
                let (x0, x1) = adaptive_region(j, input.w, tw);
                let count = T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                let g = dy.data()[plane_idx * th * tw + i * tw + j] / count;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dst[y * input.w + xx] = dst[y * input.w + xx] + g;
                    }
                }
            }
        }
    }
    dx
}

/// `y = W x + b` per sample; `weight` is `(out, in, 1, 1)`.
pub fn fully_connected<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let s = x.shape();
    let (out_f, in_f) = (weight.shape().n, weight.shape().c);
    if s.h != 1 || s.w != 1 || s.c != in_f {
        return Err(Error::shape("fully_connected", format!("expected input (n, {in_f}, 1, 1), got {s}")));
    }
    let mut out = Tensor::zeros([s.n, out_f, 1, 1]);
    gemm(
        T::one(),
        MatRef::new(x.data(), s.n, in_f),
        MatRef::new(weight.data(), out_f, in_f).t(),
        T::zero(),
        out.data_mut(),
    );
    if let Some(b) = bias {
        for row in out.data_mut().chunks_mut(out_f) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v = *v + bv;
            }
        }
    }
    Ok(out)
}

/// Returns `(dx, dweight, dbias)`.
pub fn fully_connected_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Option<Tensor<T>>) {
    let s = x.shape();
    let (out_f, in_f) = (weight.shape().n, weight.shape().c);
    let gmat = MatRef::new(dy.data(), s.n, out_f);
    let mut dw = Tensor::zeros(weight.shape());
    gemm(T::one(), gmat.t(), MatRef::new(x.data(), s.n, in_f), T::zero(), dw.data_mut());
    let db = has_bias.then(|| {
        let mut db = Tensor::zeros([out_f, 1, 1, 1]);
        for row in dy.data().chunks(out_f) {
            for (d, &g) in db.data_mut().iter_mut().zip(row) {
                *d = *d + g;
            }
        }
        db
    });
    let dx = need_dx.then(|| {
        let mut dx = Tensor::zeros(s);
        gemm(T::one(), gmat, MatRef::new(weight.data(), out_f, in_f), T::zero(), dx.data_mut());
        dx
    });
    (dx, dw, db)
}

/// Inverted dropout. Returns the output and the per-element multiplier
/// (empty when the layer acted as identity).
pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    rate: f64,
    training: bool,
    rng: Option<&mut Rng>,
) -> Result<(Tensor<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    let rng = match rng {
        Some(r) if training && rate > 0.0 => r,
        _ => return Ok((x.clone(), Vec::new())),
    };
    let scale = T::from_f64_lossy(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len()).map(|_| if rng.uniform() < rate { T::zero() } else { scale }).collect();
    let mut out = x.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
        *v = *v * m;
    }
    Ok((out, mask))
}

pub fn dropout_backward<T: Scalar>(mask: &[T], dy: &Tensor<T>) -> Tensor<T> {
    if mask.is_empty() {
        return dy.clone();
    }
    let mut dx = dy.clone();
    for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
        *d = *d * m;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t([1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = t([1, 1, 3, 3], &k);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_weights() {
        let x = t([2, 3, 4, 4], &[1.5; 96]);
        let w = Tensor::<f64>::zeros([5, 3, 3, 3]);
        let b = Tensor::<f64>::zeros([5, 1, 1, 1]);
        let y = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros([4, 3, 3, 3]);
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("expected 3 input channels"), "{err}");
    }

    #[test]
    fn depthwise_identity_and_independence() {
        let x = t([1, 2, 2, 2], &[1., 2., 3., 4., 0., 0., 0., 0.]);
        let mut k = vec![0.0; 18];
        k[4] = 1.0;
        k[13] = 1.0;
        let w = t([2, 1, 3, 3], &k);
        let y = depthwise_conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(y, x);

        let dense = t([2, 1, 3, 3], &[0.7; 18]);
        let y = depthwise_conv2d(&x, &dense, 1, 1).unwrap();
        assert!(y.data()[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_examples() {
        let mut rm = Tensor::<f64>::zeros([1, 1, 1, 1]);
        let mut rv = Tensor::<f64>::full([1, 1, 1, 1], 1.0);
        let g = Tensor::full([1, 1, 1, 1], 1.0);
        let b = Tensor::<f64>::zeros([1, 1, 1, 1]);
        let x = t([2, 1, 1, 1], &[1.0, 3.0]);
        let p = BnParams { gamma: &g, beta: &b, running_mean: &mut rm, running_var: &mut rv };
        let (y, _) = batch_norm(&x, p, BnMode::Train, 1e-12, 0.9).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        // running <- 0.9 * running + 0.1 * batch
        assert!((rm.data()[0] - 0.2).abs() < 1e-12);
        assert!((rv.data()[0] - 1.0).abs() < 1e-12);

        let beta = Tensor::full([1, 1, 1, 1], 0.25);
        let x = t([2, 1, 2, 1], &[4.0; 4]);
        let p = BnParams { gamma: &g, beta: &beta, running_mean: &mut rm, running_var: &mut rv };
        let (y, _) = batch_norm(&x, p, BnMode::Train, 1e-5, 0.9).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn batch_norm_infer_identity() {
        let mut rm = Tensor::<f64>::zeros([1, 1, 1, 1]);
        let mut rv = Tensor::<f64>::full([1, 1, 1, 1], 1.0);
        let g = Tensor::full([1, 1, 1, 1], 1.0);
        let b = Tensor::<f64>::zeros([1, 1, 1, 1]);
        let x = t([1, 1, 1, 3], &[-2.0, 0.5, 3.0]);
        let p = BnParams { gamma: &g, beta: &b, running_mean: &mut rm, running_var: &mut rv };
        let (y, _) = batch_norm(&x, p, BnMode::Infer, 1e-10, 0.9).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn batch_norm_rejects_nonpositive_eps() {
        let mut rm = Tensor::<f64>::zeros([1, 1, 1, 1]);
        let mut rv = Tensor::<f64>::full([1, 1, 1, 1], 1.0);
        let g = Tensor::full([1, 1, 1, 1], 1.0);
        let b = Tensor::<f64>::zeros([1, 1, 1, 1]);
        let x = t([2, 1, 1, 1], &[1.0, 3.0]);
        let p = BnParams { gamma: &g, beta: &b, running_mean: &mut rm, running_var: &mut rv };
        assert!(matches!(batch_norm(&x, p, BnMode::Train, 0.0, 0.9), Err(Error::Config(_))));
    }

    #[test]
    fn activations() {
        let x = t([1, 2, 1, 1], &[-1.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let y = leaky_relu(&t([1, 1, 1, 1], &[-5.0]), 0.1);
        assert!((y.data()[0] + 0.5).abs() < 1e-12);
        let s = softmax(&t([1, 2, 1, 1], &[0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        assert!(softmax(&Tensor::<f64>::zeros([1, 2, 2, 1])).is_err());
        let dx = relu_backward(&t([1, 1, 1, 1], &[-1.0]), &t([1, 1, 1, 1], &[3.0]));
        assert_eq!(dx.data(), &[0.0]);
    }

    #[test]
    fn max_pool_examples() {
        let x = t([1, 1, 2, 2], &[1., 2., 3., 4.]);
        let (y, idx) = max_pool(&x, Window::square(2, 2, 0)).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);

        let c = Tensor::<f64>::full([1, 2, 5, 5], 0.3);
        let (y, idx) = max_pool(&c, Window::square(3, 2, 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.3));
        // ties resolve to the first in-bounds cell of each window
        assert_eq!(idx[0], 0);
        assert_eq!(idx[1], 1);

        let big = Tensor::<f32>::zeros([1, 1, 224, 224]);
        let (y, _) = max_pool(&big, Window::square(3, 2, 1)).unwrap();
        assert_eq!((y.shape().h, y.shape().w), (112, 112));
    }

    #[test]
    fn pooling_examples() {
        let x = t([1, 1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(global_avg_pool(&x).data(), &[2.5]);
        let a = adaptive_avg_pool(&x, 1, 1).unwrap();
        assert_eq!(a, global_avg_pool(&x));
        assert_eq!(adaptive_avg_pool(&x, 2, 2).unwrap(), x);

        let rows = t([1, 1, 4, 1], &[1., 3., 10., 20.]);
        let y = adaptive_avg_pool(&rows, 2, 1).unwrap();
        assert_eq!(y.data(), &[2.0, 15.0]);
        assert!(adaptive_avg_pool(&x, 3, 1).is_err());
    }

    #[test]
    fn fully_connected_examples() {
        let w = t([1, 2, 1, 1], &[1.0, 1.0]);
        let b = t([1, 1, 1, 1], &[0.0]);
        let x = t([1, 2, 1, 1], &[2.0, 3.0]);
        assert_eq!(fully_connected(&x, &w, Some(&b)).unwrap().data(), &[5.0]);

        let id = t([2, 2, 1, 1], &[1., 0., 0., 1.]);
        let z = Tensor::zeros([2, 1, 1, 1]);
        assert_eq!(fully_connected(&x, &id, Some(&z)).unwrap(), x);
        assert!(fully_connected(&t([1, 3, 1, 1], &[1., 2., 3.]), &w, None).is_err());
    }

    #[test]
    fn fully_connected_backward_by_hand() {
        // in = out = 1, x = 3, W = 2, L = y
        let x = t([1, 1, 1, 1], &[3.0]);
        let w = t([1, 1, 1, 1], &[2.0]);
        let dy = t([1, 1, 1, 1], &[1.0]);
        let (dx, dw, db) = fully_connected_backward(&x, &w, true, &dy, true);
        assert_eq!(dw.data(), &[3.0]);
        assert_eq!(dx.unwrap().data(), &[2.0]);
        assert_eq!(db.unwrap().data(), &[1.0]);
    }

    #[test]
    fn dropout_identities_and_range() {
        let x = t([1, 4, 1, 1], &[1., 2., 3., 4.]);
        let mut rng = Rng::new(1);
        assert_eq!(dropout(&x, 0.0, true, Some(&mut rng)).unwrap().0, x);
        assert_eq!(dropout(&x, 0.5, false, Some(&mut rng)).unwrap().0, x);
        assert!(dropout(&x, 1.0, true, Some(&mut rng)).is_err());
        assert!(dropout(&x, -0.1, false, None).is_err());
    }

    #[test]
    fn dropout_is_unbiased() {
        let x = Tensor::<f64>::full([1, 1, 200, 200], 1.0);
        let mut rng = Rng::new(11);
        let (y, _) = dropout(&x, 0.5, true, Some(&mut rng)).unwrap();
        let mean = y.data().iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }
}
