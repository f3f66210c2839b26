//! Forward and backward kernels plus the shape rules they share with the
//! shape-only executor. All kernels are single-threaded and deterministic.

use crate::tensor::{dims4, gemm, shape_err, Float, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn window_out(size: usize, k: usize, stride: usize, pad: usize, what: &str) -> Result<usize> {
    if stride == 0 {
        return shape_err(format!("{what}: stride must be positive"));
    }
    if k == 0 || k > size + 2 * pad {
        return shape_err(format!(
            "{what}: window {k} does not fit input extent {size} with padding {pad}"
        ));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

// ---------------------------------------------------------------------------
// shape rules

pub fn conv2d_shape(
    x: &[usize],
    w: &[usize],
    b: Option<&[usize]>,
    stride: usize,
    pad: usize,
) -> Result<Vec<usize>> {
    let (n, cin, h, wd) = dims4(x)?;
    let (cout, wcin, kh, kw) = dims4(w)?;
    if wcin != cin {
        return shape_err(format!(
            "conv2d: input has {cin} channels but weight {w:?} expects {wcin}"
        ));
    }
    if let Some(b) = b {
        if b != [cout] {
            return shape_err(format!("conv2d: bias {b:?} does not match {cout} output channels"));
        }
    }
    let ho = window_out(h, kh, stride, pad, "conv2d")?;
    let wo = window_out(wd, kw, stride, pad, "conv2d")?;
    Ok(vec![n, cout, ho, wo])
}

pub fn depthwise_shape(
    x: &[usize],
    w: &[usize],
    b: Option<&[usize]>,
    stride: usize,
    pad: usize,
) -> Result<Vec<usize>> {
    let (n, c, h, wd) = dims4(x)?;
    let (wc, one, kh, kw) = dims4(w)?;
    if wc != c || one != 1 {
        return shape_err(format!(
            "depthwise_conv2d: weight {w:?} does not match {c} input channels"
        ));
    }
    if let Some(b) = b {
        if b != [c] {
            return shape_err(format!("depthwise_conv2d: bias {b:?} does not match {c} channels"));
        }
    }
    let ho = window_out(h, kh, stride, pad, "depthwise_conv2d")?;
    let wo = window_out(wd, kw, stride, pad, "depthwise_conv2d")?;
    Ok(vec![n, c, ho, wo])
}

pub fn pool2d_shape(x: &[usize], k: usize, stride: usize, pad: usize) -> Result<Vec<usize>> {
    let (n, c, h, w) = dims4(x)?;
    if pad == 0 && (k > h || k > w) {
        return shape_err(format!("pool2d: window {k} larger than input {h}x{w}"));
    }
    let ho = window_out(h, k, stride, pad, "pool2d")?;
    let wo = window_out(w, k, stride, pad, "pool2d")?;
    Ok(vec![n, c, ho, wo])
}

pub fn global_pool_shape(x: &[usize]) -> Result<Vec<usize>> {
    let (n, c, h, w) = dims4(x)?;
    if h == 0 || w == 0 {
        return shape_err("global pool over an empty spatial map");
    }
    Ok(vec![n, c, 1, 1])
}

pub fn channel_pool_shape(x: &[usize]) -> Result<Vec<usize>> {
    let (n, c, h, w) = dims4(x)?;
    if c == 0 {
        return shape_err("channel pool over zero channels");
    }
    Ok(vec![n, 1, h, w])
}

pub fn linear_shape(x: &[usize], w: &[usize], b: Option<&[usize]>) -> Result<Vec<usize>> {
    let ([n, din], [dout, wdin]) = (x, w) else {
        return shape_err(format!("linear expects x (N, Din) and weight (Dout, Din), got {x:?} and {w:?}"));
    };
    if din != wdin {
        return shape_err(format!("linear: input width {din} does not match weight {w:?}"));
    }
    if let Some(b) = b {
        if b != [*dout] {
            return shape_err(format!("linear: bias {b:?} does not match {dout} outputs"));
        }
    }
    Ok(vec![*n, *dout])
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() || a.iter().zip(b).any(|(&da, &db)| db != da && db != 1) {
        return shape_err(format!("shape {b:?} is not broadcastable to {a:?}"));
    }
    Ok(a.to_vec())
}

pub fn concat_shape(parts: &[&[usize]]) -> Result<Vec<usize>> {
    let Some(first) = parts.first() else {
        return shape_err("concat of zero tensors");
    };
    if first.len() < 2 {
        return shape_err(format!("concat needs rank >= 2, got {first:?}"));
    }
    let mut out = first.to_vec();
    out[1] = 0;
    for p in parts {
        if p.len() != first.len() || p[0] != first[0] || p[2..] != first[2..] {
            return shape_err(format!("concat: {p:?} incompatible with {first:?}"));
        }
        out[1] += p[1];
    }
    Ok(out)
}

pub fn batch_norm_shape(x: &[usize], gamma: &[usize], beta: &[usize]) -> Result<Vec<usize>> {
    let (_, c, _, _) = dims4(x)?;
    if gamma != [c] || beta != [c] {
        return shape_err(format!("batch_norm2d: affine params {gamma:?}/{beta:?} do not match {c} channels"));
    }
    Ok(x.to_vec())
}

// ---------------------------------------------------------------------------
// convolution

#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Float>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let out = conv2d_shape(x, w, None, stride, pad)?;
        Ok(Self {
            n: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: w[0],
            kh: w[2],
            kw: w[3],
            ho: out[2],
            wo: out[3],
            stride,
            pad,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    // 1x1, stride 1, no padding: the input plane is already the column matrix.
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn cols<'a, T: Float>(&self, xn: &'a [T], buf: &'a mut Vec<T>) -> &'a [T] {
        if self.pointwise() {
            return xn;
        }
        buf.resize(self.k() * self.p(), T::zero());
        im2col(xn, self.cin, self.h, self.w, self.kh, self.kw, self.stride, self.pad, self.ho, self.wo, buf);
        buf
    }
}

/// Cross-correlation with zero padding.
pub fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let shape = conv2d_shape(x.shape(), w.shape(), b.map(|b| b.shape()), stride, pad)?;
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    let (k, p) = (g.k(), g.p());
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let mut buf = Vec::new();
    let in_plane = g.cin * g.h * g.w;
    for ni in 0..g.n {
        let xn = &x.data()[ni * in_plane..(ni + 1) * in_plane];
        let cols = g.cols(xn, &mut buf);
        let on = &mut out[ni * g.cout * p..(ni + 1) * g.cout * p];
        gemm(g.cout, k, p, w.data(), false, cols, false, on, false);
        if let Some(b) = b {
            for (co, chunk) in on.chunks_mut(p).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(shape, out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    let (k, p) = (g.k(), g.p());
    let in_plane = g.cin * g.h * g.w;
    let mut dw = vec![T::zero(); g.cout * k];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = if need_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut buf = Vec::new();
    let mut dcols = vec![T::zero(); k * p];
    for ni in 0..g.n {
        let gn = &grad.data()[ni * g.cout * p..(ni + 1) * g.cout * p];
        let xn = &x.data()[ni * in_plane..(ni + 1) * in_plane];
        let cols = g.cols(xn, &mut buf);
        gemm(g.cout, p, k, gn, false, cols, true, &mut dw, true);
        for (co, chunk) in gn.chunks(p).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
        if need_dx {
            let dxn = &mut dx[ni * in_plane..(ni + 1) * in_plane];
            if g.pointwise() {
                gemm(k, g.cout, p, w.data(), true, gn, false, dxn, true);
            } else {
                gemm(k, g.cout, p, w.data(), true, gn, false, &mut dcols, false);
                col2im(&dcols, g.cin, g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.ho, g.wo, dxn);
            }
        }
    }
    Ok(ConvGrads {
        dx: if need_dx { Some(Tensor::new(x.shape().to_vec(), dx)?) } else { None },
        dw: Tensor::new(w.shape().to_vec(), dw)?,
        db: Tensor::new([g.cout], db)?,
    })
}

/// Per-channel (grouped, groups == C) cross-correlation.
pub fn depthwise_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let shape = depthwise_shape(x.shape(), w.shape(), b.map(|b| b.shape()), stride, pad)?;
    let (n, c, h, wd) = x.dims4()?;
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    let (ho, wo) = (shape[2], shape[3]);
    let mut out = vec![T::zero(); n * c * ho * wo];
    let xd = x.data();
    for ni in 0..n {
        for ci in 0..c {
            let xp = &xd[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
            let kp = &w.data()[ci * kh * kw..(ci + 1) * kh * kw];
            let bias = b.map_or(T::zero(), |b| b.data()[ci]);
            let op = &mut out[(ni * c + ci) * ho * wo..(ni * c + ci + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                acc += kp[ky * kw + kx] * xp[iy as usize * wd + ix as usize];
                            }
                        }
                    }
                    op[oy * wo + ox] = acc + bias;
                }
            }
        }
    }
    Tensor::new(shape, out)
}

pub fn depthwise_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>> {
    let (n, c, h, wd) = x.dims4()?;
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    let (ho, wo) = (grad.shape()[2], grad.shape()[3]);
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); c];
    let xd = x.data();
    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * h * wd;
            let gp = &grad.data()[(ni * c + ci) * ho * wo..(ni * c + ci + 1) * ho * wo];
            let kp = &w.data()[ci * kh * kw..(ci + 1) * kh * kw];
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = gp[oy * wo + ox];
                    db[ci] += gv;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                let xi = plane + iy as usize * wd + ix as usize;
                                dw[ci * kh * kw + ky * kw + kx] += gv * xd[xi];
                                dx[xi] += gv * kp[ky * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        dx: Some(Tensor::new(x.shape().to_vec(), dx)?),
        dw: Tensor::new(w.shape().to_vec(), dw)?,
        db: Tensor::new([c], db)?,
    })
}

// ---------------------------------------------------------------------------
// pooling

/// Max pooling without padding. Returns the output and, per output cell, the
/// flat input index that won (first maximum in row-major scan order).
pub fn max_pool2d_forward<T: Float>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let shape = pool2d_shape(x.shape(), k, stride, 0)?;
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (shape[2], shape[3]);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(shape, out)?, arg))
}

/// Average pooling with zero padding; padded cells count toward the divisor.
pub fn avg_pool2d_forward<T: Float>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let shape = pool2d_shape(x.shape(), k, stride, pad)?;
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (shape[2], shape[3]);
    let inv = T::one() / T::lit((k * k) as f64);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            acc += xd[base + iy as usize * w + ix as usize];
                        }
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Tensor::new(shape, out)
}

pub fn avg_pool2d_backward<T: Float>(
    x_shape: &[usize],
    grad: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x_shape)?;
    let (ho, wo) = (grad.shape()[2], grad.shape()[3]);
    let inv = T::one() / T::lit((k * k) as f64);
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = grad.data()[plane * ho * wo + oy * wo + ox] * inv;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + iy as usize * w + ix as usize] += gv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}

/// Pool every `(n, c)` plane down to one value. For `Max` the winning flat
/// index per plane is returned.
pub fn global_pool_forward<T: Float>(
    x: &Tensor<T>,
    mode: PoolMode,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let shape = global_pool_shape(x.shape())?;
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c);
    let mut arg = Vec::new();
    for (plane, chunk) in x.data().chunks(hw).enumerate() {
        match mode {
            PoolMode::Avg => out.push(chunk.iter().copied().sum::<T>() / T::lit(hw as f64)),
            PoolMode::Max => {
                let mut best = 0;
                for (i, &v) in chunk.iter().enumerate() {
                    if v > chunk[best] {
                        best = i;
                    }
                }
                out.push(chunk[best]);
                arg.push(plane * hw + best);
            }
        }
    }
    Ok((Tensor::new(shape, out)?, arg))
}

/// Reduce across channels at every spatial location.
pub fn channel_pool_forward<T: Float>(
    x: &Tensor<T>,
    mode: PoolMode,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let shape = channel_pool_shape(x.shape())?;
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![T::zero(); n * hw];
    let mut arg = Vec::new();
    if mode == PoolMode::Max {
        arg = vec![0; n * hw];
    }
    let inv = T::one() / T::lit(c as f64);
    for ni in 0..n {
        for p in 0..hw {
            let o = ni * hw + p;
            match mode {
                PoolMode::Avg => {
                    let mut acc = T::zero();
                    for ci in 0..c {
                        acc += xd[(ni * c + ci) * hw + p];
                    }
                    out[o] = acc * inv;
                }
                PoolMode::Max => {
                    let mut best = ni * c * hw + p;
                    for ci in 1..c {
                        let i = (ni * c + ci) * hw + p;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    out[o] = xd[best];
                    arg[o] = best;
                }
            }
        }
    }
    Ok((Tensor::new(shape, out)?, arg))
}

// ---------------------------------------------------------------------------
// batch norm

pub struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var_unbiased: Vec<T>,
}

/// Training-mode normalization with batch statistics.
pub fn batch_norm_train<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let shape = batch_norm_shape(x.shape(), gamma.shape(), beta.shape())?;
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let m = n * hw;
    if m < 2 {
        return shape_err(format!(
            "batch_norm2d in train mode needs at least 2 values per channel, got N*H*W = {m}"
        ));
    }
    let xd = x.data();
    let eps = T::lit(BN_EPS);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    let mut means = vec![T::zero(); c];
    let mut vars_unbiased = vec![T::zero(); c];
    let mf = T::lit(m as f64);
    for ci in 0..c {
        let mut sum = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            sum += xd[base..base + hw].iter().copied().sum::<T>();
        }
        let mean = sum / mf;
        let mut sq = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for &v in &xd[base..base + hw] {
                sq += (v - mean) * (v - mean);
            }
        }
        let var = sq / mf;
        let istd = T::one() / (var + eps).sqrt();
        let (g, b) = (gamma.data()[ci], beta.data()[ci]);
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                let xh = (xd[i] - mean) * istd;
                xhat[i] = xh;
                out[i] = g * xh + b;
            }
        }
        inv_std[ci] = istd;
        means[ci] = mean;
        vars_unbiased[ci] = sq / T::lit((m - 1) as f64);
    }
    Ok((
        Tensor::new(shape, out)?,
        BnSaved { xhat, inv_std, batch_mean: means, batch_var_unbiased: vars_unbiased },
    ))
}

/// Inference-mode normalization with fixed statistics. Returns the output and
/// the per-channel inverse std used.
pub fn batch_norm_eval<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
) -> Result<(Tensor<T>, Vec<T>)> {
    let shape = batch_norm_shape(x.shape(), gamma.shape(), beta.shape())?;
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let eps = T::lit(BN_EPS);
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (g, b, mu, is) = (gamma.data()[ci], beta.data()[ci], running_mean[ci], inv_std[ci]);
            for i in base..base + hw {
                out[i] = g * ((x.data()[i] - mu) * is) + b;
            }
        }
    }
    Ok((Tensor::new(shape, out)?, inv_std))
}

// ---------------------------------------------------------------------------
// broadcasting

/// Visit every flat index of `a_shape` together with the matching flat index
/// of the broadcast operand `b_shape`.
pub fn for_each_broadcast(a_shape: &[usize], b_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = a_shape.len();
    let mut b_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        b_strides[d] = if b_shape[d] == 1 { 0 } else { acc };
        acc *= b_shape[d];
    }
    let total: usize = a_shape.iter().product();
    if total == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0);
        return;
    }
    // innermost run length where b advances contiguously or stays fixed
    let inner = a_shape[rank - 1];
    let inner_stride = b_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut flat = 0;
    while flat < total {
        let mut b_base = 0;
        for d in 0..rank - 1 {
            b_base += idx[d] * b_strides[d];
        }
        for j in 0..inner {
            f(flat + j, b_base + j * inner_stride);
        }
        flat += inner;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < a_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}
