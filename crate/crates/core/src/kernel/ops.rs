//! CNN primitives with their backward passes.
//!
//! Convolution lowers each sample to im2col form and calls `dgemm`. The
//! batch is split across workers; per-sample weight gradients are summed
//! afterwards in sample order so the result does not depend on scheduling.

use super::{KernelError, Tensor};
use crate::ir::Activation;
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad, groups: 1 }
    }
}

fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize, KernelError> {
    if stride == 0 || input + 2 * pad < kernel {
        return Err(KernelError::ShapeMismatch(format!("window {kernel}/{stride} does not fit extent {input} with padding {pad}")));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

struct ConvDims {
    cg: usize,
    og: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.cg * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

fn conv_dims(x: &Tensor, w: &Tensor, g: ConvGeom) -> Result<ConvDims, KernelError> {
    let [out_c, cg, kh, kw] = w.dims();
    if g.groups == 0 || x.c() != cg * g.groups || out_c % g.groups != 0 {
        return Err(KernelError::ShapeMismatch(format!(
            "conv weight {:?} with {} groups does not fit input {:?}",
            w.dims(),
            g.groups,
            x.dims()
        )));
    }
    Ok(ConvDims {
        cg,
        og: out_c / g.groups,
        kh,
        kw,
        h: x.h(),
        w: x.w(),
        oh: out_dim(x.h(), kh, g.stride, g.pad)?,
        ow: out_dim(x.w(), kw, g.stride, g.pad)?,
    })
}

fn im2col(x: &[f64], d: &ConvDims, g: ConvGeom, cols: &mut [f64]) {
    let p = d.p();
    for ci in 0..d.cg {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &mut cols[((ci * d.kh + ky) * d.kw + kx) * p..][..p];
                for oy in 0..d.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= d.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &ConvDims, g: ConvGeom, x: &mut [f64]) {
    let p = d.p();
    for ci in 0..d.cg {
        let plane = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &cols[((ci * d.kh + ky) * d.kw + kx) * p..][..p];
                for oy in 0..d.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for ox in 0..d.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            plane[iy as usize * d.w + ix as usize] += row[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = alpha·op(a)·op(b) + beta·c` for an `m×k` by `k×n` product.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the asserted ranges.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// `w` is `[out_c, in_c / groups, kh, kw]`; `bias` has `out_c` entries.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, geom: ConvGeom) -> Result<Tensor, KernelError> {
    let d = conv_dims(x, w, geom)?;
    let out_c = w.dims()[0];
    let mut y = Tensor::zeros([x.n(), out_c, d.oh, d.ow]);
    let (k, p) = (d.k(), d.p());
    let in_len = x.sample_len();
    par::for_each_chunk_mut(Execution::current(), y.data_mut(), out_c * p, |n, out| {
        let xs = &x.data()[n * in_len..(n + 1) * in_len];
        let mut cols = vec![0.0; k * p];
        for grp in 0..geom.groups {
            im2col(&xs[grp * d.cg * d.h * d.w..], &d, geom, &mut cols);
            let wg = &w.data()[grp * d.og * k..(grp + 1) * d.og * k];
            gemm(d.og, k, p, wg, false, &cols, false, 0.0, &mut out[grp * d.og * p..(grp + 1) * d.og * p]);
        }
        if let Some(b) = bias {
            for (oc, plane) in out.chunks_mut(p).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[oc]);
            }
        }
    });
    Ok(y)
}

pub struct ConvGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Vec<f64>,
}

pub fn conv2d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, geom: ConvGeom) -> Result<ConvGrads, KernelError> {
    let d = conv_dims(x, w, geom)?;
    let out_c = w.dims()[0];
    dy.expect_dims([x.n(), out_c, d.oh, d.ow], "conv2d output gradient")?;
    let (k, p) = (d.k(), d.p());
    let in_len = x.sample_len();
    let per_sample = par::map_range(Execution::current(), x.n(), |n| {
        let xs = &x.data()[n * in_len..(n + 1) * in_len];
        let dys = dy.sample(n);
        let mut dx = vec![0.0; in_len];
        let mut dw = vec![0.0; w.len()];
        let mut cols = vec![0.0; k * p];
        let mut dcols = vec![0.0; k * p];
        for grp in 0..geom.groups {
            let dyg = &dys[grp * d.og * p..(grp + 1) * d.og * p];
            im2col(&xs[grp * d.cg * d.h * d.w..], &d, geom, &mut cols);
            gemm(d.og, p, k, dyg, false, &cols, true, 0.0, &mut dw[grp * d.og * k..(grp + 1) * d.og * k]);
            let wg = &w.data()[grp * d.og * k..(grp + 1) * d.og * k];
            gemm(k, d.og, p, wg, true, dyg, false, 0.0, &mut dcols);
            col2im(&dcols, &d, geom, &mut dx[grp * d.cg * d.h * d.w..]);
        }
        (dx, dw)
    });
    let mut dx = Vec::with_capacity(x.len());
    let mut dw = vec![0.0; w.len()];
    for (sdx, sdw) in per_sample {
        dx.extend_from_slice(&sdx);
        dw.iter_mut().zip(&sdw).for_each(|(a, b)| *a += b);
    }
    let mut db = vec![0.0; out_c];
    for n in 0..x.n() {
        for (oc, plane) in dy.sample(n).chunks(p).enumerate() {
            db[oc] += plane.iter().sum::<f64>();
        }
    }
    Ok(ConvGrads { dx: Tensor::from_vec(x.dims(), dx)?, dw: Tensor::from_vec(w.dims(), dw)?, db })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Returns the pooled tensor and, per output element, the flat input index
/// of the selected maximum.
pub fn maxpool(x: &Tensor, g: PoolGeom) -> Result<(Tensor, Vec<usize>), KernelError> {
    let oh = out_dim(x.h(), g.kernel, g.stride, g.pad)?;
    let ow = out_dim(x.w(), g.kernel, g.stride, g.pad)?;
    let [n, c, h, w] = x.dims();
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0usize; y.len()];
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || x.data()[i] > best {
                            best = x.data()[i];
                            best_i = i;
                        }
                    }
                }
                y.data_mut()[o] = best;
                arg[o] = best_i;
                o += 1;
            }
        }
    }
    Ok((y, arg))
}

pub fn maxpool_backward(x_dims: [usize; 4], argmax: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x_dims);
    for (g, &i) in dy.data().iter().zip(argmax) {
        dx.data_mut()[i] += g;
    }
    dx
}

/// Average pooling; padded positions count toward the divisor.
pub fn avgpool(x: &Tensor, g: PoolGeom) -> Result<Tensor, KernelError> {
    let oh = out_dim(x.h(), g.kernel, g.stride, g.pad)?;
    let ow = out_dim(x.w(), g.kernel, g.stride, g.pad)?;
    let [n, c, h, w] = x.dims();
    let inv = 1.0 / (g.kernel * g.kernel) as f64;
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for_window(oy, ox, g, h, w, |iy, ix| s += x.data()[base + iy * w + ix]);
                y.data_mut()[o] = s * inv;
                o += 1;
            }
        }
    }
    Ok(y)
}

pub fn avgpool_backward(x_dims: [usize; 4], g: PoolGeom, dy: &Tensor) -> Tensor {
    let [n, c, h, w] = x_dims;
    let (oh, ow) = (dy.h(), dy.w());
    let inv = 1.0 / (g.kernel * g.kernel) as f64;
    let mut dx = Tensor::zeros(x_dims);
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let v = dy.data()[o] * inv;
                for_window(oy, ox, g, h, w, |iy, ix| dx.data_mut()[base + iy * w + ix] += v);
                o += 1;
            }
        }
    }
    dx
}

fn for_window(oy: usize, ox: usize, g: PoolGeom, h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
    for ky in 0..g.kernel {
        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        for kx in 0..g.kernel {
            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
            if ix >= 0 && ix < w as isize {
                f(iy as usize, ix as usize);
            }
        }
    }
}

pub fn global_avgpool(x: &Tensor) -> Tensor {
    let hw = x.h() * x.w();
    let data = x.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    Tensor::from_vec([x.n(), x.c(), 1, 1], data).expect("one value per plane")
}

pub fn global_avgpool_backward(x_dims: [usize; 4], dy: &Tensor) -> Tensor {
    let hw = x_dims[2] * x_dims[3];
    let data = dy.data().iter().flat_map(|&g| std::iter::repeat_n(g / hw as f64, hw)).collect();
    Tensor::from_vec(x_dims, data).expect("dims preserved")
}

/// `w` is `[out, in, 1, 1]`; each sample of `x` is flattened to `in` features.
pub fn fully_connected(x: &Tensor, w: &Tensor, bias: &[f64]) -> Result<Tensor, KernelError> {
    let [out, inp, _, _] = w.dims();
    if x.sample_len() != inp || bias.len() != out {
        return Err(KernelError::ShapeMismatch(format!("fc {inp}->{out} on input {:?}", x.dims())));
    }
    let n = x.n();
    let mut y = vec![0.0; n * out];
    for row in y.chunks_mut(out) {
        row.copy_from_slice(bias);
    }
    gemm(n, inp, out, x.data(), false, w.data(), true, 1.0, &mut y);
    Tensor::from_vec([n, out, 1, 1], y)
}

pub fn fully_connected_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Vec<f64>) {
    let [out, inp, _, _] = w.dims();
    let n = x.n();
    let mut dx = vec![0.0; n * inp];
    gemm(n, out, inp, dy.data(), false, w.data(), false, 0.0, &mut dx);
    let mut dw = vec![0.0; out * inp];
    gemm(out, n, inp, dy.data(), true, x.data(), false, 0.0, &mut dw);
    let mut db = vec![0.0; out];
    for row in dy.data().chunks(out) {
        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    (
        Tensor::from_vec(x.dims(), dx).expect("input dims"),
        Tensor::from_vec(w.dims(), dw).expect("weight dims"),
        db,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BnState {
    pub fn identity(c: usize) -> Self {
        Self {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Normalized activations and per-channel inverse std, kept for backward.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub train: bool,
}

/// Batch statistics when `train`, running statistics otherwise. Train mode
/// returns the batch mean and biased variance for the running update.
pub fn batchnorm(x: &Tensor, bn: &BnState, train: bool) -> Result<(Tensor, BnCache, Option<(Vec<f64>, Vec<f64>)>), KernelError> {
    let [n, c, h, w] = x.dims();
    if bn.gamma.len() != c {
        return Err(KernelError::ShapeMismatch(format!("batchnorm over {} channels, input {:?}", bn.gamma.len(), x.dims())));
    }
    let hw = h * w;
    let m = (n * hw) as f64;
    let (mean, var) = if train {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, plane) in x.data().chunks(hw).enumerate() {
            mean[i % c] += plane.iter().sum::<f64>();
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for (i, plane) in x.data().chunks(hw).enumerate() {
            let mu = mean[i % c];
            var[i % c] += plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= m);
        (mean, var)
    } else {
        (bn.running_mean.clone(), bn.running_var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.dims());
    let mut y = Tensor::zeros(x.dims());
    for (i, (src, (xh, out))) in x
        .data()
        .chunks(hw)
        .zip(xhat.data_mut().chunks_mut(hw).zip(y.data_mut().chunks_mut(hw)))
        .enumerate()
    {
        let ch = i % c;
        for ((v, a), b) in src.iter().zip(xh.iter_mut()).zip(out.iter_mut()) {
            *a = (v - mean[ch]) * inv_std[ch];
            *b = bn.gamma[ch] * *a + bn.beta[ch];
        }
    }
    let stats = train.then_some((mean, var));
    Ok((y, BnCache { xhat, inv_std, train }, stats))
}

/// Momentum update of running statistics; the variance is stored unbiased.
pub fn update_running_stats(bn: &mut BnState, mean: &[f64], var: &[f64], count: usize) {
    let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
    for ch in 0..bn.gamma.len() {
        bn.running_mean[ch] = (1.0 - bn.momentum) * bn.running_mean[ch] + bn.momentum * mean[ch];
        bn.running_var[ch] = (1.0 - bn.momentum) * bn.running_var[ch] + bn.momentum * var[ch] * unbias;
    }
}

pub struct BnGrads {
    pub dx: Tensor,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

pub fn batchnorm_backward(dy: &Tensor, cache: &BnCache, gamma: &[f64]) -> BnGrads {
    let [n, c, h, w] = dy.dims();
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (i, (g, xh)) in dy.data().chunks(hw).zip(cache.xhat.data().chunks(hw)).enumerate() {
        dbeta[i % c] += g.iter().sum::<f64>();
        dgamma[i % c] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
    }
    let mut dx = Tensor::zeros(dy.dims());
    for (i, ((g, xh), out)) in dy
        .data()
        .chunks(hw)
        .zip(cache.xhat.data().chunks(hw))
        .zip(dx.data_mut().chunks_mut(hw))
        .enumerate()
    {
        let ch = i % c;
        let k = gamma[ch] * cache.inv_std[ch];
        if cache.train {
            for ((o, gv), xv) in out.iter_mut().zip(g).zip(xh) {
                *o = k * (gv - dbeta[ch] / m - xv * dgamma[ch] / m);
            }
        } else {
            for (o, gv) in out.iter_mut().zip(g) {
                *o = k * gv;
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activate(f: Activation, x: &Tensor) -> Tensor {
    match f {
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::Relu6 => x.map(|v| v.clamp(0.0, 6.0)),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Silu => x.map(|v| v * sigmoid(v)),
    }
}

/// Gradient through an activation given its input `x`.
pub fn activate_backward(f: Activation, x: &Tensor, dy: &Tensor) -> Tensor {
    let d = |v: f64| match f {
        Activation::Relu => f64::from(u8::from(v > 0.0)),
        Activation::Relu6 => f64::from(u8::from(v > 0.0 && v < 6.0)),
        Activation::Sigmoid => {
            let s = sigmoid(v);
            s * (1.0 - s)
        }
        Activation::Silu => {
            let s = sigmoid(v);
            s + v * s * (1.0 - s)
        }
    };
    x.zip_map(dy, |v, g| d(v) * g).expect("activation gradient matches input")
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, KernelError> {
    a.zip_map(b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, KernelError> {
    a.zip_map(b, |x, y| x * y)
}

/// Channel concatenation.
pub fn concat(parts: &[&Tensor]) -> Result<Tensor, KernelError> {
    let first = parts.first().ok_or_else(|| KernelError::ShapeMismatch("concat of nothing".into()))?;
    let [n, _, h, w] = first.dims();
    if parts.iter().any(|p| p.n() != n || p.h() != h || p.w() != w) {
        return Err(KernelError::ShapeMismatch("concat inputs differ outside the channel axis".into()));
    }
    let c: usize = parts.iter().map(|p| p.c()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.sample(i));
        }
    }
    Tensor::from_vec([n, c, h, w], data)
}

pub fn concat_backward(dy: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let [n, _, h, w] = dy.dims();
    let hw = h * w;
    let mut outs: Vec<Vec<f64>> = channels.iter().map(|c| Vec::with_capacity(n * c * hw)).collect();
    for i in 0..n {
        let mut off = 0;
        let s = dy.sample(i);
        for (o, &c) in outs.iter_mut().zip(channels) {
            o.extend_from_slice(&s[off..off + c * hw]);
            off += c * hw;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::from_vec([n, c, h, w], d).expect("split dims"))
        .collect()
}

pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let [n, c, h, w] = x.dims();
    let (oh, ow) = (h * factor, w * factor);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    for (src, dst) in x.data().chunks(h * w).zip(y.data_mut().chunks_mut(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(oy / factor) * w + ox / factor];
            }
        }
    }
    y
}

pub fn upsample_nearest_backward(x_dims: [usize; 4], factor: usize, dy: &Tensor) -> Tensor {
    let [_, _, h, w] = x_dims;
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = Tensor::zeros(x_dims);
    for (src, dst) in dy.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(h * w)) {
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / factor) * w + ox / factor] += src[oy * ow + ox];
            }
        }
    }
    dx
}
