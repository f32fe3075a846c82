//! Forward and backward kernels on raw tensors. The graph in `super` wires
//! these together; they are also callable directly.

use crate::error::{Error, Result};
use crate::labels::GroundTruth;
use crate::tensor::{Real, Shape, Tensor};

/// Accumulates `k * src` into `dst`.
#[inline]
fn axpy<T: Real>(dst: &mut [T], k: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Valid output column range and source offset for kernel column `k` under
/// zero padding 1: output columns `lo..hi` read source columns `lo+k-1..hi+k-1`.
#[inline]
fn tap_range(k: usize, len: usize) -> (usize, usize) {
    match k {
        0 => (1, len),
        1 => (0, len),
        _ => (0, len.saturating_sub(1)),
    }
}

pub fn check_conv_shapes(x: Shape, w: Shape, b: Option<Shape>) -> Result<()> {
    if w.h != 3 || w.w != 3 {
        return Err(Error::shape("conv3x3", format!("weight {w} is not (c_out, c_in, 3, 3)")));
    }
    if w.c != x.c {
        return Err(Error::shape(
            "conv3x3",
            format!("input {x} has {} channels but weight {w} expects {}", x.c, w.c),
        ));
    }
    if let Some(b) = b {
        if b.numel() != w.n {
            return Err(Error::shape(
                "conv3x3",
                format!("bias {b} does not have c_out = {} elements", w.n),
            ));
        }
    }
    Ok(())
}

/// 3x3 cross-correlation (no kernel flip), stride 1, zero padding 1.
pub fn conv3x3_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    check_conv_shapes(xs, ws, b.map(|b| b.shape()))?;
    let (hh, ww) = (xs.h, xs.w);
    let out_shape = Shape::new(xs.n, ws.n, hh, ww);
    let mut out = Tensor::zeros(out_shape);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    let plane = hh * ww;
    for n in 0..xs.n {
        for co in 0..ws.n {
            let obase = (n * ws.n + co) * plane;
            let oplane = &mut od[obase..obase + plane];
            if let Some(b) = b {
                let bv = b.data()[co];
                oplane.iter_mut().for_each(|v| *v = bv);
            }
            for ci in 0..xs.c {
                let ibase = (n * xs.c + ci) * plane;
                let iplane = &xd[ibase..ibase + plane];
                let kbase = (co * ws.c + ci) * 9;
                for ky in 0..3 {
                    let (y0, y1) = tap_range(ky, hh);
                    for kx in 0..3 {
                        let k = wd[kbase + ky * 3 + kx];
                        if k == T::zero() {
                            continue;
                        }
                        let (x0, x1) = tap_range(kx, ww);
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let orow = &mut oplane[y * ww + x0..y * ww + x1];
                            let irow = &iplane[sy * ww + x0 + kx - 1..sy * ww + x1 + kx - 1];
                            axpy(orow, k, irow);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv3x3_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> ConvGrads<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (hh, ww) = (xs.h, xs.w);
    let plane = hh * ww;
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    let mut dw = Tensor::zeros(ws);
    let mut db = vec![T::zero(); ws.n];
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    for n in 0..xs.n {
        for co in 0..ws.n {
            let gbase = (n * ws.n + co) * plane;
            let gplane = &dyd[gbase..gbase + plane];
            db[co] += gplane.iter().copied().sum::<T>();
            for ci in 0..xs.c {
                let ibase = (n * xs.c + ci) * plane;
                let iplane = &xd[ibase..ibase + plane];
                let kbase = (co * ws.c + ci) * 9;
                for ky in 0..3 {
                    let (y0, y1) = tap_range(ky, hh);
                    for kx in 0..3 {
                        let (x0, x1) = tap_range(kx, ww);
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let grow = &gplane[y * ww + x0..y * ww + x1];
                            let irow = &iplane[sy * ww + x0 + kx - 1..sy * ww + x1 + kx - 1];
                            acc += dot(grow, irow);
                        }
                        dw.data_mut()[kbase + ky * 3 + kx] += acc;
                        if let Some(dx) = dx.as_mut() {
                            let k = wd[kbase + ky * 3 + kx];
                            if k == T::zero() {
                                continue;
                            }
                            let dplane = &mut dx.data_mut()[ibase..ibase + plane];
                            for y in y0..y1 {
                                let sy = y + ky - 1;
                                let grow = &gplane[y * ww + x0..y * ww + x1];
                                let drow = &mut dplane[sy * ww + x0 + kx - 1..sy * ww + x1 + kx - 1];
                                axpy(drow, k, grow);
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        dx,
        dw,
        db: Tensor::vector(db),
    }
}

/// 2x2 max pooling, stride 2. Returns the output and, per output element,
/// the flat input index that won (first maximum in row-major window order).
pub fn maxpool2x2_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2x2",
            format!("spatial dims of {s} must be even; crop or pad the input"),
        ));
    }
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(os.numel());
    let mut arg = Vec::with_capacity(os.numel());
    let xd = x.data();
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best = s.index(n, c, 2 * oy, 2 * ox);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = s.index(n, c, 2 * oy + dy, 2 * ox + dx);
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
        }
    }
    Ok((Tensor::new(os, out)?, arg))
}

pub fn maxpool2x2_backward<T: Real>(x_shape: Shape, argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i] += g;
    }
    dx
}

/// Source taps for one output coordinate of half-pixel 2x upsampling.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn up2x_taps(len: usize) -> Vec<Tap> {
    let max = (len - 1) as f64;
    (0..2 * len)
        .map(|o| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, max);
            let i0 = s.floor() as usize;
            Tap {
                i0,
                i1: (i0 + 1).min(len - 1),
                frac: s - i0 as f64,
            }
        })
        .collect()
}

/// Bilinear 2x upsampling with half-pixel centers and edge clamping: output
/// coordinate `o` samples source coordinate `(o + 0.5) / 2 - 0.5`.
pub fn bilinear_up2x_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let os = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    if s.numel() == 0 {
        return Tensor::zeros(os);
    }
    let ty = up2x_taps(s.h);
    let tx = up2x_taps(s.w);
    let xd = x.data();
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            let p = &xd[base..base + s.plane()];
            for a in &ty {
                let fy = T::lit(a.frac);
                for b in &tx {
                    let fx = T::lit(b.frac);
                    let top = p[a.i0 * s.w + b.i0] * (T::one() - fx) + p[a.i0 * s.w + b.i1] * fx;
                    let bot = p[a.i1 * s.w + b.i0] * (T::one() - fx) + p[a.i1 * s.w + b.i1] * fx;
                    out.push(top * (T::one() - fy) + bot * fy);
                }
            }
        }
    }
    Tensor::new(os, out).expect("upsample shape")
}

/// Transpose of [`bilinear_up2x_forward`]: scatters each output gradient back
/// with the same bilinear weights.
pub fn bilinear_up2x_backward<T: Real>(x_shape: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let s = x_shape;
    let mut dx = Tensor::zeros(s);
    if s.numel() == 0 {
        return dx;
    }
    let ty = up2x_taps(s.h);
    let tx = up2x_taps(s.w);
    let g = dy.data();
    let d = dx.data_mut();
    let mut k = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            for a in &ty {
                let fy = T::lit(a.frac);
                for b in &tx {
                    let fx = T::lit(b.frac);
                    let gv = g[k];
                    k += 1;
                    let top = gv * (T::one() - fy);
                    let bot = gv * fy;
                    d[base + a.i0 * s.w + b.i0] += top * (T::one() - fx);
                    d[base + a.i0 * s.w + b.i1] += top * fx;
                    d[base + a.i1 * s.w + b.i0] += bot * (T::one() - fx);
                    d[base + a.i1 * s.w + b.i1] += bot * fx;
                }
            }
        }
    }
    dx
}

pub fn concat_channels_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::shape(
            "concat_channels",
            format!("batch/spatial dims differ: {sa} vs {sb}"),
        ));
    }
    let os = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let (ka, kb) = (sa.c * sa.plane(), sb.c * sb.plane());
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..sa.n {
        out.extend_from_slice(&a.data()[n * ka..(n + 1) * ka]);
        out.extend_from_slice(&b.data()[n * kb..(n + 1) * kb]);
    }
    Tensor::new(os, out)
}

pub fn concat_channels_backward<T: Real>(sa: Shape, sb: Shape, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (ka, kb) = (sa.c * sa.plane(), sb.c * sb.plane());
    let mut da = Vec::with_capacity(sa.numel());
    let mut db = Vec::with_capacity(sb.numel());
    for n in 0..sa.n {
        let base = n * (ka + kb);
        da.extend_from_slice(&dy.data()[base..base + ka]);
        db.extend_from_slice(&dy.data()[base + ka..base + ka + kb]);
    }
    (
        Tensor::new(sa, da).expect("concat split"),
        Tensor::new(sb, db).expect("concat split"),
    )
}

/// Saved forward state of one batch-norm application.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub train: bool,
}

/// Per-channel batch normalization. With `running = None` the statistics are
/// taken over `(n, h, w)` of the batch (biased variance); otherwise the given
/// running mean and variance are used.
pub fn batchnorm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<(&[T], &[T])>,
    eps: T,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let s = x.shape();
    if gamma.len() != s.c || beta.len() != s.c {
        return Err(Error::shape(
            "batchnorm",
            format!(
                "input {s} has {} channels, gamma/beta have {}/{}",
                s.c,
                gamma.len(),
                beta.len()
            ),
        ));
    }
    if let Some((m, v)) = running {
        if m.len() != s.c || v.len() != s.c {
            return Err(Error::shape("batchnorm", "running statistics length differs from channels"));
        }
    }
    let plane = s.plane();
    let count = T::lit((s.n * plane) as f64);
    let xd = x.data();
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    match running {
        Some((m, v)) => {
            mean.copy_from_slice(m);
            var.copy_from_slice(v);
        }
        None => {
            for c in 0..s.c {
                let mut acc = T::zero();
                for n in 0..s.n {
                    let base = (n * s.c + c) * plane;
                    acc += xd[base..base + plane].iter().copied().sum::<T>();
                }
                let mu = acc / count;
                let mut sq = T::zero();
                for n in 0..s.n {
                    let base = (n * s.c + c) * plane;
                    sq += xd[base..base + plane].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                }
                mean[c] = mu;
                var[c] = sq / count;
            }
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            let (g, b) = (gamma.data()[c], beta.data()[c]);
            for i in base..base + plane {
                let h = (xd[i] - mean[c]) * inv_std[c];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = g * h + b;
            }
        }
    }
    let cache = BnCache {
        xhat,
        inv_std,
        mean,
        var,
        train: running.is_none(),
    };
    Ok((y, cache))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Real>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = dy.shape();
    let plane = s.plane();
    let m = T::lit((s.n * plane) as f64);
    let g = dy.data();
    let xh = cache.xhat.data();
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            for i in base..base + plane {
                dbeta[c] += g[i];
                dgamma[c] += g[i] * xh[i];
            }
        }
    }
    let mut dx = Tensor::zeros(s);
    let d = dx.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            let k = gamma.data()[c] * cache.inv_std[c];
            for i in base..base + plane {
                d[i] = if cache.train {
                    k * (g[i] - dbeta[c] / m - xh[i] * dgamma[c] / m)
                } else {
                    k * g[i]
                };
            }
        }
    }
    (dx, Tensor::vector(dgamma), Tensor::vector(dbeta))
}

/// Channel-wise softmax with max subtraction.
pub fn softmax_channels<T: Real>(scores: &Tensor<T>) -> Tensor<T> {
    let s = scores.shape();
    let plane = s.plane();
    let mut out = scores.clone();
    let d = out.data_mut();
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let idx = |c: usize| base + c * plane + p;
            let mx = (0..s.c).map(|c| d[idx(c)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..s.c {
                let e = (d[idx(c)] - mx).exp();
                d[idx(c)] = e;
                z += e;
            }
            for c in 0..s.c {
                d[idx(c)] /= z;
            }
        }
    }
    out
}

pub fn check_targets(scores: Shape, gt: &GroundTruth, weights_len: usize) -> Result<()> {
    if gt.n != scores.n || gt.h != scores.h || gt.w != scores.w {
        return Err(Error::shape(
            "softmax_xent",
            format!("scores {scores} vs labels ({}, {}, {})", gt.n, gt.h, gt.w),
        ));
    }
    if weights_len != scores.c {
        return Err(Error::shape(
            "softmax_xent",
            format!("{weights_len} class weights for {} classes", scores.c),
        ));
    }
    gt.check_classes(scores.c)
}

/// Weighted cross-entropy averaged over non-ignored pixels. Returns the loss,
/// the softmax probabilities and the number of contributing pixels.
pub fn softmax_xent_forward<T: Real>(
    scores: &Tensor<T>,
    gt: &GroundTruth,
    weights: &[T],
) -> Result<(T, Tensor<T>, usize)> {
    let s = scores.shape();
    check_targets(s, gt, weights.len())?;
    if let Some(w) = weights.iter().find(|w| !(**w >= T::zero())) {
        return Err(Error::InvalidArgument(format!("class weight {w} is negative")));
    }
    let probs = softmax_channels(scores);
    let plane = s.plane();
    let sd = scores.data();
    let mut total = T::zero();
    let mut count = 0usize;
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let t = gt.labels[n * plane + p];
            if t == gt.ignore_index {
                continue;
            }
            count += 1;
            let t = t as usize;
            let mx = (0..s.c).map(|c| sd[base + c * plane + p]).fold(T::neg_infinity(), T::max);
            let lse = (0..s.c)
                .map(|c| (sd[base + c * plane + p] - mx).exp())
                .sum::<T>()
                .ln();
            let logp = sd[base + t * plane + p] - mx - lse;
            total += weights[t] * (-logp);
        }
    }
    let loss = if count == 0 {
        T::zero()
    } else {
        total / T::lit(count as f64)
    };
    Ok((loss, probs, count))
}

pub fn softmax_xent_backward<T: Real>(
    probs: &Tensor<T>,
    gt: &GroundTruth,
    weights: &[T],
    count: usize,
    upstream: T,
) -> Tensor<T> {
    let s = probs.shape();
    let mut ds = Tensor::zeros(s);
    if count == 0 {
        return ds;
    }
    let scale = upstream / T::lit(count as f64);
    let plane = s.plane();
    let pd = probs.data();
    let d = ds.data_mut();
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let t = gt.labels[n * plane + p];
            if t == gt.ignore_index {
                continue;
            }
            let t = t as usize;
            let k = scale * weights[t];
            for c in 0..s.c {
                let i = base + c * plane + p;
                let onehot = if c == t { T::one() } else { T::zero() };
                d[i] = k * (pd[i] - onehot);
            }
        }
    }
    ds
}
