//! Forward/backward kernels on `(B, C, D, H, W)` tensors.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Upper bound on im2col buffer elements; larger convolutions are processed
/// in chunks of output rows so the buffer stays cache resident.
const COLS_BUDGET: usize = 1 << 15;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Kernel, stride and padding of a 3D convolution from a "large" grid to a
/// "small" grid. Transposed convolutions reuse the same geometry with the
/// roles of input and output swapped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub const fn new(kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        ConvGeom { kernel, stride, pad }
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    /// Output extent of a convolution applied to `input`.
    pub fn conv_out(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if padded < self.kernel[a] {
                return Err(Error::Shape(format!(
                    "input extent {input:?} too small for kernel {:?}",
                    self.kernel
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Output extent of the transposed convolution applied to `input`.
    pub fn transpose_out(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a] - 1) * self.stride[a] + self.kernel[a];
            if full < 2 * self.pad[a] + 1 {
                return Err(Error::Shape(format!("transposed conv output empty for {input:?}")));
            }
            out[a] = full - 2 * self.pad[a];
        }
        Ok(out)
    }
}

fn split3(d: [usize; 3]) -> (usize, usize, usize) {
    (d[0], d[1], d[2])
}

/// Fills `cols` (rows `(c, kz, ky, kx)`, columns output voxels on the
/// flattened output rows `oz * sh + oy in r0..r1`) from the large grid `x`
/// of shape `(C, big)`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    channels: usize,
    big: [usize; 3],
    g: &ConvGeom,
    small: [usize; 3],
    r0: usize,
    r1: usize,
    cols: &mut [T],
) {
    let (bd, bh, bw) = split3(big);
    let (_, sh, sw) = split3(small);
    let (kd, kh, kw) = split3(g.kernel);
    let ncol = (r1 - r0) * sw;
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * bd * bh * bw..(c + 1) * bd * bh * bw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[row * ncol..(row + 1) * ncol];
                    let mut i = 0;
                    for r in r0..r1 {
                        let (oz, oy) = (r / sh, r % sh);
                        let iz = (oz * g.stride[0] + kz) as isize - g.pad[0] as isize;
                        let iy = (oy * g.stride[1] + ky) as isize - g.pad[1] as isize;
                        if iz < 0 || iz >= bd as isize || iy < 0 || iy >= bh as isize {
                            dst[i..i + sw].fill(T::zero());
                            i += sw;
                            continue;
                        }
                        {
                            let start = (iz as usize * bh + iy as usize) * bw;
                            let line = &xc[start..start + bw];
                            let out = &mut dst[i..i + sw];
                            let (lo, hi) = valid_span(sw, bw, g.stride[2], kx, g.pad[2]);
                            out[..lo].fill(T::zero());
                            out[hi.max(lo)..].fill(T::zero());
                            if hi > lo {
                                let first = lo * g.stride[2] + kx - g.pad[2];
                                if g.stride[2] == 1 {
                                    out[lo..hi].copy_from_slice(&line[first..first + hi - lo]);
                                } else {
                                    for (o, v) in out[lo..hi].iter_mut().zip(line[first..].iter().step_by(g.stride[2])) {
                                        *o = *v;
                                    }
                                }
                            }
                            i += sw;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back onto the large grid, adding.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    channels: usize,
    big: [usize; 3],
    g: &ConvGeom,
    small: [usize; 3],
    r0: usize,
    r1: usize,
    x: &mut [T],
) {
    let (bd, bh, bw) = split3(big);
    let (_, sh, sw) = split3(small);
    let (kd, kh, kw) = split3(g.kernel);
    let ncol = (r1 - r0) * sw;
    let mut row = 0;
    for c in 0..channels {
        let xc = &mut x[c * bd * bh * bw..(c + 1) * bd * bh * bw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[row * ncol..(row + 1) * ncol];
                    let mut i = 0;
                    for r in r0..r1 {
                        let (oz, oy) = (r / sh, r % sh);
                        let iz = (oz * g.stride[0] + kz) as isize - g.pad[0] as isize;
                        let iy = (oy * g.stride[1] + ky) as isize - g.pad[1] as isize;
                        if iz < 0 || iz >= bd as isize || iy < 0 || iy >= bh as isize {
                            i += sw;
                            continue;
                        }
                        {
                            let start = (iz as usize * bh + iy as usize) * bw;
                            let line = &mut xc[start..start + bw];
                            let inp = &src[i..i + sw];
                            let (lo, hi) = valid_span(sw, bw, g.stride[2], kx, g.pad[2]);
                            if hi > lo {
                                let first = lo * g.stride[2] + kx - g.pad[2];
                                if g.stride[2] == 1 {
                                    for (o, v) in line[first..first + hi - lo].iter_mut().zip(&inp[lo..hi]) {
                                        *o = *o + *v;
                                    }
                                } else {
                                    for (o, v) in line[first..].iter_mut().step_by(g.stride[2]).zip(&inp[lo..hi]) {
                                        *o = *o + *v;
                                    }
                                }
                            }
                            i += sw;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + k - pad`
/// lies inside `0..big`.
fn valid_span(small: usize, big: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // ox * stride + k - pad <= big - 1
    let hi = if big + pad > k { ((big + pad - k - 1) / stride + 1).min(small) } else { 0 };
    (lo.min(small), hi)
}

/// Output rows per im2col chunk.
fn chunk_rows(rows: usize, small: [usize; 3]) -> usize {
    (COLS_BUDGET / (rows * small[2]).max(1)).clamp(1, small[0] * small[1])
}

fn check_channels(x: &Tensor<impl Real>, expected: usize, what: &str) -> Result<[usize; 5]> {
    let d = x.dims5()?;
    if d[1] != expected {
        return Err(Error::Shape(format!("{what}: expected {expected} input channels, got {}", d[1])));
    }
    Ok(d)
}

/// Cross-correlation of `x (B, Cin, ...)` with `w (Cout, Cin, kd, kh, kw)`.
pub fn conv_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, g: &ConvGeom) -> Result<Tensor<T>> {
    let cout = w.shape()[0];
    let cin = w.shape()[1];
    let [b, _, d, h, wd] = check_channels(x, cin, "conv")?;
    let big = [d, h, wd];
    let small = g.conv_out(big)?;
    let nbig = d * h * wd;
    let nsmall: usize = small.iter().product();
    let rows = cin * g.taps();
    let mut out = Tensor::zeros(&[b, cout, small[0], small[1], small[2]]);
    let sw = small[2];
    let slab = chunk_rows(rows, small);
    let nrows = small[0] * small[1];
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * slab * sw }];
    for bi in 0..b {
        let xb = &x.data()[bi * cin * nbig..(bi + 1) * cin * nbig];
        let ob = &mut out.data_mut()[bi * cout * nsmall..(bi + 1) * cout * nsmall];
        if g.is_pointwise() {
            crate::tensor::matmul(cout, cin, nsmall, w.data(), false, xb, false, ob, false);
        } else {
            let mut z0 = 0;
            while z0 < nrows {
                let z1 = (z0 + slab).min(nrows);
                let ncol = (z1 - z0) * sw;
                im2col(xb, cin, big, g, small, z0, z1, &mut cols);
                T::gemm(
                    cout,
                    rows,
                    ncol,
                    T::one(),
                    w.data(),
                    rows as isize,
                    1,
                    &cols,
                    ncol as isize,
                    1,
                    T::zero(),
                    &mut ob[z0 * sw..],
                    nsmall as isize,
                    1,
                );
                z0 = z1;
            }
        }
        if let Some(bias) = bias {
            for (c, &bv) in bias.data().iter().enumerate() {
                ob[c * nsmall..(c + 1) * nsmall].iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv_forward`]: `(dx, dw, dbias)`.
pub fn conv_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
    with_bias: bool,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Option<Tensor<T>>)> {
    let cout = w.shape()[0];
    let cin = w.shape()[1];
    let [b, _, d, h, wd] = check_channels(x, cin, "conv backward")?;
    let big = [d, h, wd];
    let small = g.conv_out(big)?;
    let nbig = d * h * wd;
    let nsmall: usize = small.iter().product();
    let rows = cin * g.taps();
    let sw = small[2];
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut db = with_bias.then(|| Tensor::zeros(&[cout]));
    let slab = chunk_rows(rows, small);
    let nrows = small[0] * small[1];
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * slab * sw }];
    let mut dcols = cols.clone();
    for bi in 0..b {
        let xb = &x.data()[bi * cin * nbig..(bi + 1) * cin * nbig];
        let dyb = &dy.data()[bi * cout * nsmall..(bi + 1) * cout * nsmall];
        if let Some(db) = db.as_mut() {
            for c in 0..cout {
                let s: T = dyb[c * nsmall..(c + 1) * nsmall].iter().copied().sum();
                db.data_mut()[c] = db.data()[c] + s;
            }
        }
        if g.is_pointwise() {
            crate::tensor::matmul(cout, nsmall, cin, dyb, false, xb, true, dw.data_mut(), true);
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx.data_mut()[bi * cin * nbig..(bi + 1) * cin * nbig];
                crate::tensor::matmul(cin, cout, nsmall, w.data(), true, dyb, false, dxb, false);
            }
            continue;
        }
        let mut z0 = 0;
        while z0 < nrows {
            let z1 = (z0 + slab).min(nrows);
            let ncol = (z1 - z0) * sw;
            im2col(xb, cin, big, g, small, z0, z1, &mut cols);
            let dy_chunk = &dyb[z0 * sw..];
            // dw += dy_chunk · colsᵀ
            T::gemm(
                cout,
                ncol,
                rows,
                T::one(),
                dy_chunk,
                nsmall as isize,
                1,
                &cols,
                1,
                ncol as isize,
                T::one(),
                dw.data_mut(),
                rows as isize,
                1,
            );
            if let Some(dx) = dx.as_mut() {
                // dcols = wᵀ · dy_chunk
                T::gemm(
                    rows,
                    cout,
                    ncol,
                    T::one(),
                    w.data(),
                    1,
                    rows as isize,
                    dy_chunk,
                    nsmall as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    ncol as isize,
                    1,
                );
                let dxb = &mut dx.data_mut()[bi * cin * nbig..(bi + 1) * cin * nbig];
                col2im(&dcols, cin, big, g, small, z0, z1, dxb);
            }
            z0 = z1;
        }
    }
    Ok((dx, dw, db))
}

/// Transposed convolution of `x (B, Cin, small)` with `w (Cin, Cout, kd, kh, kw)`.
pub fn tconv_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Result<Tensor<T>> {
    let cin = w.shape()[0];
    let cout = w.shape()[1];
    let [b, _, d, h, wd] = check_channels(x, cin, "transpose conv")?;
    let small = [d, h, wd];
    let big = g.transpose_out(small)?;
    if g.conv_out(big)? != small {
        return Err(Error::Shape(format!("transpose conv geometry not invertible for {small:?}")));
    }
    let nsmall = d * h * wd;
    let nbig: usize = big.iter().product();
    let rows = cout * g.taps();
    let sw = wd;
    let slab = chunk_rows(rows, small);
    let nrows = small[0] * small[1];
    let mut cols = vec![T::zero(); rows * slab * sw];
    let mut out = Tensor::zeros(&[b, cout, big[0], big[1], big[2]]);
    for bi in 0..b {
        let xb = &x.data()[bi * cin * nsmall..(bi + 1) * cin * nsmall];
        let ob = &mut out.data_mut()[bi * cout * nbig..(bi + 1) * cout * nbig];
        let mut z0 = 0;
        while z0 < nrows {
            let z1 = (z0 + slab).min(nrows);
            let ncol = (z1 - z0) * sw;
            // cols = wᵀ · x_chunk
            T::gemm(
                rows,
                cin,
                ncol,
                T::one(),
                w.data(),
                1,
                rows as isize,
                &xb[z0 * sw..],
                nsmall as isize,
                1,
                T::zero(),
                &mut cols,
                ncol as isize,
                1,
            );
            col2im(&cols, cout, big, g, small, z0, z1, ob);
            z0 = z1;
        }
    }
    Ok(out)
}

/// Gradients of [`tconv_forward`]: `(dx, dw)`.
pub fn tconv_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let cin = w.shape()[0];
    let cout = w.shape()[1];
    let [b, _, d, h, wd] = check_channels(x, cin, "transpose conv backward")?;
    let small = [d, h, wd];
    let big = g.transpose_out(small)?;
    let nsmall = d * h * wd;
    let nbig: usize = big.iter().product();
    let rows = cout * g.taps();
    let sw = wd;
    let slab = chunk_rows(rows, small);
    let nrows = small[0] * small[1];
    let mut dcols = vec![T::zero(); rows * slab * sw];
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    for bi in 0..b {
        let xb = &x.data()[bi * cin * nsmall..(bi + 1) * cin * nsmall];
        let dyb = &dy.data()[bi * cout * nbig..(bi + 1) * cout * nbig];
        let mut z0 = 0;
        while z0 < nrows {
            let z1 = (z0 + slab).min(nrows);
            let ncol = (z1 - z0) * sw;
            im2col(dyb, cout, big, g, small, z0, z1, &mut dcols);
            let dxb = &mut dx.data_mut()[bi * cin * nsmall + z0 * sw..];
            // dx_chunk = w · dcols
            T::gemm(
                cin,
                rows,
                ncol,
                T::one(),
                w.data(),
                rows as isize,
                1,
                &dcols,
                ncol as isize,
                1,
                T::zero(),
                dxb,
                nsmall as isize,
                1,
            );
            // dw += x_chunk · dcolsᵀ
            T::gemm(
                cin,
                ncol,
                rows,
                T::one(),
                &xb[z0 * sw..],
                nsmall as isize,
                1,
                &dcols,
                1,
                ncol as isize,
                T::one(),
                dw.data_mut(),
                rows as isize,
                1,
            );
            z0 = z1;
        }
    }
    Ok((dx, dw))
}

/// How batch normalization obtains its statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnStats {
    /// Batch statistics; running statistics are updated.
    Batch,
    /// Stored running statistics.
    Running,
}

pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub stats: BnStats,
}

/// Returns `(y, cache, new running mean, new running var)`; the running
/// values are only produced for [`BnStats::Batch`].
#[allow(clippy::type_complexity)]
pub fn bn_forward<T: Real>(
    x: &Tensor<T>,
    scale: &[T],
    shift: &[T],
    run_mean: &[T],
    run_var: &[T],
    stats: BnStats,
) -> Result<(Tensor<T>, BnCache<T>, Option<(Vec<T>, Vec<T>)>)> {
    let [b, c, d, h, w] = x.dims5()?;
    let s = d * h * w;
    let n = b * s;
    let eps = T::from_f64(BN_EPS);
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = vec![T::zero(); c];
    let mut running = None;
    let (mut new_mean, mut new_var) = (vec![T::zero(); c], vec![T::zero(); c]);
    for ch in 0..c {
        let segments = (0..b).map(|bi| (bi * c + ch) * s);
        let (mean, var) = match stats {
            BnStats::Batch => {
                let mut sum = T::zero();
                for o in segments.clone() {
                    sum = sum + x.data()[o..o + s].iter().copied().sum::<T>();
                }
                let mean = sum / T::from_f64(n as f64);
                let mut sq = T::zero();
                for o in segments.clone() {
                    sq = sq + x.data()[o..o + s].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                }
                let var = sq / T::from_f64(n as f64);
                let m = T::from_f64(BN_MOMENTUM);
                let unbiased = if n > 1 { var * T::from_f64(n as f64 / (n - 1) as f64) } else { var };
                new_mean[ch] = (T::one() - m) * run_mean[ch] + m * mean;
                new_var[ch] = (T::one() - m) * run_var[ch] + m * unbiased;
                (mean, var)
            }
            BnStats::Running => (run_mean[ch], run_var[ch]),
        };
        let is = T::one() / (var + eps).sqrt();
        inv_std[ch] = is;
        for o in segments {
            for i in o..o + s {
                let xh = (x.data()[i] - mean) * is;
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = scale[ch] * xh + shift[ch];
            }
        }
    }
    if stats == BnStats::Batch {
        running = Some((new_mean, new_var));
    }
    Ok((y, BnCache { xhat, inv_std, stats }, running))
}

/// Gradients of [`bn_forward`]: `(dx, dscale, dshift)`.
pub fn bn_backward<T: Real>(cache: &BnCache<T>, scale: &[T], dy: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let [b, c, d, h, w] = dy.dims5()?;
    let s = d * h * w;
    let n = T::from_f64((b * s) as f64);
    let mut dx = Tensor::zeros(dy.shape());
    let mut dscale = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    for ch in 0..c {
        let segments = (0..b).map(|bi| (bi * c + ch) * s);
        let (mut sdy, mut sdyx) = (T::zero(), T::zero());
        for o in segments.clone() {
            for i in o..o + s {
                sdy = sdy + dy.data()[i];
                sdyx = sdyx + dy.data()[i] * cache.xhat.data()[i];
            }
        }
        dscale[ch] = sdyx;
        dshift[ch] = sdy;
        let k = scale[ch] * cache.inv_std[ch];
        for o in segments {
            for i in o..o + s {
                dx.data_mut()[i] = match cache.stats {
                    BnStats::Batch => k * (dy.data()[i] - (sdy + cache.xhat.data()[i] * sdyx) / n),
                    BnStats::Running => k * dy.data()[i],
                };
            }
        }
    }
    Ok((dx, dscale, dshift))
}

pub fn relu<T: Real>(mut x: Tensor<T>) -> Tensor<T> {
    x.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
    x
}

/// Gradient through a rectifier given its output.
pub fn relu_backward<T: Real>(out: &Tensor<T>, mut dy: Tensor<T>) -> Tensor<T> {
    for (g, &o) in dy.data_mut().iter_mut().zip(out.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
    dy
}

/// 1×2×2 max pooling with stride 1×2×2; returns the argmax input offsets.
pub fn maxpool_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let [b, c, d, h, w] = x.dims5()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pooling needs even H and W, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, d, oh, ow]);
    let mut idx = vec![0u32; b * c * d * oh * ow];
    let mut o = 0;
    for plane in 0..b * c * d {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x.data()[j] > x.data()[best] {
                        best = j;
                    }
                }
                out.data_mut()[o] = x.data()[best];
                idx[o] = best as u32;
                o += 1;
            }
        }
    }
    Ok((out, idx))
}

pub fn maxpool_backward<T: Real>(input_shape: &[usize], idx: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    for (&i, &g) in idx.iter().zip(dy.data()) {
        let v = &mut dx.data_mut()[i as usize];
        *v = *v + g;
    }
    dx
}

/// Concatenates along the channel axis.
pub fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, d, h, w] = a.dims5()?;
    let [nb, cb, db, hb, wb] = b.dims5()?;
    if (n, d, h, w) != (nb, db, hb, wb) {
        return Err(Error::Shape(format!("cannot concatenate {:?} with {:?}", a.shape(), b.shape())));
    }
    let s = d * h * w;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for bi in 0..n {
        out.extend_from_slice(&a.data()[bi * ca * s..(bi + 1) * ca * s]);
        out.extend_from_slice(&b.data()[bi * cb * s..(bi + 1) * cb * s]);
    }
    Tensor::from_vec(&[n, ca + cb, d, h, w], out)
}

/// Inverse of [`concat`] for gradients.
pub fn split<T: Real>(x: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, d, h, w] = x.dims5()?;
    let cb = c - ca;
    let s = d * h * w;
    let (mut a, mut b) = (Vec::with_capacity(n * ca * s), Vec::with_capacity(n * cb * s));
    for bi in 0..n {
        let base = bi * c * s;
        a.extend_from_slice(&x.data()[base..base + ca * s]);
        b.extend_from_slice(&x.data()[base + ca * s..base + c * s]);
    }
    Ok((Tensor::from_vec(&[n, ca, d, h, w], a)?, Tensor::from_vec(&[n, cb, d, h, w], b)?))
}

/// Softmax over the channel axis.
pub fn softmax<T: Real>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, d, h, w] = z.dims5()?;
    let s = d * h * w;
    let mut p = Tensor::zeros(z.shape());
    for bi in 0..b {
        let base = bi * c * s;
        for i in 0..s {
            let mut m = z.data()[base + i];
            for ch in 1..c {
                m = m.max(z.data()[base + ch * s + i]);
            }
            let mut sum = T::zero();
            for ch in 0..c {
                let e = (z.data()[base + ch * s + i] - m).exp();
                p.data_mut()[base + ch * s + i] = e;
                sum = sum + e;
            }
            for ch in 0..c {
                let v = &mut p.data_mut()[base + ch * s + i];
                *v = *v / sum;
            }
        }
    }
    Ok(p)
}

pub fn softmax_backward<T: Real>(p: &Tensor<T>, dp: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, d, h, w] = p.dims5()?;
    let s = d * h * w;
    let mut dz = Tensor::zeros(p.shape());
    for bi in 0..b {
        let base = bi * c * s;
        for i in 0..s {
            let dot: T = (0..c).map(|ch| p.data()[base + ch * s + i] * dp.data()[base + ch * s + i]).sum();
            for ch in 0..c {
                let j = base + ch * s + i;
                dz.data_mut()[j] = p.data()[j] * (dp.data()[j] - dot);
            }
        }
    }
    Ok(dz)
}
