//! Functional (tape-free) kernels shared by the autodiff tape and the
//! eval-only forward paths.
//!
//! Convolution is lowered to im2col followed by a row-major matmul whose
//! inner loop runs over a contiguous output row, so it auto-vectorizes and
//! keeps a fixed reduction order. Batch work is parallelized per sample;
//! cross-sample reductions (weight gradients, batch-norm statistics) are
//! summed sequentially in sample order, which keeps every result independent
//! of the thread count.

use rayon::prelude::*;

use crate::{Element, Result, Tensor, TensorError};

/// Batch-norm epsilon added to the variance before the square root.
pub const BN_EPS: f64 = 1e-5;
/// EMA weight of the incoming batch statistic in the running estimates.
pub const BN_MOMENTUM: f64 = 0.1;
/// Below this norm product a cosine similarity is defined as zero.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dArgs {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dArgs {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dArgs { stride, padding, groups }
    }
}

/// Fully resolved convolution geometry.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

/// Output extent of a strided, zero-padded window sweep (floor convention).
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(TensorError::invalid("conv_out_extent", "stride must be positive"));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(TensorError::invalid(
            "conv_out_extent",
            format!("kernel {kernel} exceeds padded input {padded}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

pub fn conv_dims(x_dims: &[usize], w_dims: &[usize], args: Conv2dArgs) -> Result<ConvDims> {
    if x_dims.len() != 4 {
        return Err(TensorError::shape(
            "conv2d",
            format!("input must be [N, C, H, W], got rank {}", x_dims.len()),
        ));
    }
    if w_dims.len() != 4 {
        return Err(TensorError::shape(
            "conv2d",
            format!("weight must be [Cout, Cin/groups, Kh, Kw], got rank {}", w_dims.len()),
        ));
    }
    let (n, cin, h, w) = (x_dims[0], x_dims[1], x_dims[2], x_dims[3]);
    let (cout, wc, kh, kw) = (w_dims[0], w_dims[1], w_dims[2], w_dims[3]);
    let g = args.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 {
        return Err(TensorError::invalid(
            "conv2d",
            format!("groups {g} must divide both Cin {cin} and Cout {cout}"),
        ));
    }
    if wc != cin / g {
        return Err(TensorError::shape(
            "conv2d",
            format!("weight dim 1 is {wc}, expected Cin/groups = {}", cin / g),
        ));
    }
    let oh = conv_out_extent(h, kh, args.stride, args.padding)?;
    let ow = conv_out_extent(w, kw, args.stride, args.padding)?;
    Ok(ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
        stride: args.stride,
        padding: args.padding,
        groups: g,
    })
}

/// `c[m x n] += a[m x k] * b[k x n]`, all row-major. The inner loop walks a
/// contiguous row of `b` and `c`, so it vectorizes without reordering the
/// k-summation.
fn matmul_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, a_ip) in a_row.iter().enumerate() {
            let a_ip = *a_ip;
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * *bv;
            }
        }
    }
}

fn transpose<E: Element>(a: &[E], rows: usize, cols: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

/// Unfolds one group of one sample into `cols`, laid out as
/// `[cin_g * kh * kw, oh * ow]`. Out-of-bounds taps produce zeros.
fn im2col<E: Element>(x_n: &[E], d: &ConvDims, group: usize, cols: &mut [E]) {
    let cin_g = d.cin / d.groups;
    let plane = d.oh * d.ow;
    for cl in 0..cin_g {
        let xc = &x_n[(group * cin_g + cl) * d.h * d.w..][..d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &mut cols[((cl * d.kh + ky) * d.kw + kx) * plane..][..plane];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    let dst = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(E::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if d.stride == 1 {
                        // ix = ox + kx - padding; the valid ox span is contiguous.
                        let shift = kx as isize - d.padding as isize;
                        let lo = (-shift).clamp(0, d.ow as isize) as usize;
                        let hi = (d.w as isize - shift).clamp(lo as isize, d.ow as isize) as usize;
                        dst[..lo].fill(E::zero());
                        dst[lo..hi].copy_from_slice(
                            &src[(lo as isize + shift) as usize..(hi as isize + shift) as usize],
                        );
                        dst[hi..].fill(E::zero());
                    } else {
                        for (ox, dv) in dst.iter_mut().enumerate() {
                            let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                            *dv = if ix >= 0 && ix < d.w as isize {
                                src[ix as usize]
                            } else {
                                E::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add inverse of [`im2col`]: accumulates unfolded gradients back
/// into one sample of the input gradient.
fn col2im_acc<E: Element>(cols: &[E], d: &ConvDims, group: usize, dx_n: &mut [E]) {
    let cin_g = d.cin / d.groups;
    let plane = d.oh * d.ow;
    for cl in 0..cin_g {
        let xc = &mut dx_n[(group * cin_g + cl) * d.h * d.w..][..d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &cols[((cl * d.kh + ky) * d.kw + kx) * plane..][..plane];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src = &row[oy * d.ow..(oy + 1) * d.ow];
                    let dst = &mut xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, sv) in src.iter().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += *sv;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<E: Element>(x: &Tensor<E>, w: &Tensor<E>, args: Conv2dArgs) -> Result<Tensor<E>> {
    let d = conv_dims(x.dims(), w.dims(), args)?;
    let cin_g = d.cin / d.groups;
    let cout_g = d.cout / d.groups;
    let k = cin_g * d.kh * d.kw;
    let plane = d.oh * d.ow;
    let in_sample = d.cin * d.h * d.w;
    let out_sample = d.cout * plane;
    let ws = w.data();

    let mut out = vec![E::zero(); d.n * out_sample];
    out.par_chunks_mut(out_sample)
        .zip(x.data().par_chunks(in_sample))
        .for_each(|(o_n, x_n)| {
            let mut cols = vec![E::zero(); k * plane];
            for g in 0..d.groups {
                im2col(x_n, &d, g, &mut cols);
                matmul_acc(
                    &ws[g * cout_g * k..][..cout_g * k],
                    &cols,
                    &mut o_n[g * cout_g * plane..][..cout_g * plane],
                    cout_g,
                    k,
                    plane,
                );
            }
        });
    Tensor::new(vec![d.n, d.cout, d.oh, d.ow], out)
}

/// Gradients of [`conv2d`] w.r.t. input and weight. Per-sample weight-gradient
/// partials are reduced in ascending sample order.
pub fn conv2d_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    dy: &[E],
    args: Conv2dArgs,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Vec<E>>, Option<Vec<E>>)> {
    let d = conv_dims(x.dims(), w.dims(), args)?;
    let cin_g = d.cin / d.groups;
    let cout_g = d.cout / d.groups;
    let k = cin_g * d.kh * d.kw;
    let plane = d.oh * d.ow;
    let in_sample = d.cin * d.h * d.w;
    let out_sample = d.cout * plane;
    if dy.len() != d.n * out_sample {
        return Err(TensorError::shape(
            "conv2d_backward",
            format!("dy has {} elements, expected {}", dy.len(), d.n * out_sample),
        ));
    }
    if !need_dx && !need_dw {
        return Ok((None, None));
    }
    let ws = w.data();

    // W transposed per group, [k x cout_g], reused by every sample.
    let wt = if need_dx {
        let mut wt = vec![E::zero(); d.groups * k * cout_g];
        for g in 0..d.groups {
            transpose(&ws[g * cout_g * k..][..cout_g * k], cout_g, k, &mut wt[g * k * cout_g..][..k * cout_g]);
        }
        wt
    } else {
        Vec::new()
    };

    let per_sample: Vec<(Option<Vec<E>>, Option<Vec<E>>)> = (0..d.n)
        .into_par_iter()
        .map(|ni| {
            let x_n = &x.data()[ni * in_sample..][..in_sample];
            let dy_n = &dy[ni * out_sample..][..out_sample];
            let mut cols = vec![E::zero(); k * plane];
            let mut colst = if need_dw { vec![E::zero(); plane * k] } else { Vec::new() };
            let mut dcols = if need_dx { vec![E::zero(); k * plane] } else { Vec::new() };
            let mut dx_n = if need_dx { Some(vec![E::zero(); in_sample]) } else { None };
            let mut dw_n = if need_dw { Some(vec![E::zero(); d.cout * k]) } else { None };
            for g in 0..d.groups {
                im2col(x_n, &d, g, &mut cols);
                let dy_g = &dy_n[g * cout_g * plane..][..cout_g * plane];
                if let Some(dw_n) = dw_n.as_mut() {
                    transpose(&cols, k, plane, &mut colst);
                    matmul_acc(dy_g, &colst, &mut dw_n[g * cout_g * k..][..cout_g * k], cout_g, plane, k);
                }
                if let Some(dx_n) = dx_n.as_mut() {
                    dcols.fill(E::zero());
                    matmul_acc(&wt[g * k * cout_g..][..k * cout_g], dy_g, &mut dcols, k, cout_g, plane);
                    col2im_acc(&dcols, &d, g, dx_n);
                }
            }
            (dx_n, dw_n)
        })
        .collect();

    let mut dx = if need_dx { Some(vec![E::zero(); d.n * in_sample]) } else { None };
    let mut dw = if need_dw { Some(vec![E::zero(); d.cout * k]) } else { None };
    for (ni, (dx_n, dw_n)) in per_sample.into_iter().enumerate() {
        if let (Some(dx), Some(dx_n)) = (dx.as_mut(), dx_n) {
            dx[ni * in_sample..][..in_sample].copy_from_slice(&dx_n);
        }
        if let (Some(dw), Some(dw_n)) = (dw.as_mut(), dw_n) {
            for (acc, v) in dw.iter_mut().zip(&dw_n) {
                *acc += *v;
            }
        }
    }
    Ok((dx, dw))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics, update running statistics, differentiable.
    Train,
    /// Normalize by running statistics, nothing updated.
    Eval,
    /// Normalize by batch statistics, update running statistics, forward-only.
    Recalibrate,
}

/// Saved state for the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BnCtx<E: Element> {
    pub xhat: Vec<E>,
    pub inv_std: Vec<E>,
    /// Elements per channel (`N * H * W`).
    pub m: usize,
    pub mode: BnMode,
}

fn bn_check<E: Element>(
    x_dims: &[usize],
    gamma: &[E],
    beta: &[E],
    running_mean: &[E],
    running_var: &[E],
) -> Result<(usize, usize, usize)> {
    if x_dims.len() != 4 {
        return Err(TensorError::shape(
            "batchnorm2d",
            format!("input must be [N, C, H, W], got rank {}", x_dims.len()),
        ));
    }
    let c = x_dims[1];
    for (name, len) in [
        ("gamma", gamma.len()),
        ("beta", beta.len()),
        ("running_mean", running_mean.len()),
        ("running_var", running_var.len()),
    ] {
        if len != c {
            return Err(TensorError::shape(
                "batchnorm2d",
                format!("{name} has {len} channels, input has {c}"),
            ));
        }
    }
    Ok((x_dims[0], c, x_dims[2] * x_dims[3]))
}

/// Batch normalization over `[N, C, H, W]`. Returns the saved context only
/// when `want_ctx` is set (the taped path); forward-only callers skip it.
pub fn batchnorm2d<E: Element>(
    x: &Tensor<E>,
    gamma: &[E],
    beta: &[E],
    running_mean: &mut [E],
    running_var: &mut [E],
    mode: BnMode,
    want_ctx: bool,
) -> Result<(Tensor<E>, Option<BnCtx<E>>)> {
    let (n, c, hw) = bn_check(x.dims(), gamma, beta, running_mean, running_var)?;
    let m = n * hw;
    if matches!(mode, BnMode::Train | BnMode::Recalibrate) && m < 2 {
        return Err(TensorError::invalid(
            "batchnorm2d",
            format!("batch statistics need at least 2 elements per channel, got {m}"),
        ));
    }
    let eps = E::from_f64(BN_EPS);
    let momentum = E::from_f64(BN_MOMENTUM);
    let xs = x.data();
    let mut y = vec![E::zero(); xs.len()];
    let mut xhat = if want_ctx { vec![E::zero(); xs.len()] } else { Vec::new() };
    let mut inv_stds = vec![E::zero(); c];

    for ci in 0..c {
        let (mean, inv_std) = match mode {
            BnMode::Eval => {
                (running_mean[ci], (running_var[ci] + eps).sqrt().recip())
            }
            BnMode::Train | BnMode::Recalibrate => {
                let mut sum = E::zero();
                for ni in 0..n {
                    let plane = &xs[(ni * c + ci) * hw..][..hw];
                    for v in plane {
                        sum += *v;
                    }
                }
                let mean = sum / E::from_f64(m as f64);
                let mut sq = E::zero();
                for ni in 0..n {
                    let plane = &xs[(ni * c + ci) * hw..][..hw];
                    for v in plane {
                        let dlt = *v - mean;
                        sq += dlt * dlt;
                    }
                }
                let var = sq / E::from_f64(m as f64);
                let unbiased = sq / E::from_f64((m - 1) as f64);
                running_mean[ci] = (E::one() - momentum) * running_mean[ci] + momentum * mean;
                running_var[ci] = (E::one() - momentum) * running_var[ci] + momentum * unbiased;
                (mean, (var + eps).sqrt().recip())
            }
        };
        inv_stds[ci] = inv_std;
        let (g, b) = (gamma[ci], beta[ci]);
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                let xh = (xs[i] - mean) * inv_std;
                if want_ctx {
                    xhat[i] = xh;
                }
                y[i] = g * xh + b;
            }
        }
    }

    let ctx = want_ctx.then(|| BnCtx { xhat, inv_std: inv_stds, m, mode });
    Ok((Tensor::new(x.dims().to_vec(), y)?, ctx))
}

/// Gradients of [`batchnorm2d`] in Train or Eval mode.
/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm2d_backward<E: Element>(
    dy: &[E],
    dims: &[usize],
    gamma: &[E],
    ctx: &BnCtx<E>,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let (n, c, hw) = (dims[0], dims[1], dims[2] * dims[3]);
    let m = E::from_f64(ctx.m as f64);
    let mut dx = vec![E::zero(); dy.len()];
    let mut dgamma = vec![E::zero(); c];
    let mut dbeta = vec![E::zero(); c];
    for ci in 0..c {
        let mut s1 = E::zero();
        let mut s2 = E::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                s1 += dy[i];
                s2 += dy[i] * ctx.xhat[i];
            }
        }
        dbeta[ci] = s1;
        dgamma[ci] = s2;
        let g_inv = gamma[ci] * ctx.inv_std[ci];
        match ctx.mode {
            BnMode::Train => {
                let mean_dy = s1 / m;
                let mean_dyxh = s2 / m;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for i in base..base + hw {
                        dx[i] = g_inv * (dy[i] - mean_dy - ctx.xhat[i] * mean_dyxh);
                    }
                }
            }
            BnMode::Eval => {
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for i in base..base + hw {
                        dx[i] = g_inv * dy[i];
                    }
                }
            }
            BnMode::Recalibrate => unreachable!("recalibrate mode never records a backward context"),
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| if v > E::zero() { v } else { E::zero() })
}

pub fn relu_backward<E: Element>(x: &[E], dy: &[E]) -> Vec<E> {
    x.iter()
        .zip(dy)
        .map(|(&xv, &dv)| if xv > E::zero() { dv } else { E::zero() })
        .collect()
}

/// `[N, C, H, W] -> [N, C]` spatial mean.
pub fn global_avg_pool<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let dims = x.dims();
    if dims.len() != 4 {
        return Err(TensorError::shape(
            "global_avg_pool",
            format!("input must be [N, C, H, W], got rank {}", dims.len()),
        ));
    }
    let (n, c, hw) = (dims[0], dims[1], dims[2] * dims[3]);
    let scale = E::from_f64(1.0 / hw as f64);
    let mut out = vec![E::zero(); n * c];
    for (plane, o) in x.data().chunks_exact(hw).zip(out.iter_mut()) {
        let mut sum = E::zero();
        for v in plane {
            sum += *v;
        }
        *o = sum * scale;
    }
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward<E: Element>(dy: &[E], x_dims: &[usize]) -> Vec<E> {
    let hw = x_dims[2] * x_dims[3];
    let scale = E::from_f64(1.0 / hw as f64);
    let mut dx = vec![E::zero(); dy.len() * hw];
    for (dplane, d) in dx.chunks_exact_mut(hw).zip(dy) {
        dplane.fill(*d * scale);
    }
    dx
}

/// `y = x W^T + b` with `x [N, D]`, `w [O, D]`, `b [O]`.
pub fn linear<E: Element>(x: &Tensor<E>, w: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (xd, wd, bd) = (x.dims(), w.dims(), b.dims());
    if xd.len() != 2 || wd.len() != 2 || bd.len() != 1 {
        return Err(TensorError::shape(
            "linear",
            format!("expected x [N, D], w [O, D], b [O]; got {xd:?}, {wd:?}, {bd:?}"),
        ));
    }
    let (n, din) = (xd[0], xd[1]);
    let (dout, wk) = (wd[0], wd[1]);
    if wk != din {
        return Err(TensorError::shape(
            "linear",
            format!("weight expects {wk} input features, x provides {din}"),
        ));
    }
    if bd[0] != dout {
        return Err(TensorError::shape(
            "linear",
            format!("bias has {} features, weight produces {dout}", bd[0]),
        ));
    }
    let (xs, ws, bs) = (x.data(), w.data(), b.data());
    let mut out = vec![E::zero(); n * dout];
    for ni in 0..n {
        let x_row = &xs[ni * din..(ni + 1) * din];
        let o_row = &mut out[ni * dout..(ni + 1) * dout];
        for (o, (w_row, bias)) in o_row.iter_mut().zip(ws.chunks_exact(din).zip(bs)) {
            let mut acc = *bias;
            for (xv, wv) in x_row.iter().zip(w_row) {
                acc += *xv * *wv;
            }
            *o = acc;
        }
    }
    Tensor::new(vec![n, dout], out)
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    dy: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let (n, din) = (x.dims()[0], x.dims()[1]);
    let dout = w.dims()[0];
    let (xs, ws) = (x.data(), w.data());
    let mut dx = vec![E::zero(); n * din];
    let mut dw = vec![E::zero(); dout * din];
    let mut db = vec![E::zero(); dout];
    for ni in 0..n {
        let x_row = &xs[ni * din..(ni + 1) * din];
        let dy_row = &dy[ni * dout..(ni + 1) * dout];
        let dx_row = &mut dx[ni * din..(ni + 1) * din];
        for (oi, &dyo) in dy_row.iter().enumerate() {
            db[oi] += dyo;
            let w_row = &ws[oi * din..(oi + 1) * din];
            let dw_row = &mut dw[oi * din..(oi + 1) * din];
            for j in 0..din {
                dx_row[j] += dyo * w_row[j];
                dw_row[j] += dyo * x_row[j];
            }
        }
    }
    (dx, dw, db)
}

pub fn add<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.dims() != b.dims() {
        return Err(TensorError::shape(
            "add",
            format!("operand shapes differ: {:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.dims().to_vec(), data)
}

pub fn affine<E: Element>(x: &Tensor<E>, mul: E, add: E) -> Tensor<E> {
    x.map(|v| mul * v + add)
}

#[derive(Debug, Clone)]
pub struct CrossEntropyCtx<E: Element> {
    pub probs: Vec<E>,
}

/// Mean softmax cross-entropy over a batch of logits `[N, K]` against hard
/// labels. Row maxima are subtracted before exponentiation.
pub fn cross_entropy<E: Element>(
    logits: &Tensor<E>,
    labels: &[usize],
) -> Result<(Tensor<E>, CrossEntropyCtx<E>)> {
    let dims = logits.dims();
    if dims.len() != 2 {
        return Err(TensorError::shape(
            "cross_entropy",
            format!("logits must be [N, K], got rank {}", dims.len()),
        ));
    }
    let (n, k) = (dims[0], dims[1]);
    if labels.len() != n {
        return Err(TensorError::shape(
            "cross_entropy",
            format!("{} labels for {n} logit rows", labels.len()),
        ));
    }
    let zs = logits.data();
    let mut probs = vec![E::zero(); n * k];
    let mut loss = E::zero();
    for (ni, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("label {label} out of range for {k} classes (row {ni})"),
            ));
        }
        let row = &zs[ni * k..(ni + 1) * k];
        let mut mx = row[0];
        for v in row {
            if *v > mx {
                mx = *v;
            }
        }
        let mut denom = E::zero();
        let p_row = &mut probs[ni * k..(ni + 1) * k];
        for (p, v) in p_row.iter_mut().zip(row) {
            let e = (*v - mx).exp();
            *p = e;
            denom += e;
        }
        let inv = denom.recip();
        for p in p_row.iter_mut() {
            *p = *p * inv;
        }
        loss += denom.ln() - (row[label] - mx);
    }
    let mean = loss / E::from_f64(n as f64);
    Ok((Tensor::scalar(mean), CrossEntropyCtx { probs }))
}

pub fn cross_entropy_backward<E: Element>(
    dy: E,
    ctx: &CrossEntropyCtx<E>,
    labels: &[usize],
) -> Vec<E> {
    let n = labels.len();
    let k = ctx.probs.len() / n;
    let scale = dy / E::from_f64(n as f64);
    let mut dz = ctx.probs.clone();
    for (ni, &label) in labels.iter().enumerate() {
        dz[ni * k + label] -= E::one();
    }
    for v in dz.iter_mut() {
        *v *= scale;
    }
    dz
}

#[derive(Debug, Clone)]
pub struct CosineCtx<E: Element> {
    pub cos: Vec<E>,
    pub norm_u: Vec<E>,
    pub norm_v: Vec<E>,
    /// Rows whose norm product fell below [`COSINE_NORM_FLOOR`]; their cosine
    /// is defined as zero and they propagate no gradient.
    pub degenerate: Vec<bool>,
}

/// Row-wise cosine similarity. Rank-2 inputs `[N, D]` yield `[N]`; rank-1
/// inputs are treated as a single row and yield a scalar.
pub fn cosine_rows<E: Element>(u: &Tensor<E>, v: &Tensor<E>) -> Result<(Tensor<E>, CosineCtx<E>)> {
    if u.dims() != v.dims() {
        return Err(TensorError::shape(
            "cosine_rows",
            format!("operand shapes differ: {:?} vs {:?}", u.dims(), v.dims()),
        ));
    }
    let (n, d) = match u.dims() {
        [d] => (1usize, *d),
        [n, d] => (*n, *d),
        other => {
            return Err(TensorError::shape(
                "cosine_rows",
                format!("expected rank 1 or 2, got {other:?}"),
            ))
        }
    };
    let (us, vs) = (u.data(), v.data());
    let mut cos = vec![E::zero(); n];
    let mut norm_u = vec![E::zero(); n];
    let mut norm_v = vec![E::zero(); n];
    let mut degenerate = vec![false; n];
    for ni in 0..n {
        let ur = &us[ni * d..(ni + 1) * d];
        let vr = &vs[ni * d..(ni + 1) * d];
        let mut dot = E::zero();
        let mut uu = E::zero();
        let mut vv = E::zero();
        for (a, b) in ur.iter().zip(vr) {
            dot += *a * *b;
            uu += *a * *a;
            vv += *b * *b;
        }
        let nu = uu.sqrt();
        let nv = vv.sqrt();
        norm_u[ni] = nu;
        norm_v[ni] = nv;
        if (nu * nv).as_f64() < COSINE_NORM_FLOOR {
            degenerate[ni] = true;
            cos[ni] = E::zero();
        } else {
            cos[ni] = dot / (nu * nv);
        }
    }
    let out = Tensor::new(vec![n], cos.clone())?;
    Ok((out, CosineCtx { cos, norm_u, norm_v, degenerate }))
}

/// Returns `(du, dv)`. Degenerate rows contribute zero gradient.
pub fn cosine_rows_backward<E: Element>(
    u: &Tensor<E>,
    v: &Tensor<E>,
    dy: &[E],
    ctx: &CosineCtx<E>,
) -> (Vec<E>, Vec<E>) {
    let n = ctx.cos.len();
    let d = u.numel() / n;
    let (us, vs) = (u.data(), v.data());
    let mut du = vec![E::zero(); u.numel()];
    let mut dv = vec![E::zero(); v.numel()];
    for ni in 0..n {
        if ctx.degenerate[ni] {
            continue;
        }
        let (nu, nv, c, g) = (ctx.norm_u[ni], ctx.norm_v[ni], ctx.cos[ni], dy[ni]);
        let inv_uv = (nu * nv).recip();
        let inv_uu = (nu * nu).recip();
        let inv_vv = (nv * nv).recip();
        for j in 0..d {
            let idx = ni * d + j;
            du[idx] = g * (vs[idx] * inv_uv - c * us[idx] * inv_uu);
            dv[idx] = g * (us[idx] * inv_uv - c * vs[idx] * inv_vv);
        }
    }
    (du, dv)
}

/// Scalar `sum_i w[i] * x[i]` with fixed (non-differentiated) weights.
pub fn weighted_sum<E: Element>(x: &Tensor<E>, w: &[E]) -> Result<Tensor<E>> {
    if w.len() != x.numel() {
        return Err(TensorError::shape(
            "weighted_sum",
            format!("{} weights for {} elements", w.len(), x.numel()),
        ));
    }
    let mut sum = E::zero();
    for (xv, wv) in x.data().iter().zip(w) {
        sum += *xv * *wv;
    }
    Ok(Tensor::scalar(sum))
}

pub fn weighted_sum_backward<E: Element>(dy: E, w: &[E]) -> Vec<E> {
    w.iter().map(|&wv| dy * wv).collect()
}

pub fn mean_all<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let mut sum = E::zero();
    for v in x.data() {
        sum += *v;
    }
    Tensor::scalar(sum / E::from_f64(x.numel() as f64))
}

pub fn mean_all_backward<E: Element>(dy: E, numel: usize) -> Vec<E> {
    vec![dy / E::from_f64(numel as f64); numel]
}

/// Max pooling with zero-influence padding (padded positions never win).
/// Forward-only; used by stems of the profiling-scale graphs.
pub fn max_pool2d<E: Element>(
    x: &Tensor<E>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    let dims = x.dims();
    if dims.len() != 4 {
        return Err(TensorError::shape(
            "max_pool2d",
            format!("input must be [N, C, H, W], got rank {}", dims.len()),
        ));
    }
    let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let oh = conv_out_extent(h, kernel, stride, padding)?;
    let ow = conv_out_extent(w, kernel, stride, padding)?;
    let xs = x.data();
    let mut out = vec![E::zero(); n * c * oh * ow];
    for nc in 0..n * c {
        let plane = &xs[nc * h * w..][..h * w];
        let o_plane = &mut out[nc * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<E> = None;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let v = plane[iy as usize * w + ix as usize];
                        best = Some(match best {
                            Some(b) if b >= v => b,
                            _ => v,
                        });
                    }
                }
                o_plane[oy * ow + ox] = best.unwrap_or(E::zero());
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}
