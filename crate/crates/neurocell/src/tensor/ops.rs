//! Forward kernels and their recorded backward steps.
//!
//! Convolutions run through im2col plus a small blocked GEMM; everything
//! else is direct loops. All kernels are single-threaded and use a fixed
//! reduction order, so repeated runs are bitwise identical.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Tape, Tensor};

impl<T: Scalar> Tensor<T> {
    pub(crate) fn grad_ref(&self) -> std::cell::Ref<'_, Option<Vec<T>>> {
        self.inner.grad.borrow()
    }
}

// ---------------------------------------------------------------------------
// GEMM + im2col
// ---------------------------------------------------------------------------

/// c (m×n) += a (m×k) · b (k×n)
fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    }
}

/// c (m×n) += a (m×k) · b (n×k)ᵀ
fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (av, bv) in arow.iter().zip(brow) {
                acc += *av * *bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// c (m×n) += a (k×m)ᵀ · b (k×n)
fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for l in 0..k {
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = a[l * m + i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    }
}

/// Unrolls kernel windows of `img` (c×h×w) into `col`
/// ((c·kh·kw) × (hp·wp)), where (hp, wp) are the window positions.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hp: usize,
    wp: usize,
    col: &mut [T],
) {
    for ci in 0..c {
        for khi in 0..kh {
            for kwi in 0..kw {
                let row = (ci * kh + khi) * kw + kwi;
                let base = row * hp * wp;
                for oh in 0..hp {
                    let ih = (oh * stride + khi) as isize - pad as isize;
                    let out = &mut col[base + oh * wp..base + (oh + 1) * wp];
                    if ih < 0 || ih >= h as isize {
                        for v in out.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let irow = &img[(ci * h + ih as usize) * w..(ci * h + ih as usize + 1) * w];
                    for (ow, v) in out.iter_mut().enumerate() {
                        let iw = (ow * stride + kwi) as isize - pad as isize;
                        *v = if iw < 0 || iw >= w as isize { T::zero() } else { irow[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]; accumulates into `img`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hp: usize,
    wp: usize,
    img: &mut [T],
) {
    for ci in 0..c {
        for khi in 0..kh {
            for kwi in 0..kw {
                let row = (ci * kh + khi) * kw + kwi;
                let base = row * hp * wp;
                for oh in 0..hp {
                    let ih = (oh * stride + khi) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let irow_base = (ci * h + ih as usize) * w;
                    let src = &col[base + oh * wp..base + (oh + 1) * wp];
                    for (ow, v) in src.iter().enumerate() {
                        let iw = (ow * stride + kwi) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            img[irow_base + iw as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

fn expect_ndim<T: Scalar>(t: &Tensor<T>, nd: usize, what: &str) -> Result<()> {
    if t.ndim() != nd {
        return Err(Error::Dimension(format!(
            "{what} must be {nd}-d, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// 2-D cross-correlation plus bias. `input` is c×h×w, `weight` o×c×kh×kw.
pub fn conv2d<T: Scalar>(
    tape: &Tape<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    expect_ndim(input, 3, "conv2d input")?;
    expect_ndim(weight, 4, "conv2d weight")?;
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (o, wc, kh, kw) = (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
    if wc != c {
        return Err(Error::Dimension(format!(
            "conv2d channel mismatch: input has {c} channels, weight expects {wc}"
        )));
    }
    if bias.shape() != [o] {
        return Err(Error::Dimension(format!(
            "conv2d bias shape {:?} does not match {o} output channels",
            bias.shape()
        )));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::Dimension(format!(
            "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let hp = (h + 2 * padding - kh) / stride + 1;
    let wp = (w + 2 * padding - kw) / stride + 1;
    let ckk = c * kh * kw;
    let hw = hp * wp;

    let mut col = vec![T::zero(); ckk * hw];
    im2col(&input.data(), c, h, w, kh, kw, stride, padding, hp, wp, &mut col);

    let mut out = vec![T::zero(); o * hw];
    gemm_nn(o, ckk, hw, &weight.data(), &col, &mut out);
    {
        let b = bias.data();
        for oc in 0..o {
            let bv = b[oc];
            for v in &mut out[oc * hw..(oc + 1) * hw] {
                *v += bv;
            }
        }
    }
    let out = Tensor::from_vec(&[o, hp, wp], out)?;

    let needs = input.needs_grad() || weight.needs_grad() || bias.needs_grad();
    out.set_requires_grad(needs);
    if needs {
        let (input, weight, bias, out_t) = (input.clone(), weight.clone(), bias.clone(), out.clone());
        let col = Rc::new(col);
        tape.record(move || {
            let gref = out_t.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            if bias.needs_grad() {
                let mut db = vec![T::zero(); o];
                for (oc, dbv) in db.iter_mut().enumerate() {
                    *dbv = g[oc * hw..(oc + 1) * hw].iter().copied().sum();
                }
                bias.accumulate_grad(&db);
            }
            if weight.needs_grad() {
                let mut dw = vec![T::zero(); o * ckk];
                gemm_nt(o, hw, ckk, g, &col, &mut dw);
                weight.accumulate_grad(&dw);
            }
            if input.needs_grad() {
                let mut dcol = vec![T::zero(); ckk * hw];
                gemm_tn(ckk, o, hw, &weight.data(), g, &mut dcol);
                let mut dx = vec![T::zero(); c * h * w];
                col2im(&dcol, c, h, w, kh, kw, stride, padding, hp, wp, &mut dx);
                input.accumulate_grad(&dx);
            }
        });
    }
    Ok(out)
}

/// Transposed convolution: the gradient-of-conv2d map applied forward.
/// `input` is c×h×w, `weight` c×o×kh×kw, output o×((h−1)·stride+kh)×….
pub fn conv_transpose2d<T: Scalar>(
    tape: &Tape<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    expect_ndim(input, 3, "conv_transpose2d input")?;
    expect_ndim(weight, 4, "conv_transpose2d weight")?;
    if stride == 0 {
        return Err(Error::Config("conv_transpose2d stride must be positive".into()));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (wc, o, kh, kw) = (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
    if wc != c {
        return Err(Error::Dimension(format!(
            "conv_transpose2d channel mismatch: input has {c} channels, weight expects {wc}"
        )));
    }
    if bias.shape() != [o] {
        return Err(Error::Dimension(format!(
            "conv_transpose2d bias shape {:?} does not match {o} output channels",
            bias.shape()
        )));
    }
    let ho = (h - 1) * stride + kh;
    let wo = (w - 1) * stride + kw;
    let okk = o * kh * kw;
    let hw = h * w;

    // col = Wᵀ · x, then scatter windows into the enlarged image.
    let mut colbuf = vec![T::zero(); okk * hw];
    gemm_tn(okk, c, hw, &weight.data(), &input.data(), &mut colbuf);
    let mut out = vec![T::zero(); o * ho * wo];
    col2im(&colbuf, o, ho, wo, kh, kw, stride, 0, h, w, &mut out);
    {
        let b = bias.data();
        for oc in 0..o {
            let bv = b[oc];
            for v in &mut out[oc * ho * wo..(oc + 1) * ho * wo] {
                *v += bv;
            }
        }
    }
    let out = Tensor::from_vec(&[o, ho, wo], out)?;

    let needs = input.needs_grad() || weight.needs_grad() || bias.needs_grad();
    out.set_requires_grad(needs);
    if needs {
        let (input, weight, bias, out_t) = (input.clone(), weight.clone(), bias.clone(), out.clone());
        tape.record(move || {
            let gref = out_t.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            if bias.needs_grad() {
                let mut db = vec![T::zero(); o];
                for (oc, dbv) in db.iter_mut().enumerate() {
                    *dbv = g[oc * ho * wo..(oc + 1) * ho * wo].iter().copied().sum();
                }
                bias.accumulate_grad(&db);
            }
            let mut dcol = vec![T::zero(); okk * hw];
            im2col(g, o, ho, wo, kh, kw, stride, 0, h, w, &mut dcol);
            if input.needs_grad() {
                let mut dx = vec![T::zero(); c * hw];
                gemm_nn(c, okk, hw, &weight.data(), &dcol, &mut dx);
                input.accumulate_grad(&dx);
            }
            if weight.needs_grad() {
                let mut dw = vec![T::zero(); c * okk];
                gemm_nt(c, hw, okk, &input.data(), &dcol, &mut dw);
                weight.accumulate_grad(&dw);
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Non-overlapping max pooling; extents must divide by `window`.
/// Gradient routes to the first-encountered maximum in row-major scan.
pub fn maxpool2d<T: Scalar>(tape: &Tape<T>, input: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    expect_ndim(input, 3, "maxpool2d input")?;
    if window == 0 {
        return Err(Error::Config("maxpool2d window must be positive".into()));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if h % window != 0 || w % window != 0 {
        return Err(Error::Dimension(format!(
            "maxpool2d extents {h}x{w} not divisible by window {window}"
        )));
    }
    let (ho, wo) = (h / window, w / window);
    let mut out = vec![T::zero(); c * ho * wo];
    let mut argmax = vec![0usize; c * ho * wo];
    {
        let x = input.data();
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = (ci * h + oh * window + dy) * w + ow * window + dx;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[(ci * ho + oh) * wo + ow] = best;
                    argmax[(ci * ho + oh) * wo + ow] = best_idx;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[c, ho, wo], out)?;
    out.set_requires_grad(input.needs_grad());
    if input.needs_grad() {
        let (input, out_t) = (input.clone(), out.clone());
        let argmax = Rc::new(argmax);
        tape.record(move || {
            let gref = out_t.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let mut dx = vec![T::zero(); input.len()];
            for (gi, &src) in g.iter().zip(argmax.iter()) {
                dx[src] += *gi;
            }
            input.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Stride-1 average pooling with zero padding (same output size); the
/// divisor is the full window area. Used by inception-style branches.
pub fn avgpool2d_same<T: Scalar>(tape: &Tape<T>, input: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    expect_ndim(input, 3, "avgpool2d input")?;
    if window % 2 == 0 {
        return Err(Error::Config("avgpool2d_same window must be odd".into()));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let r = (window / 2) as isize;
    let inv = T::one() / T::cast_usize(window * window);
    let mut out = vec![T::zero(); c * h * w];
    {
        let x = input.data();
        for ci in 0..c {
            for y in 0..h as isize {
                for xj in 0..w as isize {
                    let mut acc = T::zero();
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (yy, xx) = (y + dy, xj + dx);
                            if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                acc += x[(ci * h + yy as usize) * w + xx as usize];
                            }
                        }
                    }
                    out[(ci * h + y as usize) * w + xj as usize] = acc * inv;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[c, h, w], out)?;
    out.set_requires_grad(input.needs_grad());
    if input.needs_grad() {
        let (input, out_t) = (input.clone(), out.clone());
        tape.record(move || {
            let gref = out_t.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let mut dx = vec![T::zero(); input.len()];
            for ci in 0..c {
                for y in 0..h as isize {
                    for xj in 0..w as isize {
                        let gv = g[(ci * h + y as usize) * w + xj as usize] * inv;
                        for dy in -r..=r {
                            for dxo in -r..=r {
                                let (yy, xx) = (y + dy, xj + dxo);
                                if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                    dx[(ci * h + yy as usize) * w + xx as usize] += gv;
                                }
                            }
                        }
                    }
                }
            }
            input.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// c×h×w → per-channel mean vector of length c.
pub fn global_avg_pool<T: Scalar>(tape: &Tape<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    expect_ndim(input, 3, "global_avg_pool input")?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let inv = T::one() / T::cast_usize(h * w);
    let mut out = vec![T::zero(); c];
    {
        let x = input.data();
        for (ci, ov) in out.iter_mut().enumerate() {
            *ov = x[ci * h * w..(ci + 1) * h * w].iter().copied().sum::<T>() * inv;
        }
    }
    let out = Tensor::from_vec(&[c], out)?;
    out.set_requires_grad(input.needs_grad());
    if input.needs_grad() {
        let (input, out_t) = (input.clone(), out.clone());
        tape.record(move || {
            let gref = out_t.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let mut dx = vec![T::zero(); input.len()];
            for ci in 0..c {
                let gv = g[ci] * inv;
                for v in &mut dx[ci * h * w..(ci + 1) * h * w] {
                    *v = gv;
                }
            }
            input.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dense + activations
// ---------------------------------------------------------------------------

/// y = W·x + b for a vector input of length n, weight m×n, bias m.
pub fn dense<T: Scalar>(
    tape: &Tape<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    expect_ndim(input, 1, "dense input")?;
    expect_ndim(weight, 2, "dense weight")?;
    let n = input.shape()[0];
    let (m, wn) = (weight.shape()[0], weight.shape()[1]);
    if wn != n {
        return Err(Error::Dimension(format!(
            "dense input length {n} does not match weight columns {wn}"
        )));
    }
    if bias.shape() != [m] {
        return Err(Error::Dimension(format!(
            "dense bias shape {:?} does not match {m} outputs",
            bias.shape()
        )));
    }
    let mut out = vec![T::zero(); m];
    {
        let (x, wv, b) = (input.data(), weight.data(), bias.data());
        for (i, ov) in out.iter_mut().enumerate() {
            let row = &wv[i * n..(i + 1) * n];
            let mut acc = b[i];
            for (rv, xv) in row.iter().zip(x.iter()) {
                acc += *rv * *xv;
            }
            *ov = acc;
        }
    }
    let out = Tensor::from_vec(&[m], out)?;
    let needs = input.needs_grad() || weight.needs_grad() || bias.needs_grad();
    out.set_requires_grad(needs);
    if needs {
        let (input, weight, bias, out_t) = (input.clone(), weight.clone(), bias.clone(), out.clone());
        tape.record(move || {
            let gref = out_t.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            if bias.needs_grad() {
                bias.accumulate_grad(g);
            }
            if weight.needs_grad() {
                let x = input.data();
                let mut dw = vec![T::zero(); m * n];
                for i in 0..m {
                    let gv = g[i];
                    for (dv, xv) in dw[i * n..(i + 1) * n].iter_mut().zip(x.iter()) {
                        *dv = gv * *xv;
                    }
                }
                weight.accumulate_grad(&dw);
            }
            if input.needs_grad() {
                let wv = weight.data();
                let mut dx = vec![T::zero(); n];
                for i in 0..m {
                    let gv = g[i];
                    for (dv, rv) in dx.iter_mut().zip(&wv[i * n..(i + 1) * n]) {
                        *dv += gv * *rv;
                    }
                }
                input.accumulate_grad(&dx);
            }
        });
    }
    Ok(out)
}

pub fn relu<T: Scalar>(tape: &Tape<T>, input: &Tensor<T>) -> Tensor<T> {
    let out_data: Vec<T> = input.data().iter().map(|&v| v.max(T::zero())).collect();
    let out = Tensor::from_vec(input.shape(), out_data).expect("same shape");
    out.set_requires_grad(input.needs_grad());
    if input.needs_grad() {
        let (input, out_t) = (input.clone(), out.clone());
        tape.record(move || {
            let gref = out_t.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let x = input.data();
            let dx: Vec<T> = g
                .iter()
                .zip(x.iter())
                .map(|(gv, xv)| if *xv > T::zero() { *gv } else { T::zero() })
                .collect();
            drop(x);
            input.accumulate_grad(&dx);
        });
    }
    out
}

pub fn sigmoid<T: Scalar>(tape: &Tape<T>, input: &Tensor<T>) -> Tensor<T> {
    let out_data: Vec<T> = input
        .data()
        .iter()
        .map(|&v| T::one() / (T::one() + (-v).exp()))
        .collect();
    let out = Tensor::from_vec(input.shape(), out_data).expect("same shape");
    out.set_requires_grad(input.needs_grad());
    if input.needs_grad() {
        let (input, out_t) = (input.clone(), out.clone());
        tape.record(move || {
            let gref = out_t.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let y = out_t.data();
            let dx: Vec<T> = g
                .iter()
                .zip(y.iter())
                .map(|(gv, yv)| *gv * *yv * (T::one() - *yv))
                .collect();
            drop(y);
            input.accumulate_grad(&dx);
        });
    }
    out
}

/// Softmax over the final axis; each row is positive and sums to 1.
pub fn softmax<T: Scalar>(tape: &Tape<T>, input: &Tensor<T>) -> Tensor<T> {
    let last = *input.shape().last().unwrap_or(&1);
    let rows = input.len() / last.max(1);
    let mut out_data = vec![T::zero(); input.len()];
    {
        let x = input.data();
        for r in 0..rows {
            let row = &x[r * last..(r + 1) * last];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (ov, xv) in out_data[r * last..(r + 1) * last].iter_mut().zip(row) {
                *ov = (*xv - mx).exp();
                z += *ov;
            }
            for ov in &mut out_data[r * last..(r + 1) * last] {
                *ov = *ov / z;
            }
        }
    }
    let out = Tensor::from_vec(input.shape(), out_data).expect("same shape");
    out.set_requires_grad(input.needs_grad());
    if input.needs_grad() {
        let (input, out_t) = (input.clone(), out.clone());
        tape.record(move || {
            let gref = out_t.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let y = out_t.data();
            let mut dx = vec![T::zero(); y.len()];
            for r in 0..rows {
                let (ys, gs) = (&y[r * last..(r + 1) * last], &g[r * last..(r + 1) * last]);
                let dot: T = ys.iter().zip(gs).map(|(yv, gv)| *yv * *gv).sum();
                for ((dv, yv), gv) in dx[r * last..(r + 1) * last].iter_mut().zip(ys).zip(gs) {
                    *dv = *yv * (*gv - dot);
                }
            }
            drop(y);
            input.accumulate_grad(&dx);
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

fn bn_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    // returns (channels, chunks, chunk_len): channel c occupies `chunks`
    // contiguous runs of `chunk_len` elements each.
    match shape {
        [c, h, w] => Ok((*c, 1, h * w)),
        [b, c, h, w] => Ok((*c, *b, h * w)),
        other => Err(Error::Dimension(format!(
            "batchnorm2d expects c×h×w or b×c×h×w, got {other:?}"
        ))),
    }
}

/// Per-channel normalization with the input's own batch statistics,
/// leaving no running-state side effects. Networks use this at inference
/// and on frozen nodes, where the forward pass handles one sample at a
/// time and must apply the same normalization it applied during training.
pub fn batchnorm2d_stateless<T: Scalar>(
    tape: &Tape<T>,
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (c, _, _) = bn_layout(input.shape())?;
    let scratch_mean = Tensor::full(&[c], T::zero());
    let scratch_var = Tensor::full(&[c], T::one());
    batchnorm2d(tape, input, gamma, beta, &scratch_mean, &scratch_var, true)
}

/// Per-channel batch normalization with epsilon 1e-5. In training mode the
/// batch statistics are used and the running buffers updated in place
/// (momentum 0.1); in eval mode the running buffers are used.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<T: Scalar>(
    tape: &Tape<T>,
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    training: bool,
) -> Result<Tensor<T>> {
    let (c, chunks, chunk_len) = bn_layout(input.shape())?;
    let n = chunks * chunk_len;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Dimension(format!(
            "batchnorm2d parameter shapes {:?}/{:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    if training && n < 2 {
        return Err(Error::Contract(format!(
            "batchnorm2d degenerate batch: {n} value(s) per channel in train mode"
        )));
    }
    let eps = T::cast_f64(1e-5);
    let momentum = T::cast_f64(0.1);
    let inv_n = T::one() / T::cast_usize(n);

    let chunk_base = move |ch: usize, b: usize| -> usize {
        // 3-d: b==0 always; 4-d: element (b, ch)
        (b * c + ch) * chunk_len
    };

    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    if training {
        let x = input.data();
        for ch in 0..c {
            let mut m = T::zero();
            for b in 0..chunks {
                let s = chunk_base(ch, b);
                m += x[s..s + chunk_len].iter().copied().sum::<T>();
            }
            let m = m * inv_n;
            let mut v = T::zero();
            for b in 0..chunks {
                let s = chunk_base(ch, b);
                for &xv in &x[s..s + chunk_len] {
                    let d = xv - m;
                    v += d * d;
                }
            }
            mean[ch] = m;
            var[ch] = v * inv_n;
        }
        drop(x);
        let mut rm = running_mean.data_mut();
        let mut rv = running_var.data_mut();
        for ch in 0..c {
            rm[ch] = (T::one() - momentum) * rm[ch] + momentum * mean[ch];
            rv[ch] = (T::one() - momentum) * rv[ch] + momentum * var[ch];
        }
    } else {
        mean.copy_from_slice(&running_mean.data());
        var.copy_from_slice(&running_var.data());
    }

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); input.len()];
    let mut out_data = vec![T::zero(); input.len()];
    {
        let x = input.data();
        let (gm, bt) = (gamma.data(), beta.data());
        for ch in 0..c {
            for b in 0..chunks {
                let s = chunk_base(ch, b);
                for i in s..s + chunk_len {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out_data[i] = gm[ch] * xh + bt[ch];
                }
            }
        }
    }
    let out = Tensor::from_vec(input.shape(), out_data)?;
    let needs = input.needs_grad() || gamma.needs_grad() || beta.needs_grad();
    out.set_requires_grad(needs);
    if needs {
        let (input, gamma, beta, out_t) = (input.clone(), gamma.clone(), beta.clone(), out.clone());
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        tape.record(move || {
            let gref = out_t.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ch in 0..c {
                let mut sg = T::zero();
                let mut sgx = T::zero();
                for b in 0..chunks {
                    let s = chunk_base(ch, b);
                    for i in s..s + chunk_len {
                        sg += g[i];
                        sgx += g[i] * xhat[i];
                    }
                }
                dbeta[ch] = sg;
                dgamma[ch] = sgx;
            }
            if gamma.needs_grad() {
                gamma.accumulate_grad(&dgamma);
            }
            if beta.needs_grad() {
                beta.accumulate_grad(&dbeta);
            }
            if input.needs_grad() {
                let gm = gamma.data();
                let mut dx = vec![T::zero(); xhat.len()];
                for ch in 0..c {
                    let scale = gm[ch] * inv_std[ch];
                    if training {
                        let mg = dbeta[ch] * inv_n;
                        let mgx = dgamma[ch] * inv_n;
                        for b in 0..chunks {
                            let s = chunk_base(ch, b);
                            for i in s..s + chunk_len {
                                dx[i] = scale * (g[i] - mg - xhat[i] * mgx);
                            }
                        }
                    } else {
                        for b in 0..chunks {
                            let s = chunk_base(ch, b);
                            for i in s..s + chunk_len {
                                dx[i] = scale * g[i];
                            }
                        }
                    }
                }
                drop(gm);
                input.accumulate_grad(&dx);
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

fn clamp_prob<T: Scalar>(p: T) -> T {
    // 1e-7 keeps the 1/p loss gradient bounded even when an f32 sigmoid
    // saturates to exactly 0 or 1
    let lo = T::cast_f64(1e-7);
    let hi = T::one() - lo;
    p.max(lo).min(hi)
}

/// Mean over elements of −[t·log p + (1−t)·log(1−p)], logs clamped at 1e-7.
pub fn cross_entropy_pixelwise<T: Scalar>(
    tape: &Tape<T>,
    pred: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "cross_entropy shapes differ: pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len();
    let inv_n = T::one() / T::cast_usize(n);
    let mut acc = T::zero();
    {
        let (p, t) = (pred.data(), target.data());
        for (pv, tv) in p.iter().zip(t.iter()) {
            let pc = clamp_prob(*pv);
            acc += -(*tv * pc.ln() + (T::one() - *tv) * (T::one() - pc).ln());
        }
    }
    let out = Tensor::scalar(acc * inv_n);
    out.set_requires_grad(pred.needs_grad());
    if pred.needs_grad() {
        let (pred, target, out_t) = (pred.clone(), target.clone(), out.clone());
        tape.record(move || {
            let gref = out_t.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let gv = g[0] * inv_n;
            let (p, t) = (pred.data(), target.data());
            let dx: Vec<T> = p
                .iter()
                .zip(t.iter())
                .map(|(pv, tv)| {
                    let pc = clamp_prob(*pv);
                    gv * (-(*tv / pc) + (T::one() - *tv) / (T::one() - pc))
                })
                .collect();
            drop(p);
            drop(t);
            pred.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// −log p[target] over a probability vector, log clamped at 1e-7.
pub fn cross_entropy_categorical<T: Scalar>(
    tape: &Tape<T>,
    pred: &Tensor<T>,
    target: usize,
) -> Result<Tensor<T>> {
    expect_ndim(pred, 1, "categorical cross_entropy prediction")?;
    if target >= pred.len() {
        return Err(Error::Dimension(format!(
            "class index {target} out of range for {}-way prediction",
            pred.len()
        )));
    }
    let p = clamp_prob(pred.data()[target]);
    let out = Tensor::scalar(-p.ln());
    out.set_requires_grad(pred.needs_grad());
    if pred.needs_grad() {
        let (pred, out_t) = (pred.clone(), out.clone());
        tape.record(move || {
            let gref = out_t.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let mut dx = vec![T::zero(); pred.len()];
            let pc = clamp_prob(pred.data()[target]);
            dx[target] = -g[0] / pc;
            pred.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Element-wise / structural
// ---------------------------------------------------------------------------

pub fn add<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "add shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out_data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(x, y)| *x + *y).collect();
    let out = Tensor::from_vec(a.shape(), out_data)?;
    let needs = a.needs_grad() || b.needs_grad();
    out.set_requires_grad(needs);
    if needs {
        let (a, b, out_t) = (a.clone(), b.clone(), out.clone());
        tape.record(move || {
            let gref = out_t.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            if a.needs_grad() {
                a.accumulate_grad(g);
            }
            if b.needs_grad() {
                b.accumulate_grad(g);
            }
        });
    }
    Ok(out)
}

pub fn mul<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "mul shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out_data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(x, y)| *x * *y).collect();
    let out = Tensor::from_vec(a.shape(), out_data)?;
    let needs = a.needs_grad() || b.needs_grad();
    out.set_requires_grad(needs);
    if needs {
        let (a, b, out_t) = (a.clone(), b.clone(), out.clone());
        tape.record(move || {
            let gref = out_t.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            if a.needs_grad() {
                let bd = b.data();
                let dx: Vec<T> = g.iter().zip(bd.iter()).map(|(gv, bv)| *gv * *bv).collect();
                drop(bd);
                a.accumulate_grad(&dx);
            }
            if b.needs_grad() {
                let ad = a.data();
                let dx: Vec<T> = g.iter().zip(ad.iter()).map(|(gv, av)| *gv * *av).collect();
                drop(ad);
                b.accumulate_grad(&dx);
            }
        });
    }
    Ok(out)
}

pub fn scale<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, k: T) -> Tensor<T> {
    let out_data: Vec<T> = x.data().iter().map(|&v| v * k).collect();
    let out = Tensor::from_vec(x.shape(), out_data).expect("same shape");
    out.set_requires_grad(x.needs_grad());
    if x.needs_grad() {
        let (x, out_t) = (x.clone(), out.clone());
        tape.record(move || {
            let gref = out_t.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let dx: Vec<T> = g.iter().map(|&gv| gv * k).collect();
            x.accumulate_grad(&dx);
        });
    }
    out
}

pub fn sum<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Tensor<T> {
    let total: T = x.data().iter().copied().sum();
    let out = Tensor::scalar(total);
    out.set_requires_grad(x.needs_grad());
    if x.needs_grad() {
        let (x, out_t) = (x.clone(), out.clone());
        tape.record(move || {
            let gref = out_t.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let dx = vec![g[0]; x.len()];
            x.accumulate_grad(&dx);
        });
    }
    out
}

/// Mean of a list of scalar tensors (used for batch loss averaging).
pub fn mean_of<T: Scalar>(tape: &Tape<T>, items: &[Tensor<T>]) -> Result<Tensor<T>> {
    if items.is_empty() {
        return Err(Error::Contract("mean_of on empty list".into()));
    }
    let inv = T::one() / T::cast_usize(items.len());
    let mut acc = T::zero();
    for it in items {
        acc += it.item()?;
    }
    let out = Tensor::scalar(acc * inv);
    let needs = items.iter().any(|t| t.needs_grad());
    out.set_requires_grad(needs);
    if needs {
        let items: Vec<Tensor<T>> = items.to_vec();
        let out_t = out.clone();
        tape.record(move || {
            let gref = out_t.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let gv = g[0] * inv;
            for it in &items {
                if it.needs_grad() {
                    it.accumulate_grad(&[gv]);
                }
            }
        });
    }
    Ok(out)
}

/// Concatenation of c×h×w tensors along the channel axis.
pub fn concat_channels<T: Scalar>(tape: &Tape<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if inputs.len() < 2 {
        return Err(Error::Contract("concat_channels needs at least two inputs".into()));
    }
    for t in inputs {
        expect_ndim(t, 3, "concat_channels input")?;
    }
    let (h, w) = (inputs[0].shape()[1], inputs[0].shape()[2]);
    for t in inputs {
        if t.shape()[1] != h || t.shape()[2] != w {
            return Err(Error::Dimension(format!(
                "concat_channels spatial mismatch: {:?} vs {}x{}",
                t.shape(),
                h,
                w
            )));
        }
    }
    let c_total: usize = inputs.iter().map(|t| t.shape()[0]).sum();
    let mut out_data = Vec::with_capacity(c_total * h * w);
    for t in inputs {
        out_data.extend_from_slice(&t.data());
    }
    let out = Tensor::from_vec(&[c_total, h, w], out_data)?;
    let needs = inputs.iter().any(|t| t.needs_grad());
    out.set_requires_grad(needs);
    if needs {
        let owned: Vec<Tensor<T>> = inputs.iter().map(|t| (*t).clone()).collect();
        let out_t = out.clone();
        tape.record(move || {
            let gref = out_t.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let mut off = 0;
            for t in &owned {
                let n = t.len();
                if t.needs_grad() {
                    t.accumulate_grad(&g[off..off + n]);
                }
                off += n;
            }
        });
    }
    Ok(out)
}
