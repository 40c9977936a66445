//! Forward and backward compute kernels.
//!
//! Every kernel is a pure function from tensors to tensors. Batched inputs
//! (`[N, H, W, C]`) are processed one item at a time; items may run on the
//! rayon pool, but each item's arithmetic is sequential and cross-item
//! reductions are summed in item order, so results are byte-identical for
//! any thread count.

use rayon::prelude::*;

use crate::tensor::{elem, image_dims, with_channels, Element, Tensor, TensorError};

/// Epsilon inside the feature-normalization denominator.
pub const NORM_EPS: f64 = 1e-3;

// ── 2D convolution ──────────────────────────────────────────────────

fn check_conv_shapes<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize, usize), TensorError> {
    let (n, h, w, cin) = image_dims(input)?;
    let ks = match *kernel.shape() {
        [kh, kw, kc, ko] => {
            if kh != kw || (kh != 1 && kh != 3) {
                return Err(TensorError::KernelSize { kernel: kernel.shape().to_vec() });
            }
            if kc != cin {
                return Err(TensorError::ChannelMismatch {
                    input: input.shape().to_vec(),
                    kernel: kernel.shape().to_vec(),
                });
            }
            let _ = ko;
            kh
        }
        _ => return Err(TensorError::KernelSize { kernel: kernel.shape().to_vec() }),
    };
    let cout = kernel.shape()[3];
    if bias.shape() != [cout] {
        return Err(TensorError::ShapeMismatch {
            left: bias.shape().to_vec(),
            right: vec![cout],
        });
    }
    Ok((n, h, w, cin, cout, ks))
}

/// Copies one `[H, W, C]` item into a zero-padded `[H+2, W+2, C]` buffer so
/// the 3x3 loops never branch on borders.
fn pad_item<T: Element>(inp: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let wp = w + 2;
    let mut padded = vec![T::zero(); (h + 2) * wp * c];
    for i in 0..h {
        let src = &inp[i * w * c..][..w * c];
        padded[((i + 1) * wp + 1) * c..][..w * c].copy_from_slice(src);
    }
    padded
}

const CO_BLOCK: usize = 16;

/// Register-tiled 3x3 kernel: four output pixels x CO_BLOCK channels
/// accumulate in registers across the whole (di, dj, ci) reduction. Every
/// inner walk is a zipped slice iteration, so no bounds checks survive.
#[inline(always)]
fn conv3_tile4<T: Element>(
    padded: &[T],
    out: &mut [T],
    i: usize,
    j0: usize,
    co0: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kernel: &[T],
    bias: &[T],
) {
    let wp = w + 2;
    let bias_tile = &bias[co0..co0 + CO_BLOCK];
    let mut a0 = [T::zero(); CO_BLOCK];
    let mut a1 = [T::zero(); CO_BLOCK];
    let mut a2 = [T::zero(); CO_BLOCK];
    let mut a3 = [T::zero(); CO_BLOCK];
    a0.copy_from_slice(bias_tile);
    a1.copy_from_slice(bias_tile);
    a2.copy_from_slice(bias_tile);
    a3.copy_from_slice(bias_tile);
    for di in 0..3 {
        let rbase = (i + di) * wp * cin;
        for dj in 0..3 {
            let kplane = &kernel[(di * 3 + dj) * cin * cout..][..cin * cout];
            let pix = rbase + (j0 + dj) * cin;
            let p0 = &padded[pix..][..cin];
            let p1 = &padded[pix + cin..][..cin];
            let p2 = &padded[pix + 2 * cin..][..cin];
            let p3 = &padded[pix + 3 * cin..][..cin];
            for ((((krow_full, &v0), &v1), &v2), &v3) in
                kplane.chunks_exact(cout).zip(p0).zip(p1).zip(p2).zip(p3)
            {
                let krow = &krow_full[co0..co0 + CO_BLOCK];
                for c in 0..CO_BLOCK {
                    let k = krow[c];
                    a0[c] = a0[c] + v0 * k;
                    a1[c] = a1[c] + v1 * k;
                    a2[c] = a2[c] + v2 * k;
                    a3[c] = a3[c] + v3 * k;
                }
            }
        }
    }
    let obase = (i * w + j0) * cout + co0;
    out[obase..][..CO_BLOCK].copy_from_slice(&a0);
    out[obase + cout..][..CO_BLOCK].copy_from_slice(&a1);
    out[obase + 2 * cout..][..CO_BLOCK].copy_from_slice(&a2);
    out[obase + 3 * cout..][..CO_BLOCK].copy_from_slice(&a3);
}

/// Single-pixel variant of [`conv3_tile4`] for row remainders.
#[inline(always)]
fn conv3_tile1<T: Element>(
    padded: &[T],
    out: &mut [T],
    i: usize,
    j: usize,
    co0: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kernel: &[T],
    bias: &[T],
) {
    let wp = w + 2;
    let mut acc = [T::zero(); CO_BLOCK];
    acc.copy_from_slice(&bias[co0..co0 + CO_BLOCK]);
    for di in 0..3 {
        let rbase = (i + di) * wp * cin;
        for dj in 0..3 {
            let kplane = &kernel[(di * 3 + dj) * cin * cout..][..cin * cout];
            let prow = &padded[rbase + (j + dj) * cin..][..cin];
            for (krow_full, &v) in kplane.chunks_exact(cout).zip(prow) {
                let krow = &krow_full[co0..co0 + CO_BLOCK];
                for c in 0..CO_BLOCK {
                    acc[c] = acc[c] + v * krow[c];
                }
            }
        }
    }
    out[(i * w + j) * cout + co0..][..CO_BLOCK].copy_from_slice(&acc);
}

/// Fallback tile for channel counts that are not multiples of the block.
fn conv3_tail<T: Element>(
    padded: &[T],
    out: &mut [T],
    i: usize,
    j: usize,
    co0: usize,
    cb: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kernel: &[T],
    bias: &[T],
) {
    let wp = w + 2;
    let mut acc = vec![T::zero(); cb];
    acc.copy_from_slice(&bias[co0..co0 + cb]);
    for di in 0..3 {
        let rbase = (i + di) * wp * cin;
        for dj in 0..3 {
            let kbase = (di * 3 + dj) * cin * cout + co0;
            let prow = &padded[rbase + (j + dj) * cin..][..cin];
            for (ci, &v) in prow.iter().enumerate() {
                let krow = &kernel[kbase + ci * cout..][..cb];
                for (a, &k) in acc.iter_mut().zip(krow) {
                    *a = *a + v * k;
                }
            }
        }
    }
    out[(i * w + j) * cout + co0..][..cb].copy_from_slice(&acc);
}

const J_BLOCK: usize = 4;

fn conv3_item<T: Element>(
    inp: &[T],
    out: &mut [T],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kernel: &[T],
    bias: &[T],
) {
    let padded = pad_item(inp, h, w, cin);
    let co_main = cout - cout % CO_BLOCK;
    for i in 0..h {
        for co0 in (0..co_main).step_by(CO_BLOCK) {
            let mut j0 = 0;
            while j0 + J_BLOCK <= w {
                conv3_tile4(&padded, out, i, j0, co0, w, cin, cout, kernel, bias);
                j0 += J_BLOCK;
            }
            while j0 < w {
                conv3_tile1(&padded, out, i, j0, co0, w, cin, cout, kernel, bias);
                j0 += 1;
            }
        }
        if co_main < cout {
            for j in 0..w {
                conv3_tail(&padded, out, i, j, co_main, cout - co_main, w, cin, cout, kernel, bias);
            }
        }
    }
}

/// Pixelwise channel mix for 1x1 kernels; no padding involved.
fn conv1_item<T: Element>(
    inp: &[T],
    out: &mut [T],
    cells: usize,
    cin: usize,
    cout: usize,
    kernel: &[T],
    bias: &[T],
) {
    for cell in 0..cells {
        let irow = &inp[cell * cin..][..cin];
        let orow = &mut out[cell * cout..][..cout];
        orow.copy_from_slice(bias);
        for (krow, &v) in kernel.chunks_exact(cout).zip(irow) {
            for (o, &k) in orow.iter_mut().zip(krow) {
                *o = *o + v * k;
            }
        }
    }
}

/// Stride-1 convolution with zero "same" padding; kernels are 1x1 or 3x3.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (n, h, w, cin, cout, ks) = check_conv_shapes(input, kernel, bias)?;
    let mut out = Tensor::zeros(with_channels(input.shape(), cout));
    let in_item = h * w * cin;
    let out_item = h * w * cout;
    let run = |(o, i): (&mut [T], &[T])| {
        if ks == 3 {
            conv3_item(i, o, h, w, cin, cout, kernel.data(), bias.data());
        } else {
            conv1_item(i, o, h * w, cin, cout, kernel.data(), bias.data());
        }
    };
    if n > 1 {
        out.data_mut()
            .par_chunks_mut(out_item)
            .zip(input.data().par_chunks(in_item))
            .for_each(run);
    } else {
        run((out.data_mut(), input.data()));
    }
    Ok(out)
}

/// One item of the 3x3 backward pass. Four pixels are processed per tile
/// so kernel rows load once per four gradient rows; the input-gradient
/// side runs over a transposed kernel so every inner walk is a contiguous
/// zipped AXPY.
fn conv3_grad_item<T: Element>(
    din: &mut [T],
    inp: &[T],
    g: &[T],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kernel_t: &[T],
) -> (Vec<T>, Vec<T>) {
    let wp = w + 2;
    let padded = pad_item(inp, h, w, cin);
    let mut dpad = vec![T::zero(); (h + 2) * wp * cin];
    let mut dk = vec![T::zero(); 9 * cin * cout];
    let mut db = vec![T::zero(); cout];
    let w_main = w - w % 4;

    for i in 0..h {
        let mut j = 0;
        while j < w_main {
            let gbase = (i * w + j) * cout;
            let g0 = &g[gbase..][..cout];
            let g1 = &g[gbase + cout..][..cout];
            let g2 = &g[gbase + 2 * cout..][..cout];
            let g3 = &g[gbase + 3 * cout..][..cout];
            for ((((b, &a), &c), &d), &e) in db.iter_mut().zip(g0).zip(g1).zip(g2).zip(g3) {
                *b = *b + a + c + d + e;
            }
            for di in 0..3 {
                let rbase = (i + di) * wp * cin;
                for dj in 0..3 {
                    let pix = rbase + (j + dj) * cin;
                    let p0 = &padded[pix..][..cin];
                    let p1 = &padded[pix + cin..][..cin];
                    let p2 = &padded[pix + 2 * cin..][..cin];
                    let p3 = &padded[pix + 3 * cin..][..cin];
                    let dkplane = &mut dk[(di * 3 + dj) * cin * cout..][..cin * cout];
                    for ((((dkrow, &v0), &v1), &v2), &v3) in
                        dkplane.chunks_exact_mut(cout).zip(p0).zip(p1).zip(p2).zip(p3)
                    {
                        for ((((dv, &a), &b), &c), &d) in
                            dkrow.iter_mut().zip(g0).zip(g1).zip(g2).zip(g3)
                        {
                            *dv = *dv + v0 * a + v1 * b + v2 * c + v3 * d;
                        }
                    }
                    let ktplane = &kernel_t[(di * 3 + dj) * cout * cin..][..cout * cin];
                    let dpix = &mut dpad[pix..][..4 * cin];
                    let mut rows = dpix.chunks_exact_mut(cin);
                    let (d0, d1, d2, d3) = (
                        rows.next().unwrap(),
                        rows.next().unwrap(),
                        rows.next().unwrap(),
                        rows.next().unwrap(),
                    );
                    for ((((ktrow, &a), &b), &c), &d) in
                        ktplane.chunks_exact(cin).zip(g0).zip(g1).zip(g2).zip(g3)
                    {
                        for ((((e0, e1), e2), e3), &kv) in d0
                            .iter_mut()
                            .zip(d1.iter_mut())
                            .zip(d2.iter_mut())
                            .zip(d3.iter_mut())
                            .zip(ktrow)
                        {
                            *e0 = *e0 + a * kv;
                            *e1 = *e1 + b * kv;
                            *e2 = *e2 + c * kv;
                            *e3 = *e3 + d * kv;
                        }
                    }
                }
            }
            j += 4;
        }
        while j < w {
            let grow = &g[(i * w + j) * cout..][..cout];
            for (b, &gv) in db.iter_mut().zip(grow) {
                *b = *b + gv;
            }
            for di in 0..3 {
                let rbase = (i + di) * wp * cin;
                for dj in 0..3 {
                    let pix = rbase + (j + dj) * cin;
                    let prow = &padded[pix..][..cin];
                    let dkplane = &mut dk[(di * 3 + dj) * cin * cout..][..cin * cout];
                    for (dkrow, &v) in dkplane.chunks_exact_mut(cout).zip(prow) {
                        for (dv, &gv) in dkrow.iter_mut().zip(grow) {
                            *dv = *dv + v * gv;
                        }
                    }
                    let ktplane = &kernel_t[(di * 3 + dj) * cout * cin..][..cout * cin];
                    let dprow = &mut dpad[pix..][..cin];
                    for (ktrow, &gv) in ktplane.chunks_exact(cin).zip(grow) {
                        for (dv, &kv) in dprow.iter_mut().zip(ktrow) {
                            *dv = *dv + gv * kv;
                        }
                    }
                }
            }
            j += 1;
        }
    }
    for i in 0..h {
        din[i * w * cin..][..w * cin].copy_from_slice(&dpad[((i + 1) * wp + 1) * cin..][..w * cin]);
    }
    (dk, db)
}

/// 1x1 backward: pixelwise matvec against the kernel and its transpose.
fn conv1_grad_item<T: Element>(
    din: &mut [T],
    inp: &[T],
    g: &[T],
    cells: usize,
    cin: usize,
    cout: usize,
    kernel_t: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut dk = vec![T::zero(); cin * cout];
    let mut db = vec![T::zero(); cout];
    for cell in 0..cells {
        let grow = &g[cell * cout..][..cout];
        let irow = &inp[cell * cin..][..cin];
        let drow = &mut din[cell * cin..][..cin];
        for (b, &gv) in db.iter_mut().zip(grow) {
            *b = *b + gv;
        }
        for (ci, &v) in irow.iter().enumerate() {
            let dkrow = &mut dk[ci * cout..][..cout];
            for (d, &gv) in dkrow.iter_mut().zip(grow) {
                *d = *d + v * gv;
            }
        }
        for (co, &gv) in grow.iter().enumerate() {
            let ktrow = &kernel_t[co * cin..][..cin];
            for (d, &kv) in drow.iter_mut().zip(ktrow) {
                *d = *d + gv * kv;
            }
        }
    }
    (dk, db)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
/// Per-item partial kernel/bias gradients are reduced in item order, so
/// the result does not depend on the thread count.
pub fn conv2d_grad<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TensorError> {
    let (n, h, w, cin) = image_dims(input)?;
    let ks = kernel.shape()[0];
    let cout = kernel.shape()[3];
    let mut dinput = Tensor::zeros(input.shape().to_vec());
    let in_item = h * w * cin;
    let out_item = h * w * cout;

    // [ks, ks, cout, cin] view of the kernel for the input-gradient AXPYs.
    let mut kernel_t = vec![T::zero(); kernel.numel()];
    for tap in 0..ks * ks {
        let base = tap * cin * cout;
        for ci in 0..cin {
            for co in 0..cout {
                kernel_t[base + co * cin + ci] = kernel.data()[base + ci * cout + co];
            }
        }
    }

    let item = |din: &mut [T], inp: &[T], g: &[T]| -> (Vec<T>, Vec<T>) {
        if ks == 3 {
            conv3_grad_item(din, inp, g, h, w, cin, cout, &kernel_t)
        } else {
            conv1_grad_item(din, inp, g, h * w, cin, cout, &kernel_t)
        }
    };

    let partials: Vec<(Vec<T>, Vec<T>)> = if n > 1 {
        dinput
            .data_mut()
            .par_chunks_mut(in_item)
            .zip(input.data().par_chunks(in_item))
            .zip(grad_out.data().par_chunks(out_item))
            .map(|((din, inp), g)| item(din, inp, g))
            .collect()
    } else {
        vec![item(dinput.data_mut(), input.data(), grad_out.data())]
    };

    let mut dkernel = Tensor::zeros(kernel.shape().to_vec());
    let mut dbias = Tensor::zeros(vec![cout]);
    for (dk, db) in partials {
        for (a, b) in dkernel.data_mut().iter_mut().zip(&dk) {
            *a = *a + *b;
        }
        for (a, b) in dbias.data_mut().iter_mut().zip(&db) {
            *a = *a + *b;
        }
    }
    Ok((dinput, dkernel, dbias))
}

// ── Average pooling ─────────────────────────────────────────────────

/// Mean over disjoint 2x2 blocks; spatial extents must be even.
pub fn avgpool2<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (n, h, w, c) = image_dims(input)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::OddSpatial { height: h, width: w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut shape = input.shape().to_vec();
    let r = shape.len();
    shape[r - 3] = oh;
    shape[r - 2] = ow;
    let mut out = Tensor::zeros(shape);
    let quarter = elem::<T>(0.25);
    let (inp, o) = (input.data(), out.data_mut());
    for it in 0..n {
        let ibase = it * h * w * c;
        let obase = it * oh * ow * c;
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let p = |di: usize, dj: usize| inp[ibase + ((2 * i + di) * w + 2 * j + dj) * c + ch];
                    o[obase + (i * ow + j) * c + ch] =
                        (p(0, 0) + p(0, 1) + p(1, 0) + p(1, 1)) * quarter;
                }
            }
        }
    }
    Ok(out)
}

pub fn avgpool2_grad<T: Element>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dinput = Tensor::<T>::zeros(input_shape.to_vec());
    let (n, h, w, c) = image_dims(&dinput).expect("pool input shape already validated");
    let (oh, ow) = (h / 2, w / 2);
    let quarter = elem::<T>(0.25);
    let (g, d) = (grad_out.data(), dinput.data_mut());
    for it in 0..n {
        let ibase = it * h * w * c;
        let obase = it * oh * ow * c;
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let gv = g[obase + (i * ow + j) * c + ch] * quarter;
                    for di in 0..2 {
                        for dj in 0..2 {
                            d[ibase + ((2 * i + di) * w + 2 * j + dj) * c + ch] = gv;
                        }
                    }
                }
            }
        }
    }
    dinput
}

// ── Bilinear upsampling ─────────────────────────────────────────────

/// Source coordinate and blend weight for one output index under the
/// half-pixel-centers convention with clamped borders.
#[inline]
fn bilinear_axis(out_idx: usize, in_len: usize) -> (usize, usize, f64) {
    let src = (out_idx as f64 + 0.5) / 2.0 - 0.5;
    let floor = src.floor();
    let frac = src - floor;
    let lo = (floor.max(0.0) as usize).min(in_len - 1);
    let hi = ((floor + 1.0).max(0.0) as usize).min(in_len - 1);
    (lo, hi, frac)
}

/// Doubles both spatial extents by bilinear interpolation.
pub fn upsample_bilinear2<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (n, h, w, c) = image_dims(input)?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut shape = input.shape().to_vec();
    let r = shape.len();
    shape[r - 3] = oh;
    shape[r - 2] = ow;
    let mut out = Tensor::zeros(shape);
    let (inp, o) = (input.data(), out.data_mut());
    for it in 0..n {
        let ibase = it * h * w * c;
        let obase = it * oh * ow * c;
        for i in 0..oh {
            let (y0, y1, fy) = bilinear_axis(i, h);
            for j in 0..ow {
                let (x0, x1, fx) = bilinear_axis(j, w);
                let w00 = elem::<T>((1.0 - fy) * (1.0 - fx));
                let w01 = elem::<T>((1.0 - fy) * fx);
                let w10 = elem::<T>(fy * (1.0 - fx));
                let w11 = elem::<T>(fy * fx);
                for ch in 0..c {
                    let v = w00 * inp[ibase + (y0 * w + x0) * c + ch]
                        + w01 * inp[ibase + (y0 * w + x1) * c + ch]
                        + w10 * inp[ibase + (y1 * w + x0) * c + ch]
                        + w11 * inp[ibase + (y1 * w + x1) * c + ch];
                    o[obase + (i * ow + j) * c + ch] = v;
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample_bilinear2_grad<T: Element>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dinput = Tensor::<T>::zeros(input_shape.to_vec());
    let (n, h, w, c) = image_dims(&dinput).expect("upsample input shape already validated");
    let (oh, ow) = (2 * h, 2 * w);
    let (g, d) = (grad_out.data(), dinput.data_mut());
    for it in 0..n {
        let ibase = it * h * w * c;
        let obase = it * oh * ow * c;
        for i in 0..oh {
            let (y0, y1, fy) = bilinear_axis(i, h);
            for j in 0..ow {
                let (x0, x1, fx) = bilinear_axis(j, w);
                let w00 = elem::<T>((1.0 - fy) * (1.0 - fx));
                let w01 = elem::<T>((1.0 - fy) * fx);
                let w10 = elem::<T>(fy * (1.0 - fx));
                let w11 = elem::<T>(fy * fx);
                for ch in 0..c {
                    let gv = g[obase + (i * ow + j) * c + ch];
                    d[ibase + (y0 * w + x0) * c + ch] = d[ibase + (y0 * w + x0) * c + ch] + w00 * gv;
                    d[ibase + (y0 * w + x1) * c + ch] = d[ibase + (y0 * w + x1) * c + ch] + w01 * gv;
                    d[ibase + (y1 * w + x0) * c + ch] = d[ibase + (y1 * w + x0) * c + ch] + w10 * gv;
                    d[ibase + (y1 * w + x1) * c + ch] = d[ibase + (y1 * w + x1) * c + ch] + w11 * gv;
                }
            }
        }
    }
    dinput
}

// ── Channel concat ──────────────────────────────────────────────────

/// Channels of `a` precede channels of `b`; spatial shapes must agree.
pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (na, h, w, ca) = image_dims(a)?;
    let (nb, hb, wb, cb) = image_dims(b)?;
    if na != nb || h != hb || w != wb || a.shape().len() != b.shape().len() {
        return Err(TensorError::SpatialMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(with_channels(a.shape(), ca + cb));
    let o = out.data_mut();
    let cells = na * h * w;
    for cell in 0..cells {
        o[cell * (ca + cb)..][..ca].copy_from_slice(&a.data()[cell * ca..][..ca]);
        o[cell * (ca + cb) + ca..][..cb].copy_from_slice(&b.data()[cell * cb..][..cb]);
    }
    Ok(out)
}

/// Splits a concat gradient back into the two operand shapes.
pub fn concat_channels_grad<T: Element>(
    a_shape: &[usize],
    b_shape: &[usize],
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let mut da = Tensor::<T>::zeros(a_shape.to_vec());
    let mut db = Tensor::<T>::zeros(b_shape.to_vec());
    let ca = *a_shape.last().unwrap();
    let cb = *b_shape.last().unwrap();
    let cells = grad_out.numel() / (ca + cb);
    let g = grad_out.data();
    for cell in 0..cells {
        da.data_mut()[cell * ca..][..ca].copy_from_slice(&g[cell * (ca + cb)..][..ca]);
        db.data_mut()[cell * cb..][..cb].copy_from_slice(&g[cell * (ca + cb) + ca..][..cb]);
    }
    (da, db)
}

// ── Pointwise ops ───────────────────────────────────────────────────

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Elementwise x * sigmoid(x).
pub fn swish<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| x * sigmoid(x))
}

pub fn swish_grad<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    input
        .zip_map(grad_out, |x, g| {
            let s = sigmoid(x);
            g * (s * (T::one() + x * (T::one() - s)))
        })
        .expect("swish grad shape matches input")
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    a.zip_map(b, |x, y| x + y)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    a.zip_map(b, |x, y| x * y)
}

// ── Vector-matrix affine ────────────────────────────────────────────

/// `out[m] = bias[m] + sum_n input[n] * weight[n, m]`.
pub fn affine<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let n = match *input.shape() {
        [n] => n,
        _ => return Err(TensorError::BadRank { expected: "rank-1 vector", got: input.shape().to_vec() }),
    };
    let (wn, m) = match *weight.shape() {
        [wn, m] => (wn, m),
        _ => return Err(TensorError::BadRank { expected: "rank-2 matrix", got: weight.shape().to_vec() }),
    };
    if wn != n || bias.shape() != [m] {
        return Err(TensorError::DimMismatch {
            input: input.shape().to_vec(),
            weight: weight.shape().to_vec(),
        });
    }
    let mut out = bias.clone();
    let o = out.data_mut();
    for (i, &v) in input.data().iter().enumerate() {
        let wrow = &weight.data()[i * m..][..m];
        for (ov, &wv) in o.iter_mut().zip(wrow) {
            *ov = *ov + v * wv;
        }
    }
    Ok(out)
}

pub fn affine_grad<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = input.numel();
    let m = grad_out.numel();
    let mut dinput = Tensor::<T>::zeros(vec![n]);
    let mut dweight = Tensor::<T>::zeros(vec![n, m]);
    let g = grad_out.data();
    for i in 0..n {
        let wrow = &weight.data()[i * m..][..m];
        let dwrow = &mut dweight.data_mut()[i * m..][..m];
        let v = input.data()[i];
        let mut acc = T::zero();
        for ((dw, &wv), &gv) in dwrow.iter_mut().zip(wrow).zip(g) {
            *dw = v * gv;
            acc = acc + wv * gv;
        }
        dinput.data_mut()[i] = acc;
    }
    (dinput, dweight, grad_out.clone())
}

// ── Mean absolute error ─────────────────────────────────────────────

/// Mean over all elements of |pred - target|, as a `[1]` tensor.
pub fn mean_abs<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let mut acc = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        acc += (p - t).abs().to_f64().unwrap();
    }
    Ok(Tensor::scalar(elem(acc / pred.numel() as f64)))
}

/// Subgradient of [`mean_abs`]; sign(0) is taken as 0.
pub fn mean_abs_grad<T: Element>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    upstream: T,
) -> (Tensor<T>, Tensor<T>) {
    let scale = upstream * elem::<T>(1.0 / pred.numel() as f64);
    let dpred = pred
        .zip_map(target, |p, t| {
            let d = p - t;
            if d > T::zero() {
                scale
            } else if d < T::zero() {
                -scale
            } else {
                T::zero()
            }
        })
        .expect("mean_abs grad shapes already validated");
    let dtarget = dpred.map(|x| -x);
    (dpred, dtarget)
}

// ── Feature normalization ───────────────────────────────────────────

/// Per-channel mean and biased variance over all non-channel axes,
/// accumulated in f64 for stability.
pub fn batch_moments<T: Element>(input: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let c = *input.shape().last().expect("image tensor has channels");
    let rows = input.numel() / c;
    let mut mean = vec![0.0f64; c];
    for row in input.data().chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v.to_f64().unwrap();
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    let mut var = vec![0.0f64; c];
    for row in input.data().chunks_exact(c) {
        for ((vv, &x), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = x.to_f64().unwrap() - m;
            *vv += d * d;
        }
    }
    for v in &mut var {
        *v /= rows as f64;
    }
    (mean.into_iter().map(elem).collect(), var.into_iter().map(elem).collect())
}

/// `scale[c] * (x - mean[c]) / sqrt(var[c] + NORM_EPS)`, no learned shift.
pub fn batch_norm<T: Element>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    mean: &[T],
    var: &[T],
) -> Tensor<T> {
    let c = *input.shape().last().unwrap();
    debug_assert_eq!(scale.numel(), c);
    let coef: Vec<T> = scale
        .data()
        .iter()
        .zip(var)
        .map(|(&s, &v)| s * elem::<T>(1.0 / (v.to_f64().unwrap() + NORM_EPS).sqrt()))
        .collect();
    let mut out = Tensor::zeros(input.shape().to_vec());
    for (orow, irow) in out.data_mut().chunks_exact_mut(c).zip(input.data().chunks_exact(c)) {
        for (((o, &x), &m), &k) in orow.iter_mut().zip(irow).zip(mean).zip(&coef) {
            *o = (x - m) * k;
        }
    }
    out
}

/// Backward pass of [`batch_norm`]. When `stats_from_batch` the saved mean
/// and variance are functions of the input (training mode) and their
/// dependence is differentiated through; otherwise they are constants.
pub fn batch_norm_grad<T: Element>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    mean: &[T],
    var: &[T],
    stats_from_batch: bool,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let c = *input.shape().last().unwrap();
    let rows = input.numel() / c;
    let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v.to_f64().unwrap() + NORM_EPS).sqrt()).collect();

    // Channelwise sums, accumulated in f64 in element order.
    let mut sum_g_xhat = vec![0.0f64; c];
    let mut sum_dxhat = vec![0.0f64; c];
    let mut sum_dxhat_xc = vec![0.0f64; c];
    let mut sum_xc = vec![0.0f64; c];
    for (irow, grow) in input.data().chunks_exact(c).zip(grad_out.data().chunks_exact(c)) {
        for ch in 0..c {
            let xc = irow[ch].to_f64().unwrap() - mean[ch].to_f64().unwrap();
            let g = grow[ch].to_f64().unwrap();
            let dxhat = g * scale.data()[ch].to_f64().unwrap();
            sum_g_xhat[ch] += g * xc * inv[ch];
            sum_dxhat[ch] += dxhat;
            sum_dxhat_xc[ch] += dxhat * xc;
            sum_xc[ch] += xc;
        }
    }

    let mut dscale = Tensor::<T>::zeros(vec![c]);
    for (d, s) in dscale.data_mut().iter_mut().zip(&sum_g_xhat) {
        *d = elem(*s);
    }

    let mut dinput = Tensor::<T>::zeros(input.shape().to_vec());
    if stats_from_batch {
        let m = rows as f64;
        let dvar: Vec<f64> = (0..c)
            .map(|ch| sum_dxhat_xc[ch] * -0.5 * inv[ch] * inv[ch] * inv[ch])
            .collect();
        let dmean: Vec<f64> = (0..c)
            .map(|ch| -inv[ch] * sum_dxhat[ch] + dvar[ch] * (-2.0 / m) * sum_xc[ch])
            .collect();
        for ((drow, irow), grow) in dinput
            .data_mut()
            .chunks_exact_mut(c)
            .zip(input.data().chunks_exact(c))
            .zip(grad_out.data().chunks_exact(c))
        {
            for ch in 0..c {
                let xc = irow[ch].to_f64().unwrap() - mean[ch].to_f64().unwrap();
                let dxhat = grow[ch].to_f64().unwrap() * scale.data()[ch].to_f64().unwrap();
                drow[ch] = elem(dxhat * inv[ch] + dvar[ch] * 2.0 * xc / m + dmean[ch] / m);
            }
        }
    } else {
        for (drow, grow) in dinput.data_mut().chunks_exact_mut(c).zip(grad_out.data().chunks_exact(c)) {
            for ch in 0..c {
                let dxhat = grow[ch].to_f64().unwrap() * scale.data()[ch].to_f64().unwrap();
                drow[ch] = elem(dxhat * inv[ch]);
            }
        }
    }
    (dinput, dscale)
}
