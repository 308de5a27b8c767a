//! Single-instance layer kernels (`C x H x W` buffers) with hand-written backward passes.

use crate::scalar::Scalar;

/// Unfolds a 3x3, pad-1 neighbourhood: rows `ci*9 + ky*3 + kx`, columns `y*w + x`.
pub(crate) fn im2col3<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut Vec<T>) {
    let hw = h * w;
    cols.clear();
    cols.resize(c * 9 * hw, T::zero());
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    // shift by kx - 1 with zero fill at the border
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: accumulates column gradients back onto the input.
pub(crate) fn col2im3<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, &s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, &s)| *d += s),
                    }
                }
            }
        }
    }
}

/// 3x3 same-padded convolution. `weight` is `co x (ci*9)`.
pub(crate) fn conv3_forward<T: Scalar>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    co: usize,
    scratch: &mut Vec<T>,
) -> Vec<T> {
    let hw = h * w;
    im2col3(x, ci, h, w, scratch);
    let mut out = vec![T::zero(); co * hw];
    for (o, &b) in out.chunks_mut(hw).zip(bias) {
        o.iter_mut().for_each(|v| *v = b);
    }
    T::gemm(co, ci * 9, hw, weight, (ci * 9, 1), scratch, (hw, 1), T::one(), &mut out);
    out
}

/// Accumulates weight/bias gradients; returns the input gradient when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3_backward<T: Scalar>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    weight: &[T],
    co: usize,
    d_out: &[T],
    d_weight: &mut [T],
    d_bias: &mut [T],
    need_dx: bool,
    scratch: &mut Vec<T>,
) -> Option<Vec<T>> {
    let hw = h * w;
    let k = ci * 9;
    for (db, row) in d_bias.iter_mut().zip(d_out.chunks(hw)) {
        *db += row.iter().copied().sum::<T>();
    }
    im2col3(x, ci, h, w, scratch);
    // dW (co x k) += dOut (co x hw) * cols^T (hw x k)
    T::gemm(co, hw, k, d_out, (hw, 1), scratch, (1, hw), T::one(), d_weight);
    if !need_dx {
        return None;
    }
    // dCols (k x hw) = W^T (k x co) * dOut (co x hw)
    T::gemm(k, co, hw, weight, (1, k), d_out, (hw, 1), T::zero(), scratch);
    let mut dx = vec![T::zero(); ci * hw];
    col2im3(scratch, ci, h, w, &mut dx);
    Some(dx)
}

/// 1x1 convolution. `weight` is `co x ci`.
pub(crate) fn conv1_forward<T: Scalar>(x: &[T], ci: usize, hw: usize, weight: &[T], bias: &[T], co: usize) -> Vec<T> {
    let mut out = vec![T::zero(); co * hw];
    for (o, &b) in out.chunks_mut(hw).zip(bias) {
        o.iter_mut().for_each(|v| *v = b);
    }
    T::gemm(co, ci, hw, weight, (ci, 1), x, (hw, 1), T::one(), &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1_backward<T: Scalar>(
    x: &[T],
    ci: usize,
    hw: usize,
    weight: &[T],
    co: usize,
    d_out: &[T],
    d_weight: &mut [T],
    d_bias: &mut [T],
) -> Vec<T> {
    for (db, row) in d_bias.iter_mut().zip(d_out.chunks(hw)) {
        *db += row.iter().copied().sum::<T>();
    }
    T::gemm(co, hw, ci, d_out, (hw, 1), x, (1, hw), T::one(), d_weight);
    let mut dx = vec![T::zero(); ci * hw];
    T::gemm(ci, co, hw, weight, (1, ci), d_out, (hw, 1), T::zero(), &mut dx);
    dx
}

/// 2x2 stride-2 transposed convolution. `weight` is `(co*4) x ci`, row `co*4 + dy*2 + dx`.
pub(crate) fn tconv2_forward<T: Scalar>(x: &[T], ci: usize, h: usize, w: usize, weight: &[T], bias: &[T], co: usize) -> Vec<T> {
    let hw = h * w;
    let mut z = vec![T::zero(); co * 4 * hw];
    T::gemm(co * 4, ci, hw, weight, (ci, 1), x, (hw, 1), T::zero(), &mut z);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); co * oh * ow];
    for c in 0..co {
        for d in 0..4 {
            let (dy, dx) = (d / 2, d % 2);
            let zr = &z[(c * 4 + d) * hw..][..hw];
            for y in 0..h {
                for x_ in 0..w {
                    out[(c * oh + 2 * y + dy) * ow + 2 * x_ + dx] = zr[y * w + x_] + bias[c];
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn tconv2_backward<T: Scalar>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    weight: &[T],
    co: usize,
    d_out: &[T],
    d_weight: &mut [T],
    d_bias: &mut [T],
) -> Vec<T> {
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dz = vec![T::zero(); co * 4 * hw];
    for c in 0..co {
        d_bias[c] += d_out[c * oh * ow..(c + 1) * oh * ow].iter().copied().sum::<T>();
        for d in 0..4 {
            let (dy, dx) = (d / 2, d % 2);
            let zr = &mut dz[(c * 4 + d) * hw..][..hw];
            for y in 0..h {
                for x_ in 0..w {
                    zr[y * w + x_] = d_out[(c * oh + 2 * y + dy) * ow + 2 * x_ + dx];
                }
            }
        }
    }
    T::gemm(co * 4, hw, ci, &dz, (hw, 1), x, (1, hw), T::one(), d_weight);
    let mut d_x = vec![T::zero(); ci * hw];
    T::gemm(ci, co * 4, hw, weight, (1, ci), &dz, (hw, 1), T::zero(), &mut d_x);
    d_x
}

pub(crate) fn relu_inplace<T: Scalar>(x: &mut [T]) {
    x.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub(crate) fn relu_backward_inplace<T: Scalar>(out: &[T], grad: &mut [T]) {
    grad.iter_mut().zip(out).for_each(|(g, &o)| {
        if o <= T::zero() {
            *g = T::zero()
        }
    });
}

/// 2x2 max pool; also returns the winning offset (`dy*2 + dx`) per output cell.
pub(crate) fn maxpool2_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u8>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for y in 0..oh {
            for x_ in 0..ow {
                let mut best = 0u8;
                let mut bv = plane[2 * y * w + 2 * x_];
                for d in 1..4u8 {
                    let v = plane[(2 * y + (d as usize) / 2) * w + 2 * x_ + (d as usize) % 2];
                    if v > bv {
                        bv = v;
                        best = d;
                    }
                }
                out.push(bv);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

pub(crate) fn maxpool2_backward<T: Scalar>(d_out: &[T], idx: &[u8], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    for ci in 0..c {
        for y in 0..oh {
            for x_ in 0..ow {
                let o = (ci * oh + y) * ow + x_;
                let d = idx[o] as usize;
                dx[(ci * h + 2 * y + d / 2) * w + 2 * x_ + d % 2] += d_out[o];
            }
        }
    }
}

/// Softmax over `k` class planes of `hw` pixels each.
pub(crate) fn softmax_classes<T: Scalar>(logits: &[T], k: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * hw];
    for p in 0..hw {
        let mut mx = logits[p];
        for c in 1..k {
            mx = mx.max(logits[c * hw + p]);
        }
        let mut s = T::zero();
        for c in 0..k {
            let e = (logits[c * hw + p] - mx).exp();
            out[c * hw + p] = e;
            s += e;
        }
        for c in 0..k {
            out[c * hw + p] /= s;
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(probs: &[T], d_probs: &[T], k: usize, hw: usize) -> Vec<T> {
    let mut dz = vec![T::zero(); k * hw];
    for p in 0..hw {
        let mut dot = T::zero();
        for c in 0..k {
            dot += probs[c * hw + p] * d_probs[c * hw + p];
        }
        for c in 0..k {
            dz[c * hw + p] = probs[c * hw + p] * (d_probs[c * hw + p] - dot);
        }
    }
    dz
}
