//! Direct kernels for stride-1, same-padded square convolutions.
//!
//! Narrow convolutions (few output channels) are bandwidth bound under
//! im2col + GEMM because every unrolled element feeds only a handful of
//! multiply-adds. These loops keep a block of output channels in registers
//! and read the input in place instead. Work is split per image and partial
//! weight gradients are summed in image order, so results do not depend on
//! the number of threads.

use crate::parallel;
use crate::tensor::{Scalar, Shape4};

/// Output channels accumulated together in registers; narrow layers use half.
const LANES: usize = 8;
const NARROW_LANES: usize = 4;
/// Input channels accumulated together in the weight-gradient loop.
const CI_BLOCK: usize = 4;

fn padded<const L: usize>(c: usize) -> usize {
    c.div_ceil(L) * L
}

/// Copies `rows x cols` row-major data into rows of width `padded(cols)`.
fn pad_columns<F: Scalar, const L: usize>(src: &[F], rows: usize, cols: usize) -> Vec<F> {
    let cp = padded::<L>(cols);
    let mut out = vec![F::zero(); rows * cp];
    for (dst, row) in out.chunks_exact_mut(cp).zip(src.chunks_exact(cols)) {
        dst[..cols].copy_from_slice(row);
    }
    out
}

/// Taps `t` in `0..k` for which `pos + t - pad` lies in `0..len`.
fn valid_taps(pos: usize, len: usize, k: usize, pad: usize) -> std::ops::Range<usize> {
    pad.saturating_sub(pos)..k.min(len + pad - pos)
}

/// `acc += sum_i x[i] * w[i, cb..cb + LANES]` where `w` has rows of width `cp`.
///
/// Kept out of line: inlined into the surrounding loops it no longer vectorises.
#[inline(never)]
fn dot_lanes<F: Scalar, const L: usize>(mut acc: [F; L], x: &[F], w: &[F], cp: usize, cb: usize) -> [F; L] {
    for (&xv, wv) in x.iter().zip(w.chunks_exact(cp)) {
        let wv: &[F; L] = wv[cb..cb + L].try_into().expect("lane block");
        for l in 0..L {
            acc[l] = acc[l] + xv * wv[l];
        }
    }
    acc
}

/// `acc[i] += sum_p x[p, cib + i] * g[p, cb..cb + LANES]` over matching pixel rows.
#[inline(never)]
fn outer_lanes<F: Scalar, const L: usize>(
    mut acc: [[F; L]; CI_BLOCK],
    x: &[F],
    g: &[F],
    cinp: usize,
    cp: usize,
    cib: usize,
    cb: usize,
) -> [[F; L]; CI_BLOCK] {
    for (gv, xv) in g.chunks_exact(cp).zip(x.chunks_exact(cinp)) {
        let gv: &[F; L] = gv[cb..cb + L].try_into().expect("lane block");
        let xv: &[F; CI_BLOCK] = xv[cib..cib + CI_BLOCK].try_into().expect("channel block");
        for i in 0..CI_BLOCK {
            for l in 0..L {
                acc[i][l] = acc[i][l] + xv[i] * gv[l];
            }
        }
    }
    acc
}

/// `out[n, y, x, co] = bias[co] + sum x[n, y+ky-p, x+kx-p, ci] * w[ky, kx, ci, co]`.
pub(crate) fn forward<F: Scalar>(x: &[F], s: Shape4, w: &[F], k: usize, cout: usize, bias: &[F]) -> Vec<F> {
    if cout <= NARROW_LANES {
        forward_lanes::<F, NARROW_LANES>(x, s, w, k, cout, bias)
    } else {
        forward_lanes::<F, LANES>(x, s, w, k, cout, bias)
    }
}

fn forward_lanes<F: Scalar, const L: usize>(x: &[F], s: Shape4, w: &[F], k: usize, cout: usize, bias: &[F]) -> Vec<F> {
    let (h, wd, cin) = (s.h, s.w, s.c);
    let pad = (k - 1) / 2;
    let cp = padded::<L>(cout);
    let wp = pad_columns::<F, L>(w, k * k * cin, cout);
    let per_image = h * wd * cin;
    let outs = parallel::map((0..s.n).collect(), |n| {
        let xi = &x[n * per_image..(n + 1) * per_image];
        let mut out = Vec::with_capacity(h * wd * cout);
        for y in 0..h {
            let kys = valid_taps(y, h, k, pad);
            for xx in 0..wd {
                let kxs = valid_taps(xx, wd, k, pad);
                for cb in (0..cp).step_by(L) {
                    let mut acc = [F::zero(); L];
                    for ky in kys.clone() {
                        let iy = y + ky - pad;
                        let row_start = (iy * wd + xx + kxs.start - pad) * cin;
                        let xrow = &xi[row_start..row_start + kxs.len() * cin];
                        let wrow = &wp[(ky * k + kxs.start) * cin * cp..(ky * k + kxs.end) * cin * cp];
                        acc = dot_lanes(acc, xrow, wrow, cp, cb);
                    }
                    let take = L.min(cout - cb);
                    out.extend(acc[..take].iter().zip(&bias[cb..cb + take]).map(|(&a, &b)| a + b));
                }
            }
        }
        out
    });
    outs.concat()
}

/// Input gradient: a same convolution of `dy` with the spatially flipped,
/// channel-transposed kernel.
pub(crate) fn input_grad<F: Scalar>(dy: &[F], s: Shape4, w: &[F], k: usize, cin: usize) -> Vec<F> {
    let cout = s.c;
    let mut flipped = vec![F::zero(); w.len()];
    for ky in 0..k {
        for kx in 0..k {
            let src = ((k - 1 - ky) * k + (k - 1 - kx)) * cin * cout;
            let dst = (ky * k + kx) * cout * cin;
            for ci in 0..cin {
                for co in 0..cout {
                    flipped[dst + co * cin + ci] = w[src + ci * cout + co];
                }
            }
        }
    }
    forward(dy, s, &flipped, k, cin, &vec![F::zero(); cin])
}

/// `dw[ky, kx, ci, co] = sum over n, y, x of x[n, y+ky-p, x+kx-p, ci] * dy[n, y, x, co]`.
pub(crate) fn weight_grad<F: Scalar>(x: &[F], s: Shape4, dy: &[F], k: usize, cout: usize) -> Vec<F> {
    if cout <= NARROW_LANES {
        weight_grad_lanes::<F, NARROW_LANES>(x, s, dy, k, cout)
    } else {
        weight_grad_lanes::<F, LANES>(x, s, dy, k, cout)
    }
}

fn weight_grad_lanes<F: Scalar, const L: usize>(x: &[F], s: Shape4, dy: &[F], k: usize, cout: usize) -> Vec<F> {
    let (h, wd, cin) = (s.h, s.w, s.c);
    let pad = (k - 1) / 2;
    let cp = padded::<L>(cout);
    let cinp = cin.div_ceil(CI_BLOCK) * CI_BLOCK;
    let per_image = h * wd * cin;
    let per_grad = h * wd * cout;
    let parts = parallel::map((0..s.n).collect(), |n| {
        let mut xi = vec![F::zero(); h * wd * cinp];
        for (dst, src) in xi.chunks_exact_mut(cinp).zip(x[n * per_image..(n + 1) * per_image].chunks_exact(cin)) {
            dst[..cin].copy_from_slice(src);
        }
        let dyi = pad_columns::<F, L>(&dy[n * per_grad..(n + 1) * per_grad], h * wd, cout);
        let mut dw = vec![F::zero(); k * k * cinp * cp];
        for ky in 0..k {
            // output rows whose tap ky lands inside the input
            let ys = pad.saturating_sub(ky)..h.min((h + pad).saturating_sub(ky));
            for kx in 0..k {
                let xs = pad.saturating_sub(kx)..wd.min((wd + pad).saturating_sub(kx));
                if ys.is_empty() || xs.is_empty() {
                    continue;
                }
                let tap = &mut dw[(ky * k + kx) * cinp * cp..(ky * k + kx + 1) * cinp * cp];
                for cib in (0..cinp).step_by(CI_BLOCK) {
                    for cb in (0..cp).step_by(L) {
                        let mut acc = [[F::zero(); L]; CI_BLOCK];
                        for y in ys.clone() {
                            let iy = y + ky - pad;
                            let first = iy * wd + xs.start + kx - pad;
                            let in_rows = &xi[first * cinp..(first + xs.len()) * cinp];
                            let dy_rows = &dyi[(y * wd + xs.start) * cp..(y * wd + xs.end) * cp];
                            acc = outer_lanes(acc, in_rows, dy_rows, cinp, cp, cib, cb);
                        }
                        for (i, row) in acc.iter().enumerate() {
                            let at = (cib + i) * cp + cb;
                            tap[at..at + L].copy_from_slice(row);
                        }
                    }
                }
            }
        }
        dw
    });
    let mut total = vec![F::zero(); k * k * cinp * cp];
    for part in parts {
        total.iter_mut().zip(&part).for_each(|(a, &b)| *a = *a + b);
    }
    let mut out = Vec::with_capacity(k * k * cin * cout);
    for tap in total.chunks_exact(cinp * cp) {
        for row in tap.chunks_exact(cp).take(cin) {
            out.extend_from_slice(&row[..cout]);
        }
    }
    out
}
