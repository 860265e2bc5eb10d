//! Raw numeric kernels shared by the graph ops and the value-level APIs.

use std::cmp::Ordering;

/// `c = a · b + beta · c` for row-major `a: m×k`, `b: k×n`, `c: m×n`, with
/// optional transposition of either operand.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // stored a is (k×m) when transposed, b is (n×k)
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are sized for the given dimensions and strides
    // (checked by the debug assertions above and by every caller), and `c`
    // does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds a `channels×h×w` image into `(channels·k·k) × (h·w)` columns for
/// a `k×k` stride-1 convolution with zero "same" padding.
pub fn im2col(input: &[f64], channels: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; channels * k * k * hw];
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for x in x_lo..x_hi {
                        dst_row[x] = src_row[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back onto the image.
pub fn col2im(cols: &[f64], channels: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut out = vec![0.0; channels * hw];
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &src[y * w..(y + 1) * w];
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for x in x_lo..x_hi {
                        dst_row[(x as isize + dx) as usize] += src_row[x];
                    }
                }
            }
        }
    }
    out
}

/// 2×2 mean pooling with stride 2 over `channels×h×w`.
pub fn mean_pool2(input: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        let src = &input[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for y in 0..oh {
            let r0 = &src[2 * y * w..(2 * y + 1) * w];
            let r1 = &src[(2 * y + 1) * w..(2 * y + 2) * w];
            for x in 0..ow {
                dst[y * ow + x] = 0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
            }
        }
    }
    out
}

pub fn mean_pool2_backward(grad: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; channels * h * w];
    for c in 0..channels {
        let g = &grad[c * oh * ow..(c + 1) * oh * ow];
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let v = 0.25 * g[y * ow + x];
                dst[2 * y * w + 2 * x] = v;
                dst[2 * y * w + 2 * x + 1] = v;
                dst[(2 * y + 1) * w + 2 * x] = v;
                dst[(2 * y + 1) * w + 2 * x + 1] = v;
            }
        }
    }
    out
}

/// Linear interpolation taps `(lo, hi, frac)` for resampling `src` points onto
/// `dst` points with aligned corners.
pub fn align_corner_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear resampling of an `h×w` map to `oh×ow` with aligned corners.
pub fn bilinear(input: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = align_corner_taps(h, oh);
    let tx = align_corner_taps(w, ow);
    let mut out = vec![0.0; oh * ow];
    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
            let top = input[y0 * w + x0] * (1.0 - fx) + input[y0 * w + x1] * fx;
            let bottom = input[y1 * w + x0] * (1.0 - fx) + input[y1 * w + x1] * fx;
            out[y * ow + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Adjoint of [`bilinear`].
pub fn bilinear_backward(grad: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = align_corner_taps(h, oh);
    let tx = align_corner_taps(w, ow);
    let mut out = vec![0.0; h * w];
    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
            let g = grad[y * ow + x];
            out[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
            out[y0 * w + x1] += g * (1.0 - fy) * fx;
            out[y1 * w + x0] += g * fy * (1.0 - fx);
            out[y1 * w + x1] += g * fy * fx;
        }
    }
    out
}

/// Indices of the `k` largest (`top = true`) or smallest values. Equal values
/// are ordered by lowest index first.
pub fn select_indices(values: &[f64], k: usize, top: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = values[a].total_cmp(&values[b]);
        let ord = if top { ord.reverse() } else { ord };
        match ord {
            Ordering::Equal => a.cmp(&b),
            o => o,
        }
    });
    idx.truncate(k);
    idx
}

/// Positions of the minimum and maximum (lowest index on ties).
pub fn argmin_argmax(values: &[f64]) -> (usize, usize) {
    let (mut lo, mut hi) = (0, 0);
    for (i, &v) in values.iter().enumerate() {
        if v < values[lo] {
            lo = i;
        }
        if v > values[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![1.0; m * n];
        gemm(m, k, n, &a, false, &b, false, 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // transposed operands: a stored k×m, b stored n×k
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, 0.0, &mut c2);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, k) = (2, 4, 5, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).cos()).collect();
        let y: Vec<f64> = (0..c * k * k * h * w).map(|i| (i as f64 * 0.11).sin()).collect();
        let lhs: f64 = im2col(&x, c, h, w, k).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = col2im(&y, c, h, w, k).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        let (h, w, oh, ow) = (3, 2, 7, 5);
        let x: Vec<f64> = (0..h * w).map(|i| i as f64 - 1.5).collect();
        let g: Vec<f64> = (0..oh * ow).map(|i| (i as f64 * 0.3).sin()).collect();
        let lhs: f64 = bilinear(&x, h, w, oh, ow).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = bilinear_backward(&g, h, w, oh, ow).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn selection_ties_prefer_lowest_index() {
        assert_eq!(select_indices(&[5.0, 5.0, 1.0], 1, true), vec![0]);
        assert_eq!(select_indices(&[1.0, 0.0, 0.0], 2, false), vec![1, 2]);
        assert_eq!(select_indices(&[1.0, 2.0, 3.0, 4.0], 2, true), vec![3, 2]);
        assert_eq!(argmin_argmax(&[2.0, 1.0, 3.0, 1.0, 3.0]), (1, 2));
    }
}
