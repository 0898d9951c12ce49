//! Raw forward/backward loops. Shapes are validated by the graph before these
//! are called.

use alloc::vec;
use alloc::vec::Vec;

use crate::Real;

/// Dot product with eight independent accumulators so the loop vectorizes;
/// the summation order is fixed, so results are reproducible.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik != T::zero() {
                axpy(aik, &b[kk * n..(kk + 1) * n], crow);
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` with `a[k×m]`, `b[k×n]`.
pub(crate) fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a[kk * m + i];
            if aki != T::zero() {
                axpy(aki, brow, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` with `a[m×k]`, `b[n×k]`.
pub(crate) fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.cols();
    let mut r = 0;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut col[r * cols..(r + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
                r += 1;
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cols = g.cols();
    let mut r = 0;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &col[r * cols..(r + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); g.n * g.f * cols];
    let mut col = vec![T::zero(); rows * cols];
    for n in 0..g.n {
        im2col(&x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w], g, &mut col);
        let o = &mut out[n * g.f * cols..(n + 1) * g.f * cols];
        for (f, bias) in b.iter().enumerate() {
            o[f * cols..(f + 1) * cols].fill(*bias);
        }
        gemm_nn(g.f, rows, cols, w, &col, o);
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (rows, cols) = (g.rows(), g.cols());
    let in_len = g.c * g.h * g.w;
    let mut dw = vec![T::zero(); g.f * rows];
    let mut db = vec![T::zero(); g.f];
    let mut dx = if need_dx { Some(vec![T::zero(); g.n * in_len]) } else { None };
    let mut col = vec![T::zero(); rows * cols];
    let mut dcol = if need_dx { vec![T::zero(); rows * cols] } else { Vec::new() };
    for n in 0..g.n {
        let d = &dout[n * g.f * cols..(n + 1) * g.f * cols];
        for (f, dbf) in db.iter_mut().enumerate() {
            *dbf += d[f * cols..(f + 1) * cols].iter().copied().sum::<T>();
        }
        im2col(&x[n * in_len..(n + 1) * in_len], g, &mut col);
        gemm_nt(g.f, cols, rows, d, &col, &mut dw);
        if let Some(dx) = dx.as_mut() {
            dcol.fill(T::zero());
            gemm_tn(rows, g.f, cols, w, d, &mut dcol);
            col2im(&dcol, g, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    (dx, dw, db)
}

/// Max pooling without padding; ties resolve to the first element in
/// row-major window order. Returns pooled values and flat argmax indices.
pub(crate) fn maxpool_forward<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
) -> (Vec<T>, Vec<usize>) {
    let ho = (h - k) / s + 1;
    let wo = (w - k) / s + 1;
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * s * w + ox * s;
                let mut bv = x[best];
                for ki in 0..k {
                    let row = base + (oy * s + ki) * w + ox * s;
                    for kj in 0..k {
                        let v = x[row + kj];
                        if v > bv {
                            bv = v;
                            best = row + kj;
                        }
                    }
                }
                out.push(bv);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Cached per-channel quantities for the batchnorm backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

/// Returns `(y, cache, batch_mean, batch_var)`; batch statistics are biased.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_forward<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
    eps: T,
) -> (Vec<T>, BnCache<T>, Vec<T>, Vec<T>) {
    let m = T::from_usize(n * hw);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    match running {
        Some((rm, rv)) => {
            mean.copy_from_slice(rm);
            var.copy_from_slice(rv);
        }
        None => {
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                }
                let mu = s / m;
                let mut v = T::zero();
                for b in 0..n {
                    for &xi in &x[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        v += (xi - mu) * (xi - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = v / m;
            }
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for ((xh, yo), &xi) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&x[r]) {
                *xh = (xi - mean[ch]) * inv_std[ch];
                *yo = gamma[ch] * *xh + beta[ch];
            }
        }
    }
    (y, BnCache { xhat, inv_std, train: running.is_none() }, mean, var)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batchnorm_backward<T: Real>(
    dy: &[T],
    cache: &BnCache<T>,
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            dbeta[ch] += dy[r.clone()].iter().copied().sum::<T>();
            dgamma[ch] += dot(&dy[r.clone()], &cache.xhat[r]);
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    let m = T::from_usize(n * hw);
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let k = gamma[ch] * cache.inv_std[ch];
            if cache.train {
                for ((d, &g), &xh) in dx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&cache.xhat[r]) {
                    *d = k / m * (m * g - dbeta[ch] - xh * dgamma[ch]);
                }
            } else {
                for (d, &g) in dx[r.clone()].iter_mut().zip(&dy[r]) {
                    *d = k * g;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn linear_forward<T: Real>(a: &[T], w: &[T], b: &[T], n: usize, d: usize, o: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * o];
    for i in 0..n {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..o {
            out[i * o + j] = dot(ai, &w[j * d..(j + 1) * d]) + b[j];
        }
    }
    out
}

/// Returns `(da, dw, db)`; `da` only when requested.
pub(crate) fn linear_backward<T: Real>(
    a: &[T],
    w: &[T],
    dout: &[T],
    n: usize,
    d: usize,
    o: usize,
    need_da: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); o * d];
    let mut db = vec![T::zero(); o];
    let mut da = if need_da { Some(vec![T::zero(); n * d]) } else { None };
    for i in 0..n {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..o {
            let g = dout[i * o + j];
            db[j] += g;
            axpy(g, ai, &mut dw[j * d..(j + 1) * d]);
            if let Some(da) = da.as_mut() {
                axpy(g, &w[j * d..(j + 1) * d], &mut da[i * d..(i + 1) * d]);
            }
        }
    }
    (da, dw, db)
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows<T: Real>(x: &[T], k: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (xr, yr) in x.chunks_exact(k).zip(y.chunks_exact_mut(k)) {
        let mx = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (yo, &xi) in yr.iter_mut().zip(xr) {
            *yo = (xi - mx).exp();
            s += *yo;
        }
        for yo in yr.iter_mut() {
            *yo /= s;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    naive[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        // aᵀ stored as k×m
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, &mut c2);
        // bᵀ stored as n×k
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut c3 = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut c3);
        for i in 0..m * n {
            assert!((c[i] - naive[i]).abs() < 1e-12);
            assert!((c2[i] - naive[i]).abs() < 1e-12);
            assert!((c3[i] - naive[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (0..19).map(|i| i as f64).collect();
        let want: f64 = a.iter().map(|v| v * v).sum();
        assert_eq!(dot(&a, &a), want);
    }
}
