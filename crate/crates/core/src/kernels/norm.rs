//! Softmax and mean/variance normalisation along one axis of a tensor viewed
//! as `outer x axis x inner`.

use crate::tensor::Float;

pub fn softmax_forward<T: Float>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    if inner == 1 {
        for (yr, xr) in y.chunks_exact_mut(n).zip(x.chunks_exact(n)) {
            let m = xr.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for (y, &v) in yr.iter_mut().zip(xr) {
                *y = (v - m).exp();
                s += *y;
            }
            let inv = T::one() / s;
            yr.iter_mut().for_each(|y| *y *= inv);
        }
        return y;
    }
    let mut m = vec![T::neg_infinity(); inner];
    let mut s = vec![T::zero(); inner];
    for o in 0..outer {
        let base = o * n * inner;
        let xs = &x[base..base + n * inner];
        let ys = &mut y[base..base + n * inner];
        m.fill(T::neg_infinity());
        s.fill(T::zero());
        for row in xs.chunks_exact(inner) {
            for (m, &v) in m.iter_mut().zip(row) {
                *m = m.max(v);
            }
        }
        for (yr, xr) in ys.chunks_exact_mut(inner).zip(xs.chunks_exact(inner)) {
            for (((y, &v), &m), s) in yr.iter_mut().zip(xr).zip(&m).zip(s.iter_mut()) {
                *y = (v - m).exp();
                *s += *y;
            }
        }
        for s in s.iter_mut() {
            *s = T::one() / *s;
        }
        for yr in ys.chunks_exact_mut(inner) {
            for (y, &inv) in yr.iter_mut().zip(&s) {
                *y *= inv;
            }
        }
    }
    y
}

/// `gx = y * (gy - sum(gy * y))` along the axis.
pub fn softmax_backward<T: Float>(y: &[T], gy: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    let mut dot = vec![T::zero(); inner];
    for o in 0..outer {
        let r = o * n * inner..(o + 1) * n * inner;
        let (ys, gys) = (&y[r.clone()], &gy[r.clone()]);
        dot.fill(T::zero());
        for (yr, gr) in ys.chunks_exact(inner).zip(gys.chunks_exact(inner)) {
            for ((d, &y), &g) in dot.iter_mut().zip(yr).zip(gr) {
                *d += g * y;
            }
        }
        for ((xr, yr), gr) in gx[r].chunks_exact_mut(inner).zip(ys.chunks_exact(inner)).zip(gys.chunks_exact(inner)) {
            for (((gx, &y), &g), &d) in xr.iter_mut().zip(yr).zip(gr).zip(&dot) {
                *gx = y * (g - d);
            }
        }
    }
    gx
}

/// Per-slice statistics of a normalisation; `slices` is the number of
/// independent groups, each with `count` members.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub invstd: Vec<T>,
    /// Biased variance.
    pub var: Vec<T>,
    pub count: usize,
}

/// Layer norm statistics: one group per (outer, inner) position, normalised
/// over the axis.
pub fn layer_stats<T: Float>(x: &[T], outer: usize, n: usize, inner: usize, eps: T) -> NormStats<T> {
    let groups = outer * inner;
    let mut mean = vec![T::zero(); groups];
    let mut var = vec![T::zero(); groups];
    let nt = T::from_usize(n).unwrap();
    for o in 0..outer {
        for i in 0..inner {
            let gidx = o * inner + i;
            let mut s = T::zero();
            for j in 0..n {
                s += x[o * n * inner + j * inner + i];
            }
            let m = s / nt;
            let mut v = T::zero();
            for j in 0..n {
                let d = x[o * n * inner + j * inner + i] - m;
                v += d * d;
            }
            mean[gidx] = m;
            var[gidx] = v / nt;
        }
    }
    let invstd = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    NormStats { mean, invstd, var, count: n }
}

/// Batch norm statistics: one group per axis index (channel), pooled over
/// outer (batch) and inner (spatial) positions.
pub fn channel_stats<T: Float>(x: &[T], outer: usize, n: usize, inner: usize, eps: T) -> NormStats<T> {
    let count = outer * inner;
    let ct = T::from_usize(count).unwrap();
    let mut mean = vec![T::zero(); n];
    let mut var = vec![T::zero(); n];
    for c in 0..n {
        let mut s = T::zero();
        for o in 0..outer {
            s += x[(o * n + c) * inner..(o * n + c + 1) * inner].iter().copied().sum();
        }
        let m = s / ct;
        let mut v = T::zero();
        for o in 0..outer {
            for &xv in &x[(o * n + c) * inner..(o * n + c + 1) * inner] {
                v += (xv - m) * (xv - m);
            }
        }
        mean[c] = m;
        var[c] = v / ct;
    }
    let invstd = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    NormStats { mean, invstd, var, count }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one_along_middle_axis() {
        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.77).sin() * 3.0).collect();
        let y = softmax_forward(&x, 2, 3, 4);
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| y[o * 12 + j * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_handles_large_logits() {
        let y = softmax_forward(&[1000.0f64, 1000.0], 1, 2, 1);
        assert_eq!(y, vec![0.5, 0.5]);
    }
}
