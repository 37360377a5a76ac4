//! 2-D cross-correlation with zero padding, groups and stride.
//!
//! Dense groups go through im2col + GEMM; the depth-wise case
//! (`groups == cin == cout`) uses direct loops. Batch items are processed in
//! parallel and any cross-batch reduction is summed in batch order, so results
//! do not depend on the thread count.

use rayon::prelude::*;

use super::{gemm, Layout};
use crate::error::{dim_err, Result};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize, groups: usize) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return dim_err(format!("conv2d expects 4-D input and weight, got {x_shape:?} and {w_shape:?}"));
        }
        let (batch, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (cout, cin_g, k, k2) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if k != k2 {
            return dim_err(format!("conv2d kernel must be square, got {k}x{k2}"));
        }
        if groups == 0 || stride == 0 {
            return dim_err("conv2d groups and stride must be positive");
        }
        if cin % groups != 0 || cout % groups != 0 {
            return dim_err(format!("conv2d channels {cin}->{cout} not divisible by groups {groups}"));
        }
        if cin / groups != cin_g {
            return dim_err(format!(
                "conv2d weight expects {cin_g} input channels per group, input gives {}",
                cin / groups
            ));
        }
        let extent = |n: usize| -> Result<usize> {
            let padded = n + 2 * pad;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return dim_err(format!("conv2d output extent ({n}+2*{pad}-{k})/{stride}+1 is not integral"));
            }
            Ok((padded - k) / stride + 1)
        };
        let ho = extent(h)?;
        let wo = extent(w)?;
        Ok(Self { batch, cin, h, w, cout, k, stride, pad, groups, ho, wo })
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.cout == self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.cout * self.ho * self.wo
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.ho, self.wo]
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn macs(&self) -> u64 {
        (self.batch * self.cout * (self.cin / self.groups) * self.k * self.k * self.ho * self.wo) as u64
    }

    /// Range of output indices whose tap `kk` lands inside an input of extent `n`.
    fn valid_range(&self, kk: usize, n: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        // need 0 <= o*s + off < n
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = (n as isize - 1 - off).div_euclid(s) + 1;
        let hi = hi.clamp(0, out as isize);
        (lo.min(hi) as usize, hi as usize)
    }
}

fn im2col<T: Float>(g: &ConvGeom, x: &[T], cin_g: usize, cols: &mut [T]) {
    let (k, l) = (g.k, g.ho * g.wo);
    for c in 0..cin_g {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..k {
                let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                let row = &mut cols[((c * k + ky) * k + kx) * l..][..l];
                row.fill(T::zero());
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    for ox in ox0..ox1 {
                        let ix = ox * g.stride + kx - g.pad;
                        row[oy * g.wo + ox] = plane[iy * g.w + ix];
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(g: &ConvGeom, cols: &[T], cin_g: usize, gx: &mut [T]) {
    let (k, l) = (g.k, g.ho * g.wo);
    for c in 0..cin_g {
        let plane = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..k {
                let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                let row = &cols[((c * k + ky) * k + kx) * l..][..l];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    for ox in ox0..ox1 {
                        let ix = ox * g.stride + kx - g.pad;
                        plane[iy * g.w + ix] += row[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Float>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); g.out_len()];
    let in_len = g.cin * g.h * g.w;
    let out_item = g.cout * g.ho * g.wo;
    let l = g.ho * g.wo;
    out.par_chunks_mut(out_item).enumerate().for_each(|(b, yb)| {
        let xb = &x[b * in_len..(b + 1) * in_len];
        if g.is_depthwise() {
            depthwise_forward_item(g, xb, w, yb);
        } else {
            let cin_g = g.cin / g.groups;
            let cout_g = g.cout / g.groups;
            let kk = cin_g * g.k * g.k;
            let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * l] };
            for gi in 0..g.groups {
                let xg = &xb[gi * cin_g * g.h * g.w..(gi + 1) * cin_g * g.h * g.w];
                let wg = &w[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                let yg = &mut yb[gi * cout_g * l..(gi + 1) * cout_g * l];
                let rhs: &[T] = if g.is_pointwise() {
                    xg
                } else {
                    im2col(g, xg, cin_g, &mut cols);
                    &cols
                };
                gemm(cout_g, kk, l, wg, Layout::N, rhs, Layout::N, yg, false);
            }
        }
        if let Some(bias) = bias {
            for (co, plane) in yb.chunks_mut(l).enumerate() {
                let bv = bias[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

fn depthwise_forward_item<T: Float>(g: &ConvGeom, xb: &[T], w: &[T], yb: &mut [T]) {
    let (k, l) = (g.k, g.ho * g.wo);
    for c in 0..g.cin {
        let plane = &xb[c * g.h * g.w..(c + 1) * g.h * g.w];
        let out = &mut yb[c * l..(c + 1) * l];
        let wc = &w[c * k * k..(c + 1) * k * k];
        for ky in 0..k {
            let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..k {
                let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                let wv = wc[ky * k + kx];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let orow = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    let irow = &plane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox0..ox1 {
                        orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Gradients requested from [`conv2d_backward`].
pub struct ConvGrads<T> {
    pub x: Option<Vec<T>>,
    pub w: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Float>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gy: &[T],
    need_x: bool,
    need_w: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let in_len = g.cin * g.h * g.w;
    let l = g.ho * g.wo;
    let out_item = g.cout * l;
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let kk = cin_g * g.k * g.k;

    let bias = need_bias.then(|| {
        let mut gb = vec![T::zero(); g.cout];
        for b in 0..g.batch {
            for (co, acc) in gb.iter_mut().enumerate() {
                let s: T = gy[b * out_item + co * l..b * out_item + (co + 1) * l].iter().copied().sum();
                *acc += s;
            }
        }
        gb
    });

    if !need_x && !need_w {
        return ConvGrads { x: None, w: None, bias };
    }

    // Per batch item: (input grad, weight grad partial).
    let items: Vec<(Vec<T>, Vec<T>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let gyb = &gy[b * out_item..(b + 1) * out_item];
            let mut gxb = if need_x { vec![T::zero(); in_len] } else { Vec::new() };
            let mut gwb = if need_w { vec![T::zero(); w.len()] } else { Vec::new() };
            if g.is_depthwise() {
                depthwise_backward_item(g, xb, w, gyb, need_x.then_some(&mut gxb[..]), need_w.then_some(&mut gwb[..]));
            } else {
                let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { kk * l }];
                for gi in 0..g.groups {
                    let xg = &xb[gi * cin_g * g.h * g.w..(gi + 1) * cin_g * g.h * g.w];
                    let wg = &w[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                    let gyg = &gyb[gi * cout_g * l..(gi + 1) * cout_g * l];
                    if need_w {
                        let rhs: &[T] = if g.is_pointwise() {
                            xg
                        } else {
                            im2col(g, xg, cin_g, &mut cols);
                            &cols
                        };
                        let gwg = &mut gwb[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                        gemm(cout_g, l, kk, gyg, Layout::N, rhs, Layout::T, gwg, false);
                    }
                    if need_x {
                        let gxg = &mut gxb[gi * cin_g * g.h * g.w..(gi + 1) * cin_g * g.h * g.w];
                        if g.is_pointwise() {
                            gemm(kk, cout_g, l, wg, Layout::T, gyg, Layout::N, gxg, false);
                        } else {
                            gemm(kk, cout_g, l, wg, Layout::T, gyg, Layout::N, &mut cols, false);
                            col2im(g, &cols, cin_g, gxg);
                        }
                    }
                }
            }
            (gxb, gwb)
        })
        .collect();

    let mut gx_out = need_x.then(|| Vec::with_capacity(g.batch * in_len));
    let mut gw_out = need_w.then(|| vec![T::zero(); w.len()]);
    for (gxb, gwb) in items {
        if let Some(gx) = gx_out.as_mut() {
            gx.extend_from_slice(&gxb);
        }
        if let Some(gw) = gw_out.as_mut() {
            gw.iter_mut().zip(&gwb).for_each(|(a, &b)| *a += b);
        }
    }
    ConvGrads { x: gx_out, w: gw_out, bias }
}

fn depthwise_backward_item<T: Float>(
    g: &ConvGeom,
    xb: &[T],
    w: &[T],
    gyb: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let (k, l) = (g.k, g.ho * g.wo);
    for c in 0..g.cin {
        let plane = &xb[c * g.h * g.w..(c + 1) * g.h * g.w];
        let gout = &gyb[c * l..(c + 1) * l];
        for ky in 0..k {
            let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..k {
                let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                let wv = w[(c * k + ky) * k + kx];
                let mut acc = T::zero();
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    for ox in ox0..ox1 {
                        let ix = ox * g.stride + kx - g.pad;
                        let go = gout[oy * g.wo + ox];
                        acc += go * plane[iy * g.w + ix];
                        if let Some(gx) = gx.as_deref_mut() {
                            gx[c * g.h * g.w + iy * g.w + ix] += go * wv;
                        }
                    }
                }
                if let Some(gw) = gw.as_deref_mut() {
                    gw[(c * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop definition of grouped cross-correlation.
    fn reference(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let cin_g = g.cin / g.groups;
        let cout_g = g.cout / g.groups;
        let mut out = vec![0.0; g.out_len()];
        for b in 0..g.batch {
            for co in 0..g.cout {
                let grp = co / cout_g;
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut s = bias.map_or(0.0, |bb| bb[co]);
                        for ci in 0..cin_g {
                            let c = grp * cin_g + ci;
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    s += w[((co * cin_g + ci) * g.k + ky) * g.k + kx]
                                        * x[((b * g.cin + c) * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                        out[((b * g.cout + co) * g.ho + oy) * g.wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect()
    }

    #[test]
    fn matches_reference_over_geometries() {
        let cases = [
            // (b, cin, h, w, cout, k, stride, pad, groups)
            (2, 3, 7, 6, 4, 3, 1, 1, 1),
            (1, 4, 8, 8, 4, 5, 1, 2, 4),
            (2, 4, 8, 8, 6, 2, 2, 0, 2),
            (1, 3, 8, 8, 5, 4, 4, 0, 1),
            (1, 6, 5, 5, 6, 1, 1, 0, 1),
            (1, 2, 5, 7, 2, 9, 1, 4, 2),
            (1, 2, 7, 7, 3, 3, 2, 1, 1),
        ];
        for (i, &(b, cin, h, w, cout, k, s, p, grp)) in cases.iter().enumerate() {
            let g = ConvGeom::new(&[b, cin, h, w], &[cout, cin / grp, k, k], s, p, grp).unwrap();
            let x = pseudo(b * cin * h * w, 0.7 + i as f64);
            let wt = pseudo(cout * cin / grp * k * k, 1.3 + i as f64);
            let bias = pseudo(cout, 2.1);
            let got = conv2d_forward(&g, &x, &wt, Some(&bias));
            let want = reference(&g, &x, &wt, Some(&bias));
            for (a, e) in got.iter().zip(&want) {
                assert!((a - e).abs() < 1e-12, "case {i}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), gy> == <x, conv^T(gy)> for the input path and likewise for weights.
        let g = ConvGeom::new(&[2, 4, 7, 7], &[6, 2, 3, 3], 2, 1, 2).unwrap();
        let x = pseudo(2 * 4 * 49, 0.31);
        let w = pseudo(6 * 2 * 9, 0.57);
        let gy = pseudo(g.out_len(), 0.91);
        let y = conv2d_forward(&g, &x, &w, None);
        let lhs: f64 = y.iter().zip(&gy).map(|(a, b)| a * b).sum();
        let grads = conv2d_backward(&g, &x, &w, &gy, true, true, false);
        let rx: f64 = x.iter().zip(grads.x.as_ref().unwrap()).map(|(a, b)| a * b).sum();
        let rw: f64 = w.iter().zip(grads.w.as_ref().unwrap()).map(|(a, b)| a * b).sum();
        assert!((lhs - rx).abs() < 1e-10);
        assert!((lhs - rw).abs() < 1e-10);
    }

    #[test]
    fn rejects_non_integral_extent() {
        assert!(ConvGeom::new(&[1, 1, 5, 5], &[1, 1, 2, 2], 2, 0, 1).is_err());
        assert!(ConvGeom::new(&[1, 3, 4, 4], &[2, 1, 1, 1], 1, 0, 2).is_err());
    }
}
