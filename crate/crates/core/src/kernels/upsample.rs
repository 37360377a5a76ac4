//! 2x bilinear upsampling with half-pixel centres.
//!
//! Output index `o` samples input coordinate `(o + 0.5) / 2 - 0.5`, clamped to
//! `[0, n - 1]`.

use crate::tensor::Float;

/// Source taps `(i0, i1, w1)` for each of the `2n` output positions.
fn taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Upsamples `planes` contiguous `h x w` planes.
pub fn upsample2x_forward<T: Float>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ty = taps(h);
    let tx = taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let wy = T::c(wy);
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let wx = T::c(wx);
                let top = r0[x0] + wx * (r0[x1] - r0[x0]);
                let bot = r1[x0] + wx * (r1[x1] - r1[x0]);
                dst[oy * ow + ox] = top + wy * (bot - top);
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Float>(gy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ty = taps(h);
    let tx = taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &gy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let wy1 = T::c(wy);
            let wy0 = T::one() - wy1;
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let wx1 = T::c(wx);
                let wx0 = T::one() - wx1;
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += g * wy0 * wx0;
                dst[y0 * w + x1] += g * wy0 * wx1;
                dst[y1 * w + x0] += g * wy1 * wx0;
                dst[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
    gx
}
