//! Label-safe augmentations: flips, quarter-turn rotations and cutout.

use rand::Rng;

use crate::labels::LabelMap;
use crate::tensor::Tensor;

/// One image (`C x H x W`) with its label map (`1 x H x W`).
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: LabelMap,
}

/// Moves each pixel of an `h x w` plane to `f(r, c)` in a plane of width `ow`.
fn remap<T: Copy>(src: &[T], h: usize, w: usize, f: impl Fn(usize, usize) -> (usize, usize), ow: usize) -> Vec<T> {
    let mut out = src.to_vec();
    for r in 0..h {
        for c in 0..w {
            let (rr, cc) = f(r, c);
            out[rr * ow + cc] = src[r * w + c];
        }
    }
    out
}

fn apply(sample: &mut Sample, f: impl Fn(usize, usize) -> (usize, usize) + Copy, oh: usize, ow: usize) {
    let [ch, h, w] = *sample.image.shape() else { unreachable!("sample images are C x H x W") };
    let plane = h * w;
    let mut data = Vec::with_capacity(ch * plane);
    for c in 0..ch {
        data.extend(remap(&sample.image.data()[c * plane..(c + 1) * plane], h, w, f, ow));
    }
    sample.image = Tensor::from_parts(vec![ch, oh, ow], data);
    let lab = remap(sample.label.data(), h, w, f, ow);
    sample.label = LabelMap::new(1, oh, ow, lab).expect("same pixel count");
}

pub fn hflip(sample: &mut Sample) {
    let (h, w) = (sample.label.height(), sample.label.width());
    apply(sample, |r, c| (r, w - 1 - c), h, w);
}

pub fn vflip(sample: &mut Sample) {
    let (h, w) = (sample.label.height(), sample.label.width());
    apply(sample, |r, c| (h - 1 - r, c), h, w);
}

/// Counter-clockwise rotation by `quarters * 90` degrees.
pub fn rot90(sample: &mut Sample, quarters: usize) {
    for _ in 0..quarters % 4 {
        let (h, w) = (sample.label.height(), sample.label.width());
        apply(sample, |r, c| (w - 1 - c, r), w, h);
    }
}

/// Zeroes an axis-aligned square of the image; the label is untouched.
pub fn cutout(sample: &mut Sample, top: usize, left: usize, side: usize) {
    let [ch, h, w] = *sample.image.shape() else { unreachable!("sample images are C x H x W") };
    let data = sample.image.data_mut();
    for c in 0..ch {
        for r in top..(top + side).min(h) {
            for x in left..(left + side).min(w) {
                data[(c * h + r) * w + x] = 0.0;
            }
        }
    }
}

/// Applies horizontal flip, vertical flip, rotation and cutout, each
/// independently with probability `p`. Rotations are quarter turns (half
/// turns only for non-square samples); the cutout side is drawn from
/// `[H/8, H/4]`.
pub fn augment<R: Rng>(mut sample: Sample, rng: &mut R, p: f64) -> Sample {
    if p <= 0.0 {
        return sample;
    }
    if rng.gen_bool(p) {
        hflip(&mut sample);
    }
    if rng.gen_bool(p) {
        vflip(&mut sample);
    }
    if rng.gen_bool(p) {
        let square = sample.label.height() == sample.label.width();
        let q = if square { rng.gen_range(1..4) } else { 2 };
        rot90(&mut sample, q);
    }
    if rng.gen_bool(p) {
        let (h, w) = (sample.label.height(), sample.label.width());
        let side = rng.gen_range((h / 8).max(1)..=(h / 4).max(1)).min(w);
        let top = rng.gen_range(0..=h - side);
        let left = rng.gen_range(0..=w - side);
        cutout(&mut sample, top, left, side);
    }
    sample
}
