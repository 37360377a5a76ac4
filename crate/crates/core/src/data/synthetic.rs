//! Deterministic synthetic segmentation scenes: a noisy grey background with
//! one to `K - 1` non-overlapping discs, rectangles and ellipses, each shape
//! a distinct class drawn in that class's colour.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::mten::{read_mten, write_mten};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

pub const BACKGROUND_MEAN: f64 = 0.3;
pub const BACKGROUND_STD: f64 = 0.1;
pub const SHAPE_STD: f64 = 0.08;
/// Shape radii (or half-extents) as fractions of `min(H, W)`.
pub const SIZE_RANGE: (f64, f64) = (0.1, 0.2);
const PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    /// `3 x H x W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `1 x H x W`.
    pub label: LabelMap,
    pub seed: u64,
    pub index: u64,
}

/// Mean RGB colour of class `c` (`1 <= c < k`): evenly spaced hues.
pub fn class_colour(c: usize, k: usize) -> [f64; 3] {
    let hue = (c - 1) as f64 / (k - 1).max(1) as f64 * 6.0;
    let x = 1.0 - ((hue % 2.0) - 1.0).abs();
    let rgb = match hue as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    };
    rgb.map(|v| 0.15 + 0.75 * v)
}

fn check_args(h: usize, w: usize, k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Config(format!("synthetic data needs at least 2 classes, got {k}")));
    }
    if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(Error::Config(format!("scene size {h}x{w} must be positive multiples of 32")));
    }
    Ok(())
}

fn shape_mask(kind: ShapeKind, h: usize, w: usize, cy: f64, cx: f64, ry: f64, rx: f64) -> Vec<bool> {
    let mut m = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
            m[r * w + c] = match kind {
                ShapeKind::Rectangle => dy.abs() <= ry && dx.abs() <= rx,
                ShapeKind::Disk | ShapeKind::Ellipse => (dy / ry).powi(2) + (dx / rx).powi(2) <= 1.0,
            };
        }
    }
    m
}

/// Scene `index` of the corpus seeded by `seed`; each index uses its own
/// stream of a counter-based generator, so scenes are independent of
/// generation order.
pub fn scene(seed: u64, index: u64, h: usize, w: usize, k: usize) -> Result<SyntheticScene> {
    check_args(h, w, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let bg = Normal::new(BACKGROUND_MEAN, BACKGROUND_STD).unwrap();
    let fg = Normal::new(0.0, SHAPE_STD).unwrap();
    let mut image: Vec<f32> = (0..3 * h * w).map(|_| bg.sample(&mut rng).clamp(0.0, 1.0) as f32).collect();
    let mut label = vec![0u32; h * w];

    let n = rng.gen_range(1..k);
    let mut classes: Vec<usize> = (1..k).collect();
    classes.shuffle(&mut rng);
    let side = h.min(w) as f64;
    let mut placed = 0;
    for &class in classes.iter().take(n) {
        let kind = [ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Ellipse][rng.gen_range(0..3)];
        for _ in 0..PLACEMENT_ATTEMPTS {
            let mut size = || rng.gen_range(SIZE_RANGE.0..=SIZE_RANGE.1) * side;
            let (ry, rx) = match kind {
                ShapeKind::Disk => {
                    let r = size();
                    (r, r)
                }
                _ => (size(), size()),
            };
            let cy = rng.gen_range(ry..=h as f64 - ry);
            let cx = rng.gen_range(rx..=w as f64 - rx);
            let m = shape_mask(kind, h, w, cy, cx, ry, rx);
            if m.iter().zip(&label).any(|(&inside, &l)| inside && l != 0) {
                continue;
            }
            let colour = class_colour(class, k);
            for (p, _) in m.iter().enumerate().filter(|(_, &inside)| inside) {
                label[p] = class as u32;
                for (ch, &mean) in colour.iter().enumerate() {
                    image[ch * h * w + p] = (mean + fg.sample(&mut rng)).clamp(0.0, 1.0) as f32;
                }
            }
            placed += 1;
            break;
        }
    }
    debug_assert!(placed >= 1);
    Ok(SyntheticScene {
        image: Tensor::from_parts(vec![3, h, w], image),
        label: LabelMap::new(1, h, w, label)?,
        seed,
        index,
    })
}

pub fn image_path(index: usize) -> String {
    format!("images/{index:05}.mten")
}

pub fn mask_path(index: usize) -> String {
    format!("masks/{index:05}.mten")
}

/// Writes `count` scenes under `root` (`images/`, `masks/`, `manifest.txt`).
pub fn gen_synthetic(root: impl AsRef<Path>, seed: u64, count: usize, h: usize, w: usize, k: usize) -> Result<()> {
    check_args(h, w, k)?;
    if count == 0 {
        return Err(Error::Config("scene count must be at least 1".into()));
    }
    let root = root.as_ref();
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    (0..count).into_par_iter().try_for_each(|i| -> Result<()> {
        let s = scene(seed, i as u64, h, w, k)?;
        write_mten(root.join(image_path(i)), &s.image)?;
        write_mten(root.join(mask_path(i)), &s.label.to_tensor::<f32>())
    })?;
    let mut manifest = format!("# seed={seed} count={count} height={h} width={w} classes={k}\n");
    for i in 0..count {
        manifest.push_str(&format!("{} {}\n", image_path(i), mask_path(i)));
    }
    fs::write(root.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Images and labels held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<LabelMap>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn from_scenes(scenes: Vec<SyntheticScene>, num_classes: usize) -> Self {
        let (images, labels) = scenes.into_iter().map(|s| (s.image, s.label)).unzip();
        Self { images, labels, num_classes }
    }

    /// In-memory equivalent of [`gen_synthetic`] followed by [`load_dataset`].
    pub fn synthetic(seed: u64, range: std::ops::Range<u64>, h: usize, w: usize, k: usize) -> Result<Self> {
        let scenes = range.into_par_iter().map(|i| scene(seed, i, h, w, k)).collect::<Result<Vec<_>>>()?;
        Ok(Self::from_scenes(scenes, k))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(H, W)` of the first image.
    pub fn extent(&self) -> Option<(usize, usize)> {
        self.images.first().map(|t| (t.shape()[1], t.shape()[2]))
    }

    /// First `n` samples and the rest.
    pub fn split(mut self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let rest =
            Self { images: self.images.split_off(n), labels: self.labels.split_off(n), num_classes: self.num_classes };
        (self, rest)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub num_classes: usize,
    pub pairs: Vec<(PathBuf, PathBuf)>,
}

pub fn read_manifest(root: impl AsRef<Path>) -> Result<Manifest> {
    let root = root.as_ref();
    let text = fs::read_to_string(root.join("manifest.txt"))?;
    let mut num_classes = None;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(header) = line.strip_prefix('#') {
            for kv in header.split_whitespace() {
                if let Some(v) = kv.strip_prefix("classes=") {
                    num_classes = Some(
                        v.parse().map_err(|_| Error::Parse { line: i + 1, msg: format!("bad class count {v:?}") })?,
                    );
                }
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => pairs.push((root.join(a), root.join(b))),
            _ => return Err(Error::Parse { line: i + 1, msg: format!("expected `image mask`, got {line:?}") }),
        }
    }
    let num_classes =
        num_classes.ok_or_else(|| Error::Parse { line: 1, msg: "manifest header lacks classes=".into() })?;
    Ok(Manifest { num_classes, pairs })
}

/// Loads every pair listed in `root/manifest.txt`.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let m = read_manifest(root)?;
    let loaded = m
        .pairs
        .par_iter()
        .map(|(ip, mp)| -> Result<(Tensor<f32>, LabelMap)> {
            let image: Tensor<f32> = read_mten(ip)?;
            let label = LabelMap::from_tensor(&read_mten::<f32>(mp)?)?;
            if image.rank() != 3 || image.shape()[1..] != [label.height(), label.width()] {
                return Err(Error::Dimension(format!(
                    "{} has shape {:?}, mask is {}x{}",
                    ip.display(),
                    image.shape(),
                    label.height(),
                    label.width()
                )));
            }
            label.check_classes(m.num_classes)?;
            Ok((image, label))
        })
        .collect::<Result<Vec<_>>>()?;
    let (images, labels) = loaded.into_iter().unzip();
    Ok(Dataset { images, labels, num_classes: m.num_classes })
}
