//! Segmentation metrics on label maps: Dice similarity, Hausdorff distance
//! over 8-connected boundaries, and confusion-matrix region metrics.
//! Class 0 is background and is excluded from every foreground average.

use std::fmt::Write as _;

use crate::error::{dim_err, Result};
use crate::labels::LabelMap;

fn same_shape(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if (a.batch(), a.height(), a.width()) != (b.batch(), b.height(), b.width()) {
        return dim_err(format!(
            "label maps differ in shape: {}x{}x{} vs {}x{}x{}",
            a.batch(),
            a.height(),
            a.width(),
            b.batch(),
            b.height(),
            b.width()
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dsc {
    /// Index `c - 1` holds class `c`; `None` when the class is absent from
    /// both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the evaluated foreground classes; 1 when none is present.
    pub mean: f64,
}

/// `2 |P & G| / (|P| + |G|)` per foreground class over all pixels of the maps.
pub fn dsc(pred: &LabelMap, gt: &LabelMap, k: usize) -> Result<Dsc> {
    same_shape(pred, gt)?;
    let mut inter = vec![0usize; k];
    let mut np = vec![0usize; k];
    let mut ng = vec![0usize; k];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p as usize, g as usize);
        if p < k {
            np[p] += 1;
        }
        if g < k {
            ng[g] += 1;
        }
        if p == g && p < k {
            inter[p] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (1..k)
        .map(|c| {
            let denom = np[c] + ng[c];
            (denom > 0).then(|| 2.0 * inter[c] as f64 / denom as f64)
        })
        .collect();
    let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if vals.is_empty() { 1.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
    Ok(Dsc { per_class, mean })
}

/// Pixels of `mask` (row-major `h x w`) with at least one 8-neighbour outside
/// the mask; pixels beyond the image border count as outside.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[r * w + c] {
                continue;
            }
            let edge = (-1i64..=1).any(|dr| {
                (-1i64..=1).any(|dc| {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 || !mask[rr as usize * w + cc as usize]
                })
            });
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hausdorff {
    pub distance: f64,
    /// Exactly one mask was empty and the image diagonal was returned.
    pub penalty: bool,
}

fn directed(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(r, c)| {
            to.iter()
                .map(|&(r2, c2)| {
                    let (dr, dc) = (r as f64 - r2 as f64, c as f64 - c2 as f64);
                    dr * dr + dc * dc
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of `v`.
fn percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Symmetric Hausdorff distance between the boundaries of two `h x w` masks.
/// `percentile = 100` is the classical maximum; lower values take that
/// percentile of the pooled directed nearest-boundary distances.
pub fn hausdorff_masks(a: &[bool], b: &[bool], h: usize, w: usize, percentile_q: f64) -> Hausdorff {
    let (ea, eb) = (!a.iter().any(|&x| x), !b.iter().any(|&x| x));
    match (ea, eb) {
        (true, true) => return Hausdorff { distance: 0.0, penalty: false },
        (true, false) | (false, true) => {
            let diag = ((h * h + w * w) as f64).sqrt();
            return Hausdorff { distance: diag, penalty: true };
        }
        _ => {}
    }
    let (ba, bb) = (boundary(a, h, w), boundary(b, h, w));
    let (dab, dba) = (directed(&ba, &bb), directed(&bb, &ba));
    let distance = if percentile_q >= 100.0 {
        dab.iter().chain(&dba).copied().fold(0.0, f64::max)
    } else {
        let mut all = dab;
        all.extend(dba);
        percentile(all, percentile_q.max(0.0))
    };
    Hausdorff { distance, penalty: false }
}

/// Hausdorff distance for `class` on one image (`batch == 1`) or the mean over
/// the images of a batch; `penalty` is set if any image took the penalty.
pub fn hausdorff(pred: &LabelMap, gt: &LabelMap, class: u32, percentile_q: f64) -> Result<Hausdorff> {
    same_shape(pred, gt)?;
    let (h, w) = (pred.height(), pred.width());
    let mut total = 0.0;
    let mut penalty = false;
    for i in 0..pred.batch() {
        let a: Vec<bool> = pred.data()[i * h * w..(i + 1) * h * w].iter().map(|&l| l == class).collect();
        let b: Vec<bool> = gt.data()[i * h * w..(i + 1) * h * w].iter().map(|&l| l == class).collect();
        let r = hausdorff_masks(&a, &b, h, w, percentile_q);
        total += r.distance;
        penalty |= r.penalty;
    }
    Ok(Hausdorff { distance: total / pred.batch() as f64, penalty })
}

/// `cm[truth][pred]` pixel counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        same_shape(pred, gt)?;
        let k = self.k;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            let (p, g) = ((p as usize).min(k - 1), (g as usize).min(k - 1));
            self.counts[g * k + p] += 1;
        }
        Ok(())
    }

    pub fn at(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn regions(&self) -> RegionMetrics {
        let k = self.k;
        let total: u64 = self.counts.iter().sum();
        let correct: u64 = (0..k).map(|c| self.at(c, c)).sum();
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        let mut iou = Vec::with_capacity(k.saturating_sub(1));
        for c in 1..k {
            let t = self.at(c, c);
            let pred_c: u64 = (0..k).map(|g| self.at(g, c)).sum();
            let gt_c: u64 = (0..k).map(|p| self.at(c, p)).sum();
            tp += t;
            fp += pred_c - t;
            fn_ += gt_c - t;
            let union = pred_c + gt_c - t;
            iou.push((union > 0).then(|| t as f64 / union as f64));
        }
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        RegionMetrics {
            per_class_iou: iou,
            miou: if present.is_empty() { 1.0 } else { present.iter().sum::<f64>() / present.len() as f64 },
            accuracy: ratio(correct, total),
            precision: if tp + fp == 0 {
                if fn_ == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                ratio(tp, tp + fp)
            },
            recall: if tp + fn_ == 0 { 1.0 } else { ratio(tp, tp + fn_) },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionMetrics {
    /// Foreground classes `1..K`; `None` when absent in both maps.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub accuracy: f64,
    /// Micro-averaged over foreground classes.
    pub precision: f64,
    pub recall: f64,
}

pub fn region_metrics(pred: &LabelMap, gt: &LabelMap, k: usize) -> Result<RegionMetrics> {
    let mut cm = Confusion::new(k);
    cm.add(pred, gt)?;
    Ok(cm.regions())
}

/// Accumulates per-image DSC and HD and a global confusion matrix.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    k: usize,
    hd_percentile: f64,
    dsc_sum: Vec<f64>,
    dsc_n: Vec<usize>,
    hd_sum: Vec<f64>,
    hd_n: Vec<usize>,
    penalties: usize,
    images: usize,
    confusion: Confusion,
}

impl MetricAccumulator {
    pub fn new(k: usize, hd_percentile: f64) -> Self {
        let f = k.saturating_sub(1);
        Self {
            k,
            hd_percentile,
            dsc_sum: vec![0.0; f],
            dsc_n: vec![0; f],
            hd_sum: vec![0.0; f],
            hd_n: vec![0; f],
            penalties: 0,
            images: 0,
            confusion: Confusion::new(k),
        }
    }

    /// Adds every image of a (possibly batched) pair of label maps.
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        same_shape(pred, gt)?;
        self.confusion.add(pred, gt)?;
        let (h, w) = (pred.height(), pred.width());
        for i in 0..pred.batch() {
            let (p, g) = (pred.item(i), gt.item(i));
            let d = dsc(&p, &g, self.k)?;
            for (c, v) in d.per_class.iter().enumerate() {
                if let Some(v) = v {
                    self.dsc_sum[c] += v;
                    self.dsc_n[c] += 1;
                }
                let cls = (c + 1) as u32;
                let a: Vec<bool> = p.data().iter().map(|&l| l == cls).collect();
                let b: Vec<bool> = g.data().iter().map(|&l| l == cls).collect();
                if a.iter().any(|&x| x) || b.iter().any(|&x| x) {
                    let hd = hausdorff_masks(&a, &b, h, w, self.hd_percentile);
                    self.hd_sum[c] += hd.distance;
                    self.hd_n[c] += 1;
                    self.penalties += hd.penalty as usize;
                }
            }
            self.images += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> MetricReport {
        let avg = |s: &[f64], n: &[usize]| -> Vec<Option<f64>> {
            s.iter().zip(n).map(|(&s, &n)| (n > 0).then(|| s / n as f64)).collect()
        };
        let mean = |v: &[Option<f64>], empty: f64| {
            let x: Vec<f64> = v.iter().flatten().copied().collect();
            if x.is_empty() {
                empty
            } else {
                x.iter().sum::<f64>() / x.len() as f64
            }
        };
        let dsc = avg(&self.dsc_sum, &self.dsc_n);
        let hd = avg(&self.hd_sum, &self.hd_n);
        MetricReport {
            images: self.images,
            num_classes: self.k,
            mean_dsc: mean(&dsc, 1.0),
            mean_hd: mean(&hd, 0.0),
            per_class_dsc: dsc,
            per_class_hd: hd,
            hd_percentile: self.hd_percentile,
            hd_penalties: self.penalties,
            regions: self.confusion.regions(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub images: usize,
    pub num_classes: usize,
    pub per_class_dsc: Vec<Option<f64>>,
    pub mean_dsc: f64,
    pub per_class_hd: Vec<Option<f64>>,
    pub mean_hd: f64,
    pub hd_percentile: f64,
    /// Image-class pairs where exactly one of prediction and truth was empty.
    pub hd_penalties: usize,
    pub regions: RegionMetrics,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| format!("{x:.6}"))
}

impl MetricReport {
    pub fn hd_name(&self) -> &'static str {
        if self.hd_percentile >= 100.0 {
            "hd"
        } else {
            "hd95"
        }
    }

    /// Deterministic `key=value` lines.
    pub fn to_text(&self) -> String {
        let r = &self.regions;
        let mut s = String::new();
        let _ = writeln!(s, "images={}", self.images);
        let _ = writeln!(s, "mean_dsc={:.6}", self.mean_dsc);
        let _ = writeln!(s, "mean_{}={:.6}", self.hd_name(), self.mean_hd);
        let _ = writeln!(s, "miou={:.6}", r.miou);
        let _ = writeln!(s, "accuracy={:.6}", r.accuracy);
        let _ = writeln!(s, "precision={:.6}", r.precision);
        let _ = writeln!(s, "recall={:.6}", r.recall);
        let _ = writeln!(s, "hd_penalties={}", self.hd_penalties);
        for c in 0..self.per_class_dsc.len() {
            let _ = writeln!(
                s,
                "class{}_dsc={} class{}_{}={} class{}_iou={}",
                c + 1,
                opt(self.per_class_dsc[c]),
                c + 1,
                self.hd_name(),
                opt(self.per_class_hd[c]),
                c + 1,
                opt(r.per_class_iou[c])
            );
        }
        s
    }

    /// One row per foreground class plus a `mean` row.
    pub fn to_csv(&self) -> String {
        let r = &self.regions;
        let mut s = format!("class,dsc,{},iou\n", self.hd_name());
        for c in 0..self.per_class_dsc.len() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                c + 1,
                opt(self.per_class_dsc[c]),
                opt(self.per_class_hd[c]),
                opt(r.per_class_iou[c])
            );
        }
        let _ = writeln!(s, "mean,{:.6},{:.6},{:.6}", self.mean_dsc, self.mean_hd, r.miou);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(h: usize, w: usize, v: &[u32]) -> LabelMap {
        LabelMap::new(1, h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn dsc_examples() {
        let g = lm(2, 3, &[0, 1, 1, 2, 2, 0]);
        assert_eq!(dsc(&g, &g, 3).unwrap().mean, 1.0);

        let a = lm(1, 4, &[1, 1, 0, 0]);
        let b = lm(1, 4, &[0, 0, 1, 1]);
        assert_eq!(dsc(&a, &b, 2).unwrap().mean, 0.0);

        // |P| = 6, |G| = 4, overlap 3.
        let p = lm(2, 5, &[1, 1, 1, 1, 1, 1, 0, 0, 0, 0]);
        let g = lm(2, 5, &[0, 0, 0, 1, 1, 1, 1, 0, 0, 0]);
        assert!((dsc(&p, &g, 2).unwrap().mean - 0.6).abs() < 1e-15);
    }

    #[test]
    fn dsc_skips_absent_classes() {
        let p = lm(1, 4, &[1, 1, 0, 0]);
        let d = dsc(&p, &p, 4).unwrap();
        assert_eq!(d.per_class, vec![Some(1.0), None, None]);
        assert_eq!(d.mean, 1.0);
    }

    #[test]
    fn hausdorff_examples() {
        let mut a = vec![false; 25];
        let mut b = vec![false; 25];
        a[0] = true;
        b[0] = true;
        assert_eq!(hausdorff_masks(&a, &b, 5, 5, 100.0).distance, 0.0);
        b[0] = false;
        b[3 * 5 + 4] = true;
        assert_eq!(hausdorff_masks(&a, &b, 5, 5, 100.0).distance, 5.0);
    }

    #[test]
    fn hausdorff_empty_cases() {
        let a = vec![false; 12];
        let mut b = vec![false; 12];
        assert_eq!(hausdorff_masks(&a, &b, 3, 4, 100.0), Hausdorff { distance: 0.0, penalty: false });
        b[5] = true;
        assert_eq!(hausdorff_masks(&a, &b, 3, 4, 100.0), Hausdorff { distance: 5.0, penalty: true });
    }

    #[test]
    fn boundary_of_filled_square() {
        let mut m = vec![false; 25];
        for r in 1..4 {
            for c in 1..4 {
                m[r * 5 + c] = true;
            }
        }
        let b = boundary(&m, 5, 5);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
    }

    #[test]
    fn hd95_not_above_max() {
        let a: Vec<bool> = (0..64).map(|i| i % 7 == 0 || i % 5 == 1).collect();
        let b: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
        let hd = hausdorff_masks(&a, &b, 8, 8, 100.0).distance;
        let hd95 = hausdorff_masks(&a, &b, 8, 8, 95.0).distance;
        assert!(hd95 <= hd);
    }

    #[test]
    fn region_binary_fixture() {
        // TP 3, FP 1, FN 2, TN 10.
        let g = lm(4, 4, &[1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let p = lm(4, 4, &[1, 1, 1, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let r = region_metrics(&p, &g, 2).unwrap();
        assert_eq!(r.precision, 0.75);
        assert_eq!(r.recall, 0.6);
        assert_eq!(r.miou, 0.5);
        assert_eq!(r.accuracy, 13.0 / 16.0);
    }

    #[test]
    fn region_perfect_and_background_only() {
        let g = lm(2, 2, &[0, 1, 2, 1]);
        let r = region_metrics(&g, &g, 3).unwrap();
        assert_eq!((r.miou, r.accuracy, r.precision, r.recall), (1.0, 1.0, 1.0, 1.0));
        let bg = lm(2, 2, &[0, 0, 0, 0]);
        assert_eq!(region_metrics(&bg, &g, 3).unwrap().recall, 0.0);
    }

    #[test]
    fn accumulator_report() {
        let g = LabelMap::new(2, 2, 2, vec![0, 1, 1, 0, 0, 0, 2, 2]).unwrap();
        let p = LabelMap::new(2, 2, 2, vec![0, 1, 1, 0, 0, 0, 0, 0]).unwrap();
        let mut acc = MetricAccumulator::new(3, 100.0);
        acc.add(&p, &g).unwrap();
        let rep = acc.finish();
        assert_eq!(rep.images, 2);
        assert_eq!(rep.per_class_dsc, vec![Some(1.0), Some(0.0)]);
        assert_eq!(rep.mean_dsc, 0.5);
        assert_eq!(rep.hd_penalties, 1);
        assert!(rep.to_text().contains("mean_dsc=0.500000\n"));
        assert!(rep.to_csv().starts_with("class,dsc,hd,iou\n1,1.000000,0.000000,1.000000\n"));
    }
}
