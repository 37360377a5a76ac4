use msla::attention::{efficient_attention_linear, efficient_attention_quadratic, feature_maps};
use msla::data::augment::{augment, hflip, rot90, Sample};
use msla::data::batch::batch_iter;
use msla::data::mten::{decode, encode};
use msla::gradcheck::rel_err;
use msla::metrics::{dsc, hausdorff_masks};
use msla::{LabelMap, Tensor};
use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(n: usize, d: usize) -> impl Strategy<Value = Tensor<f64>> {
    vec(-3.0f64..3.0, n * d).prop_map(move |v| Tensor::new(&[n, d], v).unwrap())
}

fn qkv() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
    (1usize..24, 1usize..9).prop_flat_map(|(n, d)| (matrix(n, d), matrix(n, d), matrix(n, d)))
}

fn class_set(l: &LabelMap) -> Vec<u32> {
    let mut v = l.data().to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

fn sample(h: usize, w: usize, labels: Vec<u32>) -> Sample {
    let image = Tensor::from_fn(&[2, h, w], |i| i as f32);
    Sample { image, label: LabelMap::new(1, h, w, labels).unwrap() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_and_quadratic_orders_agree((q, k, v) in qkv()) {
        let a = efficient_attention_linear(&q, &k, &v).unwrap();
        let b = efficient_attention_quadratic(&q, &k, &v).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12 * (1.0 + b.max_abs()));
    }

    #[test]
    fn feature_maps_normalise((q, k, _) in qkv()) {
        let (fq, fk) = feature_maps(&q, &k);
        let (n, d) = (q.shape()[0], q.shape()[1]);
        for r in 0..n {
            let s: f64 = (0..d).map(|c| fq.at(&[r, c])).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        for c in 0..d {
            let s: f64 = (0..n).map(|r| fk.at(&[r, c])).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flips_and_rotations_keep_classes(side in 2usize..9, seed in any::<u64>()) {
        let labels: Vec<u32> = (0..side * side).map(|i| ((i as u64).wrapping_mul(seed | 1) >> 3) as u32 % 4).collect();
        let s = sample(side, side, labels);
        let mut f = s.clone();
        hflip(&mut f);
        prop_assert_eq!(class_set(&f.label), class_set(&s.label));
        let mut r = s.clone();
        rot90(&mut r, 1);
        prop_assert_eq!(r.label.class_counts(4), s.label.class_counts(4));
        rot90(&mut r, 3);
        prop_assert_eq!(r.label.data(), s.label.data());
        prop_assert!(r.image.bitwise_eq(&s.image));
    }

    #[test]
    fn augmentation_keeps_class_set(side in 4usize..12, seed in any::<u64>(), p in 0.0f64..1.0) {
        let labels: Vec<u32> = (0..side * side).map(|i| (i % 3) as u32).collect();
        let s = sample(side, side, labels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = augment(s.clone(), &mut rng, p);
        prop_assert_eq!(class_set(&a.label), class_set(&s.label));
        prop_assert_eq!(a.image.numel(), s.image.numel());
    }

    #[test]
    fn batches_partition_indices(len in 1usize..60, bs in 1usize..17, seed in any::<u64>(), epoch in 0u64..5) {
        let batches = batch_iter(len, bs, seed, epoch).unwrap();
        prop_assert_eq!(batches.len(), len.div_ceil(bs));
        prop_assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == bs));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        prop_assert_eq!(batch_iter(len, bs, seed, epoch).unwrap(), batches);
    }

    #[test]
    fn mten_roundtrip(shape in vec(1usize..5, 1..5), seed in any::<u64>()) {
        let t = Tensor::<f32>::from_fn(&shape, |i| f32::from_bits((i as u32).wrapping_mul(2654435761) ^ seed as u32 & 0x7f7f_ffff));
        let back = decode(&encode(&t).unwrap()).unwrap().exact::<f32>().unwrap();
        prop_assert!(back.bitwise_eq(&t));
    }

    #[test]
    fn rel_err_symmetric_and_bounded(a in vec(-5.0f64..5.0, 1..20), noise in vec(-1.0f64..1.0, 20)) {
        let b: Vec<f64> = a.iter().zip(&noise).map(|(x, n)| x + n).collect();
        let (e1, e2) = (rel_err(&a, &b), rel_err(&b, &a));
        prop_assert_eq!(e1, e2);
        prop_assert!(e1 >= 0.0);
        prop_assert_eq!(rel_err(&a, &a), 0.0);
    }

    #[test]
    fn dice_bounds(labels in vec(0u32..4, 36), other in vec(0u32..4, 36)) {
        let a = LabelMap::new(1, 6, 6, labels).unwrap();
        let b = LabelMap::new(1, 6, 6, other).unwrap();
        prop_assert_eq!(dsc(&a, &a, 4).unwrap().mean, 1.0);
        let m = dsc(&a, &b, 4).unwrap().mean;
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert_eq!(m, dsc(&b, &a, 4).unwrap().mean);
    }

    #[test]
    fn hausdorff_symmetric(a in vec(any::<bool>(), 64), b in vec(any::<bool>(), 64)) {
        let ab = hausdorff_masks(&a, &b, 8, 8, 100.0);
        let ba = hausdorff_masks(&b, &a, 8, 8, 100.0);
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(hausdorff_masks(&a, &a, 8, 8, 100.0).distance, 0.0);
        let p95 = hausdorff_masks(&a, &b, 8, 8, 95.0).distance;
        prop_assert!(p95 <= ab.distance + 1e-12);
    }
}
