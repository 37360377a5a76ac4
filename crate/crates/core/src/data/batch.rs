//! Deterministic shuffled mini-batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment, Sample};
use super::synthetic::Dataset;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

/// Index batches for one epoch: a permutation drawn from stream `epoch` of
/// the generator seeded by `seed`, cut into `batch_size` chunks (the last
/// may be shorter).
pub fn batch_iter(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::Contract("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[derive(Clone, Debug)]
pub struct SampleBatch {
    /// `B x C x H x W`.
    pub images: Tensor<f32>,
    pub labels: LabelMap,
    pub indices: Vec<usize>,
}

/// Stacks the samples at `indices`, optionally augmenting each with
/// probability `aug_prob` from `rng`.
pub fn make_batch(ds: &Dataset, indices: &[usize], aug_prob: f64, rng: &mut ChaCha8Rng) -> Result<SampleBatch> {
    let first = ds
        .images
        .get(*indices.first().ok_or_else(|| Error::Contract("empty batch".into()))?)
        .ok_or_else(|| Error::Bounds("batch index out of range".into()))?;
    let per = first.numel();
    let mut data = Vec::with_capacity(per * indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    let mut shape = first.shape().to_vec();
    for &i in indices {
        let (Some(img), Some(lab)) = (ds.images.get(i), ds.labels.get(i)) else {
            return Err(Error::Bounds(format!("sample {i} of {}", ds.len())));
        };
        let s = augment(Sample { image: img.clone(), label: lab.clone() }, rng, aug_prob);
        if s.image.numel() != per || s.image.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "sample {i} has shape {:?}, batch expects {shape:?}",
                s.image.shape()
            )));
        }
        data.extend_from_slice(s.image.data());
        labels.push(s.label);
    }
    let refs: Vec<&LabelMap> = labels.iter().collect();
    shape.insert(0, indices.len());
    Ok(SampleBatch {
        images: Tensor::from_parts(shape, data),
        labels: LabelMap::stack(&refs)?,
        indices: indices.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_determinism() {
        let b = batch_iter(10, 4, 3, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 2]);
        assert_eq!(b, batch_iter(10, 4, 3, 0).unwrap());
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn epochs_differ() {
        assert_ne!(batch_iter(8, 8, 1, 0).unwrap(), batch_iter(8, 8, 1, 1).unwrap());
    }

    #[test]
    fn empty_rejected() {
        assert!(matches!(batch_iter(0, 4, 0, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn stacks_samples() {
        let ds = Dataset::synthetic(2, 0..3, 32, 32, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_batch(&ds, &[2, 0], 0.0, &mut rng).unwrap();
        assert_eq!(b.images.shape(), &[2, 3, 32, 32]);
        assert_eq!(&b.images.data()[..3 * 32 * 32], ds.images[2].data());
        assert_eq!(b.labels.item(1), ds.labels[0]);
    }
}
