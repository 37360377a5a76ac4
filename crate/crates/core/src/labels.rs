use crate::error::{dim_err, Error, Result};
use crate::tensor::{Float, Tensor};

/// Integer class map of shape `batch x height x width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    batch: usize,
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if batch * height * width != data.len() || data.is_empty() {
            return dim_err(format!(
                "label map {batch}x{height}x{width} needs {} ids, got {}",
                batch * height * width,
                data.len()
            ));
        }
        Ok(Self { batch, height, width, data })
    }

    /// Reads class ids stored as whole numbers in an `H x W` or `B x H x W` tensor.
    pub fn from_tensor<T: Float>(t: &Tensor<T>) -> Result<Self> {
        let (b, h, w) = match *t.shape() {
            [h, w] => (1, h, w),
            [b, h, w] => (b, h, w),
            ref s => return dim_err(format!("label tensor must be 2-D or 3-D, got {s:?}")),
        };
        let data = t
            .data()
            .iter()
            .map(|v| {
                let f = v.f64();
                if f < 0.0 || f.fract() != 0.0 || f > u32::MAX as f64 {
                    Err(Error::Contract(format!("label value {f} is not a class id")))
                } else {
                    Ok(f as u32)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(b, h, w, data)
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        let shape =
            if self.batch == 1 { vec![self.height, self.width] } else { vec![self.batch, self.height, self.width] };
        Tensor::from_parts(shape, self.data.iter().map(|&v| T::c(v as f64)).collect())
    }

    /// Per-pixel argmax over the class axis of `B x K x H x W` scores.
    pub fn argmax<T: Float>(scores: &Tensor<T>) -> Result<Self> {
        let [b, k, h, w] = *scores.shape() else {
            return dim_err(format!("argmax expects B x K x H x W, got {:?}", scores.shape()));
        };
        let d = scores.data();
        let hw = h * w;
        let mut out = Vec::with_capacity(b * hw);
        for bi in 0..b {
            for p in 0..hw {
                let mut best = 0;
                let mut best_v = d[bi * k * hw + p];
                for c in 1..k {
                    let v = d[(bi * k + c) * hw + p];
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                out.push(best as u32);
            }
        }
        Self::new(b, h, w, out)
    }

    /// Stacks single-image maps into one batch.
    pub fn stack(maps: &[&LabelMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::Contract("empty label stack".into()))?;
        let mut data = Vec::new();
        let mut batch = 0;
        for m in maps {
            if (m.height, m.width) != (first.height, first.width) {
                return dim_err("label maps in a batch must share spatial extent");
            }
            data.extend_from_slice(&m.data);
            batch += m.batch;
        }
        Self::new(batch, first.height, first.width, data)
    }

    /// Single-image view of batch item `i`.
    pub fn item(&self, i: usize) -> LabelMap {
        let hw = self.height * self.width;
        LabelMap { batch: 1, height: self.height, width: self.width, data: self.data[i * hw..(i + 1) * hw].to_vec() }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    pub fn max_id(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn check_classes(&self, k: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v as usize >= k) {
            Some(v) => Err(Error::Contract(format!("label id {v} not below class count {k}"))),
            None => Ok(()),
        }
    }

    /// Number of pixels carrying each class id `0..k`.
    pub fn class_counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0; k];
        for &v in &self.data {
            if (v as usize) < k {
                counts[v as usize] += 1;
            }
        }
        counts
    }
}
