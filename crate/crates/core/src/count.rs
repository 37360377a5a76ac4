//! Parameter and multiply-accumulate counts.
//!
//! Operation counts are multiply-accumulates of convolutions, matmuls and the
//! linear-order attention products; norms, activations and elementwise ops
//! are not counted. This is the convention behind the published "FLOPs"
//! totals of hybrid segmentation networks.

use crate::error::Result;
use crate::network::{Model, ModelConfig};

/// Trainable scalars of `model` (running statistics excluded).
pub fn count_params(model: &Model) -> usize {
    model.init_params::<f32>(0).count_params()
}

/// Operation count of one forward pass of a single `h x w` image.
pub fn count_flops(model: &Model, h: usize, w: usize) -> Result<u64> {
    let cfg = ModelConfig { input_size: (h, w), ..model.config.clone() };
    Ok(Model::new(cfg)?.macs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CountReport {
    pub params: usize,
    pub flops: u64,
    pub input_size: (usize, usize),
}

impl CountReport {
    pub fn of(cfg: &ModelConfig) -> Result<Self> {
        let model = Model::new(cfg.clone())?;
        let (h, w) = cfg.input_size;
        Ok(Self { params: count_params(&model), flops: count_flops(&model, h, w)?, input_size: (h, w) })
    }

    pub fn lines(&self) -> String {
        format!(
            "params={} ({:.2}M)\nflops={} ({:.2}G at {}x{})\n",
            self.params,
            self.params as f64 / 1e6,
            self.flops,
            self.flops as f64 / 1e9,
            self.input_size.0,
            self.input_size.1
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Linear;
    use crate::params::{Init, ParamStore};

    #[test]
    fn linear_four_to_three() {
        let mut store = ParamStore::<f64>::new();
        Linear::new("fc".into(), 4, 3, true).init(&mut store, &mut Init::new(0));
        assert_eq!(store.count_params(), 15);
    }

    #[test]
    fn flops_scale_with_area() {
        let model = Model::new(ModelConfig::desk()).unwrap();
        let a = count_flops(&model, 64, 64).unwrap();
        let b = count_flops(&model, 128, 128).unwrap();
        assert!(b > 3 * a && b <= 4 * a, "{a} {b}");
        assert_eq!(a, model.macs());
    }

    #[test]
    fn report_lines() {
        let r = CountReport::of(&ModelConfig::desk()).unwrap();
        let text = r.lines();
        assert!(text.starts_with("params=") && text.contains("\nflops="));
    }
}
