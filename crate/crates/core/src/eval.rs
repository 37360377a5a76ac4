//! Inference and evaluation with batch norm in eval mode.

use crate::attention::{attention_map, AttentionMap};
use crate::autodiff::{Graph, Mode};
use crate::data::batch::make_batch;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::network::{BlockKind, Model};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Logits `B x K x H x W` for a batch of images `B x C x H x W`.
pub fn predict_logits(model: &Model, params: &ParamStore<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::inference(Mode::Eval);
    let x = g.constant(images.clone());
    let y = model.forward(&mut g, params, x)?;
    Ok(g.value(y).clone())
}

/// Argmax label map for one `C x H x W` image or a `B x C x H x W` batch.
pub fn infer(model: &Model, params: &ParamStore<f32>, image: &Tensor<f32>) -> Result<LabelMap> {
    let batched = match image.rank() {
        3 => {
            let mut s = image.shape().to_vec();
            s.insert(0, 1);
            image.reshape(&s)?
        }
        4 => image.clone(),
        _ => {
            return Err(Error::Dimension(format!("expected C x H x W or B x C x H x W image, got {:?}", image.shape())))
        }
    };
    LabelMap::argmax(&predict_logits(model, params, &batched)?)
}

/// Full metric suite over `data`; `hd_percentile` is 100 for the maximum or
/// 95 for HD95. An empty prediction for a class present in the ground truth
/// (or the reverse) takes the image-diagonal penalty and is counted in
/// [`MetricReport::hd_penalties`].
pub fn evaluate(
    model: &Model,
    params: &ParamStore<f32>,
    data: &Dataset,
    hd_percentile: f64,
    batch_size: usize,
) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let k = model.config.num_classes;
    let mut acc = MetricAccumulator::new(k, hd_percentile);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut rng = rand::SeedableRng::seed_from_u64(0);
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = make_batch(data, chunk, 0.0, &mut rng)?;
        let pred = LabelMap::argmax(&predict_logits(model, params, &b.images)?)?;
        acc.add(&pred, &b.labels)?;
    }
    Ok(acc.finish())
}

/// Attention weights of one query token, from the first attention head of the
/// last block of a global stage, reshaped onto that stage's token grid.
/// `stage` is 1-based; `query` is `(row, col)` on the stage grid.
pub fn inspect_attention(
    model: &Model,
    params: &ParamStore<f32>,
    image: &Tensor<f32>,
    stage: usize,
    query: (usize, usize),
) -> Result<(AttentionMap<f32>, Tensor<f32>)> {
    if !(1..=4).contains(&stage) {
        return Err(Error::Config(format!("stage must be 1..4, got {stage}")));
    }
    let st = &model.encoder.stages[stage - 1];
    if st.kind != BlockKind::Global {
        return Err(Error::Config(format!(
            "stage {stage} has no attention (pattern {})",
            model.config.pattern_string()
        )));
    }
    let batched = match image.rank() {
        3 => {
            let mut s = image.shape().to_vec();
            s.insert(0, 1);
            image.reshape(&s)?
        }
        _ => return Err(Error::Dimension(format!("expected one C x H x W image, got {:?}", image.shape()))),
    };
    let (h, w) = (batched.shape()[2] >> (stage + 1), batched.shape()[3] >> (stage + 1));
    if query.0 >= h || query.1 >= w {
        return Err(Error::Bounds(format!("query {:?} outside the {h}x{w} grid of stage {stage}", query)));
    }
    let mut g = Graph::inference(Mode::Eval);
    g.enable_capture();
    let x = g.constant(batched);
    model.encoder.forward(&mut g, params, x)?;
    let prefix = format!("enc.stage{stage}.block{}.msla", st.blocks.len() - 1);
    let caps = g.take_captures();
    let find = |what: &str| -> Result<Tensor<f32>> {
        let name = format!("{prefix}.{what}.0.0");
        caps.iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Contract(format!("no capture named {name}")))
    };
    let (q, k) = (find("q")?, find("k")?);
    let d = q.shape()[2];
    let n = h * w;
    let q = q.reshape(&[n, d])?;
    let k = k.reshape(&[n, d])?;
    let map = attention_map(&q, &k, query.0 * w + query.1)?;
    let spatial = map.scores.reshape(&[h, w])?;
    Ok((map, spatial))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_model, ModelConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            stage_depths: [1, 1, 1, 1],
            stage_widths: [8, 16, 32, 64],
            head_width: 4,
            num_classes: 3,
            input_size: (32, 32),
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn evaluate_is_deterministic_and_bounded() {
        let data = Dataset::synthetic(2, 0..3, 32, 32, 3).unwrap();
        let (model, p) = build_model::<f32>(tiny(), 0).unwrap();
        let a = evaluate(&model, &p, &data, 100.0, 2).unwrap();
        let b = evaluate(&model, &p, &data, 100.0, 3).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.mean_dsc));
        assert_eq!(a.images, 3);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (model, p) = build_model::<f32>(tiny().with_pattern("LLGG").unwrap(), 0).unwrap();
        let img = Tensor::from_fn(&[3, 64, 64], |i| (i % 97) as f32 / 97.0);
        let (map, spatial) = inspect_attention(&model, &p, &img, 3, (1, 2)).unwrap();
        assert_eq!(spatial.shape(), &[4, 4]);
        assert!((map.scores.sum() - 1.0).abs() < 1e-5);
        assert!(inspect_attention(&model, &p, &img, 1, (0, 0)).is_err());
        assert!(matches!(inspect_attention(&model, &p, &img, 3, (4, 0)), Err(Error::Bounds(_))));
    }
}
