use msla::data::checkpoint::{encode_store, load_checkpoint, save_checkpoint};
use msla::data::Dataset;
use msla::eval::{evaluate, infer, predict_logits};
use msla::network::{build_model, ModelConfig, OptimizerKind, TrainConfig};
use msla::train::{train, TrainOptions};
use msla::{Error, Tensor};

fn small_model() -> ModelConfig {
    ModelConfig { stage_depths: [1, 1, 2, 1], ..ModelConfig::desk() }
}

fn recipe(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 4, lr: 1e-3, ..TrainConfig::acdc() }
}

#[test]
fn two_epoch_smoke_run_lowers_loss() {
    let data = Dataset::synthetic(7, 0..16, 64, 64, 4).unwrap();
    let (model, params) = build_model::<f32>(ModelConfig::desk(), 0).unwrap();
    let out = train(
        &model,
        params,
        &TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::acdc() },
        &data,
        TrainOptions::default(),
    )
    .unwrap();
    assert_eq!(out.logs.len(), 2);
    assert!(out.logs[1].loss < out.logs[0].loss, "{:?}", out.logs);
}

#[test]
fn identical_seeds_give_identical_checkpoint_bytes() {
    let data = Dataset::synthetic(3, 0..8, 64, 64, 4).unwrap();
    let run = || {
        let (model, params) = build_model::<f32>(small_model(), 2).unwrap();
        let out = train(&model, params, &recipe(2), &data, TrainOptions { seed: 5, ..Default::default() }).unwrap();
        encode_store(&out.params).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn sgd_recipe_trains() {
    let data = Dataset::synthetic(3, 0..8, 64, 64, 4).unwrap();
    let (model, params) = build_model::<f32>(small_model(), 2).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::synapse() };
    assert_eq!(cfg.optimizer, OptimizerKind::Sgd);
    let out = train(&model, params, &cfg, &data, TrainOptions::default()).unwrap();
    assert!(out.logs[0].loss.is_finite());
}

#[test]
fn untrained_model_scores_below_half() {
    let data = Dataset::synthetic(11, 0..8, 64, 64, 4).unwrap();
    let (model, params) = build_model::<f32>(ModelConfig::desk(), 0).unwrap();
    let r = evaluate(&model, &params, &data, 100.0, 4).unwrap();
    assert!(r.mean_dsc < 0.5, "{}", r.mean_dsc);
}

#[test]
fn evaluation_after_checkpoint_reload_matches() {
    let data = Dataset::synthetic(4, 0..8, 64, 64, 4).unwrap();
    let (model, params) = build_model::<f32>(small_model(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train(
        &model,
        params,
        &recipe(2),
        &data,
        TrainOptions { seed: 1, out_dir: Some(dir.path().into()), ..Default::default() },
    )
    .unwrap();
    let direct = evaluate(&model, &out.params, &data, 95.0, 3).unwrap();
    let mut reloaded = model.init_params::<f32>(77);
    load_checkpoint(dir.path().join("last.mckp"), &mut reloaded).unwrap();
    assert_eq!(evaluate(&model, &reloaded, &data, 95.0, 5).unwrap(), direct);
    let mut best = model.init_params::<f32>(77);
    load_checkpoint(dir.path().join("best.mckp"), &mut best).unwrap();
    assert!(best.iter().zip(out.best_params.iter()).all(|((_, a), (_, b))| a.tensor.bitwise_eq(&b.tensor)));
    let log = std::fs::read_to_string(dir.path().join("train.log")).unwrap();
    assert!(log.lines().next().unwrap().starts_with("epoch=1 "));
}

#[test]
fn checkpoint_for_other_config_names_first_mismatch() {
    let (_, params) = build_model::<f32>(small_model(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mckp");
    save_checkpoint(&path, &params).unwrap();
    let other = ModelConfig { stage_widths: [16, 32, 64, 128], ..small_model() };
    let (_, mut target) = build_model::<f32>(other, 0).unwrap();
    match load_checkpoint(&path, &mut target) {
        Err(Error::Load(msg)) => assert!(msg.contains("dec.") || msg.contains("enc."), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn batch_norm_uses_running_stats_at_inference() {
    let data = Dataset::synthetic(4, 0..2, 64, 64, 4).unwrap();
    let (model, params) = build_model::<f32>(small_model(), 1).unwrap();
    let one = predict_logits(&model, &params, &data.images[0].reshape(&[1, 3, 64, 64]).unwrap()).unwrap();
    let mut both = data.images[0].data().to_vec();
    both.extend_from_slice(data.images[1].data());
    let pair = predict_logits(&model, &params, &Tensor::new(&[2, 3, 64, 64], both).unwrap()).unwrap();
    let n = one.numel();
    assert_eq!(&pair.data()[..n], one.data());
    let labels = infer(&model, &params, &data.images[0]).unwrap();
    assert_eq!((labels.batch(), labels.height(), labels.width()), (1, 64, 64));
}
