// A short training run on synthetic scenes followed by held-out evaluation.

use msla::data::Dataset;
use msla::eval::evaluate;
use msla::network::{build_model, ModelConfig, TrainConfig};
use msla::train::{train, TrainOptions};

fn main() {
    let epochs = std::env::var("EPOCHS").ok().and_then(|e| e.parse().ok()).unwrap_or(2);
    let data = Dataset::synthetic(7, 0..40, 64, 64, 4).unwrap();
    let (train_set, held_out) = data.split(32);

    let (model, params) = build_model::<f32>(ModelConfig::desk(), 0).unwrap();
    let recipe = TrainConfig { epochs, batch_size: 8, ..TrainConfig::acdc() };
    let opts = TrainOptions { seed: 1, log: Some(Box::new(|l: &str| println!("{l}"))), ..Default::default() };
    let out = train(&model, params, &recipe, &train_set, opts).unwrap();

    let report = evaluate(&model, &out.params, &held_out, 95.0, 8).unwrap();
    print!("{}", report.to_text());
}
