// Builds the presets, prints their sizes and runs one forward pass.

use msla::count::CountReport;
use msla::network::{build_model, ModelConfig, PRESETS};
use msla::{Graph, Mode, Tensor};

fn main() {
    for name in PRESETS {
        let cfg = ModelConfig::preset(name).unwrap();
        let r = CountReport::of(&cfg).unwrap();
        println!(
            "{name:>5}: pattern {} depths {:?} widths {:?} -> {:.2}M params, {:.2}G at {}x{}",
            cfg.pattern_string(),
            cfg.stage_depths,
            cfg.stage_widths,
            r.params as f64 / 1e6,
            r.flops as f64 / 1e9,
            r.input_size.0,
            r.input_size.1
        );
    }

    let (model, params) = build_model::<f32>(ModelConfig::desk(), 0).unwrap();
    let mut g = Graph::inference(Mode::Eval);
    let x = g.constant(Tensor::zeros(&[2, 3, 64, 64]));
    let logits = model.forward(&mut g, &params, x).unwrap();
    println!("desk logits: {:?}", g.shape(logits));
}
