// Attention weights of one query token in a global stage of the encoder.

use msla::eval::inspect_attention;
use msla::network::{build_model, ModelConfig};
use msla::Tensor;

fn main() {
    let cfg = ModelConfig { input_size: (128, 128), ..ModelConfig::desk() };
    let (model, params) = build_model::<f32>(cfg, 0).unwrap();
    let image = Tensor::<f32>::from_fn(&[3, 128, 128], |i| ((i / 128) % 128) as f32 / 128.0);
    let (map, grid) = inspect_attention(&model, &params, &image, 3, (3, 5)).unwrap();
    println!("query token {} on a {:?} grid, sum {:.6}", map.query, grid.shape(), grid.sum());
    for r in 0..grid.shape()[0] {
        let row: Vec<String> = (0..grid.shape()[1]).map(|c| format!("{:.3}", grid.at(&[r, c]))).collect();
        println!("{}", row.join(" "));
    }
}
