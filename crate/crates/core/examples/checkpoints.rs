// Saves parameters as a checkpoint and a tensor as MTEN, then reads both back.

use msla::data::checkpoint::{load_checkpoint, save_checkpoint};
use msla::data::{read_mten, write_mten};
use msla::network::{build_model, ModelConfig};
use msla::Tensor;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let (model, params) = build_model::<f32>(ModelConfig::desk(), 3).unwrap();
    let path = dir.path().join("model.mckp");
    save_checkpoint(&path, &params).unwrap();
    let mut restored = model.init_params::<f32>(4);
    load_checkpoint(&path, &mut restored).unwrap();
    let same = params.iter().zip(restored.iter()).all(|((_, a), (_, b))| a.tensor.bitwise_eq(&b.tensor));
    println!(
        "{} tensors, {} bytes, identical after reload: {same}",
        params.len(),
        std::fs::metadata(&path).unwrap().len()
    );

    let t = Tensor::<f64>::from_fn(&[2, 3], |i| 1.0 / (i as f64 + 1.0));
    write_mten(dir.path().join("t.mten"), &t).unwrap();
    let back: Tensor<f64> = read_mten(dir.path().join("t.mten")).unwrap();
    println!("mten roundtrip identical: {}", back.bitwise_eq(&t));
}
