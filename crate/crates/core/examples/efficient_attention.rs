// Efficient attention evaluated in both multiplication orders, and one row
// of its implicit attention matrix.

use msla::attention::{attention_map, efficient_attention_linear, efficient_attention_quadratic};
use msla::Tensor;

fn main() {
    let (n, d) = (64, 16);
    let q = Tensor::<f32>::from_fn(&[n, d], |i| ((i * 37 % 101) as f32 / 50.0) - 1.0);
    let k = Tensor::<f32>::from_fn(&[n, d], |i| ((i * 53 % 97) as f32 / 48.0) - 1.0);
    let v = Tensor::<f32>::from_fn(&[n, d], |i| (i as f32 * 0.1).sin());

    let linear = efficient_attention_linear(&q, &k, &v).unwrap();
    let quadratic = efficient_attention_quadratic(&q, &k, &v).unwrap();
    println!("max |linear - quadratic| = {:.2e}", linear.max_abs_diff(&quadratic));

    let row = attention_map(&q, &k, 27).unwrap();
    let grid = row.spatial().unwrap();
    println!("query 27 attends over a {:?} grid, weights sum to {:.6}", grid.shape(), row.scores.sum());
}
