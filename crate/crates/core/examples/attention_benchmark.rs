// Times softmax attention, efficient attention and MSLA at a few sequence lengths.

use msla::bench::{bench_attention, BenchOptions};

fn main() {
    let sizes = if std::env::var("FULL").is_ok() { vec![1024, 2304, 4096] } else { vec![64, 256] };
    let report = bench_attention(&BenchOptions { sizes, ..Default::default() }).unwrap();
    print!("{}", report.to_csv());
}
