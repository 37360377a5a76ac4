// Finite-difference gradient checks of a few operations in double precision.

use msla::gradcheck::{run_suite, TOLERANCE};

fn main() {
    for case in ["softmax", "layernorm", "efficient_attention", "msla"] {
        for report in run_suite(case, 3, TOLERANCE).unwrap() {
            println!("{}", report.line());
            assert!(report.passed);
        }
    }
}
