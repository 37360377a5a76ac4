// Dice, Hausdorff and region metrics on hand-made label maps.

use msla::metrics::{dsc, hausdorff, region_metrics};
use msla::LabelMap;

fn main() {
    #[rustfmt::skip]
    let gt = LabelMap::new(1, 4, 4, vec![
        0, 0, 0, 0,
        0, 1, 1, 0,
        0, 1, 1, 0,
        0, 0, 2, 2,
    ]).unwrap();
    #[rustfmt::skip]
    let pred = LabelMap::new(1, 4, 4, vec![
        0, 0, 0, 0,
        0, 1, 1, 1,
        0, 1, 0, 0,
        0, 0, 2, 0,
    ]).unwrap();

    let d = dsc(&pred, &gt, 3).unwrap();
    println!("dsc per class {:?}, mean {:.4}", d.per_class, d.mean);
    for class in 1..3 {
        let hd = hausdorff(&pred, &gt, class, 100.0).unwrap();
        println!("class {class}: hd {:.4}", hd.distance);
    }
    let r = region_metrics(&pred, &gt, 3).unwrap();
    println!("miou {:.4} accuracy {:.4} precision {:.4} recall {:.4}", r.miou, r.accuracy, r.precision, r.recall);
}
