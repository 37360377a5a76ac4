// Generates a small synthetic corpus on disk, loads it and augments a sample.

use msla::data::{augment, gen_synthetic, load_dataset, Sample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    gen_synthetic(dir.path(), 7, 6, 64, 64, 4).unwrap();
    let data = load_dataset(dir.path()).unwrap();
    println!("loaded {} scenes of {:?}", data.len(), data.extent().unwrap());
    for (i, l) in data.labels.iter().enumerate() {
        println!("scene {i}: class pixel counts {:?}", l.class_counts(4));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = Sample { image: data.images[0].clone(), label: data.labels[0].clone() };
    let a = augment(s, &mut rng, 0.5);
    println!("augmented counts {:?}", a.label.class_counts(4));
}
