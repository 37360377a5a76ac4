//! Tensor and checkpoint files, synthetic scenes, augmentation and batching.

pub mod augment;
pub mod batch;
pub mod checkpoint;
pub mod mten;
pub mod synthetic;

pub use augment::{augment, Sample};
pub use batch::{batch_iter, make_batch, SampleBatch};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint};
pub use mten::{read_mten, write_mten, AnyTensor};
pub use synthetic::{gen_synthetic, load_dataset, scene, Dataset, SyntheticScene};
