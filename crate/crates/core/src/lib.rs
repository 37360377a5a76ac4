//! Multi-scale linear attention (MSLA) and a hybrid CNN-Transformer
//! segmentation network, built on a small reverse-mode tensor engine.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod blocks;
pub mod cli;
pub mod count;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod labels;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{Activation, Graph, Mode, Var};
pub use error::{Error, Result};
pub use labels::LabelMap;
pub use params::ParamStore;
pub use tensor::{DType, Float, Tensor};
