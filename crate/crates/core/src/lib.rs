//! GraftedNet: a grafted ResNet/SqueezeNet person re-identification network
//! with multi-level and part-based feature heads, implemented on a small
//! from-scratch tensor library with hand-written backward passes.

pub mod archive;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod layers;
pub mod model;
pub mod ops;
pub mod optim;
pub mod seed;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use archive::WeightArchive;
pub use error::{Error, Result};
pub use layers::Mode;
pub use model::{Ablation, GraftedNet, GraftedNetConfig};
pub use tensor::{Scalar, Tensor};
