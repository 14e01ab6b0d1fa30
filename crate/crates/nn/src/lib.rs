//! A minimal convolutional network engine for `(time, width, channel)` tensors.
//!
//! The engine covers exactly what the Hyper-CNN family needs: valid-padded
//! convolutions, time-axis max pooling, inverted dropout, dense layers and a
//! softmax classification head, trained with mean categorical cross-entropy.
//! Everything is generic over [`Real`] so that the same code runs in `f32` for
//! training and in `f64` for gradient checking.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod optim;
pub mod real;
pub mod seed;
pub mod spec;
pub mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use error::NnError;
pub use network::{Mode, Network};
pub use optim::{OptimizerKind, OptimizerState};
pub use real::Real;
pub use spec::{Activation, Layer, ModelSpec, Shape, Shape3};
pub use train::{
    evaluate, train, EpochStats, LearnConfig, Metrics, TensorSet, TrainData, TrainedModel,
};
