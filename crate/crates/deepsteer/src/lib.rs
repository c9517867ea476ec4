//! End-to-end steering prediction: spatio-temporal convolutions, ConvLSTM
//! and a recurrent steering head, with training, evaluation baselines and
//! visual back-propagation saliency. All numerics are hand-paired
//! forward/backward passes over dense f64 tensors.

pub mod checkpoint;
pub mod convlstm;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod lstm;
pub mod model;
pub mod tensor;
pub mod train;
pub mod vbp;

pub use error::{Error, Result};
