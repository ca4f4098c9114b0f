//! Differentiable tensor core and the FCN-8 network.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod tensor;

use thiserror::Error;

pub use layers::{
    layer_backward, layer_forward, Backward, Cache, Conv2d, ConvGeom, ConvTranspose2d, Layer, LayerKind, Param,
    ParamGrads,
};
pub use loss::{argmax_mask, softmax, softmax_cross_entropy, LossOutput};
pub use model::{Fcn8Model, Tape, WidthMultiplier, NUM_CLASSES, STRIDE};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("stale cache: {0}")]
    StaleCache(String),
    #[error("every pixel in the batch is ignored")]
    AllPixelsIgnored,
    #[error("width multiplier must be one of 1, 1/2, 1/4, 1/8, 1/16 (got {0})")]
    BadWidth(f64),
}
