//! A small, exactly-differentiated convolutional network. Two image
//! streams (RGB and the texture-mapped rendering) can be fused at the
//! input (channel concatenation) or late (parallel towers joined in
//! front of the classifier).

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{backward, forward, ConvBlockSpec, ForwardOutput, FusionMode, FusionNetSpec, ParamBlock, Params};
pub use tensor::Tensor;
pub use train::{
    extract_features, predict, sgd_step, train, write_loss_csv, TrainConfig, TrainExample,
    TrainResult,
};
