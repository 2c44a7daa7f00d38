//! From-scratch tensors, layers, the steering/throttle regression network, its
//! trainer and the weight file format.

mod model;
pub mod ops;
mod tensor;
mod train;
mod weights_io;

pub use model::{
    forward, forward_tensor, image_to_tensor, parameter_gradients, Activation, InputShape, LayerParams, LayerSpec,
    ModelSpec, ModelWeights, OUTPUTS,
};
pub use ops::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, dropout, relu_backward,
    relu_forward, Mode,
};
pub use tensor::{DType, Scalar, Tensor};
pub use train::{
    evaluate, train, train_from, EpochRecord, Evaluation, FrameSamples, Optimizer, SampleSet,
    Trainer, TrainerConfig, TrainingHistory,
};
pub use weights_io::{decode_weights, encode_weights, load_weights, save_weights};
