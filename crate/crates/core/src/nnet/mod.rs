//! From-scratch convolutional classifier: tensors, forward/backward passes,
//! soft-target cross-entropy, SGD with a cosine schedule, training and
//! the `SLM1` model format.

mod gemm;
mod io;
mod loss;
mod network;
mod optim;
mod scratch;
mod tensor;
mod train;

pub use io::{decode_model, encode_model, load_model, load_model_for, save_model, MAGIC as MODEL_MAGIC};
pub use loss::{soft_cross_entropy, soft_cross_entropy_labels, softmax_rows, targets_tensor};
pub use network::{
    backbone, validate_architecture, ForwardCache, ForwardOutput, Gradients, Layer, Network, DEFAULT_CHANNELS,
    INPUT_CHANNELS,
};
pub use optim::{cosine_lr, sgd_step, Sgd};
pub use tensor::Tensor;
pub use train::{
    aggregate, batch_tensor, build_targets, evaluate_split, predict, simulate_item_annotations, train,
    train_on_targets, EpochLog, Predictions, Schedule, TargetMode, TrainConfig, TrainingLog, TRAIN_LOG_HEADER,
};
