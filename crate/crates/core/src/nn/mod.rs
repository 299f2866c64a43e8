//! Dense multi-exit networks: early-exit inference, joint training, operation
//! counting and the per-sample quantities the attacks consume.

mod io;
mod layers;
mod model;
mod threshold;
mod train;

pub use io::{load_model, model_from_str, model_to_string, save_model, MODEL_FORMAT, MODEL_VERSION};
pub use layers::{
    cross_entropy, relu, relu_backward, softmax, DenseGrad, DenseLayer, NormCache, NormGrad, NormLayer, NormMode,
    NORM_EPSILON, NORM_MOMENTUM,
};
pub use model::{
    exit_placement, last_layer_gradient_from, select_rows, taken_exit_rule, Architecture, Block, EarlyPrediction,
    ExitHead, ExitOutputs, ForwardRecord, ModelGrads, MultiExitModel, MAX_EXITS,
};
#[allow(unused_imports)]
pub(crate) use model::{argmax, max_prob};
pub use threshold::{select_threshold, tau_grid, ThresholdChoice, DEFAULT_SLACK};
pub use train::{train_joint, Adam, TrainConfig, TrainLog};
