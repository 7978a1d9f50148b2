//! The feature network: global and local encoders, the NMS decoder and the
//! count decoder, trained with hand-written backpropagation and Adam.

mod arch;
pub mod layers;
mod model;
mod train;

pub use arch::HatArchitecture;
pub use model::{HatModel, LossValue, LossWeights, Prediction};
#[doc(hidden)]
pub use train::save_model_versioned;
pub use train::{
    init_output_priors, load_model, save_model, train, write_loss_curve, AdamState, DecoderMode,
    EpochLoss, TrainOptions, TrainSample, MODEL_VERSION,
};
