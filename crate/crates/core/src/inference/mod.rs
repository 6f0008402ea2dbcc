//! Amortized mean-field variational inference.

mod elbo;
mod encoder;
mod gradcheck;
mod state;
mod train;

pub use elbo::{elbo, sample_latents, ElboOptions, ElboOutput, ElboTerms, Latents, Noise};
pub use encoder::{
    BatchStats, DenseLayer, EncodeMode, Encoder, EncoderOutput, HiddenLayer, BN_EPS, BN_MOMENTUM,
    LOG_SIGMA_CLAMP,
};
pub use gradcheck::{check_elbo_gradients, GradCheckInstance, GradCheckReport, GRADCHECK_FLOOR, GRADCHECK_NOISE_SCALE};
pub use state::{Params, StateGrad, VariationalState, INIT_LOG_SIGMA, INIT_MEAN_SD};
pub use train::{eb_gradient, infer_theta, infer_theta_matrix, train, TrainedModel, Trainer};
pub(crate) use train::proportions_from_log;
