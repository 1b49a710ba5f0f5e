//! Transformer generative model of future glucose and insulin given the
//! patient context, in parametric, latent-variable and autoregressive modes.
//!
//! Outcomes are modelled in scaled units (see [`crate::preprocess`]) with a
//! Gaussian head whose standard deviation is a learned per-(hour, channel)
//! table; treatments are integer insulin units with a Poisson head.

mod config;
mod elbo;
mod features;
mod net;
mod objective;
mod params;
mod sample;
mod train;


pub use config::{parse_channels, Channel, Mode, ModelConfig};
pub use elbo::{elbo_check, ElboCheck};
pub use objective::{
    kl_to_prior, loglik_outcome, loglik_treatment, objective_grad_check, objective_gradients, objective_l1, objective_l2,
    objective_l3, objective_value, sample_latent, GaussianPosterior, LossBatch, Objective, OutcomeDist, TreatmentDist,
};
pub use params::{ModelParams, ParamGroup, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use sample::{
    decode_outcome, decode_treatment, encode, most_probable_treatment, outcome_dists, poisson_mode, sample_outcomes,
    sample_outcomes_common, sample_treatments, treatment_dist, Encoding,
};
pub use train::{dataset_loss, eval_splits, train, train_with_scaler, TrainReport};

pub(crate) use features::{Batch, Timeline};
pub(crate) use net::{LatentPath, Net, Vars};
pub(crate) use sample::{poisson_draw, Prepared};
pub(crate) use train::{objective_for, train_splits};
#[cfg(test)]
pub(crate) use train::optimizer_step;
pub(crate) use objective::loss_graph;
