//! Regional probabilistic velocity fields and their optimization, per pair
//! (direct) or through a small encoder-decoder (amortized).

mod adam;
mod amortized;
mod config;
mod direct;
mod network;
mod params;
mod pipeline;

pub use adam::{adam_step, AdamParams, AdamState};
pub use amortized::{predict_amortized, train_amortized, EpochMetrics, TrainedModel};
pub use config::{Mode, Regime, RegistrationConfig, AMORTIZED_LR, DIRECT_LR};
pub use direct::{register_direct, RegistrationResult};
pub use network::{check_network_dims, ConvLayer, Head, ToyUNetWeights, UNetChannel, DOWNSAMPLING, KERNEL};
pub use params::{decode_field, sample_velocity, split_by_region, RegionalSVFParams};
pub use pipeline::{forward_baseline, forward_ddir, record_objective, ForwardResult, ImagePair, LossComponents};
