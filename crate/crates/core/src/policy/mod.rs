//! The policy network: vision projection over selected pyramid layers,
//! language and proprio encoders, causal trunk with an action token, and
//! two action heads.

mod config;
mod layers;
mod model;
mod vq;

pub use config::{BackboneKind, HeadKind, PolicyConfig, VqConfig};
pub use layers::{
    encode_language, encode_proprio, init_language, init_mlp_head, init_project_vision, init_proprio, init_trunk,
    language_embedding, mlp_head, project_vision, trunk_forward, trunk_sequence,
};
pub use model::{Featurizer, ACTION_MEAN, ACTION_STD, Observation, Policy, PolicySpec, Vision};
pub use vq::{
    init_codebook, init_vqbet_head, nearest_code, quantize_actions, vq_decode, vq_encode, vq_quantize, vqbet_head,
    vqbet_loss, vqvae_loss, Quantized, VqLoss, VqbetLoss,
};
