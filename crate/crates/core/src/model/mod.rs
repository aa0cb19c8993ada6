//! The fused transformer architecture and its variants.

mod checkpoint;
mod config;
pub mod layers;
mod network;

pub use checkpoint::Checkpoint;
pub use config::{
    format_dims, format_modalities, parse_dims, parse_modalities, valid_modality_name, Activation,
    ModalitySpec, ModelConfig, NormPlacement,
};
pub use network::{
    declare, embed, forward, init_params, mft_forward, probabilities, single_modality_forward,
    Inputs, Logits, Variant, FUSION_PIPELINE,
};
