//! The transformer-based actor-critic controller.

mod ddpg;
mod replay;
mod transformer;

pub use ddpg::{
    apply_noise, param_distance, soft_update, ControllerError, DdpgAgent, DdpgConfig, UpdateStats,
};
pub use replay::{ReplayBuffer, Transition};
pub use transformer::{
    causal_mask, positional_encoding, Attention, BoundNet, OutputSquash, TransformerConfig,
    TransformerNet, ACTION_DIM,
};
