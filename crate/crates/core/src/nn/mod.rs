//! Minimal neural-network toolkit: dense tensors, named parameters, hand
//! written forward/backward passes, Adam, and a finite-difference gradient
//! checker. No external autodiff framework is involved; correctness rests
//! on the checker plus the per-layer tests below.

mod adam;
mod check;
mod checkpoint;
mod layers;
mod tensor;

pub use adam::Adam;
pub use check::{check_gradients, CheckOptions, TensorCheck};
pub use checkpoint::{describe_hash, load_store, restore_into, save_store, CheckpointMeta};
pub use layers::{
    add_channel_bias, attention_backward, attention_forward, avgpool2, avgpool2_backward,
    channel_bias_grad, silu_backward, silu_feat, silu_feat_backward, silu_forward, time_features,
    upsample2, upsample2_backward, AttnCache, Conv2d, Conv2dCache, Embedding, Linear, LinearCache,
};
pub use tensor::{Feat, GradBuffer, ParamId, ParameterStore, Tensor};
