//! Trainable networks, differentiation and optimization.

pub mod adam;
pub mod grad;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use grad::{compute_gradients, GradOutput, LossTerms};
pub use graph::{Gradients, Graph, Var};
pub use model::{
    apply_bn_observations, classifier_forward, encode_features, encoder_forward, predict_future, predict_logits,
    projection_head_forward, transformer_context, BnObservation, EncoderConfig, ForwardCtx, ModelConfig, ModelDims,
    TransformerConfig,
};
pub use params::{is_buffer, Bound, ParamStore};
