//! Dense linear algebra, differentiable primitives and gradient checking.

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
mod real;
mod tensor;

pub use gradcheck::{check_gradients, numeric_gradient, Differentiable, GradCheckConfig, GradCheckReport};
pub use ops::{
    cosine_similarity, cross_entropy, cross_entropy_with_logits, layer_norm, log_sigmoid, sigmoid,
    softmax, LayerNormCache,
};
pub use optim::{AdamW, WarmupCosine};
pub use params::{load_checkpoint, save_checkpoint, CheckpointManifest, Grads, Param, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor2D;
