//! Toy-scale tensor math: a reverse-mode tape, the attention wirings used by
//! the denoiser, the pose and environment encoders, finite-difference
//! gradient checking and the flat tensor container.

mod attention;
mod autodiff;
pub mod container;
mod encoders;
mod grad;
mod tensor;

use thiserror::Error;

pub use attention::{
    attend, attention, attention_var, env_cross_attention, env_cross_attention_var, ref_attention,
    ref_attention_var, temporal_attention, temporal_attention_var, AttentionVars, AttentionWeights,
    FeatureClip,
};
pub use autodiff::{sigmoid, silu, Gradients, Tape, Var};
pub use encoders::{EnvEncoder, PoseEncoder, PoseEncoderVars};
pub use grad::{grad_check, relative_error};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape {shape:?} does not hold {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("missing parameter {0}")]
    MissingParam(String),
}
