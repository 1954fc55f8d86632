//! Latent-diffusion math at toy scale: the patch codec standing in for the
//! VAE, the noise schedule and forward process, the noise-prediction loss,
//! a small denoiser wired with the three attention blocks, ancestral
//! sampling and overlapping-clip aggregation.

mod aggregate;
mod codec;
mod denoiser;
mod sampler;
mod schedule;

use thiserror::Error;

use crate::nn::{NnError, Tensor};

pub use aggregate::{clip_offsets, temporal_aggregate, AggregationWeights};
pub use codec::{toy_decode, toy_encode, PATCH};
pub use denoiser::{
    assemble_inputs, split_inputs, Adam, DenoiserConfig, DenoiserInputs, NoisePredictor, ToyDenoiser,
    TrainingExample,
};
pub use sampler::{denoise_clip, posterior_mean, reverse_step, SamplerMode};
pub use schedule::{add_noise, ldm_loss, make_schedule, NoiseSchedule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("image {width}x{height} is not divisible by the {patch}x{patch} patch")]
    IndivisibleSize {
        width: usize,
        height: usize,
        patch: usize,
    },
    #[error("beta range must satisfy 0 <= start <= end <= 1 with at least one step (got {start}..{end}, T = {steps})")]
    BadRange { start: f64, end: f64, steps: usize },
    #[error("step {0} has alpha = 0 and cannot be reversed")]
    Irreversible(usize),
    #[error("timestep {t} outside 1..={max}")]
    BadTimestep { t: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("frame {0} is not covered by any clip")]
    CoverageGap(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Latent clip `(frames, 4, H', W')`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentClip(Tensor);

impl LatentClip {
    pub const CHANNELS: usize = 4;

    pub fn new(t: Tensor) -> Result<Self, DiffusionError> {
        match t.shape() {
            [_, c, _, _] if *c == Self::CHANNELS => {}
            other => {
                return Err(DiffusionError::ShapeMismatch(format!(
                    "latent clip needs (f, 4, h, w), got {other:?}"
                )))
            }
        }
        if !t.is_finite() {
            return Err(NnError::NonFinite("latent clip").into());
        }
        Ok(Self(t))
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    /// `(height, width)` of the latent grid.
    pub fn spatial(&self) -> (usize, usize) {
        (self.0.shape()[2], self.0.shape()[3])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Stack per-frame `(4, H', W')` latents.
    pub fn stack(frames: &[Tensor]) -> Result<Self, DiffusionError> {
        let first = frames
            .first()
            .ok_or_else(|| DiffusionError::ShapeMismatch("no frames to stack".into()))?;
        let mut data = Vec::with_capacity(first.numel() * frames.len());
        for f in frames {
            if f.shape() != first.shape() {
                return Err(DiffusionError::ShapeMismatch(format!(
                    "frame {:?} vs {:?}",
                    f.shape(),
                    first.shape()
                )));
            }
            data.extend_from_slice(f.data());
        }
        let mut shape = vec![frames.len()];
        shape.extend_from_slice(first.shape());
        Self::new(Tensor::new(shape, data)?)
    }

    /// Latent of frame `i`, `(4, H', W')`.
    pub fn frame(&self, i: usize) -> Tensor {
        let s = self.0.shape();
        self.0
            .slice_rows(i, 1)
            .and_then(|t| t.reshape(&s[1..]))
            .expect("frame index in range")
    }
}
