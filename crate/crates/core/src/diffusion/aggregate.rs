use serde::{Deserialize, Serialize};

use super::{DiffusionError, LatentClip};
use crate::nn::Tensor;

/// How overlapping clips are weighted when fused into one latent per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationWeights {
    #[default]
    Uniform,
    /// Frame `i` of a clip of length `L` gets `min(i + 1, L - i)`.
    Triangular,
}

impl AggregationWeights {
    fn weight(self, i: usize, len: usize) -> f64 {
        match self {
            Self::Uniform => 1.0,
            Self::Triangular => (i + 1).min(len - i) as f64,
        }
    }
}

/// Start offsets of clips of `clip_len` frames with the given stride,
/// covering `0..total`. The last clip is aligned to the end.
pub fn clip_offsets(total: usize, clip_len: usize, stride: usize) -> Result<Vec<usize>, DiffusionError> {
    if clip_len == 0 || stride == 0 || stride > clip_len {
        return Err(DiffusionError::ShapeMismatch(format!(
            "clip length {clip_len} with stride {stride}"
        )));
    }
    if total <= clip_len {
        return Ok(vec![0]);
    }
    let last = total - clip_len;
    let mut offsets: Vec<usize> = (0..last).step_by(stride).collect();
    offsets.push(last);
    Ok(offsets)
}

/// Weighted per-frame average of overlapping clip latents. `clips` holds
/// `(start frame, clip)`; every frame in `0..total` must be covered.
pub fn temporal_aggregate(
    clips: &[(usize, LatentClip)],
    total: usize,
    mode: AggregationWeights,
) -> Result<LatentClip, DiffusionError> {
    let first = clips
        .first()
        .ok_or_else(|| DiffusionError::ShapeMismatch("no clips to aggregate".into()))?;
    let frame_shape = first.1.tensor().shape()[1..].to_vec();
    let per_frame: usize = frame_shape.iter().product();
    let mut sum = vec![0.0; total * per_frame];
    let mut weight = vec![0.0; total];
    for (start, clip) in clips {
        if clip.tensor().shape()[1..] != frame_shape[..] {
            return Err(DiffusionError::ShapeMismatch(format!(
                "clip {:?} vs frame {frame_shape:?}",
                clip.tensor().shape()
            )));
        }
        let len = clip.frames();
        if start + len > total {
            return Err(DiffusionError::ShapeMismatch(format!(
                "clip at {start} of {len} frames runs past {total}"
            )));
        }
        for i in 0..len {
            let w = mode.weight(i, len);
            let src = &clip.tensor().data()[i * per_frame..(i + 1) * per_frame];
            let dst = &mut sum[(start + i) * per_frame..(start + i + 1) * per_frame];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
            weight[start + i] += w;
        }
    }
    if let Some(gap) = weight.iter().position(|&w| w == 0.0) {
        return Err(DiffusionError::CoverageGap(gap));
    }
    for (f, w) in weight.iter().enumerate() {
        for v in &mut sum[f * per_frame..(f + 1) * per_frame] {
            *v /= w;
        }
    }
    let mut shape = vec![total];
    shape.extend_from_slice(&frame_shape);
    LatentClip::new(Tensor::new(shape, sum)?)
}
