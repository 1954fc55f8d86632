//! Pose guider and environment encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::autodiff::{Tape, Var};
use super::tensor::Tensor;
use super::NnError;
use crate::image::Image;

/// Frozen patch extractor followed by a learnable projection.
///
/// The frame is split into a `grid x grid` layout of cells; each cell is
/// sampled on a `samples x samples` lattice per channel and pushed through a
/// fixed seeded random projection and `tanh`. The resulting per-cell features
/// are then projected to the model width by `proj` / `bias`, giving
/// `grid²` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvEncoder {
    pub grid: usize,
    pub samples: usize,
    pub channels: usize,
    /// Frozen, `(samples² * channels, feature_dim)`.
    pub extractor: Tensor,
    /// Learnable, `(feature_dim, width)`.
    pub proj: Tensor,
    pub bias: Tensor,
}

impl EnvEncoder {
    pub const DEFAULT_GRID: usize = 4;
    const SAMPLES: usize = 4;
    const FEATURE_DIM: usize = 32;

    pub fn new(channels: usize, grid: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_dim = Self::SAMPLES * Self::SAMPLES * channels;
        let extractor = Tensor::randn(&[in_dim, Self::FEATURE_DIM], 1.0 / (in_dim as f64).sqrt(), &mut rng);
        let proj = Tensor::randn(
            &[Self::FEATURE_DIM, width],
            1.0 / (Self::FEATURE_DIM as f64).sqrt(),
            &mut rng,
        );
        Self {
            grid,
            samples: Self::SAMPLES,
            channels,
            extractor,
            proj,
            bias: Tensor::zeros(&[width]),
        }
    }

    pub fn width(&self) -> usize {
        self.proj.shape()[1]
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    /// Frozen per-cell features, `(grid², feature_dim)`.
    pub fn features(&self, frame: &Image) -> Result<Tensor, NnError> {
        if frame.channels() != self.channels {
            return Err(NnError::ShapeMismatch(format!(
                "env encoder expects {} channels, frame has {}",
                self.channels,
                frame.channels()
            )));
        }
        let (g, s) = (self.grid, self.samples);
        let cell_w = frame.width() as f64 / g as f64;
        let cell_h = frame.height() as f64 / g as f64;
        let mut raw = Vec::with_capacity(g * g * s * s * self.channels);
        for gy in 0..g {
            for gx in 0..g {
                for sy in 0..s {
                    for sx in 0..s {
                        let x = (gx as f64 + (sx as f64 + 0.5) / s as f64) * cell_w - 0.5;
                        let y = (gy as f64 + (sy as f64 + 0.5) / s as f64) * cell_h - 0.5;
                        for c in 0..self.channels {
                            raw.push(frame.sample_bilinear(x, y, c));
                        }
                    }
                }
            }
        }
        let patches = Tensor::new(vec![g * g, s * s * self.channels], raw)?;
        Ok(patches.matmul(&self.extractor)?.map(f64::tanh))
    }

    /// Learnable part on a tape: `features proj + bias`.
    pub fn project_var(tape: &Tape, features: Var, proj: Var, bias: Var) -> Result<Var, NnError> {
        let y = tape.matmul(features, proj)?;
        tape.add_tiled(y, bias)
    }

    /// Environment tokens `(grid², width)` for a masked frame.
    pub fn encode(&self, frame: &Image) -> Result<Tensor, NnError> {
        let features = self.features(frame)?;
        let tape = Tape::new();
        let (f, p, b) = (tape.leaf(features), tape.leaf(self.proj.clone()), tape.leaf(self.bias.clone()));
        let out = Self::project_var(&tape, f, p, b)?;
        Ok((*tape.value(out)).clone())
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.extractor"), self.extractor.clone()),
            (format!("{prefix}.proj"), self.proj.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

/// Two stride-2 3x3 convolutions with SiLU, then a 1x1 projection to the
/// model width: a `(H, W)` pose map becomes `(H/4 * W/4, width)` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEncoder {
    pub conv1: Tensor,
    pub bias1: Tensor,
    pub conv2: Tensor,
    pub bias2: Tensor,
    pub proj: Tensor,
    pub bias_proj: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct PoseEncoderVars {
    pub conv1: Var,
    pub bias1: Var,
    pub conv2: Var,
    pub bias2: Var,
    pub proj: Var,
    pub bias_proj: Var,
}

impl PoseEncoder {
    pub fn new(in_channels: usize, hidden: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std1 = 1.0 / ((in_channels * 9) as f64).sqrt();
        let std2 = 1.0 / ((hidden * 9) as f64).sqrt();
        Self {
            conv1: Tensor::randn(&[hidden, in_channels, 3, 3], std1, &mut rng),
            bias1: Tensor::zeros(&[hidden]),
            conv2: Tensor::randn(&[hidden, hidden, 3, 3], std2, &mut rng),
            bias2: Tensor::zeros(&[hidden]),
            proj: Tensor::randn(&[hidden, width], 1.0 / (hidden as f64).sqrt(), &mut rng),
            bias_proj: Tensor::zeros(&[width]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.proj.shape()[1]
    }

    pub fn bind(&self, tape: &Tape) -> PoseEncoderVars {
        PoseEncoderVars {
            conv1: tape.leaf(self.conv1.clone()),
            bias1: tape.leaf(self.bias1.clone()),
            conv2: tape.leaf(self.conv2.clone()),
            bias2: tape.leaf(self.bias2.clone()),
            proj: tape.leaf(self.proj.clone()),
            bias_proj: tape.leaf(self.bias_proj.clone()),
        }
    }

    /// `input` is `(C, H, W)`.
    pub fn forward_var(tape: &Tape, input: Var, p: &PoseEncoderVars) -> Result<Var, NnError> {
        let h1 = tape.silu(tape.conv2d(input, p.conv1, Some(p.bias1), 2, 1)?);
        let h2 = tape.silu(tape.conv2d(h1, p.conv2, Some(p.bias2), 2, 1)?);
        let shape = tape.shape(h2);
        let tokens = tape.transpose(tape.reshape(h2, &[shape[0], shape[1] * shape[2]])?)?;
        let y = tape.matmul(tokens, p.proj)?;
        tape.add_tiled(y, p.bias_proj)
    }

    /// Planar `(C, H, W)` tensor of an interleaved image.
    pub fn planar(image: &Image) -> Tensor {
        let (w, h, c) = (image.width(), image.height(), image.channels());
        Tensor::from_fn(&[c, h, w], |i| {
            let (ch, rest) = (i / (h * w), i % (h * w));
            image.get(rest % w, rest / w, ch)
        })
    }

    pub fn encode(&self, pose_map: &Image) -> Result<Tensor, NnError> {
        if pose_map.channels() != self.in_channels() {
            return Err(NnError::ShapeMismatch(format!(
                "pose encoder expects {} channels, map has {}",
                self.in_channels(),
                pose_map.channels()
            )));
        }
        if !pose_map.width().is_multiple_of(4) || !pose_map.height().is_multiple_of(4) {
            return Err(NnError::ShapeMismatch(format!(
                "pose map {}x{} is not divisible by 4",
                pose_map.width(),
                pose_map.height()
            )));
        }
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let input = tape.leaf(Self::planar(pose_map));
        let out = Self::forward_var(&tape, input, &vars)?;
        Ok((*tape.value(out)).clone())
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.conv1"), self.conv1.clone()),
            (format!("{prefix}.bias1"), self.bias1.clone()),
            (format!("{prefix}.conv2"), self.conv2.clone()),
            (format!("{prefix}.bias2"), self.bias2.clone()),
            (format!("{prefix}.proj"), self.proj.clone()),
            (format!("{prefix}.bias_proj"), self.bias_proj.clone()),
        ]
    }
}
