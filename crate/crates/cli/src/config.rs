//! Pipeline configuration. Every field is optional in the JSON file and
//! falls back to the owning module's default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tunnel_core::diffusion::AggregationWeights;
use tunnel_core::embedding::TripletScale;
use tunnel_core::smooth::{KalmanParams, P0Mode, UpdateMode};
use tunnel_core::tunnel::ExtractParams;
use tunnel_core::{FrameSize, GarmentClass};

use crate::{ErrorKind, PipelineError, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub smooth: bool,
    pub zoom: bool,
    pub denoise: bool,
    pub blend: bool,
    pub metrics: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            smooth: true,
            zoom: true,
            denoise: false,
            blend: true,
            metrics: true,
        }
    }
}

/// Toy denoising stage. Attention cost grows with the fourth power of the
/// patch side, so keep `out_size` small when this is on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseConfig {
    /// Reverse steps actually run, counted down from `sampling_steps`.
    pub sampling_steps: usize,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub width: usize,
    pub time_freq_dim: usize,
    pub env_grid: usize,
    pub aggregation: AggregationWeights,
    pub embedding_scale: TripletScale,
    /// Weights in the flat tensor container; seeded random weights when
    /// absent.
    pub checkpoint: Option<PathBuf>,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            sampling_steps: 4,
            schedule_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            width: 16,
            time_freq_dim: 32,
            env_grid: 4,
            aggregation: AggregationWeights::Uniform,
            embedding_scale: TripletScale::Normalized,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub garment: GarmentClass,
    pub margin_ratio: f64,
    pub target_aspect: f64,
    pub conf_threshold: f64,
    pub kalman_q: f64,
    pub kalman_r: f64,
    pub p0_mode: P0Mode,
    pub update_mode: UpdateMode,
    pub lowpass_window: usize,
    /// Patch `[width, height]`.
    pub out_size: [usize; 2],
    pub blend_sigma: f64,
    pub clip_length: usize,
    /// Defaults to half the clip length.
    pub stride: Option<usize>,
    pub seed: u64,
    pub stages: StageToggles,
    pub denoise: DenoiseConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let extract = ExtractParams::default();
        let kalman = KalmanParams::default();
        Self {
            garment: extract.garment,
            margin_ratio: extract.margin_ratio,
            target_aspect: extract.target_aspect,
            conf_threshold: extract.conf_threshold,
            kalman_q: kalman.q,
            kalman_r: kalman.r,
            p0_mode: kalman.p0_mode,
            update_mode: kalman.update_mode,
            lowpass_window: 5,
            out_size: [128, 128],
            blend_sigma: 3.0,
            clip_length: 8,
            stride: None,
            seed: 0,
            stages: StageToggles::default(),
            denoise: DenoiseConfig::default(),
        }
    }
}

fn invalid(message: String) -> PipelineError {
    PipelineError::new(Stage::Config, ErrorKind::Input, message)
}

impl PipelineConfig {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, PipelineError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        let config: Self =
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn extract_params(&self) -> ExtractParams {
        ExtractParams {
            garment: self.garment,
            margin_ratio: self.margin_ratio,
            target_aspect: self.target_aspect,
            conf_threshold: self.conf_threshold,
        }
    }

    pub fn kalman_params(&self) -> KalmanParams {
        KalmanParams {
            q: self.kalman_q,
            r: self.kalman_r,
            p0_mode: self.p0_mode,
            update_mode: self.update_mode,
        }
    }

    pub fn patch_size(&self) -> FrameSize {
        FrameSize {
            width: self.out_size[0],
            height: self.out_size[1],
        }
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or((self.clip_length / 2).max(1))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(format!("{name} must be positive, got {v}")))
            }
        };
        if !(self.margin_ratio.is_finite() && self.margin_ratio >= 0.0) {
            return Err(invalid(format!("margin_ratio must be >= 0, got {}", self.margin_ratio)));
        }
        positive("target_aspect", self.target_aspect)?;
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(invalid(format!("conf_threshold must lie in [0, 1], got {}", self.conf_threshold)));
        }
        positive("kalman_q", self.kalman_q)?;
        positive("kalman_r", self.kalman_r)?;
        if let P0Mode::Constant(p0) = self.p0_mode {
            if !(p0.is_finite() && p0 >= 0.0) {
                return Err(invalid(format!("constant p0 must be >= 0, got {p0}")));
            }
        }
        if self.lowpass_window.is_multiple_of(2) {
            return Err(invalid(format!("lowpass_window must be odd, got {}", self.lowpass_window)));
        }
        if self.out_size.contains(&0) {
            return Err(invalid("out_size must be positive".into()));
        }
        if !(self.blend_sigma.is_finite() && self.blend_sigma >= 0.0) {
            return Err(invalid(format!("blend_sigma must be >= 0, got {}", self.blend_sigma)));
        }
        if self.clip_length == 0 {
            return Err(invalid("clip_length must be positive".into()));
        }
        if !(1..=self.clip_length).contains(&self.stride()) {
            return Err(invalid(format!(
                "stride must lie in 1..={}, got {}",
                self.clip_length,
                self.stride()
            )));
        }
        if (self.stages.denoise || self.stages.blend) && !self.stages.zoom {
            return Err(invalid("denoise and blend need the zoom stage".into()));
        }
        if self.stages.denoise {
            let d = &self.denoise;
            if self.out_size.iter().any(|s| s % 2 != 0) {
                return Err(invalid("denoising needs an even out_size".into()));
            }
            if d.sampling_steps > d.schedule_steps || d.schedule_steps == 0 {
                return Err(invalid(format!(
                    "sampling_steps {} exceeds schedule_steps {}",
                    d.sampling_steps, d.schedule_steps
                )));
            }
            if !(0.0 <= d.beta_start && d.beta_start <= d.beta_end && d.beta_end < 1.0) {
                return Err(invalid(format!("bad beta range {}..{}", d.beta_start, d.beta_end)));
            }
            if d.width == 0 || d.env_grid == 0 || d.time_freq_dim == 0 || !d.time_freq_dim.is_multiple_of(2) {
                return Err(invalid("denoiser width, env grid and time_freq_dim must be positive".into()));
            }
        }
        Ok(())
    }
}
