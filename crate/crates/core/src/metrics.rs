//! SSIM and tunnel-stability measurements.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::smooth::jitter;
use crate::tunnel::Tunnel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("images differ in size: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("tunnels differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid SSIM parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub window_std: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            window_std: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    fn validate(&self) -> Result<(), MetricsError> {
        if self.window.is_multiple_of(2) {
            return Err(MetricsError::InvalidParams(format!("window {} is even", self.window)));
        }
        let positive = [self.window_std, self.k1, self.k2, self.dynamic_range];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(MetricsError::InvalidParams(format!("{self:?}")));
        }
        Ok(())
    }

    fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let k: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.window_std * self.window_std)).exp()
            })
            .collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    }
}

/// Separable weighted average where the window is cut at the border and the
/// remaining weights renormalized.
fn local_mean(data: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (pos, len) = if horizontal { (x, w) } else { (y, h) };
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, kw) in kernel.iter().enumerate() {
                    let Some(j) = (pos + k).checked_sub(r).filter(|&j| j < len) else {
                        continue;
                    };
                    let idx = if horizontal { y * w + j } else { j * w + x };
                    acc += kw * src[idx];
                    norm += kw;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(data, true), false)
}

/// Per-pixel SSIM map on luma.
pub fn ssim_map(a: &Image, b: &Image, p: &SsimParams) -> Result<Image, MetricsError> {
    p.validate()?;
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(MetricsError::SizeMismatch(a.width(), a.height(), b.width(), b.height()));
    }
    let (w, h) = (a.width(), a.height());
    let (la, lb) = (a.to_luma(), b.to_luma());
    let (x, y) = (la.data(), lb.data());
    let kernel = p.kernel();
    let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(a, b)| a * b).collect() };
    let mx = local_mean(x, w, h, &kernel);
    let my = local_mean(y, w, h, &kernel);
    let mxx = local_mean(&prod(x, x), w, h, &kernel);
    let myy = local_mean(&prod(y, y), w, h, &kernel);
    let mxy = local_mean(&prod(x, y), w, h, &kernel);
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);
    let data = (0..w * h)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .collect();
    Ok(Image::new(w, h, 1, data).expect("sizes match"))
}

/// Mean local SSIM.
pub fn ssim(a: &Image, b: &Image, p: &SsimParams) -> Result<f64, MetricsError> {
    let map = ssim_map(a, b, p)?;
    Ok(map.data().iter().sum::<f64>() / map.data().len() as f64)
}

/// Jitter of the four tunnel channels; `None` for fewer than three frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelJitter {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl ChannelJitter {
    pub fn of(t: &Tunnel) -> Option<Self> {
        let [cx, cy, w, h] = t.channels().map(|c| jitter(&c).ok());
        Some(Self {
            cx: cx?,
            cy: cy?,
            w: w?,
            h: h?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub jitter_raw: Option<ChannelJitter>,
    pub jitter_smoothed: Option<ChannelJitter>,
    /// Largest per-frame distance between raw and smoothed centers.
    pub max_displacement: f64,
}

pub fn tunnel_stability_report(raw: &Tunnel, smoothed: &Tunnel) -> Result<StabilityReport, MetricsError> {
    if raw.len() != smoothed.len() {
        return Err(MetricsError::LengthMismatch(raw.len(), smoothed.len()));
    }
    let max_displacement = raw
        .boxes()
        .iter()
        .zip(smoothed.boxes())
        .map(|(a, b)| {
            let ((ax, ay), (bx, by)) = (a.center(), b.center());
            (ax - bx).hypot(ay - by)
        })
        .fold(0.0, f64::max);
    Ok(StabilityReport {
        jitter_raw: ChannelJitter::of(raw),
        jitter_smoothed: ChannelJitter::of(smoothed),
        max_displacement,
    })
}

/// The `report.json` document. Learned perceptual scores are never computed
/// here; the fields exist so externally computed values can be merged in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub ssim_mean: Option<f64>,
    pub ssim_per_frame: Vec<f64>,
    pub jitter_raw: Option<ChannelJitter>,
    pub jitter_smoothed: Option<ChannelJitter>,
    pub max_displacement: f64,
    pub lpips: Option<f64>,
    pub vfid: Option<f64>,
}

impl Report {
    pub fn new(ssim_per_frame: Vec<f64>, stability: StabilityReport) -> Self {
        let ssim_mean = (!ssim_per_frame.is_empty())
            .then(|| ssim_per_frame.iter().sum::<f64>() / ssim_per_frame.len() as f64);
        Self {
            ssim_mean,
            ssim_per_frame,
            jitter_raw: stability.jitter_raw,
            jitter_smoothed: stability.jitter_smoothed,
            max_displacement: stability.max_displacement,
            lpips: None,
            vfid: None,
        }
    }
}
