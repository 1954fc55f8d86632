//! Tunnel smoothing: a scalar Kalman filter per coordinate channel followed
//! by a centered moving-average low-pass.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{fit_aspect, BBox, GeometryError};
use crate::tunnel::{Tunnel, TunnelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmoothError {
    #[error("series is empty")]
    Empty,
    #[error("non-finite value at index {index}")]
    NonFiniteInput { index: usize },
    #[error("low-pass window must be odd and >= 1, got {0}")]
    EvenWindow(usize),
    #[error("jitter needs at least 3 samples, got {0}")]
    TooShort(usize),
    #[error("kalman noise terms must be positive (q = {q}, r = {r})")]
    InvalidParams { q: f64, r: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tunnel(#[from] TunnelError),
}

/// Initial error covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum P0Mode {
    /// `P0 = x1`, the first observation itself.
    PaperLiteral,
    Constant(f64),
}

/// Covariance update after the measurement step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// `P = (1 - K) P⁻`
    Standard,
    /// `P = P⁻ / (1 - K)`; P diverges and K tends to 1.
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanParams {
    pub q: f64,
    pub r: f64,
    pub p0_mode: P0Mode,
    pub update_mode: UpdateMode,
}

impl Default for KalmanParams {
    fn default() -> Self {
        Self {
            q: 0.001,
            r: 0.0015,
            p0_mode: P0Mode::PaperLiteral,
            update_mode: UpdateMode::Standard,
        }
    }
}

impl KalmanParams {
    fn validate(&self) -> Result<(), SmoothError> {
        if self.q > 0.0 && self.r > 0.0 && self.q.is_finite() && self.r.is_finite() {
            Ok(())
        } else {
            Err(SmoothError::InvalidParams {
                q: self.q,
                r: self.r,
            })
        }
    }

    /// Fixed point of the standard-mode gain recurrence.
    pub fn steady_state_gain(&self) -> f64 {
        let u = (self.q + (self.q * self.q + 4.0 * self.q * self.r).sqrt()) / 2.0;
        u / (u + self.r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanState {
    pub x_hat: f64,
    pub p: f64,
}

impl KalmanState {
    pub fn initial(first: f64, params: &KalmanParams) -> Self {
        let p = match params.p0_mode {
            P0Mode::PaperLiteral => first,
            P0Mode::Constant(v) => v,
        };
        Self { x_hat: first, p }
    }

    /// Advance one observation; returns the gain used.
    pub fn step(&mut self, observation: f64, params: &KalmanParams) -> f64 {
        let p_prior = self.p + params.q;
        // written so that an overflowing literal-mode covariance gives gain 1
        let gain = 1.0 / (1.0 + params.r / p_prior);
        self.x_hat += gain * (observation - self.x_hat);
        self.p = match params.update_mode {
            UpdateMode::Standard => (1.0 - gain) * p_prior,
            UpdateMode::PaperLiteral => p_prior / (1.0 - gain),
        };
        gain
    }
}

/// Filter a scalar series; output[t] is the posterior estimate after
/// observing `series[t]`.
pub fn kalman_smooth(series: &[f64], params: &KalmanParams) -> Result<Vec<f64>, SmoothError> {
    Ok(kalman_trace(series, params)?.0)
}

/// Like [`kalman_smooth`], also returning the gain used at every step.
pub fn kalman_trace(
    series: &[f64],
    params: &KalmanParams,
) -> Result<(Vec<f64>, Vec<f64>), SmoothError> {
    params.validate()?;
    let first = *series.first().ok_or(SmoothError::Empty)?;
    if let Some(index) = series.iter().position(|v| !v.is_finite()) {
        return Err(SmoothError::NonFiniteInput { index });
    }
    let mut state = KalmanState::initial(first, params);
    let mut estimates = Vec::with_capacity(series.len());
    let mut gains = Vec::with_capacity(series.len());
    for &x in series {
        gains.push(state.step(x, params));
        estimates.push(state.x_hat);
    }
    Ok((estimates, gains))
}

/// Centered moving average with edge replication.
pub fn lowpass(series: &[f64], window: usize) -> Result<Vec<f64>, SmoothError> {
    if window.is_multiple_of(2) {
        return Err(SmoothError::EvenWindow(window));
    }
    if series.is_empty() {
        return Err(SmoothError::Empty);
    }
    let half = (window / 2) as isize;
    let last = series.len() as isize - 1;
    let at = |i: isize| series[i.clamp(0, last) as usize];
    Ok((0..=last)
        .map(|i| {
            // summing offsets from the center keeps constant runs exact
            let center = series[i as usize];
            let offset: f64 = (-half..=half).map(|k| at(i + k) - center).sum();
            center + offset / window as f64
        })
        .collect())
}

/// Mean absolute second difference.
pub fn jitter(series: &[f64]) -> Result<f64, SmoothError> {
    if series.len() < 3 {
        return Err(SmoothError::TooShort(series.len()));
    }
    let total: f64 = series
        .windows(3)
        .map(|w| (w[2] - 2.0 * w[1] + w[0]).abs())
        .sum();
    Ok(total / (series.len() - 2) as f64)
}

/// Smooth the (cx, cy, w, h) channels independently, rebuild the boxes,
/// clamp them to the frame and fit them back to `target_aspect`.
pub fn smooth_tunnel(
    tunnel: &Tunnel,
    params: &KalmanParams,
    window: usize,
    target_aspect: f64,
) -> Result<Tunnel, SmoothError> {
    let frame = tunnel.frame_size();
    let mut smoothed = Vec::with_capacity(4);
    for channel in tunnel.channels() {
        smoothed.push(lowpass(&kalman_smooth(&channel, params)?, window)?);
    }
    let boxes = (0..tunnel.len())
        .map(|i| {
            let (cx, cy) = (smoothed[0][i], smoothed[1][i]);
            let (w, h) = (smoothed[2][i].max(0.0), smoothed[3][i].max(0.0));
            let b = BBox::from_center_size(cx, cy, w, h)?.clamp_to(frame);
            Ok(fit_aspect(b, target_aspect, frame)?)
        })
        .collect::<Result<Vec<_>, SmoothError>>()?;
    Ok(Tunnel::new(frame, boxes)?)
}
