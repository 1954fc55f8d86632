//! Tunnel embedding: the frame size, tunnel center and tunnel size of each
//! frame, sinusoidally encoded, linearly mapped and passed through SiLU. The
//! result is added to the temporal-attention tokens of that frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, FrameSize};
use crate::nn::{NnError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("frequency dimension must be even and positive, got {0}")]
    OddDim(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid tunnel triplet: {0}")]
    InvalidTriplet(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// `base^(-2k / freq_dim)` for `k = 0..freq_dim/2`.
pub fn frequencies(freq_dim: usize, base: f64) -> Result<Vec<f64>, EmbeddingError> {
    if freq_dim == 0 || !freq_dim.is_multiple_of(2) {
        return Err(EmbeddingError::OddDim(freq_dim));
    }
    Ok((0..freq_dim / 2)
        .map(|k| base.powf(-2.0 * k as f64 / freq_dim as f64))
        .collect())
}

/// `[sin(v w0), cos(v w0), ..., sin(v w_{d/2-1}), cos(v w_{d/2-1})]`.
pub fn sinusoidal_encode(value: f64, freq_dim: usize, base: f64) -> Result<Vec<f64>, EmbeddingError> {
    Ok(frequencies(freq_dim, base)?
        .into_iter()
        .flat_map(|w| [(value * w).sin(), (value * w).cos()])
        .collect())
}

/// Original frame size, tunnel center and tunnel size for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TunnelTriplet {
    pub orig_w: f64,
    pub orig_h: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub tunnel_w: f64,
    pub tunnel_h: f64,
}

impl TunnelTriplet {
    pub fn from_box(frame: FrameSize, b: &BBox) -> Result<Self, EmbeddingError> {
        let (cx, cy) = b.center();
        let t = Self {
            orig_w: frame.width as f64,
            orig_h: frame.height as f64,
            center_x: cx,
            center_y: cy,
            tunnel_w: b.width(),
            tunnel_h: b.height(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), EmbeddingError> {
        let v = self.values();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EmbeddingError::InvalidTriplet("non-finite value".into()));
        }
        if self.orig_w <= 0.0 || self.orig_h <= 0.0 || self.tunnel_w <= 0.0 || self.tunnel_h <= 0.0 {
            return Err(EmbeddingError::InvalidTriplet("sizes must be positive".into()));
        }
        if !(0.0..=self.orig_w).contains(&self.center_x) || !(0.0..=self.orig_h).contains(&self.center_y) {
            return Err(EmbeddingError::InvalidTriplet("center outside the frame".into()));
        }
        Ok(())
    }

    /// `[orig_w, orig_h, center_x, center_y, tunnel_w, tunnel_h]`.
    pub fn values(&self) -> [f64; 6] {
        [
            self.orig_w,
            self.orig_h,
            self.center_x,
            self.center_y,
            self.tunnel_w,
            self.tunnel_h,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletScale {
    /// Raw pixels.
    #[default]
    Pixels,
    /// Every value divided by the longer original side.
    Normalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    pub freq_dim: usize,
    pub base: f64,
    pub scale: TripletScale,
    /// `(6 * freq_dim, out_dim)`.
    pub weight: Tensor,
    /// `(out_dim)`.
    pub bias: Tensor,
}

impl EmbeddingParams {
    pub const DEFAULT_FREQ_DIM: usize = 64;
    pub const DEFAULT_BASE: f64 = 10_000.0;

    pub fn new(freq_dim: usize, base: f64, weight: Tensor, bias: Tensor) -> Result<Self, EmbeddingError> {
        let p = Self {
            freq_dim,
            base,
            scale: TripletScale::Pixels,
            weight,
            bias,
        };
        p.validate()?;
        Ok(p)
    }

    /// Gaussian weights with std `1/sqrt(fan_in)`, zero bias.
    pub fn seeded(freq_dim: usize, base: f64, out_dim: usize, seed: u64) -> Result<Self, EmbeddingError> {
        frequencies(freq_dim, base)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = 6 * freq_dim;
        let weight = Tensor::randn(&[fan_in, out_dim], 1.0 / (fan_in as f64).sqrt(), &mut rng);
        Self::new(freq_dim, base, weight, Tensor::zeros(&[out_dim]))
    }

    pub fn out_dim(&self) -> usize {
        self.bias.numel()
    }

    fn validate(&self) -> Result<(), EmbeddingError> {
        frequencies(self.freq_dim, self.base)?;
        let out_dim = self.bias.numel();
        if self.weight.shape() != [6 * self.freq_dim, out_dim] || self.bias.rank() != 1 {
            return Err(EmbeddingError::DimensionMismatch(format!(
                "weight {:?} and bias {:?} for freq_dim {}",
                self.weight.shape(),
                self.bias.shape(),
                self.freq_dim
            )));
        }
        Ok(())
    }

    fn scaled_values(&self, t: &TunnelTriplet) -> [f64; 6] {
        let v = t.values();
        match self.scale {
            TripletScale::Pixels => v,
            TripletScale::Normalized => {
                let s = t.orig_w.max(t.orig_h);
                v.map(|x| x / s)
            }
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

/// Embedding on a tape: `values` is the `(6)` triplet vector; returns
/// `(1, out_dim)`.
pub fn tunnel_embedding_var(
    tape: &Tape,
    values: Var,
    weight: Var,
    bias: Var,
    freqs: &[f64],
) -> Result<Var, NnError> {
    let enc = tape.sinusoid(values, freqs)?;
    let width = tape.shape(enc)[0] * tape.shape(enc)[1];
    let row = tape.reshape(enc, &[1, width])?;
    let pre = tape.add_tiled(tape.matmul(row, weight)?, bias)?;
    Ok(tape.silu(pre))
}

pub fn tunnel_embedding(t: &TunnelTriplet, p: &EmbeddingParams) -> Result<Vec<f64>, EmbeddingError> {
    t.validate()?;
    p.validate()?;
    let freqs = frequencies(p.freq_dim, p.base)?;
    let tape = Tape::new();
    let values = tape.leaf(Tensor::new(vec![6], p.scaled_values(t).to_vec())?);
    let (w, b) = (tape.leaf(p.weight.clone()), tape.leaf(p.bias.clone()));
    let out = tunnel_embedding_var(&tape, values, w, b, &freqs)?;
    Ok(tape.value(out).data().to_vec())
}

/// Stack per-frame embeddings of a tunnel into `(frames, out_dim)`.
pub fn embed_tunnel(frame: FrameSize, boxes: &[BBox], p: &EmbeddingParams) -> Result<Tensor, EmbeddingError> {
    let mut data = Vec::with_capacity(boxes.len() * p.out_dim());
    for b in boxes {
        data.extend(tunnel_embedding(&TunnelTriplet::from_box(frame, b)?, p)?);
    }
    Ok(Tensor::new(vec![boxes.len(), p.out_dim()], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::silu;

    fn triplet() -> TunnelTriplet {
        TunnelTriplet {
            orig_w: 640.0,
            orig_h: 480.0,
            center_x: 300.0,
            center_y: 200.0,
            tunnel_w: 180.0,
            tunnel_h: 180.0,
        }
    }

    #[test]
    fn zero_value_encoding() {
        let e = sinusoidal_encode(0.0, 8, 10_000.0).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn single_frequency_is_unit() {
        let e = sinusoidal_encode(1.3, 2, 10_000.0).unwrap();
        assert_eq!(e, vec![1.3f64.sin(), 1.3f64.cos()]);
        assert_eq!(sinusoidal_encode(1.0, 3, 10.0), Err(EmbeddingError::OddDim(3)));
        assert_eq!(sinusoidal_encode(1.0, 0, 10.0), Err(EmbeddingError::OddDim(0)));
    }

    #[test]
    fn zero_params_give_zero_embedding() {
        let p = EmbeddingParams::new(4, 10_000.0, Tensor::zeros(&[24, 5]), Tensor::zeros(&[5])).unwrap();
        assert_eq!(tunnel_embedding(&triplet(), &p).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn selector_weights_pick_one_channel() {
        // column 0 reads sin(center_x * w0) = sin(300), column 1 reads cos(tunnel_h * w1)
        let mut w = Tensor::zeros(&[24, 2]);
        w.data_mut()[(2 * 4) * 2] = 1.0;
        w.data_mut()[(5 * 4 + 3) * 2 + 1] = 1.0;
        let p = EmbeddingParams::new(4, 10_000.0, w, Tensor::zeros(&[2])).unwrap();
        let out = tunnel_embedding(&triplet(), &p).unwrap();
        let w1 = 10_000f64.powf(-0.5);
        assert!((out[0] - silu(300f64.sin())).abs() < 1e-15);
        assert!((out[1] - silu((180.0 * w1).cos())).abs() < 1e-15);
    }

    #[test]
    fn dimension_and_triplet_errors() {
        assert!(matches!(
            EmbeddingParams::new(4, 10_000.0, Tensor::zeros(&[20, 5]), Tensor::zeros(&[5])),
            Err(EmbeddingError::DimensionMismatch(_))
        ));
        let p = EmbeddingParams::seeded(4, 10_000.0, 3, 0).unwrap();
        let bad = TunnelTriplet {
            center_x: 700.0,
            ..triplet()
        };
        assert!(matches!(tunnel_embedding(&bad, &p), Err(EmbeddingError::InvalidTriplet(_))));
    }

    #[test]
    fn equal_triplets_equal_embeddings() {
        let p = EmbeddingParams::seeded(64, 10_000.0, 16, 3).unwrap();
        let frame = FrameSize::new(640, 480).unwrap();
        let b = BBox::new(100.0, 100.0, 200.0, 200.0).unwrap();
        let all = embed_tunnel(frame, &[b, b, b.translate(1.0, 0.0)], &p).unwrap();
        assert_eq!(all.shape(), &[3, 16]);
        assert_eq!(all.slice_rows(0, 1).unwrap(), all.slice_rows(1, 1).unwrap());
        assert_ne!(all.slice_rows(0, 1).unwrap(), all.slice_rows(2, 1).unwrap());
    }
}
