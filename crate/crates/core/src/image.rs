//! Minimal floating-point raster used by the zoom, blend and metric code.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("image data has {got} samples, expected {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("image dimensions must be positive, got {width}x{height}x{channels}")]
    ZeroSize {
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
}

/// Row-major interleaved samples, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(ImageError::ZeroSize {
                width,
                height,
                channels,
            });
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(ImageError::DataLength {
                expected,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite(i));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Panics on zero dimensions.
    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels])
            .expect("filled image needs positive dimensions and a finite value")
    }

    /// Build from a per-pixel function `f(x, y, c)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data).expect("from_fn produced an invalid image")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Bilinear sample at continuous pixel-index coordinates (pixel `i` sits
    /// at `i`), with edge clamping.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let (xf, yf) = (x.floor(), y.floor());
        let (x0, y0) = (xf as usize, yf as usize);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (tx, ty) = (x - xf, y - yf);
        if tx == 0.0 && ty == 0.0 {
            return self.get(x0, y0, c);
        }
        let top = self.get(x0, y0, c) * (1.0 - tx) + self.get(x1, y0, c) * tx;
        let bottom = self.get(x0, y1, c) * (1.0 - tx) + self.get(x1, y1, c) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    /// Single-channel luma (Rec. 601 weights for RGB, channel mean otherwise).
    pub fn to_luma(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        Image::from_fn(self.width, self.height, 1, |x, y, _| match self.channels {
            3 | 4 => 0.299 * self.get(x, y, 0) + 0.587 * self.get(x, y, 1) + 0.114 * self.get(x, y, 2),
            n => (0..n).map(|c| self.get(x, y, c)).sum::<f64>() / n as f64,
        })
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Option<f64> {
        if (self.width, self.height, self.channels) != (other.width, other.height, other.channels) {
            return None;
        }
        let total: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        Some(total / self.data.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks() {
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(0, 2, 1, vec![]).is_err());
        assert!(Image::new(1, 1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn bilinear_at_integer_and_midpoint() {
        let img = Image::new(2, 1, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(img.sample_bilinear(1.0, 0.0, 0), 1.0);
        assert_eq!(img.sample_bilinear(0.5, 0.0, 0), 0.5);
        assert_eq!(img.sample_bilinear(-3.0, 0.0, 0), 0.0);
    }
}
