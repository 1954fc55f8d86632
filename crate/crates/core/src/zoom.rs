//! Zooming into the tunnel (crop, pad, resize) and pasting generated patches
//! back with a Gaussian-feathered mask.
//!
//! Coordinates follow the pixel-edge convention: pixel `i` covers `[i, i+1)`
//! and its center is at `i + 0.5`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, FrameSize};
use crate::image::{Image, ImageError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ZoomError {
    #[error("box area {area} is below one pixel")]
    DegenerateBox { area: f64 },
    #[error("box {0:?} is not inside the frame")]
    BoxOutOfFrame(BBox),
    #[error("patch is {got:?}, zoom map expects {expected:?}")]
    SizeMismatch { expected: FrameSize, got: FrameSize },
    #[error("channel count {got} does not match {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("{originals} frames, {patches} patches and {maps} zoom maps")]
    LengthMismatch {
        originals: usize,
        patches: usize,
        maps: usize,
    },
    #[error("sigma must be finite and >= 0, got {0}")]
    InvalidSigma(f64),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Padding added around the source box, in source pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Padding {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

/// Everything needed to invert a [`crop_pad_resize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoomMap {
    pub source_box: BBox,
    pub pad: Padding,
    pub out_size: FrameSize,
    /// Output pixels per source pixel along x and y.
    pub scale: (f64, f64),
}

impl ZoomMap {
    pub fn new(source_box: BBox, out_size: FrameSize) -> Result<Self, ZoomError> {
        let area = source_box.area();
        if area.is_nan() || area < 1.0 {
            return Err(ZoomError::DegenerateBox { area });
        }
        let (bw, bh) = (source_box.width(), source_box.height());
        let out_aspect = out_size.width as f64 / out_size.height as f64;
        let mut pad = Padding::default();
        if bw < bh * out_aspect {
            let extra = (bh * out_aspect - bw) / 2.0;
            pad.left = extra;
            pad.right = extra;
        } else if bw > bh * out_aspect {
            let extra = (bw / out_aspect - bh) / 2.0;
            pad.top = extra;
            pad.bottom = extra;
        }
        let padded_w = bw + pad.left + pad.right;
        let padded_h = bh + pad.top + pad.bottom;
        Ok(Self {
            source_box,
            pad,
            out_size,
            scale: (
                out_size.width as f64 / padded_w,
                out_size.height as f64 / padded_h,
            ),
        })
    }

    /// The source box grown by the padding.
    pub fn padded_box(&self) -> BBox {
        let b = self.source_box;
        BBox {
            x0: b.x0 - self.pad.left,
            y0: b.y0 - self.pad.top,
            x1: b.x1 + self.pad.right,
            y1: b.y1 + self.pad.bottom,
        }
    }

    /// Source-frame point to patch point (both continuous, edge convention).
    pub fn to_patch(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.padded_box();
        ((x - p.x0) * self.scale.0, (y - p.y0) * self.scale.1)
    }

    pub fn to_source(&self, u: f64, v: f64) -> (f64, f64) {
        let p = self.padded_box();
        (p.x0 + u / self.scale.0, p.y0 + v / self.scale.1)
    }

    /// Integer pixel rectangle `(x, y, w, h)` covering the source box.
    pub fn pixel_rect(&self) -> (usize, usize, usize, usize) {
        let b = self.source_box;
        let x0 = b.x0.floor().max(0.0) as usize;
        let y0 = b.y0.floor().max(0.0) as usize;
        let x1 = (b.x1.ceil() as usize).max(x0 + 1);
        let y1 = (b.y1.ceil() as usize).max(y0 + 1);
        (x0, y0, x1 - x0, y1 - y0)
    }

    /// Patch pixel-index range whose centers lie in the unpadded content.
    fn content_index_range(&self) -> ((f64, f64), (f64, f64)) {
        let b = self.source_box;
        let (u0, v0) = self.to_patch(b.x0, b.y0);
        let (u1, v1) = self.to_patch(b.x1, b.y1);
        let span = |lo: f64, hi: f64, n: usize| {
            let first = (lo - 0.5).ceil().clamp(0.0, (n - 1) as f64);
            let last = (hi - 0.5).floor().clamp(0.0, (n - 1) as f64);
            if first <= last {
                (first, last)
            } else {
                let mid = ((lo + hi) / 2.0 - 0.5).round().clamp(0.0, (n - 1) as f64);
                (mid, mid)
            }
        };
        (
            span(u0, u1, self.out_size.width),
            span(v0, v1, self.out_size.height),
        )
    }

    /// Value of the patch seen from source point `(x, y)`. Points outside the
    /// source box read the nearest content pixel, never the padding.
    pub fn sample_patch(&self, patch: &Image, x: f64, y: f64, c: usize) -> f64 {
        let b = self.source_box;
        let (u, v) = self.to_patch(x.clamp(b.x0, b.x1), y.clamp(b.y0, b.y1));
        let ((ua, ub), (va, vb)) = self.content_index_range();
        patch.sample_bilinear((u - 0.5).clamp(ua, ub), (v - 0.5).clamp(va, vb), c)
    }

    fn check_patch(&self, patch: &Image) -> Result<(), ZoomError> {
        let got = FrameSize {
            width: patch.width(),
            height: patch.height(),
        };
        if got != self.out_size {
            return Err(ZoomError::SizeMismatch {
                expected: self.out_size,
                got,
            });
        }
        Ok(())
    }
}

/// Crop `b` out of `frame`, zero-pad the short axis symmetrically to the
/// output aspect and bilinearly resample to `out_size`.
pub fn crop_pad_resize(
    frame: &Image,
    b: BBox,
    out_size: FrameSize,
) -> Result<(Image, ZoomMap), ZoomError> {
    let frame_size = FrameSize {
        width: frame.width(),
        height: frame.height(),
    };
    if !b.is_within(frame_size) {
        return Err(ZoomError::BoxOutOfFrame(b));
    }
    let map = ZoomMap::new(b, out_size)?;
    let channels = frame.channels();
    let mut data = Vec::with_capacity(out_size.area() * channels);
    for v in 0..out_size.height {
        for u in 0..out_size.width {
            let (x, y) = map.to_source(u as f64 + 0.5, v as f64 + 0.5);
            let inside = b.contains_point(x, y);
            for c in 0..channels {
                data.push(if inside {
                    frame.sample_bilinear(x - 0.5, y - 0.5, c)
                } else {
                    0.0
                });
            }
        }
    }
    Ok((
        Image::new(out_size.width, out_size.height, channels, data)?,
        map,
    ))
}

/// Resample a patch back onto the source pixel grid. The result covers
/// [`ZoomMap::pixel_rect`], whose origin is the rectangle's top-left pixel.
pub fn unzoom(patch: &Image, map: &ZoomMap) -> Result<Image, ZoomError> {
    map.check_patch(patch)?;
    let (x0, y0, w, h) = map.pixel_rect();
    Ok(Image::from_fn(w, h, patch.channels(), |x, y, c| {
        map.sample_patch(patch, (x0 + x) as f64 + 0.5, (y0 + y) as f64 + 0.5, c)
    }))
}

/// Discrete Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`, summing
/// to one.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Binary inside-box mask (pixel centers in `[x0, x1) x [y0, y1)`) blurred by
/// a separable Gaussian. Frame borders replicate the edge value so boxes
/// touching the border stay opaque there.
pub fn feather_mask(b: BBox, sigma: f64, size: FrameSize) -> Result<Image, ZoomError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(ZoomError::InvalidSigma(sigma));
    }
    let inside = |i: usize, lo: f64, hi: f64| {
        let c = i as f64 + 0.5;
        if lo <= c && c < hi {
            1.0
        } else {
            0.0
        }
    };
    let col: Vec<f64> = (0..size.width).map(|x| inside(x, b.x0, b.x1)).collect();
    let row: Vec<f64> = (0..size.height).map(|y| inside(y, b.y0, b.y1)).collect();
    // the binary mask is the outer product of two indicator profiles, so the
    // separable blur can run on each profile alone
    let kernel = gaussian_kernel(sigma);
    let mx = blur_1d(&col, &kernel);
    let my = blur_1d(&row, &kernel);
    let mut data = Vec::with_capacity(size.area());
    for y in 0..size.height {
        for x in 0..size.width {
            data.push(mx[x] * my[y]);
        }
    }
    Ok(Image::new(size.width, size.height, 1, data)?)
}

fn blur_1d(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    let last = signal.len() as isize - 1;
    (0..=last)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * signal[(i + k as isize - radius).clamp(0, last) as usize])
                .sum()
        })
        .collect()
}

/// Paste each patch back into its frame: `m * unzoom(patch) + (1 - m) * frame`.
pub fn tunnel_blend(
    originals: &[Image],
    patches: &[Image],
    maps: &[ZoomMap],
    sigma: f64,
) -> Result<Vec<Image>, ZoomError> {
    if originals.len() != patches.len() || patches.len() != maps.len() {
        return Err(ZoomError::LengthMismatch {
            originals: originals.len(),
            patches: patches.len(),
            maps: maps.len(),
        });
    }
    originals
        .iter()
        .zip(patches)
        .zip(maps)
        .map(|((frame, patch), map)| blend_one(frame, patch, map, sigma))
        .collect()
}

fn blend_one(frame: &Image, patch: &Image, map: &ZoomMap, sigma: f64) -> Result<Image, ZoomError> {
    map.check_patch(patch)?;
    if patch.channels() != frame.channels() {
        return Err(ZoomError::ChannelMismatch {
            expected: frame.channels(),
            got: patch.channels(),
        });
    }
    let size = FrameSize {
        width: frame.width(),
        height: frame.height(),
    };
    let mask = feather_mask(map.source_box, sigma, size)?;
    let mut out = frame.clone();
    for y in 0..size.height {
        for x in 0..size.width {
            let m = mask.get(x, y, 0);
            if m == 0.0 {
                continue;
            }
            for c in 0..frame.channels() {
                let p = map.sample_patch(patch, x as f64 + 0.5, y as f64 + 0.5, c);
                out.set(x, y, c, m * p + (1.0 - m) * frame.get(x, y, c));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn size(w: usize, h: usize) -> FrameSize {
        FrameSize::new(w, h).unwrap()
    }

    fn gradient(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, 3, |x, y, c| {
            ((x as f64 * 0.07 + y as f64 * 0.05 + c as f64).sin() + 1.0) / 2.0
        })
    }

    #[test]
    fn full_frame_zoom_is_identity() {
        let img = gradient(24, 16);
        let (out, map) = crop_pad_resize(&img, size(24, 16).full_box(), size(24, 16)).unwrap();
        assert_eq!(out, img);
        assert_eq!(map.pad, Padding::default());
        assert_eq!(map.scale, (1.0, 1.0));
    }

    #[test]
    fn constant_region_upscale_stays_constant() {
        let img = Image::filled(20, 20, 1, 0.25);
        let b = BBox::new(4.0, 4.0, 12.0, 12.0).unwrap();
        let (out, map) = crop_pad_resize(&img, b, size(16, 16)).unwrap();
        assert_eq!(map.scale, (2.0, 2.0));
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn short_axis_is_zero_padded() {
        let img = Image::filled(40, 40, 1, 1.0);
        let b = BBox::new(10.0, 10.0, 30.0, 20.0).unwrap();
        let (out, map) = crop_pad_resize(&img, b, size(20, 20)).unwrap();
        assert_eq!(map.pad.top, 5.0);
        assert_eq!(map.pad.bottom, 5.0);
        assert_eq!(out.get(10, 0, 0), 0.0);
        assert_eq!(out.get(10, 19, 0), 0.0);
        assert_eq!(out.get(10, 10, 0), 1.0);
    }

    #[test]
    fn degenerate_and_outside_boxes() {
        let img = Image::filled(10, 10, 1, 0.0);
        let thin = BBox::new(1.0, 1.0, 1.5, 1.5).unwrap();
        assert!(matches!(
            crop_pad_resize(&img, thin, size(4, 4)),
            Err(ZoomError::DegenerateBox { .. })
        ));
        let out = BBox::new(5.0, 5.0, 15.0, 9.0).unwrap();
        assert!(matches!(crop_pad_resize(&img, out, size(4, 4)), Err(ZoomError::BoxOutOfFrame(_))));
    }

    #[test]
    fn unit_scale_round_trip_is_exact() {
        let img = gradient(30, 20);
        let b = BBox::new(5.0, 3.0, 17.0, 15.0).unwrap();
        let (patch, map) = crop_pad_resize(&img, b, size(12, 12)).unwrap();
        let back = unzoom(&patch, &map).unwrap();
        assert_eq!(map.pixel_rect(), (5, 3, 12, 12));
        for y in 0..12 {
            for x in 0..12 {
                for c in 0..3 {
                    assert_eq!(back.get(x, y, c), img.get(x + 5, y + 3, c));
                }
            }
        }
    }

    #[test]
    fn unzoom_checks_patch_size() {
        let map = ZoomMap::new(BBox::new(0.0, 0.0, 8.0, 8.0).unwrap(), size(4, 4)).unwrap();
        let wrong = Image::filled(5, 4, 1, 0.0);
        assert!(matches!(unzoom(&wrong, &map), Err(ZoomError::SizeMismatch { .. })));
        let constant = Image::filled(4, 4, 2, 0.7);
        assert!(unzoom(&constant, &map).unwrap().data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn feather_mask_limits() {
        let b = BBox::new(10.0, 10.0, 50.0, 50.0).unwrap();
        let hard = feather_mask(b, 0.0, size(60, 60)).unwrap();
        assert_eq!(hard.get(10, 10, 0), 1.0);
        assert_eq!(hard.get(9, 30, 0), 0.0);
        assert_eq!(hard.get(49, 49, 0), 1.0);
        assert_eq!(hard.get(50, 49, 0), 0.0);

        let soft = feather_mask(b, 2.0, size(60, 60)).unwrap();
        assert!((soft.get(30, 30, 0) - 1.0).abs() < 1e-12);
        assert_eq!(soft.get(0, 0, 0), 0.0);
        assert!(soft.data().iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        assert!(matches!(feather_mask(b, -1.0, size(60, 60)), Err(ZoomError::InvalidSigma(_))));
    }

    #[test]
    fn feather_is_monotone_leaving_the_box() {
        let b = BBox::new(20.0, 15.0, 35.0, 40.0).unwrap();
        let m = feather_mask(b, 3.0, size(64, 64)).unwrap();
        for y in 15..40 {
            for x in 35..63 {
                assert!(m.get(x + 1, y, 0) <= m.get(x, y, 0) + 1e-15);
            }
            for x in 1..20 {
                assert!(m.get(x - 1, y, 0) <= m.get(x, y, 0) + 1e-15);
            }
        }
        for x in 20..35 {
            for y in 40..63 {
                assert!(m.get(x, y + 1, 0) <= m.get(x, y, 0) + 1e-15);
            }
        }
    }

    #[test]
    fn hard_paste_with_zero_sigma() {
        let frame = Image::filled(20, 20, 1, 0.0);
        let b = BBox::new(4.0, 4.0, 12.0, 12.0).unwrap();
        let map = ZoomMap::new(b, size(8, 8)).unwrap();
        let patch = Image::filled(8, 8, 1, 1.0);
        let out = tunnel_blend(std::slice::from_ref(&frame), &[patch], &[map], 0.0).unwrap();
        for y in 0..20 {
            for x in 0..20 {
                let expect = if (4..12).contains(&x) && (4..12).contains(&y) { 1.0 } else { 0.0 };
                assert_eq!(out[0].get(x, y, 0), expect);
            }
        }
    }

    #[test]
    fn blend_argument_checks() {
        let frame = Image::filled(20, 20, 3, 0.0);
        let map = ZoomMap::new(BBox::new(4.0, 4.0, 12.0, 12.0).unwrap(), size(8, 8)).unwrap();
        let gray = Image::filled(8, 8, 1, 1.0);
        assert!(matches!(
            tunnel_blend(std::slice::from_ref(&frame), &[gray], &[map], 1.0),
            Err(ZoomError::ChannelMismatch { .. })
        ));
        assert!(matches!(
            tunnel_blend(&[frame], &[], &[map], 1.0),
            Err(ZoomError::LengthMismatch { .. })
        ));
    }
}
