use super::DiffusionError;
use crate::image::Image;
use crate::nn::Tensor;

pub const PATCH: usize = 2;

/// 2x2 Haar basis, rows are the analysis vectors over a patch read as
/// `[top-left, top-right, bottom-left, bottom-right]`. Symmetric and
/// orthonormal, so it is its own inverse.
const HAAR: [[f64; 4]; 4] = [
    [0.5, 0.5, 0.5, 0.5],
    [0.5, -0.5, 0.5, -0.5],
    [0.5, 0.5, -0.5, -0.5],
    [0.5, -0.5, -0.5, 0.5],
];

/// Encode each channel's 2x2 patches into 4 latent channels:
/// `(4 * C, H / 2, W / 2)`, channel `4 c + k` holding basis `k` of image
/// channel `c`.
pub fn toy_encode(frame: &Image) -> Result<Tensor, DiffusionError> {
    let (w, h, ch) = (frame.width(), frame.height(), frame.channels());
    if w % PATCH != 0 || h % PATCH != 0 {
        return Err(DiffusionError::IndivisibleSize {
            width: w,
            height: h,
            patch: PATCH,
        });
    }
    let (lw, lh) = (w / PATCH, h / PATCH);
    let mut out = Tensor::zeros(&[4 * ch, lh, lw]);
    let data = out.data_mut();
    for c in 0..ch {
        for py in 0..lh {
            for px in 0..lw {
                let (x, y) = (px * PATCH, py * PATCH);
                let patch = [
                    frame.get(x, y, c),
                    frame.get(x + 1, y, c),
                    frame.get(x, y + 1, c),
                    frame.get(x + 1, y + 1, c),
                ];
                for (k, basis) in HAAR.iter().enumerate() {
                    let v: f64 = basis.iter().zip(&patch).map(|(b, p)| b * p).sum();
                    data[((4 * c + k) * lh + py) * lw + px] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`toy_encode`].
pub fn toy_decode(latent: &Tensor) -> Result<Image, DiffusionError> {
    let [lc, lh, lw] = latent.shape()[..] else {
        return Err(DiffusionError::ShapeMismatch(format!(
            "latent must be (4C, h, w), got {:?}",
            latent.shape()
        )));
    };
    if lc % 4 != 0 {
        return Err(DiffusionError::ShapeMismatch(format!("{lc} latent channels")));
    }
    let ch = lc / 4;
    let mut img = Image::filled(lw * PATCH, lh * PATCH, ch, 0.0);
    for c in 0..ch {
        for py in 0..lh {
            for px in 0..lw {
                let coeffs: Vec<f64> = (0..4)
                    .map(|k| latent.data()[((4 * c + k) * lh + py) * lw + px])
                    .collect();
                let offsets = [(0, 0), (1, 0), (0, 1), (1, 1)];
                for (j, (dx, dy)) in offsets.iter().enumerate() {
                    let v: f64 = (0..4).map(|k| HAAR[k][j] * coeffs[k]).sum();
                    img.set(px * PATCH + dx, py * PATCH + dy, c, v);
                }
            }
        }
    }
    Ok(img)
}
