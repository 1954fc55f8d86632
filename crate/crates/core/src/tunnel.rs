//! Focus-tunnel extraction: one garment crop box per frame, computed from the
//! pose sequence.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    bbox_from_keypoints, expand_bbox, fit_aspect, BBox, FrameSize, GeometryError, PoseFrame,
    LOWER_BODY, UPPER_BODY,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TunnelError {
    #[error("pose sequence is empty")]
    NoFrames,
    #[error("no frame has qualifying keypoints")]
    EmptyTunnel,
    #[error("frame {index} is {got:?}, expected {expected:?}")]
    FrameSizeMismatch {
        index: usize,
        expected: FrameSize,
        got: FrameSize,
    },
    #[error("box {index} lies outside the {frame:?} frame")]
    BoxOutOfFrame { index: usize, frame: FrameSize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GarmentClass {
    #[default]
    Upper,
    Lower,
    Dress,
}

impl GarmentClass {
    /// Keypoint names whose extent defines the garment region.
    pub fn keypoint_subset(self) -> Vec<&'static str> {
        match self {
            GarmentClass::Upper => UPPER_BODY.to_vec(),
            GarmentClass::Lower => LOWER_BODY.to_vec(),
            GarmentClass::Dress => {
                let mut names = UPPER_BODY.to_vec();
                names.extend(LOWER_BODY.iter().filter(|n| !UPPER_BODY.contains(n)));
                names
            }
        }
    }
}

/// Per-frame crop boxes over a fixed frame size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tunnel {
    frame_size: FrameSize,
    boxes: Vec<BBox>,
}

impl Tunnel {
    pub fn new(frame_size: FrameSize, boxes: Vec<BBox>) -> Result<Self, TunnelError> {
        if boxes.is_empty() {
            return Err(TunnelError::NoFrames);
        }
        if let Some(index) = boxes.iter().position(|b| !b.is_within(frame_size)) {
            return Err(TunnelError::BoxOutOfFrame {
                index,
                frame: frame_size,
            });
        }
        Ok(Self { frame_size, boxes })
    }

    pub fn frame_size(&self) -> FrameSize {
        self.frame_size
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// The (cx, cy, w, h) series of the tunnel, one vector per channel.
    pub fn channels(&self) -> [Vec<f64>; 4] {
        let mut out: [Vec<f64>; 4] = Default::default();
        for b in &self.boxes {
            let (cx, cy) = b.center();
            out[0].push(cx);
            out[1].push(cy);
            out[2].push(b.width());
            out[3].push(b.height());
        }
        out
    }
}

/// Extraction knobs. Defaults: 20% margin, square crops, confidence 0.3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractParams {
    pub garment: GarmentClass,
    pub margin_ratio: f64,
    pub target_aspect: f64,
    pub conf_threshold: f64,
}

impl Default for ExtractParams {
    fn default() -> Self {
        Self {
            garment: GarmentClass::Upper,
            margin_ratio: 0.2,
            target_aspect: 1.0,
            conf_threshold: 0.3,
        }
    }
}

/// Build the focus tunnel: per frame, tight keypoint box, margin expansion,
/// then aspect fitting. Frames without qualifying keypoints copy the box of
/// the nearest valid frame, the previous one on ties.
pub fn extract_tunnel(poses: &[PoseFrame], params: &ExtractParams) -> Result<Tunnel, TunnelError> {
    let first = poses.first().ok_or(TunnelError::NoFrames)?;
    let frame = first.frame_size()?;
    for (index, p) in poses.iter().enumerate() {
        let got = p.frame_size()?;
        if got != frame {
            return Err(TunnelError::FrameSizeMismatch {
                index,
                expected: frame,
                got,
            });
        }
    }

    let subset = params.garment.keypoint_subset();
    let per_frame: Vec<Option<BBox>> = poses
        .iter()
        .map(|p| match bbox_from_keypoints(&p.keypoints, &subset, params.conf_threshold) {
            Ok(tight) => {
                let expanded = expand_bbox(tight, params.margin_ratio, frame)?;
                Ok(Some(fit_aspect(expanded, params.target_aspect, frame)?))
            }
            Err(GeometryError::NoQualifyingKeypoints { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_, GeometryError>>()?;

    let boxes = fill_from_nearest(&per_frame).ok_or(TunnelError::EmptyTunnel)?;
    Tunnel::new(frame, boxes)
}

fn fill_from_nearest(slots: &[Option<BBox>]) -> Option<Vec<BBox>> {
    let n = slots.len();
    // distance-to and value-of the closest valid slot scanning from each side
    let mut from_left: Vec<Option<(usize, BBox)>> = vec![None; n];
    let mut last = None;
    for i in 0..n {
        if let Some(b) = slots[i] {
            last = Some((i, b));
        }
        from_left[i] = last.map(|(j, b)| (i - j, b));
    }
    let mut from_right: Vec<Option<(usize, BBox)>> = vec![None; n];
    let mut next = None;
    for i in (0..n).rev() {
        if let Some(b) = slots[i] {
            next = Some((i, b));
        }
        from_right[i] = next.map(|(j, b)| (j - i, b));
    }
    from_left
        .into_iter()
        .zip(from_right)
        .map(|(l, r)| match (l, r) {
            (Some((dl, bl)), Some((dr, br))) => Some(if dl <= dr { bl } else { br }),
            (Some((_, b)), None) | (None, Some((_, b))) => Some(b),
            (None, None) => None,
        })
        .collect()
}
