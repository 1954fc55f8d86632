//! 2-D primitives: keypoints, boxes and the box arithmetic used to build
//! the focus tunnel. Coordinates are continuous pixels with the origin at the
//! top-left corner; nothing here rasterizes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("no keypoint in the subset reaches confidence {threshold}")]
    NoQualifyingKeypoints { threshold: f64 },
    #[error("invalid box ({x0}, {y0}, {x1}, {y1})")]
    InvalidBox { x0: f64, y0: f64, x1: f64, y1: f64 },
    #[error("frame size must be positive, got {width}x{height}")]
    InvalidFrameSize { width: usize, height: usize },
    #[error("{what} must be {requirement}, got {value}")]
    InvalidParameter {
        what: &'static str,
        requirement: &'static str,
        value: f64,
    },
}

/// The 17 COCO keypoint names, in COCO order.
pub const COCO_KEYPOINTS: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

pub const UPPER_BODY: [&str; 8] = [
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
];

pub const LOWER_BODY: [&str; 6] = [
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub conf: f64,
}

impl Keypoint {
    pub fn new(name: impl Into<String>, x: f64, y: f64, conf: f64) -> Self {
        Self {
            name: name.into(),
            x,
            y,
            conf,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && (0.0..=1.0).contains(&self.conf)
    }
}

/// Keypoints detected in one video frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub frame_index: usize,
    pub width: usize,
    pub height: usize,
    pub keypoints: Vec<Keypoint>,
}

impl PoseFrame {
    pub fn frame_size(&self) -> Result<FrameSize, GeometryError> {
        FrameSize::new(self.width, self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameSize {
    pub width: usize,
    pub height: usize,
}

impl FrameSize {
    pub fn new(width: usize, height: usize) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidFrameSize { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn full_box(&self) -> BBox {
        BBox {
            x0: 0.0,
            y0: 0.0,
            x1: self.width as f64,
            y1: self.height as f64,
        }
    }
}

/// Axis-aligned box with `x0 <= x1`, `y0 <= y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        let finite = [x0, y0, x1, y1].iter().all(|v| v.is_finite());
        if !finite || x0 > x1 || y0 > y1 {
            return Err(GeometryError::InvalidBox { x0, y0, x1, y1 });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// Box from center and size. Negative sizes are rejected.
    pub fn from_center_size(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn aspect(&self) -> f64 {
        self.width() / self.height()
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        self.x0 <= x && x <= self.x1 && self.y0 <= y && y <= self.y1
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let b = BBox {
            x0: self.x0.max(other.x0),
            y0: self.y0.max(other.y0),
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
        };
        (b.x0 <= b.x1 && b.y0 <= b.y1).then_some(b)
    }

    /// Clamp every coordinate into `[0, width] x [0, height]`.
    pub fn clamp_to(&self, frame: FrameSize) -> BBox {
        let (w, h) = (frame.width as f64, frame.height as f64);
        BBox {
            x0: self.x0.clamp(0.0, w),
            y0: self.y0.clamp(0.0, h),
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
        }
    }

    pub fn is_within(&self, frame: FrameSize) -> bool {
        frame.full_box().contains(self)
    }
}

/// Tight min/max box over the keypoints named in `subset` whose confidence
/// reaches `conf_threshold`.
pub fn bbox_from_keypoints(
    keypoints: &[Keypoint],
    subset: &[&str],
    conf_threshold: f64,
) -> Result<BBox, GeometryError> {
    keypoints
        .iter()
        .filter(|k| k.conf >= conf_threshold && k.x.is_finite() && k.y.is_finite())
        .filter(|k| subset.contains(&k.name.as_str()))
        .fold(None, |acc: Option<BBox>, k| {
            let point = BBox {
                x0: k.x,
                y0: k.y,
                x1: k.x,
                y1: k.y,
            };
            Some(acc.map_or(point, |b| b.union(&point)))
        })
        .ok_or(GeometryError::NoQualifyingKeypoints {
            threshold: conf_threshold,
        })
}

/// Move each side outward by `margin_ratio` times the box dimension along
/// that axis, then clamp to the frame.
pub fn expand_bbox(b: BBox, margin_ratio: f64, frame: FrameSize) -> Result<BBox, GeometryError> {
    if !(margin_ratio >= 0.0 && margin_ratio.is_finite()) {
        return Err(GeometryError::InvalidParameter {
            what: "margin_ratio",
            requirement: "finite and >= 0",
            value: margin_ratio,
        });
    }
    let dx = margin_ratio * b.width();
    let dy = margin_ratio * b.height();
    Ok(BBox {
        x0: b.x0 - dx,
        y0: b.y0 - dy,
        x1: b.x1 + dx,
        y1: b.y1 + dy,
    }
    .clamp_to(frame))
}

/// Grow `b` along one axis until `width / height == target_aspect`, keeping
/// its center, then slide it back inside the frame. When the grown extent is
/// larger than the frame along that axis it is clamped and the aspect is left
/// short of the target.
pub fn fit_aspect(b: BBox, target_aspect: f64, frame: FrameSize) -> Result<BBox, GeometryError> {
    if !(target_aspect > 0.0 && target_aspect.is_finite()) {
        return Err(GeometryError::InvalidParameter {
            what: "target_aspect",
            requirement: "finite and > 0",
            value: target_aspect,
        });
    }
    let (w, h) = (b.width(), b.height());
    let (cx, cy) = b.center();
    let wanted_w = h * target_aspect;
    let (x0, x1, y0, y1) = if w < wanted_w {
        let (x0, x1) = place_span(cx, wanted_w, frame.width as f64);
        (x0, x1, b.y0, b.y1)
    } else if w > wanted_w {
        let (y0, y1) = place_span(cy, w / target_aspect, frame.height as f64);
        (b.x0, b.x1, y0, y1)
    } else {
        return Ok(b);
    };
    Ok(BBox { x0, y0, x1, y1 })
}

/// Span of `len` centered at `center`, shifted to lie in `[0, limit]`, or the
/// whole `[0, limit]` when it does not fit.
fn place_span(center: f64, len: f64, limit: f64) -> (f64, f64) {
    if len >= limit {
        return (0.0, limit);
    }
    let mut lo = center - len / 2.0;
    let mut hi = center + len / 2.0;
    if lo < 0.0 {
        hi -= lo;
        lo = 0.0;
    } else if hi > limit {
        lo -= hi - limit;
        hi = limit;
    }
    (lo, hi)
}
