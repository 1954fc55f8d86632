//! Mechanism layer for focus-tunnel video virtual try-on.
//!
//! The crate covers the geometric front end (keypoint boxes, tunnel
//! extraction, Kalman + low-pass smoothing, zoom and feathered paste-back),
//! the tunnel position embedding, a small reverse-mode tensor engine with the
//! Ref-, Env- and Temporal-Attention wirings, and latent-diffusion forward /
//! loss / sampling math at toy scale.

pub mod diffusion;
pub mod embedding;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod smooth;
pub mod tunnel;
pub mod zoom;

pub use geometry::{BBox, FrameSize, Keypoint, PoseFrame};
pub use image::Image;
pub use nn::Tensor;
pub use tunnel::{GarmentClass, Tunnel};
