//! On-disk formats: pose JSON, tunnel JSONL, PNG frame sequences, the run
//! manifest, all written atomically.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use tunnel_core::{BBox, FrameSize, Image, Keypoint, PoseFrame, Tunnel};

use crate::{ErrorKind, PipelineError, Stage};

fn input_error(message: String) -> PipelineError {
    PipelineError::new(Stage::Input, ErrorKind::Input, message)
}

fn output_error(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::new(Stage::Output, ErrorKind::Input, format!("{}: {e}", path.display()))
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| output_error(dir, e))?;
    let name = path.file_name().ok_or_else(|| output_error(path, "not a file path"))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| output_error(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| output_error(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| output_error(path, e))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

/// One element of the pose JSON array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub frame: usize,
    pub width: usize,
    pub height: usize,
    pub keypoints: Vec<Keypoint>,
}

impl From<PoseRecord> for PoseFrame {
    fn from(r: PoseRecord) -> Self {
        PoseFrame {
            frame_index: r.frame,
            width: r.width,
            height: r.height,
            keypoints: r.keypoints,
        }
    }
}

impl From<&PoseFrame> for PoseRecord {
    fn from(p: &PoseFrame) -> Self {
        PoseRecord {
            frame: p.frame_index,
            width: p.width,
            height: p.height,
            keypoints: p.keypoints.clone(),
        }
    }
}

/// Poses sorted by frame; the indices must be exactly `0..n`.
pub fn read_poses(path: &Path) -> Result<Vec<PoseFrame>, PipelineError> {
    let mut records: Vec<PoseRecord> = read_json(path)?;
    records.sort_by_key(|r| r.frame);
    for (i, r) in records.iter().enumerate() {
        if r.frame != i {
            return Err(input_error(format!(
                "{}: pose frames must cover 0..{} exactly, found frame {} at position {i}",
                path.display(),
                records.len(),
                r.frame
            )));
        }
    }
    if records.is_empty() {
        return Err(input_error(format!("{}: no pose frames", path.display())));
    }
    Ok(records.into_iter().map(PoseFrame::from).collect())
}

/// One line of a tunnel JSONL file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TunnelRecord {
    pub frame: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

pub fn tunnel_to_jsonl(t: &Tunnel) -> String {
    let mut out = String::new();
    for (frame, b) in t.boxes().iter().enumerate() {
        let (cx, cy) = b.center();
        let rec = TunnelRecord {
            frame,
            cx,
            cy,
            w: b.width(),
            h: b.height(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("plain numbers serialize"));
        out.push('\n');
    }
    out
}

pub fn write_tunnel(path: &Path, t: &Tunnel) -> Result<(), PipelineError> {
    atomic_write(path, tunnel_to_jsonl(t).as_bytes())
}

pub fn read_tunnel(path: &Path, frame: FrameSize) -> Result<Tunnel, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    let mut boxes = Vec::new();
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let at = |e: &dyn std::fmt::Display| input_error(format!("{}:{}: {e}", path.display(), line_no + 1));
        let rec: TunnelRecord = serde_json::from_str(line).map_err(|e| at(&e))?;
        if rec.frame != boxes.len() {
            return Err(at(&format!("expected frame {}, got {}", boxes.len(), rec.frame)));
        }
        boxes.push(BBox::from_center_size(rec.cx, rec.cy, rec.w, rec.h).map_err(|e| at(&e))?);
    }
    Tunnel::new(frame, boxes).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:06}.png")
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(frame_name(index))
}

/// Number of consecutive `frame_%06d.png` files starting at 0.
pub fn count_frames(dir: &Path) -> usize {
    (0..).take_while(|&i| frame_path(dir, i).is_file()).count()
}

/// 8-bit PNG to an RGB image with values in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Image, PipelineError> {
    let img = image::open(path)
        .map_err(|e| input_error(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Image::new(w as usize, h as usize, 3, data).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

pub fn load_frames(dir: &Path, count: usize) -> Result<Vec<Image>, PipelineError> {
    (0..count)
        .map(|i| load_png(&frame_path(dir, i)).map_err(|e| e.at_frame(i)))
        .collect()
}

/// 8-bit RGB encoding; single-channel images are replicated to gray.
pub fn encode_png(img: &Image) -> Vec<u8> {
    let quantize = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut raw = Vec::with_capacity(img.width() * img.height() * 3);
    for y in 0..img.height() {
        for x in 0..img.width() {
            for c in 0..3 {
                raw.push(quantize(img.get(x, y, c.min(img.channels() - 1))));
            }
        }
    }
    let rgb = RgbImage::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer sized for the image");
    let mut bytes = Cursor::new(Vec::new());
    rgb.write_to(&mut bytes, ImageFormat::Png).expect("in-memory PNG encoding");
    bytes.into_inner()
}

pub fn save_png(path: &Path, img: &Image) -> Result<(), PipelineError> {
    atomic_write(path, &encode_png(img))
}

pub fn save_frames(dir: &Path, frames: &[Image]) -> Result<Vec<PathBuf>, PipelineError> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = frame_path(dir, i);
            save_png(&p, f).map(|_| p)
        })
        .collect()
}

/// Run record written next to the artifacts, also on failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: String,
    pub stages: Vec<String>,
    pub artifacts: Vec<String>,
    pub error: Option<String>,
}
