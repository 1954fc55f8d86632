#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tunnel_cli::io::{self, PoseRecord};
use tunnel_core::{Image, Keypoint};

pub const FRAMES: usize = 16;
pub const WIDTH: usize = 96;
pub const HEIGHT: usize = 72;

/// Torso rectangle of frame `i`: a slow walk to the right.
pub fn torso(i: usize) -> (f64, f64, f64, f64) {
    let x0 = 20.0 + 1.5 * i as f64;
    (x0, 18.0, x0 + 26.0, 52.0)
}

pub fn frame(i: usize) -> Image {
    let (x0, y0, x1, y1) = torso(i);
    Image::from_fn(WIDTH, HEIGHT, 3, |x, y, c| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        if (x0..x1).contains(&px) && (y0..y1).contains(&py) {
            [0.8, 0.2, 0.3][c]
        } else {
            let stripe = ((x / 6 + y / 9) % 2) as f64;
            0.25 + 0.3 * stripe + 0.1 * c as f64
        }
    })
}

/// Upper-body keypoints on the torso corners with jittered detections.
pub fn poses(seed: u64, noise: f64) -> Vec<PoseRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, noise).unwrap();
    (0..FRAMES)
        .map(|i| {
            let (x0, y0, x1, y1) = torso(i);
            let mid = 0.5 * (y0 + y1);
            let spots = [
                ("left_shoulder", x1, y0),
                ("right_shoulder", x0, y0),
                ("left_elbow", x1 + 2.0, mid),
                ("right_elbow", x0 - 2.0, mid),
                ("left_hip", x1, y1),
                ("right_hip", x0, y1),
                ("nose", 0.5 * (x0 + x1), y0 - 8.0),
            ];
            let keypoints = spots
                .iter()
                .map(|&(name, x, y)| Keypoint::new(name, x + n.sample(&mut rng), y + n.sample(&mut rng), 0.9))
                .collect();
            PoseRecord {
                frame: i,
                width: WIDTH,
                height: HEIGHT,
                keypoints,
            }
        })
        .collect()
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub frames: PathBuf,
    pub poses: PathBuf,
}

pub fn write_fixture(noise: f64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    let images: Vec<Image> = (0..FRAMES).map(frame).collect();
    io::save_frames(&frames, &images).unwrap();
    let poses = dir.path().join("poses.json");
    io::write_json(&poses, &self::poses(3, noise)).unwrap();
    Fixture { dir, frames, poses }
}

pub fn out_dir(f: &Fixture, name: &str) -> PathBuf {
    f.dir.path().join(name)
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
