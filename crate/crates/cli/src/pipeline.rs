//! extract -> smooth -> zoom -> (denoise) -> blend -> metrics.
//!
//! Every stage runs in memory first; artifacts are written only once all
//! enabled stages have succeeded, so a failed run leaves just the manifest.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tunnel_core::diffusion::{
    clip_offsets, denoise_clip, make_schedule, temporal_aggregate, toy_decode, toy_encode, DenoiserConfig,
    DenoiserInputs, LatentClip, SamplerMode, ToyDenoiser,
};
use tunnel_core::embedding::{embed_tunnel, EmbeddingParams};
use tunnel_core::geometry::bbox_from_keypoints;
use tunnel_core::metrics::{ssim, tunnel_stability_report, Report, SsimParams};
use tunnel_core::nn::container::read_container;
use tunnel_core::nn::{EnvEncoder, PoseEncoder, Tensor};
use tunnel_core::smooth::smooth_tunnel;
use tunnel_core::tunnel::extract_tunnel;
use tunnel_core::zoom::{crop_pad_resize, tunnel_blend, ZoomMap};
use tunnel_core::{FrameSize, Image, PoseFrame, Tunnel};

use crate::config::PipelineConfig;
use crate::io::{self, Manifest};
use crate::{ErrorKind, PipelineError, Stage};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineInputs {
    pub frames_dir: PathBuf,
    pub poses: PathBuf,
    pub out_dir: PathBuf,
    /// Garment image feeding the reference tokens of the denoiser.
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub frames: usize,
    pub stages: Vec<Stage>,
    pub artifacts: Vec<PathBuf>,
    pub report: Option<Report>,
}

fn numeric(stage: Stage, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::new(stage, ErrorKind::Numeric, e.to_string())
}

fn input(stage: Stage, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::new(stage, ErrorKind::Input, e.to_string())
}

pub fn extract_stage(poses: &[PoseFrame], config: &PipelineConfig) -> Result<Tunnel, PipelineError> {
    extract_tunnel(poses, &config.extract_params()).map_err(|e| input(Stage::Extract, e))
}

pub fn smooth_stage(raw: &Tunnel, config: &PipelineConfig) -> Result<Tunnel, PipelineError> {
    smooth_tunnel(raw, &config.kalman_params(), config.lowpass_window, config.target_aspect)
        .map_err(|e| numeric(Stage::Smooth, e))
}

pub fn zoom_stage(
    frames: &[Image],
    tunnel: &Tunnel,
    out_size: FrameSize,
) -> Result<(Vec<Image>, Vec<ZoomMap>), PipelineError> {
    if frames.len() != tunnel.len() {
        return Err(input(
            Stage::Zoom,
            format!("{} frames for a tunnel of {}", frames.len(), tunnel.len()),
        ));
    }
    frames
        .iter()
        .zip(tunnel.boxes())
        .enumerate()
        .map(|(i, (f, b))| crop_pad_resize(f, *b, out_size).map_err(|e| numeric(Stage::Zoom, e).at_frame(i)))
        .collect::<Result<Vec<_>, _>>()
        .map(|v| v.into_iter().unzip())
}

pub fn blend_stage(
    frames: &[Image],
    patches: &[Image],
    maps: &[ZoomMap],
    sigma: f64,
) -> Result<Vec<Image>, PipelineError> {
    tunnel_blend(frames, patches, maps, sigma).map_err(|e| numeric(Stage::Blend, e))
}

pub fn metrics_stage(
    raw: &Tunnel,
    smoothed: &Tunnel,
    originals: &[Image],
    blended: &[Image],
) -> Result<Report, PipelineError> {
    let params = SsimParams::default();
    let per_frame = originals
        .iter()
        .zip(blended)
        .enumerate()
        .map(|(i, (a, b))| ssim(a, b, &params).map_err(|e| numeric(Stage::Metrics, e).at_frame(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let stability = tunnel_stability_report(raw, smoothed).map_err(|e| numeric(Stage::Metrics, e))?;
    Ok(Report::new(per_frame, stability))
}

/// Gaussian keypoint heat map rasterized at twice the patch resolution, so
/// that the pose encoder's 4x reduction lands on the latent grid.
fn pose_map(pose: &PoseFrame, map: &ZoomMap, threshold: f64) -> Image {
    let (w, h) = (2 * map.out_size.width, 2 * map.out_size.height);
    let sigma = 3.0;
    let points: Vec<(f64, f64)> = pose
        .keypoints
        .iter()
        .filter(|k| k.is_valid() && k.conf >= threshold)
        .map(|k| {
            let (u, v) = map.to_patch(k.x, k.y);
            (2.0 * u, 2.0 * v)
        })
        .collect();
    Image::from_fn(w, h, 1, |x, y, _| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        points
            .iter()
            .map(|(u, v)| (-((px - u).powi(2) + (py - v).powi(2)) / (2.0 * sigma * sigma)).exp())
            .fold(0.0, f64::max)
    })
}

/// Latent-resolution agnostic mask: the tight garment box, or the whole
/// tunnel box when the frame has no qualifying keypoints.
fn agnostic_mask(pose: &PoseFrame, map: &ZoomMap, config: &PipelineConfig) -> Image {
    let subset = config.garment.keypoint_subset();
    let region = bbox_from_keypoints(&pose.keypoints, &subset, config.conf_threshold).unwrap_or(map.source_box);
    let (u0, v0) = map.to_patch(region.x0, region.y0);
    let (u1, v1) = map.to_patch(region.x1, region.y1);
    let (lw, lh) = (map.out_size.width / 2, map.out_size.height / 2);
    Image::from_fn(lw, lh, 1, |x, y, _| {
        let (u, v) = (2.0 * x as f64 + 1.0, 2.0 * y as f64 + 1.0);
        if u0 <= u && u < u1 && v0 <= v && v < v1 {
            1.0
        } else {
            0.0
        }
    })
}

fn stack(frames: &[Tensor]) -> Result<Tensor, PipelineError> {
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(frames[0].shape());
    let data = frames.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data).map_err(|e| numeric(Stage::Denoise, e))
}

fn slice_frames(t: &Tensor, start: usize, len: usize) -> Result<Tensor, PipelineError> {
    t.slice_rows(start, len).map_err(|e| numeric(Stage::Denoise, e))
}

fn load_denoiser(config: &PipelineConfig) -> Result<ToyDenoiser, PipelineError> {
    let d = &config.denoise;
    let cfg = DenoiserConfig {
        width: d.width,
        time_freq_dim: d.time_freq_dim,
        seed: config.seed,
    };
    match &d.checkpoint {
        None => Ok(ToyDenoiser::new(cfg)),
        Some(path) => {
            let file = std::fs::File::open(path).map_err(|e| input(Stage::Denoise, format!("{}: {e}", path.display())))?;
            let entries = read_container(std::io::BufReader::new(file))
                .map_err(|e| input(Stage::Denoise, format!("{}: {e}", path.display())))?;
            ToyDenoiser::from_named(cfg, entries).map_err(|e| input(Stage::Denoise, e))
        }
    }
}

/// Regenerate the masked garment region of every patch with the toy
/// denoiser, clip by clip, averaging overlaps.
pub fn denoise_stage(
    config: &PipelineConfig,
    poses: &[PoseFrame],
    tunnel: &Tunnel,
    patches: &[Image],
    maps: &[ZoomMap],
    reference: Option<&Image>,
) -> Result<Vec<Image>, PipelineError> {
    let d = &config.denoise;
    let n = patches.len();
    let c = d.width;
    let seed = config.seed;
    let err = |e: &dyn std::fmt::Display| numeric(Stage::Denoise, e);

    let pose_enc = PoseEncoder::new(1, 8, c, seed.wrapping_add(1));
    let env_enc = EnvEncoder::new(3, d.env_grid, c, seed.wrapping_add(2));
    let ref_enc = EnvEncoder::new(3, d.env_grid, c, seed.wrapping_add(3));
    let mut emb = EmbeddingParams::seeded(
        EmbeddingParams::DEFAULT_FREQ_DIM,
        EmbeddingParams::DEFAULT_BASE,
        c,
        seed.wrapping_add(4),
    )
    .map_err(|e| err(&e))?;
    emb.scale = d.embedding_scale;

    let mut masked = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut pose_tokens = Vec::with_capacity(n);
    let mut env_tokens = Vec::with_capacity(n);
    for (i, ((patch, map), pose)) in patches.iter().zip(maps).zip(poses).enumerate() {
        let mask = agnostic_mask(pose, map, config);
        let keep = |x: usize, y: usize| 1.0 - mask.get(x / 2, y / 2, 0);
        let luma = patch.to_luma();
        let masked_luma = Image::from_fn(luma.width(), luma.height(), 1, |x, y, _| luma.get(x, y, 0) * keep(x, y));
        let masked_rgb = Image::from_fn(patch.width(), patch.height(), 3, |x, y, ch| patch.get(x, y, ch) * keep(x, y));
        masked.push(toy_encode(&masked_luma).map_err(|e| err(&e).at_frame(i))?);
        masks.push(Tensor::new(vec![1, mask.height(), mask.width()], mask.data().to_vec()).map_err(|e| err(&e))?);
        pose_tokens.push(pose_enc.encode(&pose_map(pose, map, config.conf_threshold)).map_err(|e| err(&e).at_frame(i))?);
        env_tokens.push(env_enc.encode(&masked_rgb).map_err(|e| err(&e).at_frame(i))?);
    }
    let masked = stack(&masked)?;
    let masks = stack(&masks)?;
    let pose_tokens = stack(&pose_tokens)?;
    let env_tokens = stack(&env_tokens)?;
    let ref_tokens = match reference {
        Some(img) => ref_enc.encode(img).map_err(|e| err(&e))?,
        None => Tensor::new_allow_empty(vec![0, c], vec![]).map_err(|e| err(&e))?,
    };
    let embs = embed_tunnel(tunnel.frame_size(), tunnel.boxes(), &emb).map_err(|e| err(&e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Tensor::randn(masked.shape(), 1.0, &mut rng);

    let model = load_denoiser(config)?;
    let schedule = make_schedule(d.schedule_steps, d.beta_start, d.beta_end).map_err(|e| err(&e))?;
    let clip_len = config.clip_length.min(n);
    let mut clips = Vec::new();
    for offset in clip_offsets(n, clip_len, config.stride().min(clip_len)).map_err(|e| err(&e))? {
        let latent = |t: &Tensor| LatentClip::new(slice_frames(t, offset, clip_len)?).map_err(|e| err(&e));
        let inputs = DenoiserInputs {
            masked_latent: latent(&masked)?,
            noise_latent: latent(&noise)?,
            agnostic_mask: slice_frames(&masks, offset, clip_len)?,
            pose_features: slice_frames(&pose_tokens, offset, clip_len)?,
            ref_tokens: ref_tokens.clone(),
            env_tokens: slice_frames(&env_tokens, offset, clip_len)?,
            tunnel_embs: slice_frames(&embs, offset, clip_len)?,
        };
        let mode = SamplerMode::Ancestral {
            seed: seed.wrapping_add(offset as u64),
        };
        let out = denoise_clip(&inputs, &schedule, d.sampling_steps, &model, mode).map_err(|e| err(&e).at_frame(offset))?;
        clips.push((offset, out));
    }
    let latents = temporal_aggregate(&clips, n, d.aggregation).map_err(|e| err(&e))?;

    (0..n)
        .map(|i| {
            let gray = toy_decode(&latents.frame(i)).map_err(|e| err(&e).at_frame(i))?;
            let patch = &patches[i];
            let lm = masks.slice_rows(i, 1).map_err(|e| err(&e))?;
            let lw = patch.width() / 2;
            Ok(Image::from_fn(patch.width(), patch.height(), 3, |x, y, ch| {
                let m = lm.data()[(y / 2) * lw + x / 2];
                m * gray.get(x, y, 0).clamp(0.0, 1.0) + (1.0 - m) * patch.get(x, y, ch)
            }))
        })
        .collect()
}

struct Outputs {
    raw: Tunnel,
    smoothed: Tunnel,
    patches: Option<(Vec<Image>, Vec<ZoomMap>)>,
    blended: Option<Vec<Image>>,
    report: Option<Report>,
    stages: Vec<Stage>,
}

fn compute(config: &PipelineConfig, inputs: &PipelineInputs) -> Result<(usize, Outputs), PipelineError> {
    config.validate()?;
    let poses = io::read_poses(&inputs.poses)?;
    let frames = io::load_frames(&inputs.frames_dir, poses.len())?;
    for (i, (f, p)) in frames.iter().zip(&poses).enumerate() {
        if (f.width(), f.height()) != (p.width, p.height) {
            return Err(input(
                Stage::Input,
                format!(
                    "frame is {}x{} but its pose record says {}x{}",
                    f.width(),
                    f.height(),
                    p.width,
                    p.height
                ),
            )
            .at_frame(i));
        }
    }
    let reference = inputs.reference.as_deref().map(io::load_png).transpose()?;

    let mut stages = vec![Stage::Extract];
    let raw = extract_stage(&poses, config)?;
    let smoothed = if config.stages.smooth {
        stages.push(Stage::Smooth);
        smooth_stage(&raw, config)?
    } else {
        raw.clone()
    };

    let mut patches = None;
    let mut blended = None;
    if config.stages.zoom {
        stages.push(Stage::Zoom);
        let (zoomed, maps) = zoom_stage(&frames, &smoothed, config.patch_size())?;
        let generated = if config.stages.denoise {
            stages.push(Stage::Denoise);
            denoise_stage(config, &poses, &smoothed, &zoomed, &maps, reference.as_ref())?
        } else {
            zoomed.clone()
        };
        if config.stages.blend {
            stages.push(Stage::Blend);
            blended = Some(blend_stage(&frames, &generated, &maps, config.blend_sigma)?);
        }
        patches = Some((zoomed, maps));
    }

    let report = if config.stages.metrics {
        stages.push(Stage::Metrics);
        let empty = Vec::new();
        Some(metrics_stage(&raw, &smoothed, &frames, blended.as_ref().unwrap_or(&empty))?)
    } else {
        None
    };
    Ok((
        poses.len(),
        Outputs {
            raw,
            smoothed,
            patches,
            blended,
            report,
            stages,
        },
    ))
}

fn persist(out_dir: &Path, o: &Outputs) -> Result<Vec<PathBuf>, PipelineError> {
    let mut written = Vec::new();
    let raw_path = out_dir.join("tunnel.jsonl");
    io::write_tunnel(&raw_path, &o.raw)?;
    written.push(raw_path);
    let smooth_path = out_dir.join("tunnel_smoothed.jsonl");
    io::write_tunnel(&smooth_path, &o.smoothed)?;
    written.push(smooth_path);
    if let Some((zoomed, maps)) = &o.patches {
        written.extend(io::save_frames(&out_dir.join("zoomed"), zoomed)?);
        let maps_path = out_dir.join("zoom_maps.json");
        io::write_json(&maps_path, maps)?;
        written.push(maps_path);
    }
    if let Some(blended) = &o.blended {
        written.extend(io::save_frames(&out_dir.join("blended"), blended)?);
    }
    if let Some(report) = &o.report {
        let path = out_dir.join("report.json");
        io::write_json(&path, report)?;
        written.push(path);
    }
    Ok(written)
}

fn relative(out_dir: &Path, paths: &[PathBuf]) -> Vec<String> {
    paths
        .iter()
        .map(|p| p.strip_prefix(out_dir).unwrap_or(p).to_string_lossy().into_owned())
        .collect()
}

/// Run every enabled stage and write the artifacts under `inputs.out_dir`.
/// A `manifest.json` is written in all cases.
pub fn run_pipeline(config: &PipelineConfig, inputs: &PipelineInputs) -> Result<PipelineSummary, PipelineError> {
    let manifest_path = inputs.out_dir.join("manifest.json");
    let result = compute(config, inputs).and_then(|(frames, outputs)| {
        let artifacts = persist(&inputs.out_dir, &outputs)?;
        Ok(PipelineSummary {
            frames,
            stages: outputs.stages,
            artifacts,
            report: outputs.report,
        })
    });
    let manifest = match &result {
        Ok(summary) => Manifest {
            status: "ok".into(),
            stages: summary.stages.iter().map(|s| s.to_string()).collect(),
            artifacts: relative(&inputs.out_dir, &summary.artifacts),
            error: None,
        },
        Err(e) => Manifest {
            status: "failed".into(),
            stages: Vec::new(),
            artifacts: Vec::new(),
            error: Some(e.to_string()),
        },
    };
    io::write_json(&manifest_path, &manifest)?;
    result
}

