use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tunnel_cli::config::PipelineConfig;
use tunnel_cli::io;
use tunnel_cli::pipeline::{blend_stage, extract_stage, metrics_stage, smooth_stage, zoom_stage};
use tunnel_cli::{run_pipeline, ErrorKind, PipelineError, PipelineInputs, Stage};
use tunnel_core::diffusion::{make_schedule, Adam, DenoiserConfig, DenoiserInputs, LatentClip, ToyDenoiser, TrainingExample};
use tunnel_core::embedding::{embed_tunnel, EmbeddingParams};
use tunnel_core::metrics::tunnel_stability_report;
use tunnel_core::nn::container::write_container;
use tunnel_core::zoom::ZoomMap;
use tunnel_core::{FrameSize, Tensor};

#[derive(Parser)]
#[command(name = "tunnel-tryon", version, about = "Focus-tunnel video try-on pipeline")]
struct Cli {
    /// JSON config; defaults apply to every missing field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Size {
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
}

impl Size {
    fn frame(&self) -> Result<FrameSize, PipelineError> {
        FrameSize::new(self.width, self.height)
            .map_err(|e| PipelineError::new(Stage::Input, ErrorKind::Input, e.to_string()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pose JSON to a raw tunnel JSONL.
    Extract { poses: PathBuf, out: PathBuf },
    /// Kalman + low-pass smoothing of a tunnel JSONL.
    Smooth {
        tunnel: PathBuf,
        out: PathBuf,
        #[command(flatten)]
        size: Size,
    },
    /// Crop every frame to its tunnel box; writes patches and zoom_maps.json.
    Zoom { frames: PathBuf, tunnel: PathBuf, out: PathBuf },
    /// Feathered paste-back of patches into the original frames.
    Blend {
        frames: PathBuf,
        patches: PathBuf,
        maps: PathBuf,
        out: PathBuf,
    },
    /// Per-frame tunnel embeddings as a JSON array of vectors.
    Embed {
        tunnel: PathBuf,
        out: PathBuf,
        #[command(flatten)]
        size: Size,
        #[arg(long, default_value_t = 16)]
        dim: usize,
    },
    /// Overfit the toy denoiser on a synthetic clip; writes the checkpoint
    /// and the loss history.
    DemoDenoise {
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
    },
    /// Stability report for a raw and smoothed tunnel, plus SSIM when frame
    /// directories are given.
    Metrics {
        raw: PathBuf,
        smoothed: PathBuf,
        out: PathBuf,
        #[command(flatten)]
        size: Size,
        #[arg(long, requires = "blended")]
        originals: Option<PathBuf>,
        #[arg(long, requires = "originals")]
        blended: Option<PathBuf>,
    },
    /// Every enabled stage end to end.
    Pipeline {
        frames: PathBuf,
        poses: PathBuf,
        out: PathBuf,
        /// Garment image for the denoiser's reference tokens.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

fn count(dir: &Path) -> Result<usize, PipelineError> {
    match io::count_frames(dir) {
        0 => Err(PipelineError::new(
            Stage::Input,
            ErrorKind::Input,
            format!("{}: no frame_000000.png", dir.display()),
        )),
        n => Ok(n),
    }
}

#[derive(Serialize)]
struct TrainLog {
    steps: usize,
    losses: Vec<f64>,
}

fn demo_denoise(config: &PipelineConfig, out: &Path, steps: usize) -> Result<(), PipelineError> {
    let numeric = |e: &dyn std::fmt::Display| PipelineError::new(Stage::Denoise, ErrorKind::Numeric, e.to_string());
    let d = &config.denoise;
    let cfg = DenoiserConfig {
        width: d.width,
        time_freq_dim: d.time_freq_dim,
        seed: config.seed,
    };
    let (f, h, w, c) = (config.clip_length, 8, 8, d.width);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let z0 = LatentClip::new(Tensor::randn(&[f, 4, h, w], 1.0, &mut rng)).map_err(|e| numeric(&e))?;
    let inputs = DenoiserInputs {
        masked_latent: z0.clone(),
        noise_latent: LatentClip::new(Tensor::randn(&[f, 4, h, w], 1.0, &mut rng)).map_err(|e| numeric(&e))?,
        agnostic_mask: Tensor::zeros(&[f, 1, h, w]),
        pose_features: Tensor::randn(&[f, h * w, c], 0.1, &mut rng),
        ref_tokens: Tensor::randn(&[4, c], 0.5, &mut rng),
        env_tokens: Tensor::randn(&[f, 4, c], 0.5, &mut rng),
        tunnel_embs: Tensor::randn(&[f, c], 0.1, &mut rng),
    };
    let schedule = make_schedule(d.schedule_steps, d.beta_start, d.beta_end).map_err(|e| numeric(&e))?;
    let draws = [0.1, 0.3, 0.6, 0.9]
        .into_iter()
        .map(|q| {
            let t = ((q * d.schedule_steps as f64) as usize).max(1);
            (t, Tensor::randn(&[f, 4, h, w], 1.0, &mut rng))
        })
        .collect();
    let example = TrainingExample { z0, inputs, draws };
    let mut model = ToyDenoiser::new(cfg);
    let losses = model
        .train(&example, &schedule, &mut Adam::new(1e-2), steps)
        .map_err(|e| numeric(&e))?;
    let mut bytes = Vec::new();
    write_container(&mut bytes, &model.named()).map_err(|e| numeric(&e))?;
    io::atomic_write(&out.join("denoiser.ttnc"), &bytes)?;
    io::write_json(&out.join("train_log.json"), &TrainLog { steps, losses })
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let config = PipelineConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Extract { poses, out } => {
            let poses = io::read_poses(&poses)?;
            io::write_tunnel(&out, &extract_stage(&poses, &config)?)
        }
        Command::Smooth { tunnel, out, size } => {
            let raw = io::read_tunnel(&tunnel, size.frame()?)?;
            io::write_tunnel(&out, &smooth_stage(&raw, &config)?)
        }
        Command::Zoom { frames, tunnel, out } => {
            let images = io::load_frames(&frames, count(&frames)?)?;
            let size = FrameSize {
                width: images[0].width(),
                height: images[0].height(),
            };
            let t = io::read_tunnel(&tunnel, size)?;
            let (patches, maps) = zoom_stage(&images, &t, config.patch_size())?;
            io::save_frames(&out, &patches)?;
            io::write_json(&out.join("zoom_maps.json"), &maps)
        }
        Command::Blend {
            frames,
            patches,
            maps,
            out,
        } => {
            let maps: Vec<ZoomMap> = io::read_json(&maps)?;
            let originals = io::load_frames(&frames, maps.len())?;
            let patches = io::load_frames(&patches, maps.len())?;
            io::save_frames(&out, &blend_stage(&originals, &patches, &maps, config.blend_sigma)?).map(|_| ())
        }
        Command::Embed { tunnel, out, size, dim } => {
            let frame = size.frame()?;
            let t = io::read_tunnel(&tunnel, frame)?;
            let numeric = |e: &dyn std::fmt::Display| PipelineError::new(Stage::Input, ErrorKind::Numeric, e.to_string());
            let mut params = EmbeddingParams::seeded(
                EmbeddingParams::DEFAULT_FREQ_DIM,
                EmbeddingParams::DEFAULT_BASE,
                dim,
                config.seed,
            )
            .map_err(|e| numeric(&e))?;
            params.scale = config.denoise.embedding_scale;
            let embs = embed_tunnel(frame, t.boxes(), &params).map_err(|e| numeric(&e))?;
            let rows: Vec<&[f64]> = embs.data().chunks(dim).collect();
            io::write_json(&out, &rows)
        }
        Command::DemoDenoise { out, steps } => demo_denoise(&config, &out, steps),
        Command::Metrics {
            raw,
            smoothed,
            out,
            size,
            originals,
            blended,
        } => {
            let frame = size.frame()?;
            let raw = io::read_tunnel(&raw, frame)?;
            let smoothed = io::read_tunnel(&smoothed, frame)?;
            let report = match (originals, blended) {
                (Some(o), Some(b)) => {
                    let o = io::load_frames(&o, raw.len())?;
                    let b = io::load_frames(&b, raw.len())?;
                    metrics_stage(&raw, &smoothed, &o, &b)?
                }
                _ => {
                    let stability = tunnel_stability_report(&raw, &smoothed)
                        .map_err(|e| PipelineError::new(Stage::Metrics, ErrorKind::Numeric, e.to_string()))?;
                    tunnel_core::metrics::Report::new(Vec::new(), stability)
                }
            };
            io::write_json(&out, &report)
        }
        Command::Pipeline {
            frames,
            poses,
            out,
            reference,
        } => {
            let summary = run_pipeline(
                &config,
                &PipelineInputs {
                    frames_dir: frames,
                    poses,
                    out_dir: out,
                    reference,
                },
            )?;
            println!("{} frames, {} artifacts", summary.frames, summary.artifacts.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
