mod common;

use std::process::Command;

use common::*;
use tunnel_cli::config::{PipelineConfig, StageToggles};
use tunnel_cli::io::{self, Manifest};
use tunnel_cli::{run_pipeline, ErrorKind, PipelineInputs};
use tunnel_core::metrics::Report;
use tunnel_core::FrameSize;

fn inputs(f: &Fixture, out: &str) -> PipelineInputs {
    PipelineInputs {
        frames_dir: f.frames.clone(),
        poses: f.poses.clone(),
        out_dir: out_dir(f, out),
        reference: None,
    }
}

fn small() -> PipelineConfig {
    PipelineConfig {
        out_size: [32, 32],
        ..Default::default()
    }
}

#[test]
fn writes_every_artifact() {
    let f = write_fixture(1.5);
    let summary = run_pipeline(&small(), &inputs(&f, "out")).unwrap();
    let out = out_dir(&f, "out");
    assert_eq!(summary.frames, FRAMES);
    for name in ["tunnel.jsonl", "tunnel_smoothed.jsonl", "zoom_maps.json", "report.json", "manifest.json"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    assert_eq!(io::count_frames(&out.join("zoomed")), FRAMES);
    assert_eq!(io::count_frames(&out.join("blended")), FRAMES);
    let tunnel = String::from_utf8(read(&out.join("tunnel.jsonl"))).unwrap();
    assert_eq!(tunnel.lines().count(), FRAMES);
    let manifest: Manifest = io::read_json(&out.join("manifest.json")).unwrap();
    assert_eq!(manifest.status, "ok");
    assert_eq!(manifest.artifacts.len(), summary.artifacts.len());
}

#[test]
fn smoothing_lowers_jitter_and_passthrough_blend_keeps_frames() {
    let f = write_fixture(1.5);
    run_pipeline(&small(), &inputs(&f, "out")).unwrap();
    let out = out_dir(&f, "out");
    let report: Report = io::read_json(&out.join("report.json")).unwrap();
    let (raw, smooth) = (report.jitter_raw.unwrap(), report.jitter_smoothed.unwrap());
    assert!(smooth.cx + smooth.cy < raw.cx + raw.cy, "{raw:?} vs {smooth:?}");
    // without the denoiser the blend pastes back a resampled copy
    assert!(report.ssim_mean.unwrap() > 0.9, "{:?}", report.ssim_mean);
    let originals = io::load_frames(&f.frames, FRAMES).unwrap();
    let blended = io::load_frames(&out.join("blended"), FRAMES).unwrap();
    for (o, b) in originals.iter().zip(&blended) {
        assert!(o.mean_abs_diff(b).unwrap() < 0.03);
    }
}

#[test]
fn reruns_are_byte_identical() {
    let f = write_fixture(1.5);
    run_pipeline(&small(), &inputs(&f, "a")).unwrap();
    run_pipeline(&small(), &inputs(&f, "b")).unwrap();
    for name in ["tunnel.jsonl", "tunnel_smoothed.jsonl", "zoom_maps.json", "report.json", "manifest.json"] {
        assert_eq!(read(&out_dir(&f, "a").join(name)), read(&out_dir(&f, "b").join(name)), "{name}");
    }
    let b0 = io::frame_path(&out_dir(&f, "a").join("blended"), 7);
    let b1 = io::frame_path(&out_dir(&f, "b").join("blended"), 7);
    assert_eq!(read(&b0), read(&b1));
}

#[test]
fn missing_poses_leave_only_a_manifest() {
    let f = write_fixture(1.5);
    let mut inp = inputs(&f, "out");
    inp.poses = f.dir.path().join("absent.json");
    let err = run_pipeline(&small(), &inp).unwrap_err();
    assert_eq!(err.kind, ErrorKind::Input);
    let entries: Vec<_> = std::fs::read_dir(&inp.out_dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries, vec![std::ffi::OsString::from("manifest.json")]);
    let manifest: Manifest = io::read_json(&inp.out_dir.join("manifest.json")).unwrap();
    assert_eq!(manifest.status, "failed");
    assert!(manifest.error.unwrap().contains("absent.json"));
}

#[test]
fn binary_exit_codes() {
    let f = write_fixture(1.5);
    let bin = env!("CARGO_BIN_EXE_tunnel-tryon");
    let config = f.dir.path().join("config.json");
    std::fs::write(&config, r#"{"out_size": [32, 32]}"#).unwrap();
    let ok = Command::new(bin)
        .args(["--config", config.to_str().unwrap(), "pipeline"])
        .args([&f.frames, &f.poses, &out_dir(&f, "cli")])
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let missing = Command::new(bin)
        .arg("pipeline")
        .args([&f.frames, &f.dir.path().join("nope.json"), &out_dir(&f, "cli2")])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
    std::fs::write(&config, r#"{"lowpass_window": 4}"#).unwrap();
    let bad = Command::new(bin)
        .args(["--config", config.to_str().unwrap(), "extract"])
        .args([&f.poses, &out_dir(&f, "t.jsonl")])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn stage_subcommands_chain() {
    let f = write_fixture(1.5);
    let bin = env!("CARGO_BIN_EXE_tunnel-tryon");
    let run = |args: &[&str]| {
        let o = Command::new(bin).args(args).output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    let p = |name: &str| out_dir(&f, name).to_string_lossy().into_owned();
    let (w, h) = (WIDTH.to_string(), HEIGHT.to_string());
    let frames = f.frames.to_string_lossy().into_owned();
    run(&["extract", &f.poses.to_string_lossy(), &p("raw.jsonl")]);
    run(&["smooth", &p("raw.jsonl"), &p("smooth.jsonl"), "--width", &w, "--height", &h]);
    run(&["zoom", &frames, &p("smooth.jsonl"), &p("zoomed")]);
    let maps = out_dir(&f, "zoomed").join("zoom_maps.json").to_string_lossy().into_owned();
    run(&["blend", &frames, &p("zoomed"), &maps, &p("blended")]);
    run(&["embed", &p("smooth.jsonl"), &p("emb.json"), "--width", &w, "--height", &h]);
    run(&[
        "metrics", &p("raw.jsonl"), &p("smooth.jsonl"), &p("report.json"), "--width", &w, "--height", &h,
        "--originals", &frames, "--blended", &p("blended"),
    ]);
    let emb: Vec<Vec<f64>> = io::read_json(&out_dir(&f, "emb.json")).unwrap();
    assert_eq!((emb.len(), emb[0].len()), (FRAMES, 16));
    let report: Report = io::read_json(&out_dir(&f, "report.json")).unwrap();
    assert_eq!(report.ssim_per_frame.len(), FRAMES);
    // the chained stages agree with the one-shot pipeline
    run_pipeline(&PipelineConfig::default(), &inputs(&f, "full")).unwrap();
    // up to the decimal round trip of the intermediate JSONL
    let frame = FrameSize::new(WIDTH, HEIGHT).unwrap();
    let chained = io::read_tunnel(&out_dir(&f, "smooth.jsonl"), frame).unwrap();
    let direct = io::read_tunnel(&out_dir(&f, "full").join("tunnel_smoothed.jsonl"), frame).unwrap();
    for (a, b) in chained.boxes().iter().zip(direct.boxes()) {
        for (u, v) in [(a.x0, b.x0), (a.y0, b.y0), (a.x1, b.x1), (a.y1, b.y1)] {
            assert!((u - v).abs() < 1e-9);
        }
    }
}

#[test]
fn denoise_stage_runs_and_is_seeded() {
    let f = write_fixture(1.5);
    let config = PipelineConfig {
        out_size: [16, 16],
        clip_length: 6,
        stages: StageToggles {
            denoise: true,
            ..Default::default()
        },
        ..Default::default()
    };
    run_pipeline(&config, &inputs(&f, "a")).unwrap();
    run_pipeline(&config, &inputs(&f, "b")).unwrap();
    let report: Report = io::read_json(&out_dir(&f, "a").join("report.json")).unwrap();
    assert!(report.ssim_per_frame.iter().all(|s| s.is_finite()));
    for i in [0, 9, 15] {
        let a = io::frame_path(&out_dir(&f, "a").join("blended"), i);
        let b = io::frame_path(&out_dir(&f, "b").join("blended"), i);
        assert_eq!(read(&a), read(&b));
    }
}

#[test]
fn demo_denoise_writes_a_loadable_checkpoint() {
    let f = write_fixture(1.5);
    let bin = env!("CARGO_BIN_EXE_tunnel-tryon");
    let out = out_dir(&f, "train");
    let o = Command::new(bin)
        .args(["demo-denoise", out.to_str().unwrap(), "--steps", "5"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut config = PipelineConfig {
        out_size: [16, 16],
        ..Default::default()
    };
    config.stages.denoise = true;
    config.denoise.checkpoint = Some(out.join("denoiser.ttnc"));
    config.denoise.sampling_steps = 2;
    run_pipeline(&config, &inputs(&f, "ckpt")).unwrap();
}
