use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tunnel_core::diffusion::{
    add_noise, clip_offsets, denoise_clip, reverse_step, ldm_loss, make_schedule, temporal_aggregate, toy_decode, toy_encode,
    Adam, AggregationWeights, DenoiserConfig, DenoiserInputs, LatentClip, NoisePredictor, SamplerMode,
    ToyDenoiser, TrainingExample,
};
use tunnel_core::nn::container::{read_container, write_container};
use tunnel_core::{Image, Tensor};

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn clip_inputs(f: usize, h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> (LatentClip, DenoiserInputs) {
    let z0 = LatentClip::new(randn(&[f, 4, h, w], rng)).unwrap();
    let inputs = DenoiserInputs {
        // nothing masked: the masked latent is the clean latent
        masked_latent: z0.clone(),
        noise_latent: LatentClip::new(randn(&[f, 4, h, w], rng)).unwrap(),
        agnostic_mask: Tensor::zeros(&[f, 1, h, w]),
        pose_features: Tensor::randn(&[f, h * w, c], 0.1, rng),
        ref_tokens: Tensor::randn(&[4, c], 0.5, rng),
        env_tokens: Tensor::randn(&[f, 4, c], 0.5, rng),
        tunnel_embs: Tensor::randn(&[f, c], 0.1, rng),
    };
    (z0, inputs)
}

#[test]
fn forward_endpoints_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z0 = randn(&[2, 4, 3, 3], &mut rng);
    let eps = randn(&[2, 4, 3, 3], &mut rng);
    // beta = 0 everywhere keeps alpha_bar at exactly 1
    let clean = make_schedule(5, 0.0, 0.0).unwrap();
    assert_eq!(add_noise(&z0, &eps, 5, &clean).unwrap(), z0);
    // a final beta of 1 drives alpha_bar to exactly 0
    let terminal = make_schedule(4, 0.1, 1.0).unwrap();
    assert_eq!(terminal.alpha_bar(4).unwrap(), 0.0);
    assert_eq!(add_noise(&z0, &eps, 4, &terminal).unwrap(), eps);
}

#[test]
fn unit_beta_step_cannot_be_reversed() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = randn(&[1, 4, 2, 2], &mut rng);
    let terminal = make_schedule(4, 0.1, 1.0).unwrap();
    assert!(reverse_step(&z, &z, 4, &terminal, None).is_err());
    assert!(reverse_step(&z, &z, 3, &terminal, None).is_ok());
}

#[test]
fn variance_is_preserved() {
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    for t in [1, 250, 500, 1000] {
        let z0 = randn(&[n], &mut rng);
        let eps = randn(&[n], &mut rng);
        let z = add_noise(&z0, &eps, t, &s).unwrap();
        let mean = z.data().iter().sum::<f64>() / n as f64;
        let var = z.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 1.0).abs() < 0.05, "t = {t}: variance {var}");
    }
}

#[test]
fn codec_round_trip_on_rgb() {
    let img = Image::from_fn(16, 12, 3, |x, y, c| ((x * 7 + y * 3 + c) % 11) as f64 / 10.0);
    let z = toy_encode(&img).unwrap();
    assert_eq!(z.shape(), &[12, 6, 8]);
    let back = toy_decode(&z).unwrap();
    assert!(img.mean_abs_diff(&back).unwrap() < 1e-12);
}

#[test]
fn loss_is_zero_on_equal_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let e = randn(&[3, 4, 2, 2], &mut rng);
    assert_eq!(ldm_loss(&e, &e).unwrap(), 0.0);
}

struct ZeroNoise;

impl NoisePredictor for ZeroNoise {
    fn predict_noise(
        &self,
        z_t: &LatentClip,
        _t: usize,
        _inputs: &DenoiserInputs,
    ) -> Result<Tensor, tunnel_core::diffusion::DiffusionError> {
        Ok(Tensor::zeros(z_t.tensor().shape()))
    }
}

#[test]
fn zero_predictor_trajectory_is_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (_, inputs) = clip_inputs(2, 2, 2, 8, &mut rng);
    let s = make_schedule(20, 1e-3, 0.05).unwrap();
    let out = denoise_clip(&inputs, &s, 20, &ZeroNoise, SamplerMode::Deterministic).unwrap();
    let scale: f64 = (1..=20).map(|t| 1.0 / s.alpha(t).unwrap().sqrt()).product();
    let expected = inputs.noise_latent.tensor().map(|v| v * scale);
    assert!(out.tensor().max_abs_diff(&expected) < 1e-12);

    let none = denoise_clip(&inputs, &s, 0, &ZeroNoise, SamplerMode::Deterministic).unwrap();
    assert_eq!(none, inputs.noise_latent);
    assert!(denoise_clip(&inputs, &s, 21, &ZeroNoise, SamplerMode::Deterministic).is_err());
}

#[test]
fn ancestral_sampling_is_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (_, inputs) = clip_inputs(2, 2, 2, 8, &mut rng);
    let s = make_schedule(10, 1e-3, 0.05).unwrap();
    let model = ToyDenoiser::new(DenoiserConfig { width: 8, ..Default::default() });
    let run = |seed| denoise_clip(&inputs, &s, 10, &model, SamplerMode::Ancestral { seed }).unwrap();
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
}

#[test]
fn aggregation_of_identical_clips_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let full = LatentClip::new(randn(&[10, 4, 2, 2], &mut rng)).unwrap();
    let offsets = clip_offsets(10, 4, 2).unwrap();
    let clips: Vec<(usize, LatentClip)> = offsets
        .iter()
        .map(|&o| {
            let part = full.tensor().slice_rows(o, 4).unwrap();
            (o, LatentClip::new(part).unwrap())
        })
        .collect();
    for mode in [AggregationWeights::Uniform, AggregationWeights::Triangular] {
        let out = temporal_aggregate(&clips, 10, mode).unwrap();
        assert!(out.tensor().max_abs_diff(full.tensor()) < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip() {
    let cfg = DenoiserConfig { width: 8, seed: 11, ..Default::default() };
    let model = ToyDenoiser::new(cfg);
    let mut buf = Vec::new();
    write_container(&mut buf, &model.named()).unwrap();
    let back = ToyDenoiser::from_named(cfg, read_container(buf.as_slice()).unwrap()).unwrap();
    for ((_, a), (_, b)) in model.named().iter().zip(back.named()) {
        assert!(a.max_abs_diff(&b) < 1e-6);
    }
}

#[test]
fn overfits_one_clip() {
    let (f, h, w) = (8, 8, 8);
    let cfg = DenoiserConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (z0, inputs) = clip_inputs(f, h, w, cfg.width, &mut rng);
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    let draws = [100, 300, 600, 900]
        .into_iter()
        .map(|t| (t, Tensor::from_fn(&[f, 4, h, w], |_| StandardNormal.sample(&mut rng))))
        .collect();
    let example = TrainingExample { z0, inputs, draws };
    let mut model = ToyDenoiser::new(cfg);
    let mut adam = Adam::new(1e-2);
    let mut loss = f64::INFINITY;
    for step in 0..2000 {
        let (l, grads) = model.loss_and_grads(&example, &s).unwrap();
        loss = l;
        if loss < 0.05 {
            eprintln!("overfit reached loss {loss:.4} after {step} steps");
            break;
        }
        adam.update(model.params_mut(), &grads);
    }
    assert!(loss < 0.05, "final loss {loss}");
}
