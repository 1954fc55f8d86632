use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::denoiser::{DenoiserInputs, NoisePredictor};
use super::schedule::NoiseSchedule;
use super::{DiffusionError, LatentClip};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    /// Adds posterior noise drawn from a seeded generator.
    Ancestral { seed: u64 },
    /// Posterior mean only.
    Deterministic,
}

fn check_shape(a: &Tensor, b: &Tensor) -> Result<(), DiffusionError> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Posterior variance `beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`;
/// zero at `t = 1`.
fn posterior_variance(s: &NoiseSchedule, t: usize) -> Result<f64, DiffusionError> {
    let ab = s.alpha_bar(t)?;
    let ab_prev = s.alpha_bar(t - 1)?;
    if t == 1 || ab >= 1.0 {
        return Ok(0.0);
    }
    Ok(s.beta(t)? * (1.0 - ab_prev) / (1.0 - ab))
}

/// One reverse step:
/// `z_{t-1} = (z_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t) + sigma_t n`.
pub fn reverse_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor, DiffusionError> {
    check_shape(z_t, eps_hat)?;
    let (beta, alpha, ab) = (s.beta(t)?, s.alpha(t)?, s.alpha_bar(t)?);
    if alpha <= 0.0 {
        return Err(DiffusionError::Irreversible(t));
    }
    // a zero-noise level leaves nothing to remove
    let coef = if ab >= 1.0 { 0.0 } else { beta / (1.0 - ab).sqrt() };
    let inv = 1.0 / alpha.sqrt();
    let sigma = posterior_variance(s, t)?.sqrt();
    let mut out: Vec<f64> = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(z, e)| (z - coef * e) * inv)
        .collect();
    if let Some(n) = noise {
        check_shape(z_t, n)?;
        for (o, v) in out.iter_mut().zip(n.data()) {
            *o += sigma * v;
        }
    }
    Ok(Tensor::new(z_t.shape().to_vec(), out)?)
}

/// Mean of `q(z_{t-1} | z_t, z_0)`.
pub fn posterior_mean(z_t: &Tensor, z0: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor, DiffusionError> {
    check_shape(z_t, z0)?;
    let (beta, alpha, ab) = (s.beta(t)?, s.alpha(t)?, s.alpha_bar(t)?);
    let ab_prev = s.alpha_bar(t - 1)?;
    if ab >= 1.0 {
        return Ok(z0.clone());
    }
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let data = z_t.data().iter().zip(z0.data()).map(|(zt, z0)| c0 * z0 + ct * zt).collect();
    Ok(Tensor::new(z_t.shape().to_vec(), data)?)
}

/// Run `steps` reverse steps from `inputs.noise_latent`, starting at
/// `t = steps` (at most the schedule length). `steps = 0` returns the
/// starting latent unchanged.
pub fn denoise_clip(
    inputs: &DenoiserInputs,
    schedule: &NoiseSchedule,
    steps: usize,
    predictor: &dyn NoisePredictor,
    mode: SamplerMode,
) -> Result<LatentClip, DiffusionError> {
    if steps > schedule.steps() {
        return Err(DiffusionError::BadTimestep {
            t: steps,
            max: schedule.steps(),
        });
    }
    let mut rng = match mode {
        SamplerMode::Ancestral { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        SamplerMode::Deterministic => None,
    };
    let mut z = inputs.noise_latent.clone();
    for t in (1..=steps).rev() {
        let eps_hat = predictor.predict_noise(&z, t, inputs)?;
        let noise = rng.as_mut().map(|r| {
            let shape = z.tensor().shape();
            Tensor::from_fn(shape, |_| StandardNormal.sample(r))
        });
        z = LatentClip::new(reverse_step(z.tensor(), &eps_hat, t, schedule, noise.as_ref())?)?;
    }
    Ok(z)
}
