use super::DiffusionError;
use crate::nn::Tensor;

/// Linear-beta schedule. Step indices run `1..=T`; index 0 stands for the
/// clean signal with `alpha_bar = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize, DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::BadTimestep {
                t,
                max: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.alphas[self.check(t)?])
    }

    /// Cumulative product `alpha_1 ... alpha_t`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.check(t)?])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// `beta_t` linear from `beta_start` (t = 1) to `beta_end` (t = T).
/// `beta_end = 1` gives a schedule ending at `alpha_bar = 0` exactly; such a
/// step can be noised but not sampled back.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 || !(0.0 <= beta_start && beta_start <= beta_end && beta_end <= 1.0) {
        return Err(DiffusionError::BadRange {
            start: beta_start,
            end: beta_end,
            steps,
        });
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<(), DiffusionError> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `z_t = sqrt(alpha_bar) z0 + sqrt(1 - alpha_bar) eps`, elementwise.
pub fn add_noise(z0: &Tensor, eps: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor, DiffusionError> {
    same_shape(z0, eps)?;
    let ab = s.alpha_bar(t)?;
    s.check(t)?;
    Ok(mix(z0, eps, ab))
}

/// The forward mix at an explicit `alpha_bar`.
pub(crate) fn mix(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Tensor {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + b * e).collect();
    Tensor::new_allow_empty(z0.shape().to_vec(), data).expect("shape preserved")
}

/// Mean squared error between predicted and true noise.
pub fn ldm_loss(eps_pred: &Tensor, eps: &Tensor) -> Result<f64, DiffusionError> {
    same_shape(eps_pred, eps)?;
    let total: f64 = eps_pred.data().iter().zip(eps.data()).map(|(p, e)| (p - e) * (p - e)).sum();
    Ok(total / eps.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let s = make_schedule(1, 0.0, 0.0).unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), 1.0);
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(2).unwrap() - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!(s.alpha_bar(3).is_err());
    }

    #[test]
    fn long_schedule_endpoint() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        // oracle: direct product of (1 - beta_i)
        let direct: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
        let end = s.alpha_bar(1000).unwrap();
        assert!((end - direct).abs() < 1e-15);
        assert!((end - 4.0e-5).abs() < 0.1 * 4.0e-5, "alpha_bar_T = {end}");
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn unit_beta_ends_at_zero_alpha_bar() {
        let s = make_schedule(3, 0.5, 1.0).unwrap();
        assert_eq!(s.alpha_bar(3).unwrap(), 0.0);
    }

    #[test]
    fn bad_ranges() {
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.5).is_err());
        assert!(make_schedule(10, -0.1, 0.1).is_err());
        assert!(make_schedule(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn noise_endpoints() {
        let z0 = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 - 0.5);
        let eps = Tensor::from_fn(&[2, 3], |i| (i as f64).sin());
        assert_eq!(mix(&z0, &eps, 1.0), z0);
        assert_eq!(mix(&z0, &eps, 0.0), eps);
        let s = make_schedule(1, 0.0, 0.0).unwrap();
        assert_eq!(add_noise(&z0, &eps, 1, &s).unwrap(), z0);
        assert!(add_noise(&z0, &Tensor::zeros(&[3, 2]), 1, &s).is_err());
        assert!(add_noise(&z0, &eps, 2, &s).is_err());
    }

    #[test]
    fn loss_examples() {
        let e = Tensor::from_fn(&[3, 4], |i| (i as f64 * 1.7).cos());
        assert_eq!(ldm_loss(&e, &e).unwrap(), 0.0);
        let shifted = e.map(|v| v + 1.0);
        assert!((ldm_loss(&shifted, &e).unwrap() - 1.0).abs() < 1e-12);
        assert!(ldm_loss(&e, &Tensor::zeros(&[4, 3])).is_err());
    }
}
