//! DDPM forward process and noise-prediction loss.

use super::{KernelError, LossOutput, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// `steps` variances spaced linearly from `beta_1` to `beta_t`.
    pub fn linear(steps: usize, beta_1: f64, beta_t: f64) -> Self {
        let betas: Vec<f64> = (0..steps)
            .map(|i| if steps == 1 { beta_1 } else { beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64 })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self { betas, alpha_bars }
    }

    /// The usual 1000-step schedule from 1e-4 to 0.02.
    pub fn standard() -> Self {
        Self::linear(1000, 1e-4, 0.02)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// `x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε`.
pub fn ddpm_noise(x0: &Tensor, t: usize, schedule: &DiffusionSchedule, eps: &Tensor) -> Result<Tensor, KernelError> {
    if t == 0 || t > schedule.steps() {
        return Err(KernelError::StepOutOfRange { t, steps: schedule.steps() });
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Squared L2 norm of `ε_pred − ε` per sample, averaged over the batch.
pub fn diffusion_loss(eps: &Tensor, eps_pred: &Tensor) -> Result<LossOutput, KernelError> {
    eps.expect_dims(eps_pred.dims(), "diffusion_loss prediction")?;
    let n = eps.n() as f64;
    let value = eps.data().iter().zip(eps_pred.data()).map(|(e, p)| (p - e) * (p - e)).sum::<f64>() / n;
    let grad = eps_pred.zip_map(eps, |p, e| 2.0 * (p - e) / n)?;
    Ok(LossOutput { value, grad })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_alpha_bar() {
        let s = DiffusionSchedule::standard();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn step_range() {
        let s = DiffusionSchedule::linear(10, 1e-4, 0.02);
        let x = Tensor::zeros([1, 1, 1, 1]);
        assert!(matches!(ddpm_noise(&x, 0, &s, &x), Err(KernelError::StepOutOfRange { t: 0, steps: 10 })));
        assert!(ddpm_noise(&x, 11, &s, &x).is_err());
    }

    #[test]
    fn all_ones_prediction() {
        let e = Tensor::zeros([1, 2, 2, 2]);
        let p = Tensor::full([1, 2, 2, 2], 1.0);
        assert_eq!(diffusion_loss(&e, &p).unwrap().value, 8.0);
    }
}
