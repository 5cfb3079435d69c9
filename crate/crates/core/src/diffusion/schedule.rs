//! Noise schedule and the closed-form forward process.

use crate::tensor::Arr;
use crate::{Error, Result};

/// Fixed variance schedule: strictly increasing betas in (0,1) with the
/// derived cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f32>,
    pub alpha_bar: Vec<f32>,
}

impl NoiseSchedule {
    /// Linear beta ramp over `timesteps` steps.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::Precondition("schedule needs at least 2 timesteps".into()));
        }
        let mut betas = Vec::with_capacity(timesteps);
        let mut alpha_bar = Vec::with_capacity(timesteps);
        let mut prod = 1.0f64;
        for t in 0..timesteps {
            let beta = beta_start + (beta_end - beta_start) * t as f64 / (timesteps - 1) as f64;
            prod *= 1.0 - beta;
            betas.push(beta as f32);
            alpha_bar.push(prod as f32);
        }
        let s = NoiseSchedule { betas, alpha_bar };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &b) in self.betas.iter().enumerate() {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::Precondition(format!("beta[{i}] = {b} outside (0,1)")));
            }
            if i > 0 && b <= self.betas[i - 1] {
                return Err(Error::Precondition(format!("betas not strictly increasing at {i}")));
            }
            if i > 0 && self.alpha_bar[i] >= self.alpha_bar[i - 1] {
                return Err(Error::Precondition(format!("alpha_bar not strictly decreasing at {i}")));
            }
        }
        let expect = 1.0 - self.betas[0];
        if (self.alpha_bar[0] - expect).abs() > 1e-4 {
            return Err(Error::Precondition(format!(
                "alpha_bar[0] = {} should be within 1e-4 of 1 - beta_0 = {expect}",
                self.alpha_bar[0]
            )));
        }
        Ok(())
    }
}

/// Closed-form forward process at a given cumulative signal level:
/// `z_t = sqrt(ab) * z0 + sqrt(1 - ab) * eps`. Exposed separately so the
/// limiting cases ab = 1 (identity) and ab = 0 (pure noise) stay testable.
pub fn q_sample_with_alpha_bar(z0: &Arr, alpha_bar: f32, eps: &Arr) -> Result<Arr> {
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!(
            "z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    let sa = alpha_bar.max(0.0).sqrt();
    let sn = (1.0 - alpha_bar).max(0.0).sqrt();
    let mut out = z0.mapv(|v| v * sa);
    out.zip_mut_with(eps, |o, e| *o += sn * e);
    Ok(out)
}

/// Forward-noise an input to timestep `t` of the schedule.
pub fn forward_noise(z0: &Arr, t: usize, eps: &Arr, schedule: &NoiseSchedule) -> Result<Arr> {
    if t >= schedule.len() {
        return Err(Error::TimestepOutOfRange { t, max: schedule.len() });
    }
    q_sample_with_alpha_bar(z0, schedule.alpha_bar[t], eps)
}
