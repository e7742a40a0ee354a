//! Noise-schedule tables and the forward diffusion process.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-timestep tables for a linear beta schedule. Timesteps are 1-based at
/// the API surface and 0-based in the table storage.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

pub fn build_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let mut beta = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let frac = if t_max == 1 {
            0.0
        } else {
            t as f64 / (t_max - 1) as f64
        };
        beta.push(beta_start + frac * (beta_end - beta_start));
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let sigma = beta.iter().map(|b| b.sqrt()).collect();
    Ok(NoiseSchedule {
        t_max,
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

impl NoiseSchedule {
    fn check_t(&self, t: usize) -> Result<usize> {
        if t < 1 || t > self.t_max {
            return Err(Error::TimestepOutOfRange {
                t,
                t_max: self.t_max,
            });
        }
        Ok(t - 1)
    }

    pub fn beta_at(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check_t(t)?])
    }

    pub fn alpha_at(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.check_t(t)?])
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check_t(t)?])
    }

    pub fn sigma_at(&self, t: usize) -> Result<f64> {
        Ok(self.sigma[self.check_t(t)?])
    }

    /// Closed-form jump to level `t`: sqrt(abar_t) z0 + sqrt(1-abar_t) eps.
    pub fn forward_diffuse(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        let abar = self.alpha_bar_at(t)?;
        if z0.shape() != eps.shape() {
            return Err(Error::ShapeMismatch(format!(
                "z0 {:?} vs eps {:?}",
                z0.shape(),
                eps.shape()
            )));
        }
        z0.scale(abar.sqrt()).add(&eps.scale((1.0 - abar).sqrt()))
    }

    /// Single Markov step: sqrt(1-beta_t) z_{t-1} + sqrt(beta_t) eps.
    pub fn forward_step(&self, z_prev: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        let beta = self.beta_at(t)?;
        if z_prev.shape() != eps.shape() {
            return Err(Error::ShapeMismatch(format!(
                "z_prev {:?} vs eps {:?}",
                z_prev.shape(),
                eps.shape()
            )));
        }
        z_prev
            .scale((1.0 - beta).sqrt())
            .add(&eps.scale(beta.sqrt()))
    }
}
