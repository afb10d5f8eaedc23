use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_finite, check_temp, TransitionOperator};
use crate::diffnet::{sigmoid, softplus, Activation, ParamNet};
use crate::error::{check_dim, Result, WalkbackError};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianConfig {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub alpha: f64,
    pub sigma_floor: f64,
    /// Noise variance `sigma^2` at temperature 1; sets the initial scale.
    pub base_variance: f64,
    /// Number of per-step affine entries, `None` to disable.
    pub affine_steps: Option<usize>,
}

impl Default for GaussianConfig {
    fn default() -> Self {
        GaussianConfig {
            dim: 2,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            alpha: 0.5,
            sigma_floor: 1e-4,
            base_variance: 1.0,
            affine_steps: None,
        }
    }
}

/// Diagonal Gaussian step: mean `(1 - alpha) s + alpha F_mu(s)`, standard
/// deviation `sqrt(T) softplus(F_sigma(s))` floored at `sigma_floor`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianOperator {
    pub alpha: f64,
    pub mu_net: ParamNet,
    pub sigma_net: ParamNet,
    pub sigma_floor: f64,
    pub base_variance: f64,
}

/// Conditional moments of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Raw `F_sigma` outputs.
    pub sigma_logits: Vec<f64>,
}

impl GaussianOperator {
    pub fn new<R: Rng + ?Sized>(config: &GaussianConfig, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.alpha) {
            return Err(WalkbackError::Config(format!(
                "alpha must lie in [0, 1], got {}",
                config.alpha
            )));
        }
        if !(config.base_variance > 0.0) {
            return Err(WalkbackError::Config("base variance must be positive".into()));
        }
        let d = config.dim;
        let mu_net = ParamNet::mlp(
            d,
            &config.hidden,
            d,
            config.activation,
            Activation::Identity,
            config.affine_steps,
            rng,
        )?;
        let mut sigma_net = ParamNet::mlp(
            d,
            &config.hidden,
            d,
            config.activation,
            Activation::Identity,
            config.affine_steps,
            rng,
        )?;
        // start near softplus(b) = sqrt(base_variance)
        let target = config.base_variance.sqrt();
        let bias = inverse_softplus(target);
        sigma_net.output_bias_mut().fill(bias);
        Self::from_nets(
            config.alpha,
            mu_net,
            sigma_net,
            config.sigma_floor,
            config.base_variance,
        )
    }

    pub fn from_nets(
        alpha: f64,
        mu_net: ParamNet,
        sigma_net: ParamNet,
        sigma_floor: f64,
        base_variance: f64,
    ) -> Result<Self> {
        let d = mu_net.input_width();
        for net in [&mu_net, &sigma_net] {
            check_dim(d, net.input_width(), "gaussian operator net input")?;
            check_dim(d, net.output_width(), "gaussian operator net output")?;
        }
        if !(sigma_floor > 0.0) {
            return Err(WalkbackError::Config("sigma floor must be positive".into()));
        }
        Ok(GaussianOperator {
            alpha,
            mu_net,
            sigma_net,
            sigma_floor,
            base_variance,
        })
    }

    pub fn moments(&self, state: &[f64], temp: f64, step: usize) -> Result<GaussianMoments> {
        check_temp(temp)?;
        check_dim(self.dim(), state.len(), "gaussian state")?;
        let f_mu = self.mu_net.eval(state, Some(step))?;
        let f_sigma = self.sigma_net.eval(state, Some(step))?;
        check_finite(&f_mu, "F_mu output")?;
        check_finite(&f_sigma, "F_sigma output")?;
        let scale = temp.sqrt();
        let mean = state
            .iter()
            .zip(&f_mu)
            .map(|(s, f)| (1.0 - self.alpha) * s + self.alpha * f)
            .collect();
        let std = f_sigma
            .iter()
            .map(|&f| (scale * softplus(f)).max(self.sigma_floor))
            .collect();
        Ok(GaussianMoments {
            mean,
            std,
            sigma_logits: f_sigma,
        })
    }
}

fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn normal_log_density(x: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(std)
        .map(|((x, m), s)| {
            let z = (x - m) / s;
            -0.5 * LN_2PI - s.ln() - 0.5 * z * z
        })
        .sum()
}

impl TransitionOperator for GaussianOperator {
    fn dim(&self) -> usize {
        self.mu_net.input_width()
    }

    fn sample_step<R: Rng + ?Sized>(&self, state: &[f64], temp: f64, step: usize, rng: &mut R) -> Result<Vec<f64>> {
        let m = self.moments(state, temp, step)?;
        let next: Vec<f64> = m
            .mean
            .iter()
            .zip(&m.std)
            .map(|(mu, sd)| {
                let z: f64 = rng.sample(StandardNormal);
                mu + sd * z
            })
            .collect();
        check_finite(&next, "sampled state")?;
        Ok(next)
    }

    fn log_density(&self, from: &[f64], to: &[f64], temp: f64, step: usize) -> Result<f64> {
        check_dim(self.dim(), to.len(), "gaussian target state")?;
        let m = self.moments(from, temp, step)?;
        Ok(normal_log_density(to, &m.mean, &m.std))
    }

    fn accumulate_log_density_grad(
        &mut self,
        from: &[f64],
        to: &[f64],
        temp: f64,
        step: usize,
        scale: f64,
    ) -> Result<f64> {
        check_temp(temp)?;
        check_dim(self.dim(), from.len(), "gaussian state")?;
        check_dim(self.dim(), to.len(), "gaussian target state")?;
        let (f_mu, mu_tape) = self.mu_net.forward(from, Some(step))?;
        let (f_sigma, sigma_tape) = self.sigma_net.forward(from, Some(step))?;
        check_finite(&f_mu, "F_mu output")?;
        check_finite(&f_sigma, "F_sigma output")?;
        let root_t = temp.sqrt();
        let d = self.dim();
        let mut g_mu = vec![0.0; d];
        let mut g_sigma = vec![0.0; d];
        let mut logp = 0.0;
        for i in 0..d {
            let mean = (1.0 - self.alpha) * from[i] + self.alpha * f_mu[i];
            let raw = root_t * softplus(f_sigma[i]);
            let clamped = raw < self.sigma_floor;
            let sd = if clamped { self.sigma_floor } else { raw };
            let r = to[i] - mean;
            logp += -0.5 * LN_2PI - sd.ln() - 0.5 * (r / sd).powi(2);
            // d logp / d mean = r / sd^2, d mean / d F_mu = alpha
            g_mu[i] = scale * self.alpha * r / (sd * sd);
            if !clamped {
                // d logp / d sd = -1/sd + r^2/sd^3, d sd / d F_sigma = sqrt(T) sigmoid(F_sigma)
                let d_sd = -1.0 / sd + r * r / (sd * sd * sd);
                g_sigma[i] = scale * d_sd * root_t * sigmoid(f_sigma[i]);
            }
        }
        self.mu_net.backward(mu_tape, &g_mu)?;
        self.sigma_net.backward(sigma_tape, &g_sigma)?;
        Ok(logp)
    }

    fn nets(&self) -> Vec<&ParamNet> {
        vec![&self.mu_net, &self.sigma_net]
    }

    fn nets_mut(&mut self) -> Vec<&mut ParamNet> {
        vec![&mut self.mu_net, &mut self.sigma_net]
    }
}
