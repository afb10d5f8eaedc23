//! Directly parameterized transition operators `p_T(s' | s)`.
//!
//! An operator can sample the next state, evaluate the exact conditional
//! log-density of any transition, and accumulate the gradient of that
//! log-density into the gradient buffers of its networks. The same operator
//! serves as the heating process `q` and the cooling process `p`.

mod bernoulli;
mod discrete;
mod gaussian;
mod prior;

pub use bernoulli::{binarize, BernoulliOperator};
pub use discrete::{DiscreteOperator, PROB_FLOOR};
pub use gaussian::{GaussianConfig, GaussianOperator};
pub use prior::{BernoulliPrior, CategoricalPrior, Prior, PriorMoments};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::ParamNet;
use crate::error::{check_dim, Result, WalkbackError};

pub trait TransitionOperator {
    fn dim(&self) -> usize;

    fn sample_step<R: Rng + ?Sized>(&self, state: &[f64], temp: f64, step: usize, rng: &mut R) -> Result<Vec<f64>>;

    /// `log p_T(to | from)`.
    fn log_density(&self, from: &[f64], to: &[f64], temp: f64, step: usize) -> Result<f64>;

    /// Adds `scale * d/dtheta log p_T(to | from)` to the gradient buffers and
    /// returns the log-density.
    fn accumulate_log_density_grad(
        &mut self,
        from: &[f64],
        to: &[f64],
        temp: f64,
        step: usize,
        scale: f64,
    ) -> Result<f64>;

    fn nets(&self) -> Vec<&ParamNet>;

    fn nets_mut(&mut self) -> Vec<&mut ParamNet>;

    fn param_count(&self) -> usize {
        self.nets().iter().map(|n| n.param_count()).sum()
    }

    /// All parameters, concatenated in `nets()` order.
    fn params_flat(&self) -> Vec<f64> {
        self.nets().iter().flat_map(|n| n.params().iter().copied()).collect()
    }

    fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        check_dim(self.param_count(), values.len(), "operator parameters")?;
        let mut offset = 0;
        for net in self.nets_mut() {
            let len = net.param_count();
            net.set_params(&values[offset..offset + len])?;
            offset += len;
        }
        Ok(())
    }

    fn grads_flat(&self) -> Vec<f64> {
        self.nets().iter().flat_map(|n| n.grads().iter().copied()).collect()
    }

    fn zero_grad(&mut self) {
        for net in self.nets_mut() {
            net.zero_grad();
        }
    }

    /// Gradient of `log p_T(to | from)` w.r.t. every parameter. Clears the
    /// gradient buffers before and after.
    fn log_density_grad(&mut self, from: &[f64], to: &[f64], temp: f64, step: usize) -> Result<Vec<f64>> {
        self.zero_grad();
        self.accumulate_log_density_grad(from, to, temp, step, 1.0)?;
        let g = self.grads_flat();
        self.zero_grad();
        Ok(g)
    }
}

pub(crate) fn check_temp(temp: f64) -> Result<()> {
    if temp > 0.0 && temp.is_finite() {
        Ok(())
    } else {
        Err(WalkbackError::Config(format!(
            "temperature must be positive and finite, got {temp}"
        )))
    }
}

pub(crate) fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(WalkbackError::Operator(format!("non-finite {what}")))
    }
}

/// Any of the operator kinds, for checkpoints and the CLI.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Operator {
    Gaussian(GaussianOperator),
    Bernoulli(BernoulliOperator),
    Discrete(DiscreteOperator),
}

macro_rules! delegate {
    ($self:ident, $op:ident => $body:expr) => {
        match $self {
            Operator::Gaussian($op) => $body,
            Operator::Bernoulli($op) => $body,
            Operator::Discrete($op) => $body,
        }
    };
}

impl TransitionOperator for Operator {
    fn dim(&self) -> usize {
        delegate!(self, op => op.dim())
    }

    fn sample_step<R: Rng + ?Sized>(&self, state: &[f64], temp: f64, step: usize, rng: &mut R) -> Result<Vec<f64>> {
        delegate!(self, op => op.sample_step(state, temp, step, rng))
    }

    fn log_density(&self, from: &[f64], to: &[f64], temp: f64, step: usize) -> Result<f64> {
        delegate!(self, op => op.log_density(from, to, temp, step))
    }

    fn accumulate_log_density_grad(
        &mut self,
        from: &[f64],
        to: &[f64],
        temp: f64,
        step: usize,
        scale: f64,
    ) -> Result<f64> {
        delegate!(self, op => op.accumulate_log_density_grad(from, to, temp, step, scale))
    }

    fn nets(&self) -> Vec<&ParamNet> {
        delegate!(self, op => op.nets())
    }

    fn nets_mut(&mut self) -> Vec<&mut ParamNet> {
        delegate!(self, op => op.nets_mut())
    }
}

impl From<GaussianOperator> for Operator {
    fn from(op: GaussianOperator) -> Self {
        Operator::Gaussian(op)
    }
}

impl From<BernoulliOperator> for Operator {
    fn from(op: BernoulliOperator) -> Self {
        Operator::Bernoulli(op)
    }
}

impl From<DiscreteOperator> for Operator {
    fn from(op: DiscreteOperator) -> Self {
        Operator::Discrete(op)
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::TransitionOperator;

    /// Central finite differences of `log p_T(to | from)` over every parameter.
    pub fn fd_log_density_grad<O: TransitionOperator>(
        op: &mut O,
        from: &[f64],
        to: &[f64],
        temp: f64,
        step: usize,
        h: f64,
    ) -> Vec<f64> {
        let base = op.params_flat();
        let mut out = Vec::with_capacity(base.len());
        let mut work = base.clone();
        for i in 0..base.len() {
            work[i] = base[i] + h;
            op.set_params_flat(&work).unwrap();
            let up = op.log_density(from, to, temp, step).unwrap();
            work[i] = base[i] - h;
            op.set_params_flat(&work).unwrap();
            let down = op.log_density(from, to, temp, step).unwrap();
            work[i] = base[i];
            out.push((up - down) / (2.0 * h));
        }
        op.set_params_flat(&base).unwrap();
        out
    }

    /// Relative agreement with an absolute floor for near-zero components.
    pub fn grads_agree(analytic: &[f64], numeric: &[f64], rel: f64) -> Result<(), String> {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let scale = a.abs().max(n.abs()).max(1.0);
            if (a - n).abs() > rel * scale {
                return Err(format!("parameter {i}: analytic {a} vs numeric {n}"));
            }
        }
        Ok(())
    }
}
