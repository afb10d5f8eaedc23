use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::discrete::PROB_FLOOR;
use crate::error::{check_dim, Result, WalkbackError};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const VARIANCE_FLOOR: f64 = 1e-8;

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rate) {
        Ok(())
    } else {
        Err(WalkbackError::Config(format!(
            "update rate must lie in [0, 1], got {rate}"
        )))
    }
}

fn check_batch(batch: &[Vec<f64>], dim: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(WalkbackError::Usage("prior update needs a non-empty batch".into()));
    }
    for p in batch {
        check_dim(dim, p.len(), "terminal state")?;
    }
    Ok(())
}

/// Diagonal Gaussian prior `p*(s_K)` tracked by exponential moving averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorMoments {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub update_rate: f64,
}

impl PriorMoments {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>, update_rate: f64) -> Result<Self> {
        check_dim(mean.len(), variance.len(), "prior variance")?;
        check_rate(update_rate)?;
        if variance.iter().any(|&v| !(v > 0.0)) {
            return Err(WalkbackError::Config("prior variance must be positive".into()));
        }
        Ok(PriorMoments {
            mean,
            variance,
            update_rate,
        })
    }

    /// Moments of a batch of points (population variance, floored).
    pub fn from_points(points: &[Vec<f64>], update_rate: f64) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        check_batch(points, dim)?;
        let (mean, var) = batch_moments(points, dim);
        Self::new(mean, var, update_rate)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.variance)
            .map(|(m, v)| {
                let z: f64 = rng.sample(StandardNormal);
                m + v.sqrt() * z
            })
            .collect()
    }

    pub fn log_density(&self, state: &[f64]) -> Result<f64> {
        check_dim(self.dim(), state.len(), "prior state")?;
        Ok(state
            .iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .map(|((x, m), v)| -0.5 * (LN_2PI + v.ln() + (x - m).powi(2) / v))
            .sum())
    }

    /// Moves mean and variance toward the batch moments by `update_rate`.
    pub fn update(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        check_batch(batch, self.dim())?;
        let (bm, bv) = batch_moments(batch, self.dim());
        let r = self.update_rate;
        for i in 0..self.dim() {
            self.mean[i] = (1.0 - r) * self.mean[i] + r * bm[i];
            self.variance[i] = ((1.0 - r) * self.variance[i] + r * bv[i]).max(VARIANCE_FLOOR);
        }
        Ok(())
    }

    pub fn total_variance(&self) -> f64 {
        self.variance.iter().sum()
    }
}

fn batch_moments(batch: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = batch.len() as f64;
    let mut mean = vec![0.0; dim];
    for p in batch {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for p in batch {
        for i in 0..dim {
            var[i] += (p[i] - mean[i]).powi(2) / n;
        }
    }
    for v in &mut var {
        *v = v.max(VARIANCE_FLOOR);
    }
    (mean, var)
}

/// Categorical prior over the states of a discrete operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalPrior {
    pub probs: Vec<f64>,
    pub update_rate: f64,
}

impl CategoricalPrior {
    pub fn new(probs: Vec<f64>, update_rate: f64) -> Result<Self> {
        check_rate(update_rate)?;
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-10 {
            return Err(WalkbackError::Config("categorical prior must be a distribution".into()));
        }
        Ok(CategoricalPrior { probs, update_rate })
    }

    fn index(&self, state: &[f64]) -> Result<usize> {
        match state {
            [v] if v.fract() == 0.0 && *v >= 0.0 && (*v as usize) < self.probs.len() => Ok(*v as usize),
            _ => Err(WalkbackError::Domain(format!("invalid categorical state {state:?}"))),
        }
    }

    pub fn update(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        check_batch(batch, 1)?;
        let n = self.probs.len();
        let mut freq = vec![0.0; n];
        for s in batch {
            freq[self.index(s)?] += 1.0 / batch.len() as f64;
        }
        let r = self.update_rate;
        for (p, f) in self.probs.iter_mut().zip(&freq) {
            *p = ((1.0 - r) * *p + r * f).max(PROB_FLOOR);
        }
        let z: f64 = self.probs.iter().sum();
        self.probs.iter_mut().for_each(|p| *p /= z);
        Ok(())
    }
}

/// Factorized Bernoulli prior for binary states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BernoulliPrior {
    pub probs: Vec<f64>,
    pub update_rate: f64,
}

impl BernoulliPrior {
    pub fn new(probs: Vec<f64>, update_rate: f64) -> Result<Self> {
        check_rate(update_rate)?;
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(WalkbackError::Config(
                "bernoulli prior probabilities must lie in [0, 1]".into(),
            ));
        }
        Ok(BernoulliPrior { probs, update_rate })
    }

    pub fn update(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        check_batch(batch, self.probs.len())?;
        let (mean, _) = batch_moments(batch, self.probs.len());
        let r = self.update_rate;
        for (p, m) in self.probs.iter_mut().zip(&mean) {
            *p = ((1.0 - r) * *p + r * m).clamp(1e-6, 1.0 - 1e-6);
        }
        Ok(())
    }
}

/// Terminal distribution `p*(s_K)` of the cooling process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Prior {
    Gaussian(PriorMoments),
    Categorical(CategoricalPrior),
    Bernoulli(BernoulliPrior),
}

impl Prior {
    pub fn dim(&self) -> usize {
        match self {
            Prior::Gaussian(p) => p.dim(),
            Prior::Categorical(_) => 1,
            Prior::Bernoulli(p) => p.probs.len(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Prior::Gaussian(p) => p.sample(rng),
            Prior::Categorical(p) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, q) in p.probs.iter().enumerate() {
                    acc += q;
                    if u < acc {
                        return vec![i as f64];
                    }
                }
                vec![(p.probs.len() - 1) as f64]
            }
            Prior::Bernoulli(p) => p
                .probs
                .iter()
                .map(|&q| if rng.random::<f64>() < q { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn log_density(&self, state: &[f64]) -> Result<f64> {
        match self {
            Prior::Gaussian(p) => p.log_density(state),
            Prior::Categorical(p) => Ok(p.probs[p.index(state)?].max(PROB_FLOOR).ln()),
            Prior::Bernoulli(p) => {
                check_dim(p.probs.len(), state.len(), "prior state")?;
                state
                    .iter()
                    .zip(&p.probs)
                    .map(|(&x, &q)| match x {
                        1.0 => Ok(q.max(PROB_FLOOR).ln()),
                        0.0 => Ok((1.0 - q).max(PROB_FLOOR).ln()),
                        _ => Err(WalkbackError::Domain("bernoulli prior state must be binary".into())),
                    })
                    .sum()
            }
        }
    }

    pub fn update(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        match self {
            Prior::Gaussian(p) => p.update(batch),
            Prior::Categorical(p) => p.update(batch),
            Prior::Bernoulli(p) => p.update(batch),
        }
    }
}
