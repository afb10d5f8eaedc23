use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, check_temp, TransitionOperator};
use crate::diffnet::{log_sigmoid, sigmoid, Activation, ParamNet};
use crate::error::{check_dim, Result, WalkbackError};

/// Factorized Bernoulli step with probabilities
/// `sigmoid(((1 - alpha) s + alpha F_rho(s)) / T)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BernoulliOperator {
    pub alpha: f64,
    pub rho_net: ParamNet,
}

impl BernoulliOperator {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        hidden: &[usize],
        activation: Activation,
        alpha: f64,
        affine_steps: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let net = ParamNet::mlp(dim, hidden, dim, activation, Activation::Identity, affine_steps, rng)?;
        Self::from_net(alpha, net)
    }

    pub fn from_net(alpha: f64, rho_net: ParamNet) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(WalkbackError::Config(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        check_dim(rho_net.input_width(), rho_net.output_width(), "bernoulli net output")?;
        Ok(BernoulliOperator { alpha, rho_net })
    }

    /// Temperature-scaled logits.
    pub fn logits(&self, state: &[f64], temp: f64, step: usize) -> Result<Vec<f64>> {
        check_temp(temp)?;
        check_dim(self.dim(), state.len(), "bernoulli state")?;
        let f = self.rho_net.eval(state, Some(step))?;
        check_finite(&f, "F_rho output")?;
        Ok(state
            .iter()
            .zip(&f)
            .map(|(s, f)| ((1.0 - self.alpha) * s + self.alpha * f) / temp)
            .collect())
    }

    pub fn probabilities(&self, state: &[f64], temp: f64, step: usize) -> Result<Vec<f64>> {
        Ok(self.logits(state, temp, step)?.into_iter().map(sigmoid).collect())
    }
}

fn check_binary(to: &[f64]) -> Result<()> {
    if to.iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(WalkbackError::Domain("bernoulli states must be in {0, 1}".into()))
    }
}

/// Thresholds real values at 0.5; logs when any value was not already binary.
pub fn binarize(points: &mut [Vec<f64>]) {
    let mut changed = 0usize;
    for p in points.iter_mut() {
        for v in p.iter_mut() {
            if *v != 0.0 && *v != 1.0 {
                changed += 1;
            }
            *v = if *v >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    if changed > 0 {
        warn!("thresholded {changed} non-binary values at 0.5 for the bernoulli operator");
    }
}

impl TransitionOperator for BernoulliOperator {
    fn dim(&self) -> usize {
        self.rho_net.input_width()
    }

    fn sample_step<R: Rng + ?Sized>(&self, state: &[f64], temp: f64, step: usize, rng: &mut R) -> Result<Vec<f64>> {
        let probs = self.probabilities(state, temp, step)?;
        Ok(probs
            .into_iter()
            .map(|p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
            .collect())
    }

    fn log_density(&self, from: &[f64], to: &[f64], temp: f64, step: usize) -> Result<f64> {
        check_dim(self.dim(), to.len(), "bernoulli target state")?;
        check_binary(to)?;
        let z = self.logits(from, temp, step)?;
        Ok(z.iter()
            .zip(to)
            .map(|(&z, &x)| if x == 1.0 { log_sigmoid(z) } else { log_sigmoid(-z) })
            .sum())
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
        check_dim(self.dim(), from.len(), "bernoulli state")?;
        check_dim(self.dim(), to.len(), "bernoulli target state")?;
        check_binary(to)?;
        let (f, tape) = self.rho_net.forward(from, Some(step))?;
        check_finite(&f, "F_rho output")?;
        let mut logp = 0.0;
        let mut grad = vec![0.0; f.len()];
        for i in 0..f.len() {
            let z = ((1.0 - self.alpha) * from[i] + self.alpha * f[i]) / temp;
            logp += if to[i] == 1.0 { log_sigmoid(z) } else { log_sigmoid(-z) };
            // d logp / dz = x - sigmoid(z), dz / dF = alpha / T
            grad[i] = scale * (to[i] - sigmoid(z)) * self.alpha / temp;
        }
        self.rho_net.backward(tape, &grad)?;
        Ok(logp)
    }

    fn nets(&self) -> Vec<&ParamNet> {
        vec![&self.rho_net]
    }

    fn nets_mut(&mut self) -> Vec<&mut ParamNet> {
        vec![&mut self.rho_net]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::testutil::{fd_log_density_grad, grads_agree};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn operator(seed: u64, dim: usize) -> BernoulliOperator {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BernoulliOperator::new(dim, &[8], Activation::Tanh, 0.7, Some(2), &mut rng).unwrap()
    }

    /// alpha = 1 with a zeroed net gives logits identically 0.
    fn zero_logit_operator(dim: usize) -> BernoulliOperator {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = ParamNet::mlp(
            dim,
            &[],
            dim,
            Activation::Identity,
            Activation::Identity,
            None,
            &mut rng,
        )
        .unwrap();
        let zeros = vec![0.0; net.param_count()];
        net.set_params(&zeros).unwrap();
        BernoulliOperator::from_net(1.0, net).unwrap()
    }

    #[test]
    fn zero_logits_are_fair_coins() {
        let op = zero_logit_operator(3);
        for t in [0.5, 1.0, 10.0] {
            assert_eq!(op.probabilities(&[1.0, 0.0, 1.0], t, 0).unwrap(), vec![0.5; 3]);
        }
        let lp = zero_logit_operator(2)
            .log_density(&[0.0, 1.0], &[1.0, 1.0], 1.0, 0)
            .unwrap();
        assert!((lp - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn normalizes_over_all_outcomes() {
        let op = operator(1, 10);
        let from: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        let mut total = 0.0;
        for code in 0u32..1024 {
            let to: Vec<f64> = (0..10).map(|b| ((code >> b) & 1) as f64).collect();
            total += op.log_density(&from, &to, 1.5, 1).unwrap().exp();
        }
        assert!((total - 1.0).abs() < 1e-12, "total = {total}");
    }

    #[test]
    fn heating_pushes_probabilities_to_half() {
        let op = operator(2, 4);
        let s = [1.0, 0.0, 0.0, 1.0];
        let mut prev = op.probabilities(&s, 0.5, 0).unwrap();
        for t in [1.0, 2.0, 8.0, 64.0, 1e6] {
            let p = op.probabilities(&s, t, 0).unwrap();
            for (a, b) in p.iter().zip(&prev) {
                assert!((a - 0.5).abs() <= (b - 0.5).abs());
                assert!(*a > 0.0 && *a < 1.0);
            }
            prev = p;
        }
        assert!(prev.iter().all(|p| (p - 0.5).abs() < 1e-5));
    }

    #[test]
    fn non_binary_target_is_a_domain_error() {
        let op = operator(3, 2);
        assert!(matches!(
            op.log_density(&[0.0, 1.0], &[0.5, 1.0], 1.0, 0),
            Err(WalkbackError::Domain(_))
        ));
    }

    #[test]
    fn binarize_thresholds_at_half() {
        let mut pts = vec![vec![0.2, 0.5, 0.9, 1.0]];
        binarize(&mut pts);
        assert_eq!(pts[0], vec![0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut op = operator(4, 3);
        let from = [1.0, 0.0, 1.0];
        let to = [0.0, 0.0, 1.0];
        for (t, step) in [(1.0, 0), (3.0, 1)] {
            let g = op.log_density_grad(&from, &to, t, step).unwrap();
            let fd = fd_log_density_grad(&mut op, &from, &to, t, step, 1e-5);
            grads_agree(&g, &fd, 1e-5).unwrap();
        }
    }

    #[test]
    fn samples_are_binary() {
        let op = operator(5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = vec![0.0; 6];
        for _ in 0..20 {
            s = op.sample_step(&s, 2.0, 0, &mut rng).unwrap();
            assert!(s.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
