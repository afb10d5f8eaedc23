use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_temp, TransitionOperator};
use crate::diffnet::{Activation, LayerSpec, ParamNet};
use crate::error::{Result, WalkbackError};
use crate::oracle::{softmax_scaled, StochasticMatrix, TransitionFamily};

/// Probabilities below this are clamped inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Finite-state operator. The state vector holds a single entry: the state index.
///
/// `Fixed` wraps any oracle transition family unchanged. `Learned` holds a
/// trainable logit table `L` (a linear layer applied to the one-hot state) and
/// transitions with `P_T(j | i) = softmax_j(L[i][j] / T)`. `Energy` learns one
/// energy per state and moves by Metropolis at temperature `T` under a fixed
/// symmetric proposal, so `P_T` always satisfies detailed balance for
/// `exp(-E / T)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscreteOperator {
    Fixed(TransitionFamily),
    Learned { n: usize, net: ParamNet },
    Energy { net: ParamNet, proposal: StochasticMatrix },
}

impl DiscreteOperator {
    pub fn fixed(family: TransitionFamily) -> Self {
        DiscreteOperator::Fixed(family)
    }

    /// Learned logit table; `init_scale = 0` starts from uniform transitions.
    pub fn learned<R: Rng + ?Sized>(n: usize, init_scale: f64, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(WalkbackError::Config(
                "discrete operator needs at least one state".into(),
            ));
        }
        let mut net = ParamNet::new(
            &[LayerSpec {
                inputs: n,
                outputs: n,
                activation: Activation::Identity,
            }],
            None,
            rng,
        )?;
        let scaled: Vec<f64> = net.params().iter().map(|p| p * init_scale).collect();
        net.set_params(&scaled)?;
        Ok(DiscreteOperator::Learned { n, net })
    }

    /// Learned energies with a uniform proposal over the other states.
    pub fn energy<R: Rng + ?Sized>(n: usize, init_scale: f64, rng: &mut R) -> Result<Self> {
        if n < 2 {
            return Err(WalkbackError::Config(
                "energy operator needs at least two states".into(),
            ));
        }
        let off = 1.0 / n as f64;
        let rows = vec![vec![off; n]; n];
        Self::energy_with_proposal(StochasticMatrix::new(rows)?, init_scale, rng)
    }

    pub fn energy_with_proposal<R: Rng + ?Sized>(
        proposal: StochasticMatrix,
        init_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n = proposal.n();
        for i in 0..n {
            for j in 0..i {
                if (proposal.get(i, j) - proposal.get(j, i)).abs() > 1e-12 {
                    return Err(WalkbackError::Config("Metropolis proposal must be symmetric".into()));
                }
            }
        }
        let mut net = ParamNet::new(
            &[LayerSpec {
                inputs: n,
                outputs: 1,
                activation: Activation::Identity,
            }],
            None,
            rng,
        )?;
        let scaled: Vec<f64> = net.params().iter().map(|p| p * init_scale).collect();
        net.set_params(&scaled)?;
        Ok(DiscreteOperator::Energy { net, proposal })
    }

    pub fn n_states(&self) -> usize {
        match self {
            DiscreteOperator::Fixed(f) => f.n_states(),
            DiscreteOperator::Learned { n, .. } => *n,
            DiscreteOperator::Energy { proposal, .. } => proposal.n(),
        }
    }

    /// Per-state energies of an `Energy` operator.
    pub fn energies(&self) -> Option<Vec<f64>> {
        match self {
            DiscreteOperator::Energy { net, proposal } => Some(
                (0..proposal.n())
                    .map(|i| net.eval(&one_hot(proposal.n(), i), None).expect("width checked")[0])
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Transition family equivalent to the current parameters.
    pub fn family(&self) -> TransitionFamily {
        match self {
            DiscreteOperator::Fixed(f) => f.clone(),
            DiscreteOperator::Learned { n, .. } => {
                let logits = (0..*n).flat_map(|i| self.logit_row(i)).collect();
                TransitionFamily::SoftmaxLogits { n: *n, logits }
            }
            DiscreteOperator::Energy { proposal, .. } => TransitionFamily::Metropolis {
                energies: self.energies().expect("energy operator"),
                proposal: proposal.clone(),
            },
        }
    }

    pub fn matrix(&self, temp: f64) -> Result<StochasticMatrix> {
        self.family().matrix(temp)
    }

    fn logit_row(&self, from: usize) -> Vec<f64> {
        match self {
            DiscreteOperator::Learned { n, net } => net.eval(&one_hot(*n, from), None).expect("width checked"),
            _ => unreachable!("only the logit table has logits"),
        }
    }

    fn row(&self, from: usize, temp: f64) -> Result<Vec<f64>> {
        match self {
            DiscreteOperator::Fixed(f) => Ok(f.matrix(temp)?.row(from).to_vec()),
            DiscreteOperator::Learned { .. } => Ok(softmax_scaled(&self.logit_row(from), temp)),
            DiscreteOperator::Energy { proposal, .. } => Ok(metropolis_row(
                &self.energies().expect("energy operator"),
                proposal,
                from,
                temp,
            )),
        }
    }

    pub fn state_index(&self, state: &[f64]) -> Result<usize> {
        let n = self.n_states();
        match state {
            [v] if v.fract() == 0.0 && *v >= 0.0 && (*v as usize) < n => Ok(*v as usize),
            _ => Err(WalkbackError::Domain(format!(
                "discrete state must be a single index in 0..{n}, got {state:?}"
            ))),
        }
    }
}

fn metropolis_row(energies: &[f64], proposal: &StochasticMatrix, from: usize, temp: f64) -> Vec<f64> {
    let mut row = vec![0.0; energies.len()];
    let mut stay = 1.0;
    for (j, e) in energies.iter().enumerate().filter(|&(j, _)| j != from) {
        row[j] = proposal.get(from, j) * (-(e - energies[from]) / temp).exp().min(1.0);
        stay -= row[j];
    }
    row[from] = stay.max(0.0);
    row
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

impl TransitionOperator for DiscreteOperator {
    fn dim(&self) -> usize {
        1
    }

    fn sample_step<R: Rng + ?Sized>(&self, state: &[f64], temp: f64, _step: usize, rng: &mut R) -> Result<Vec<f64>> {
        check_temp(temp)?;
        let from = self.state_index(state)?;
        let row = self.row(from, temp)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return Ok(vec![j as f64]);
            }
        }
        // rounding left u above the cumulative sum; take the last state with mass
        let last = row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1);
        Ok(vec![last as f64])
    }

    fn log_density(&self, from: &[f64], to: &[f64], temp: f64, _step: usize) -> Result<f64> {
        check_temp(temp)?;
        let i = self.state_index(from)?;
        let j = self.state_index(to)?;
        match self {
            DiscreteOperator::Learned { .. } => {
                let l = self.logit_row(i);
                let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max / temp + l.iter().map(|&v| ((v - max) / temp).exp()).sum::<f64>().ln();
                Ok(l[j] / temp - lse)
            }
            _ => Ok(self.row(i, temp)?[j].max(PROB_FLOOR).ln()),
        }
    }

    fn accumulate_log_density_grad(
        &mut self,
        from: &[f64],
        to: &[f64],
        temp: f64,
        step: usize,
        scale: f64,
    ) -> Result<f64> {
        let logp = self.log_density(from, to, temp, step)?;
        let i = self.state_index(from)?;
        let j = self.state_index(to)?;
        if let DiscreteOperator::Learned { n, net } = self {
            let (logits, tape) = net.forward(&one_hot(*n, i), None)?;
            let probs = softmax_scaled(&logits, temp);
            // d log softmax_j(L/T) / d L_k = (delta_jk - P_k) / T
            let grad: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(k, p)| scale * ((k == j) as u8 as f64 - p) / temp)
                .collect();
            net.backward(tape, &grad)?;
        }
        if let DiscreteOperator::Energy { net, proposal } = self {
            let n = proposal.n();
            let e: Vec<f64> = (0..n)
                .map(|k| net.eval(&one_hot(n, k), None).map(|v| v[0]))
                .collect::<Result<_>>()?;
            // d log P_T(j | i) / d E_k, zero wherever the acceptance is saturated at 1
            let mut de = vec![0.0; n];
            if i != j {
                if e[j] > e[i] {
                    de[j] -= 1.0 / temp;
                    de[i] += 1.0 / temp;
                }
            } else {
                let row = metropolis_row(&e, proposal, i, temp);
                let stay = row[i].max(PROB_FLOOR);
                for k in (0..n).filter(|&k| k != i && e[k] > e[i]) {
                    let d = row[k] / temp / stay;
                    de[k] += d;
                    de[i] -= d;
                }
            }
            for (k, d) in de.into_iter().enumerate().filter(|(_, d)| *d != 0.0) {
                let (_, tape) = net.forward(&one_hot(n, k), None)?;
                net.backward(tape, &[scale * d])?;
            }
        }
        Ok(logp)
    }

    fn nets(&self) -> Vec<&ParamNet> {
        match self {
            DiscreteOperator::Fixed(_) => Vec::new(),
            DiscreteOperator::Learned { net, .. } | DiscreteOperator::Energy { net, .. } => vec![net],
        }
    }

    fn nets_mut(&mut self) -> Vec<&mut ParamNet> {
        match self {
            DiscreteOperator::Fixed(_) => Vec::new(),
            DiscreteOperator::Learned { net, .. } | DiscreteOperator::Energy { net, .. } => vec![net],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::testutil::{fd_log_density_grad, grads_agree};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn learned_matrix_matches_log_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let op = DiscreteOperator::learned(4, 1.0, &mut rng).unwrap();
        for t in [1.0, 3.0] {
            let m = op.matrix(t).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let lp = op.log_density(&[i as f64], &[j as f64], t, 0).unwrap();
                    assert!((lp.exp() - m.get(i, j)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn learned_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut op = DiscreteOperator::learned(3, 1.0, &mut rng).unwrap();
        let g = op.log_density_grad(&[2.0], &[0.0], 2.0, 0).unwrap();
        let fd = fd_log_density_grad(&mut op, &[2.0], &[0.0], 2.0, 0, 1e-5);
        grads_agree(&g, &fd, 1e-5).unwrap();
    }

    #[test]
    fn energy_operator_is_metropolis() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let op = DiscreteOperator::energy(4, 1.0, &mut rng).unwrap();
        let e = op.energies().unwrap();
        for t in [1.0, 2.5] {
            let m = op.matrix(t).unwrap();
            let pi = crate::oracle::stationary_distribution(&m).unwrap();
            let z: f64 = e.iter().map(|v| (-v / t).exp()).sum();
            for (p, v) in pi.iter().zip(&e) {
                assert!((p - (-v / t).exp() / z).abs() < 1e-12);
            }
            for i in 0..4 {
                for j in 0..4 {
                    let lp = op.log_density(&[i as f64], &[j as f64], t, 0).unwrap();
                    assert!((lp.exp() - m.get(i, j)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn energy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut op = DiscreteOperator::energy(4, 1.0, &mut rng).unwrap();
        for (i, j) in [(0, 1), (1, 0), (2, 2), (3, 3), (1, 3)] {
            let g = op.log_density_grad(&[i as f64], &[j as f64], 1.7, 0).unwrap();
            let fd = fd_log_density_grad(&mut op, &[i as f64], &[j as f64], 1.7, 0, 1e-6);
            grads_agree(&g, &fd, 1e-5).unwrap();
        }
    }

    #[test]
    fn energy_proposal_must_be_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = StochasticMatrix::new(vec![vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap();
        assert!(DiscreteOperator::energy_with_proposal(m, 1.0, &mut rng).is_err());
        assert!(DiscreteOperator::energy(1, 1.0, &mut rng).is_err());
    }

    #[test]
    fn sampling_frequencies_follow_the_row() {
        let m = StochasticMatrix::new(vec![vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap();
        let op = DiscreteOperator::fixed(TransitionFamily::Fixed(m));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let ones = (0..n)
            .filter(|_| op.sample_step(&[0.0], 1.0, 0, &mut rng).unwrap()[0] == 1.0)
            .count();
        let p = ones as f64 / n as f64;
        let se = (0.8 * 0.2 / n as f64).sqrt();
        assert!((p - 0.8).abs() < 4.0 * se);
    }

    #[test]
    fn rejects_bad_states() {
        let op = DiscreteOperator::fixed(TransitionFamily::Fixed(StochasticMatrix::identity(3)));
        assert!(op.state_index(&[3.0]).is_err());
        assert!(op.state_index(&[0.5]).is_err());
        assert!(op.state_index(&[0.0, 1.0]).is_err());
        assert_eq!(op.state_index(&[2.0]).unwrap(), 2);
    }

    #[test]
    fn zero_mass_transition_is_clamped() {
        let op = DiscreteOperator::fixed(TransitionFamily::Fixed(StochasticMatrix::identity(2)));
        let lp = op.log_density(&[0.0], &[1.0], 1.0, 0).unwrap();
        assert_eq!(lp, PROB_FLOOR.ln());
    }
}
