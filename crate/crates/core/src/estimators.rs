//! Monte-Carlo bounds, importance-sampled likelihoods, reversibility
//! diagnostics and discrete divergences.
//!
//! All log-densities are in nats.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WalkbackError};
use crate::operators::{DiscreteOperator, Prior, TransitionOperator};
use crate::oracle::MAX_PATHS;
use crate::schedule::TemperatureSchedule;
use crate::training::heat_trajectory;

/// Log-probabilities below `ln(1e-12)` are clamped inside diagnostics.
pub const LOG_PROB_FLOOR: f64 = -27.631_021_115_928_547;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_trajectories: usize,
}

impl BoundEstimate {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(WalkbackError::Estimator("no samples".into()));
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        if !mean.is_finite() {
            return Err(WalkbackError::Estimator("non-finite bound samples".into()));
        }
        let std_error = if n > 1 {
            let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Ok(BoundEstimate {
            mean,
            std_error,
            n_trajectories: n,
        })
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Single-trajectory bound samples `sum ln p - sum ln q + ln p*(s_K)`.
pub fn elbo_samples<O: TransitionOperator, R: Rng + ?Sized>(
    op: &O,
    prior: &Prior,
    schedule: &TemperatureSchedule,
    x: &[f64],
    n_traj: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n_traj == 0 {
        return Err(WalkbackError::Usage("n_traj must be at least 1".into()));
    }
    (0..n_traj)
        .map(|_| heat_trajectory(op, prior, schedule, x, rng).map(|t| t.bound()))
        .collect()
}

/// Unbiased Monte-Carlo estimate of the variational lower bound at `x`.
pub fn elbo_estimate<O: TransitionOperator, R: Rng + ?Sized>(
    op: &O,
    prior: &Prior,
    schedule: &TemperatureSchedule,
    x: &[f64],
    n_traj: usize,
    rng: &mut R,
) -> Result<BoundEstimate> {
    BoundEstimate::from_samples(&elbo_samples(op, prior, schedule, x, n_traj, rng)?)
}

/// Log-mean-exp of log importance weights.
pub fn log_mean_exp(log_weights: &[f64]) -> Result<f64> {
    if log_weights.is_empty() {
        return Err(WalkbackError::Estimator("no importance weights".into()));
    }
    let v = log_sum_exp(log_weights) - (log_weights.len() as f64).ln();
    if v == f64::NEG_INFINITY {
        return Err(WalkbackError::Estimator("every importance weight is zero".into()));
    }
    Ok(v)
}

/// Delta-method standard error of `log_mean_exp(log_weights)`.
pub fn log_mean_exp_std_error(log_weights: &[f64]) -> f64 {
    let n = log_weights.len();
    if n < 2 {
        return 0.0;
    }
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_weights.iter().map(|v| (v - max).exp()).collect();
    let mean = w.iter().sum::<f64>() / n as f64;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt() / mean
}

/// Importance-sampling estimate of `ln p(x)` with the heating process as proposal.
pub fn is_loglik<O: TransitionOperator, R: Rng + ?Sized>(
    op: &O,
    prior: &Prior,
    schedule: &TemperatureSchedule,
    x: &[f64],
    n_traj: usize,
    rng: &mut R,
) -> Result<f64> {
    log_mean_exp(&elbo_samples(op, prior, schedule, x, n_traj, rng)?)
}

/// Enumerates every heated path `s_1..s_K` of a discrete operator from `s0`
/// and returns `(log q(path), bound(path))` pairs.
pub fn enumerate_bound_terms(
    op: &DiscreteOperator,
    prior: &Prior,
    schedule: &TemperatureSchedule,
    s0: usize,
) -> Result<Vec<(f64, f64)>> {
    let n = op.n_states();
    let k = schedule.len();
    if (n as f64).powi(k as i32) > MAX_PATHS as f64 {
        return Err(WalkbackError::Config("path enumeration exceeds the cap".into()));
    }
    let temps = schedule.temps();
    let steps = schedule.step_indices();
    let mut out = Vec::with_capacity(n.pow(k as u32));
    let mut path = vec![0usize; k + 1];
    path[0] = s0;
    for code in 0..n.pow(k as u32) {
        let mut c = code;
        for s in path[1..].iter_mut() {
            *s = c % n;
            c /= n;
        }
        let mut log_q = 0.0;
        let mut log_p = 0.0;
        for t in 0..k {
            let a = [path[t] as f64];
            let b = [path[t + 1] as f64];
            log_q += op.log_density(&a, &b, temps[t], steps[t])?;
            log_p += op.log_density(&b, &a, temps[t], steps[t])?;
        }
        log_p += prior.log_density(&[path[k] as f64])?;
        out.push((log_q, log_p - log_q));
    }
    Ok(out)
}

/// `E_q[bound]` computed exactly over all heated paths.
pub fn exhaustive_elbo(op: &DiscreteOperator, prior: &Prior, schedule: &TemperatureSchedule, s0: usize) -> Result<f64> {
    Ok(enumerate_bound_terms(op, prior, schedule, s0)?
        .iter()
        .map(|(lq, b)| lq.exp() * b)
        .sum())
}

/// `ln sum_paths q(path) w(path)`, the importance-sampling estimator with an
/// exhaustive proposal; equals the exact log-marginal.
pub fn exhaustive_is_loglik(
    op: &DiscreteOperator,
    prior: &Prior,
    schedule: &TemperatureSchedule,
    s0: usize,
) -> Result<f64> {
    let terms: Vec<f64> = enumerate_bound_terms(op, prior, schedule, s0)?
        .iter()
        .map(|(lq, b)| lq + b)
        .collect();
    Ok(log_sum_exp(&terms))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReversibilityReport {
    pub kl_per_step: f64,
    pub entropy_per_step: f64,
    pub ratio: f64,
    pub chain_length: usize,
    pub burn_in: usize,
    /// Batch-means standard error of `kl_per_step`.
    pub kl_std_error: f64,
    /// Reverse log-densities raised to the clamp floor.
    pub clamped: usize,
}

pub const DEFAULT_BURN_IN: usize = 50;

/// Runs the operator at fixed temperature from `start` for `chain_length`
/// steps and averages the forward/reverse log-ratio and the forward
/// log-density over the steps after `burn_in`.
pub fn reversibility_report<O: TransitionOperator, R: Rng + ?Sized>(
    op: &O,
    start: &[f64],
    temp: f64,
    chain_length: usize,
    burn_in: usize,
    rng: &mut R,
) -> Result<ReversibilityReport> {
    if chain_length <= burn_in {
        return Err(WalkbackError::Usage(format!(
            "chain length {chain_length} must exceed burn-in {burn_in}"
        )));
    }
    let mut s = start.to_vec();
    for _ in 0..burn_in {
        s = op.sample_step(&s, temp, 0, rng)?;
    }
    let k = chain_length - burn_in;
    let mut ratios = Vec::with_capacity(k);
    let mut entropy = 0.0;
    let mut clamped = 0;
    for _ in 0..k {
        let next = op.sample_step(&s, temp, 0, rng)?;
        let fwd = op.log_density(&s, &next, temp, 0)?.max(LOG_PROB_FLOOR);
        let mut rev = op.log_density(&next, &s, temp, 0)?;
        if !(rev > LOG_PROB_FLOOR) {
            rev = LOG_PROB_FLOOR;
            clamped += 1;
        }
        ratios.push(fwd - rev);
        entropy -= fwd;
        s = next;
    }
    let kl = ratios.iter().sum::<f64>() / k as f64;
    let entropy = entropy / k as f64;
    if entropy == 0.0 || !entropy.is_finite() {
        return Err(WalkbackError::Estimator(format!(
            "entropy per step is {entropy}; ratio undefined"
        )));
    }
    let ratio = kl / entropy;
    if !ratio.is_finite() {
        return Err(WalkbackError::Estimator("reversibility ratio is not finite".into()));
    }
    Ok(ReversibilityReport {
        kl_per_step: kl,
        entropy_per_step: entropy,
        ratio,
        chain_length,
        burn_in,
        kl_std_error: batch_means_std_error(&ratios, 20),
        clamped,
    })
}

/// Standard error of the mean of a correlated series from `batches` batch means.
pub fn batch_means_std_error(series: &[f64], batches: usize) -> f64 {
    let size = series.len() / batches.max(1);
    if size == 0 || batches < 2 {
        return 0.0;
    }
    let means: Vec<f64> = series
        .chunks_exact(size)
        .take(batches)
        .map(|c| c.iter().sum::<f64>() / size as f64)
        .collect();
    let m = means.iter().sum::<f64>() / means.len() as f64;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (means.len() - 1) as f64;
    (var / means.len() as f64).sqrt()
}

/// Per-path log-ratios for the two conjugate ensembles of a protocol.
///
/// Forward paths start from `start` and apply the schedule in order; reverse
/// paths start from `end` and apply it backwards. Forward samples are
/// `ln P_F(path) / P_R(path)`, reverse samples `ln P_R(path) / P_F(path)`.
pub fn path_log_ratios<O: TransitionOperator, R: Rng + ?Sized>(
    op: &O,
    schedule: &TemperatureSchedule,
    start: &Prior,
    end: &Prior,
    n_paths: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let temps = schedule.temps();
    let steps = schedule.step_indices();
    let k = temps.len();
    let log_ratio = |path: &[Vec<f64>]| -> Result<f64> {
        let mut lf = start.log_density(&path[0])?;
        let mut lr = end.log_density(&path[k])?;
        for t in 0..k {
            lf += op.log_density(&path[t], &path[t + 1], temps[t], steps[t])?;
            lr += op.log_density(&path[t + 1], &path[t], temps[t], steps[t])?;
        }
        Ok(lf - lr)
    };
    let mut fwd = Vec::with_capacity(n_paths);
    let mut rev = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        let mut path = vec![start.sample(rng)];
        for t in 0..k {
            let next = op.sample_step(&path[t], temps[t], steps[t], rng)?;
            path.push(next);
        }
        fwd.push(log_ratio(&path)?);

        let mut back = vec![end.sample(rng)];
        for t in (0..k).rev() {
            let prev = op.sample_step(back.last().expect("non-empty"), temps[t], steps[t], rng)?;
            back.push(prev);
        }
        back.reverse();
        rev.push(-log_ratio(&back)?);
    }
    Ok((fwd, rev))
}

/// Half the average dissipation of the forward and reverse protocols, an
/// estimator of half the Jeffreys divergence between the path ensembles.
pub fn hysteresis_estimate(forward_logratios: &[f64], reverse_logratios: &[f64]) -> Result<f64> {
    if forward_logratios.is_empty() || reverse_logratios.is_empty() {
        return Err(WalkbackError::Estimator("hysteresis needs both ensembles".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * (mean(forward_logratios) + mean(reverse_logratios)))
}

pub fn hysteresis_std_error(forward_logratios: &[f64], reverse_logratios: &[f64]) -> f64 {
    let se = |v: &[f64]| BoundEstimate::from_samples(v).map_or(0.0, |b| b.std_error);
    0.5 * (se(forward_logratios).powi(2) + se(reverse_logratios).powi(2)).sqrt()
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(WalkbackError::Domain(format!("{what} is not a probability vector")));
    }
    Ok(())
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(WalkbackError::Domain(format!(
            "support mismatch: {} vs {} outcomes",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")
}

/// `KL(p || q)`; infinite when `q` misses mass of `p`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            if a == 0.0 {
                0.0
            } else if b == 0.0 {
                f64::INFINITY
            } else {
                a * (a / b).ln()
            }
        })
        .sum())
}

fn check_weight(pi: f64) -> Result<()> {
    if (0.0..=1.0).contains(&pi) {
        Ok(())
    } else {
        Err(WalkbackError::Domain(format!(
            "mixture weight must lie in [0, 1], got {pi}"
        )))
    }
}

/// Generalized Jensen-Shannon divergence `(1 - pi) KL(p || m) + pi KL(q || m)`
/// with `m = (1 - pi) p + pi q`. `pi = 1/2` is the standard JS divergence.
pub fn js_divergence(p: &[f64], q: &[f64], pi: f64) -> Result<f64> {
    check_pair(p, q)?;
    check_weight(pi)?;
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = (1.0 - pi) * a + pi * b;
        if a > 0.0 && pi < 1.0 {
            total += (1.0 - pi) * a * (a / m).ln();
        }
        if b > 0.0 && pi > 0.0 {
            total += pi * b * (b / m).ln();
        }
    }
    Ok(total.max(0.0))
}

/// `I[s; x]` for `s ~ Bernoulli(pi)`, `x | s=0 ~ p`, `x | s=1 ~ q`, from the
/// explicit joint table.
pub fn mutual_information(p: &[f64], q: &[f64], pi: f64) -> Result<f64> {
    check_pair(p, q)?;
    check_weight(pi)?;
    let prior_s = [1.0 - pi, pi];
    let joint: Vec<[f64; 2]> = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| [prior_s[0] * a, prior_s[1] * b])
        .collect();
    let marg_x: Vec<f64> = joint.iter().map(|r| r[0] + r[1]).collect();
    let marg_s = [
        joint.iter().map(|r| r[0]).sum::<f64>(),
        joint.iter().map(|r| r[1]).sum::<f64>(),
    ];
    let mut mi = 0.0;
    for (row, &mx) in joint.iter().zip(&marg_x) {
        for s in 0..2 {
            if row[s] > 0.0 {
                mi += row[s] * (row[s] / (marg_s[s] * mx)).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Both sides of the JS / mutual-information identity and their difference.
pub fn mutual_info_identity_check(p: &[f64], q: &[f64], pi: f64) -> Result<(f64, f64, f64)> {
    let js = js_divergence(p, q, pi)?;
    let mi = mutual_information(p, q, pi)?;
    Ok((js, mi, js - mi))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JeffreysCheck {
    pub js: f64,
    pub kl_pq: f64,
    pub kl_qp: f64,
    pub jeffreys: f64,
    pub bound1: f64,
    pub bound2: f64,
    /// `js <= bound1 <= bound2`.
    pub ordered: bool,
    /// A KL was infinite, so both bounds sit at the trivial `ln 2`.
    pub infinite: bool,
}

/// `ln(2 / (1 + e^-x))`, accurate for small `x`.
fn half_bound(kl: f64) -> f64 {
    -(0.5 * (-kl).exp_m1()).ln_1p()
}

/// JS divergence against its two Jeffreys-type upper bounds
/// `1/2 ln(2/(1+e^-KL(p||q))) + 1/2 ln(2/(1+e^-KL(q||p)))` and
/// `ln(2/(1+e^(-J/2)))`.
pub fn jeffreys_bound_check(p: &[f64], q: &[f64]) -> Result<JeffreysCheck> {
    let js = js_divergence(p, q, 0.5)?;
    let kl_pq = kl_divergence(p, q)?;
    let kl_qp = kl_divergence(q, p)?;
    let jeffreys = kl_pq + kl_qp;
    let bound1 = 0.5 * half_bound(kl_pq) + 0.5 * half_bound(kl_qp);
    let bound2 = half_bound(0.5 * jeffreys);
    Ok(JeffreysCheck {
        js,
        kl_pq,
        kl_qp,
        jeffreys,
        bound1,
        bound2,
        ordered: js <= bound1 && bound1 <= bound2,
        infinite: jeffreys.is_infinite(),
    })
}
