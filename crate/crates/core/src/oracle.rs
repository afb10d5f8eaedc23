//! Exact finite-state machinery.
//!
//! Everything here is computed in closed form or by exhaustive enumeration
//! over a small state space. Monte-Carlo estimators elsewhere in the crate are
//! checked against these values.
//!
//! Conventions: a [`StochasticMatrix`] `P` stores `P(j | i)` at row `i`,
//! column `j`. Heating applies `P_{T_t}` forward in time starting from `s_0`;
//! cooling samples `s_K ~ p*` and then `s_{t-1} ~ P_{T_t}(. | s_t)`.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WalkbackError};
use crate::schedule::TemperatureSchedule;

/// Largest state space the oracle accepts.
pub const MAX_STATES: usize = 64;
/// Largest number of paths an exhaustive enumeration may visit.
pub const MAX_PATHS: usize = 1 << 22;

const ROW_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticMatrix {
    n: usize,
    data: Vec<f64>,
}

impl StochasticMatrix {
    /// Validates non-negativity and unit row sums within 1e-12.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 || n > MAX_STATES {
            return Err(WalkbackError::Config(format!(
                "state space must have 1..={MAX_STATES} states, got {n}"
            )));
        }
        let mut data = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(WalkbackError::Config(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(WalkbackError::Config(format!(
                    "row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOL {
                return Err(WalkbackError::Config(format!("row {i} sums to {sum}")));
            }
            data.extend_from_slice(row);
        }
        Ok(StochasticMatrix { n, data })
    }

    /// Builds from row-major data, renormalizing each row.
    pub fn from_weights(n: usize, weights: &[f64]) -> Result<Self> {
        if weights.len() != n * n {
            return Err(WalkbackError::Dimension {
                expected: n * n,
                got: weights.len(),
                context: "matrix weights",
            });
        }
        let rows = weights
            .chunks(n)
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|w| w / s).collect()
            })
            .collect();
        Self::new(rows)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        StochasticMatrix { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `P(to | from)`.
    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.data[from * self.n + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.data[from * self.n..(from + 1) * self.n]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    /// Row vector times matrix: `(dist P)(j) = sum_i dist(i) P(j|i)`.
    pub fn propagate(&self, dist: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (i, &w) in dist.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, &p) in out.iter_mut().zip(self.row(i)) {
                *o += w * p;
            }
        }
        out
    }

    /// Strong connectivity of the graph of positive entries.
    pub fn is_irreducible(&self) -> bool {
        let reach = |forward: bool| {
            let mut seen = vec![false; self.n];
            let mut queue = VecDeque::from([0usize]);
            seen[0] = true;
            while let Some(i) = queue.pop_front() {
                for j in 0..self.n {
                    let p = if forward { self.get(i, j) } else { self.get(j, i) };
                    if p > 0.0 && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        reach(true) && reach(false)
    }

    pub fn max_abs_diff(&self, other: &StochasticMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check_distribution(dist: &[f64], n: usize, what: &str) -> Result<()> {
    if dist.len() != n {
        return Err(WalkbackError::Config(format!(
            "{what} has {} entries, expected {n}",
            dist.len()
        )));
    }
    if dist.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(WalkbackError::Config(format!(
            "{what} has a negative or non-finite entry"
        )));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > 1e-10 {
        return Err(WalkbackError::Config(format!("{what} sums to {sum}")));
    }
    Ok(())
}

/// Temperature-indexed family of stochastic matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransitionFamily {
    /// Same matrix at every temperature.
    Fixed(StochasticMatrix),
    /// One matrix per listed temperature; other temperatures are an error.
    Tabulated(Vec<(f64, StochasticMatrix)>),
    /// `P_T(j | i) = softmax_j(L[i][j] / T)`.
    SoftmaxLogits { n: usize, logits: Vec<f64> },
    /// Metropolis chain for `pi_T ∝ exp(-E / T)` with a symmetric proposal.
    Metropolis {
        energies: Vec<f64>,
        proposal: StochasticMatrix,
    },
}

impl TransitionFamily {
    pub fn n_states(&self) -> usize {
        match self {
            TransitionFamily::Fixed(m) => m.n(),
            TransitionFamily::Tabulated(blocks) => blocks.first().map_or(0, |(_, m)| m.n()),
            TransitionFamily::SoftmaxLogits { n, .. } => *n,
            TransitionFamily::Metropolis { energies, .. } => energies.len(),
        }
    }

    pub fn matrix(&self, temp: f64) -> Result<StochasticMatrix> {
        if !(temp > 0.0) {
            return Err(WalkbackError::Config(format!(
                "temperature must be positive, got {temp}"
            )));
        }
        match self {
            TransitionFamily::Fixed(m) => Ok(m.clone()),
            TransitionFamily::Tabulated(blocks) => blocks
                .iter()
                .find(|(t, _)| (t - temp).abs() <= 1e-12 * t.max(1.0))
                .map(|(_, m)| m.clone())
                .ok_or_else(|| WalkbackError::Config(format!("no matrix tabulated for temperature {temp}"))),
            TransitionFamily::SoftmaxLogits { n, logits } => {
                let rows = logits.chunks(*n).map(|row| softmax_scaled(row, temp)).collect();
                StochasticMatrix::new(rows)
            }
            TransitionFamily::Metropolis { energies, proposal } => {
                let n = energies.len();
                let mut rows = vec![vec![0.0; n]; n];
                for i in 0..n {
                    let mut stay = 1.0;
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let accept = (-(energies[j] - energies[i]) / temp).exp().min(1.0);
                        rows[i][j] = proposal.get(i, j) * accept;
                        stay -= rows[i][j];
                    }
                    rows[i][i] = stay.max(0.0);
                }
                StochasticMatrix::new(rows)
            }
        }
    }

    /// Closed-form stationary distribution where the family provides one.
    pub fn closed_form_stationary(&self, temp: f64) -> Option<Vec<f64>> {
        match self {
            TransitionFamily::Metropolis { energies, .. } => {
                let w: Vec<f64> = energies.iter().map(|e| (-e / temp).exp()).collect();
                let z: f64 = w.iter().sum();
                Some(w.into_iter().map(|v| v / z).collect())
            }
            _ => None,
        }
    }
}

/// `softmax(row / temp)`, stable.
pub fn softmax_scaled(row: &[f64], temp: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&l| ((l - max) / temp).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// A finite-state walkback model: transition family, data distribution and prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteChain {
    pub family: TransitionFamily,
    pub data_dist: Vec<f64>,
    pub prior: Vec<f64>,
}

impl DiscreteChain {
    pub fn new(family: TransitionFamily, data_dist: Vec<f64>, prior: Vec<f64>) -> Result<Self> {
        let n = family.n_states();
        if n == 0 || n > MAX_STATES {
            return Err(WalkbackError::Config(format!(
                "state space must have 1..={MAX_STATES} states, got {n}"
            )));
        }
        check_distribution(&data_dist, n, "data distribution")?;
        check_distribution(&prior, n, "prior")?;
        Ok(DiscreteChain {
            family,
            data_dist,
            prior,
        })
    }

    pub fn n_states(&self) -> usize {
        self.family.n_states()
    }

    fn matrices(&self, schedule: &TemperatureSchedule) -> Result<Vec<StochasticMatrix>> {
        schedule.temps().iter().map(|&t| self.family.matrix(t)).collect()
    }

    /// Parses the plain-text chain format.
    ///
    /// ```text
    /// # comments and blank lines are ignored
    /// temperature 1
    /// 0.9 0.1
    /// 0.5 0.5
    /// temperature 2
    /// 0.7 0.3
    /// 0.6 0.4
    /// data 0.5 0.5      (optional, default uniform)
    /// prior 0.5 0.5     (optional, default stationary at the highest temperature)
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut blocks: Vec<(f64, Vec<Vec<f64>>, usize)> = Vec::new();
        let mut data = None;
        let mut prior = None;
        let parse_nums = |s: &str, line: usize| -> Result<Vec<f64>> {
            s.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<f64>().map_err(|e| WalkbackError::Parse {
                        line,
                        message: format!("`{t}`: {e}"),
                    })
                })
                .collect()
        };
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut words = content.splitn(2, char::is_whitespace);
            let head = words.next().unwrap_or("");
            let rest = words.next().unwrap_or("");
            match head {
                "temperature" => {
                    let t = parse_nums(rest, line)?;
                    if t.len() != 1 {
                        return Err(WalkbackError::Parse {
                            line,
                            message: "expected one temperature".into(),
                        });
                    }
                    blocks.push((t[0], Vec::new(), line));
                }
                "data" => data = Some(parse_nums(rest, line)?),
                "prior" => prior = Some(parse_nums(rest, line)?),
                _ => {
                    let row = parse_nums(content, line)?;
                    let block = blocks.last_mut().ok_or(WalkbackError::Parse {
                        line,
                        message: "matrix row before any `temperature` header".into(),
                    })?;
                    block.1.push(row);
                }
            }
        }
        if blocks.is_empty() {
            return Err(WalkbackError::Parse {
                line: 0,
                message: "no `temperature` block found".into(),
            });
        }
        let mut tabulated = Vec::with_capacity(blocks.len());
        for (t, rows, line) in blocks {
            let m = StochasticMatrix::new(rows).map_err(|e| WalkbackError::Parse {
                line,
                message: e.to_string(),
            })?;
            tabulated.push((t, m));
        }
        let n = tabulated[0].1.n();
        if tabulated.iter().any(|(_, m)| m.n() != n) {
            return Err(WalkbackError::Parse {
                line: 0,
                message: "temperature blocks differ in size".into(),
            });
        }
        let hottest = tabulated
            .iter()
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, m)| m.clone())
            .expect("non-empty");
        let data = data.unwrap_or_else(|| vec![1.0 / n as f64; n]);
        let prior = match prior {
            Some(p) => p,
            None => stationary_distribution(&hottest)?,
        };
        let family = if tabulated.len() == 1 {
            TransitionFamily::Fixed(tabulated.remove(0).1)
        } else {
            TransitionFamily::Tabulated(tabulated)
        };
        DiscreteChain::new(family, data, prior)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Stationary distribution by power iteration on the lazy chain `(P + I) / 2`,
/// which shares the stationary vector of `P` and converges for irreducible `P`.
pub fn stationary_distribution(p: &StochasticMatrix) -> Result<Vec<f64>> {
    if !p.is_irreducible() {
        return Err(WalkbackError::Domain(
            "chain is reducible; stationary distribution is not unique".into(),
        ));
    }
    let n = p.n();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..1_000_000 {
        let stepped = p.propagate(&pi);
        let next: Vec<f64> = pi.iter().zip(&stepped).map(|(a, b)| 0.5 * (a + b)).collect();
        let delta = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        pi = next;
        if delta < 1e-15 {
            break;
        }
    }
    let z: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|v| *v /= z);
    let residual = stationarity_check(p, &pi);
    if residual > 1e-13 {
        return Err(WalkbackError::Domain(format!(
            "power iteration did not converge (residual {residual:e})"
        )));
    }
    Ok(pi)
}

/// Time reversal `P_R(j | i) = P(i | j) pi(j) / pi(i)` and the stationary vector.
pub fn time_reversal(p: &StochasticMatrix) -> Result<(Vec<f64>, StochasticMatrix)> {
    let pi = stationary_distribution(p)?;
    let n = p.n();
    let rows = (0..n)
        .map(|i| {
            let row: Vec<f64> = (0..n).map(|j| p.get(j, i) * pi[j] / pi[i]).collect();
            // remove rounding drift so the row-sum check holds at 1e-12
            let s: f64 = row.iter().sum();
            row.into_iter().map(|v| v / s).collect()
        })
        .collect();
    Ok((pi, StochasticMatrix::new(rows)?))
}

/// `max_{i,j} |pi(i) P(j|i) - pi(j) P(i|j)|`.
pub fn detailed_balance_residual(p: &StochasticMatrix, pi: &[f64]) -> f64 {
    let n = p.n();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            worst = worst.max((pi[i] * p.get(i, j) - pi[j] * p.get(j, i)).abs());
        }
    }
    worst
}

/// Total-variation residual `0.5 * || dist P - dist ||_1`.
pub fn stationarity_check(p: &StochasticMatrix, dist: &[f64]) -> f64 {
    let stepped = p.propagate(dist);
    0.5 * stepped.iter().zip(dist).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Stationary entropy production per step,
/// `sum_{s,s'} pi(s) P(s'|s) ln(P(s'|s) pi(s) / (P(s|s') pi(s')))`.
/// This is the exact value of the per-step reversibility KL.
pub fn entropy_production(p: &StochasticMatrix) -> Result<f64> {
    let pi = stationary_distribution(p)?;
    let n = p.n();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let w = pi[i] * p.get(i, j);
            if w > 0.0 {
                total += w * (w / (pi[j] * p.get(j, i))).ln();
            }
        }
    }
    Ok(total)
}

/// Stationary entropy rate `-sum pi(s) P(s'|s) ln P(s'|s)`.
pub fn entropy_rate(p: &StochasticMatrix) -> Result<f64> {
    let pi = stationary_distribution(p)?;
    let mut h = 0.0;
    for i in 0..p.n() {
        for j in 0..p.n() {
            let q = p.get(i, j);
            if q > 0.0 {
                h -= pi[i] * q * q.ln();
            }
        }
    }
    Ok(h)
}

/// Cooled marginal `p(s_0) = p* P_{T_K} ... P_{T_1}`.
pub fn exact_marginal(chain: &DiscreteChain, schedule: &TemperatureSchedule) -> Result<Vec<f64>> {
    let mats = chain.matrices(schedule)?;
    let mut dist = chain.prior.clone();
    for m in mats.iter().rev() {
        dist = m.propagate(&dist);
    }
    Ok(dist)
}

/// Marginal after cooling through `schedule` and then `extra` further steps at temperature 1.
pub fn exact_marginal_extended(
    chain: &DiscreteChain,
    schedule: &TemperatureSchedule,
    extra: usize,
) -> Result<Vec<f64>> {
    let mut dist = exact_marginal(chain, schedule)?;
    let unit = chain.family.matrix(1.0)?;
    for _ in 0..extra {
        dist = unit.propagate(&dist);
    }
    Ok(dist)
}

/// One heated path `s_1..s_K` from a fixed `s_0` with its probability under `q`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatedPath {
    pub states: Vec<usize>,
    pub q_prob: f64,
}

/// All heated paths with positive probability, by depth-first enumeration.
pub fn enumerate_heated_paths(
    chain: &DiscreteChain,
    schedule: &TemperatureSchedule,
    s0: usize,
) -> Result<Vec<HeatedPath>> {
    let n = chain.n_states();
    if s0 >= n {
        return Err(WalkbackError::Domain(format!("state {s0} outside 0..{n}")));
    }
    let k = schedule.len();
    if (n as f64).powi(k as i32) > MAX_PATHS as f64 {
        return Err(WalkbackError::Config(format!(
            "{n}^{k} paths exceed the enumeration cap of {MAX_PATHS}"
        )));
    }
    let mats = chain.matrices(schedule)?;
    let mut out = Vec::new();
    let mut states = Vec::with_capacity(k);
    fn walk(mats: &[StochasticMatrix], prev: usize, prob: f64, states: &mut Vec<usize>, out: &mut Vec<HeatedPath>) {
        let t = states.len();
        if t == mats.len() {
            out.push(HeatedPath {
                states: states.clone(),
                q_prob: prob,
            });
            return;
        }
        for (next, &p) in mats[t].row(prev).iter().enumerate() {
            if p > 0.0 {
                states.push(next);
                walk(mats, next, prob * p, states, out);
                states.pop();
            }
        }
    }
    walk(&mats, s0, 1.0, &mut states, &mut out);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub log_marginal: f64,
    pub elbo: f64,
    pub kl_posterior: f64,
    /// `|log_marginal - (elbo + kl_posterior)|`.
    pub residual: f64,
}

/// `ln p(s_0) = L + KL(q(h|s_0) || p(h|s_0))` by exhaustive enumeration.
/// The marginal comes from the matrix-product route, the other two terms from
/// the path sum.
pub fn exact_decomposition(chain: &DiscreteChain, schedule: &TemperatureSchedule, s0: usize) -> Result<Decomposition> {
    let marginal = exact_marginal(chain, schedule)?;
    if s0 >= marginal.len() {
        return Err(WalkbackError::Domain(format!("state {s0} outside the state space")));
    }
    let p_s0 = marginal[s0];
    if !(p_s0 > 0.0) {
        return Err(WalkbackError::Domain(format!(
            "state {s0} has zero marginal probability"
        )));
    }
    let log_marginal = p_s0.ln();
    let mats = chain.matrices(schedule)?;
    let mut elbo = 0.0;
    let mut kl = 0.0;
    for path in enumerate_heated_paths(chain, schedule, s0)? {
        let mut prev = s0;
        let mut log_joint = 0.0;
        for (t, &s) in path.states.iter().enumerate() {
            log_joint += mats[t].get(s, prev).ln();
            prev = s;
        }
        log_joint += chain.prior[prev].ln();
        let log_q = path.q_prob.ln();
        elbo += path.q_prob * (log_joint - log_q);
        // posterior p(h|s0) = p(s0, h) / p(s0)
        kl += path.q_prob * (log_q - (log_joint - log_marginal));
    }
    Ok(Decomposition {
        log_marginal,
        elbo,
        kl_posterior: kl,
        residual: (log_marginal - (elbo + kl)).abs(),
    })
}

/// Heated marginals `m_0 = delta(s_0)`, `m_t = m_{t-1} P_{T_t}`.
fn heated_marginals(mats: &[StochasticMatrix], s0: usize, n: usize) -> Vec<Vec<f64>> {
    let mut m = vec![0.0; n];
    m[s0] = 1.0;
    let mut out = vec![m];
    for p in mats {
        let next = p.propagate(out.last().expect("non-empty"));
        out.push(next);
    }
    out
}

/// `E_q[ sum_t f_t(s_{t-1}, s_t) ]` by dynamic programming over heated marginals.
fn edge_expectation<F: Fn(usize, usize, usize) -> f64>(mats: &[StochasticMatrix], marginals: &[Vec<f64>], f: F) -> f64 {
    let mut total = 0.0;
    for (t, p) in mats.iter().enumerate() {
        for (i, &w) in marginals[t].iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (j, &pij) in p.row(i).iter().enumerate() {
                if pij > 0.0 {
                    total += w * pij * f(t, i, j);
                }
            }
        }
    }
    total
}

fn terminal_expectation<F: Fn(usize) -> f64>(marginal: &[f64], f: F) -> f64 {
    marginal
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(s, &w)| w * f(s))
        .sum()
}

/// Variational bound by dynamic programming; agrees with the enumeration route.
pub fn exact_elbo_dp(chain: &DiscreteChain, schedule: &TemperatureSchedule, s0: usize) -> Result<f64> {
    let n = chain.n_states();
    let mats = chain.matrices(schedule)?;
    let marg = heated_marginals(&mats, s0, n);
    let steps = edge_expectation(&mats, &marg, |t, i, j| mats[t].get(j, i).ln() - mats[t].get(i, j).ln());
    let prior = terminal_expectation(marg.last().expect("non-empty"), |s| chain.prior[s].ln());
    Ok(steps + prior)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlSplit {
    /// `E_q ln prod_t P_{T_t}(s_t|s_{t-1}) / P^R_{T_t}(s_t|s_{t-1})`.
    pub irreversibility_term: f64,
    /// `E_q ln (p(s_0) / p*(s_K)) prod_t pi_{T_t}(s_t) / pi_{T_t}(s_{t-1})`.
    pub annealing_term: f64,
    /// `ln p(s_0) - L`, computed on the same route.
    pub kl_posterior: f64,
    /// `|irreversibility + annealing - kl_posterior|`.
    pub residual: f64,
}

/// Splits the posterior KL into the irreversibility and annealing terms.
/// Expectations over heated paths use dynamic programming, so long schedules
/// are handled exactly.
pub fn kl_split(chain: &DiscreteChain, schedule: &TemperatureSchedule, s0: usize) -> Result<KlSplit> {
    let n = chain.n_states();
    if s0 >= n {
        return Err(WalkbackError::Domain(format!("state {s0} outside 0..{n}")));
    }
    let mats = chain.matrices(schedule)?;
    let mut pis = Vec::with_capacity(mats.len());
    let mut reversals = Vec::with_capacity(mats.len());
    for m in &mats {
        let (pi, rev) = time_reversal(m)?;
        pis.push(pi);
        reversals.push(rev);
    }
    let marg = heated_marginals(&mats, s0, n);
    let terminal = marg.last().expect("non-empty");
    let p_s0 = exact_marginal(chain, schedule)?[s0];
    if !(p_s0 > 0.0) {
        return Err(WalkbackError::Domain(format!(
            "state {s0} has zero marginal probability"
        )));
    }
    let log_marginal = p_s0.ln();

    let irreversibility_term = edge_expectation(&mats, &marg, |t, i, j| {
        mats[t].get(i, j).ln() - reversals[t].get(i, j).ln()
    });
    let annealing_term = log_marginal - terminal_expectation(terminal, |s| chain.prior[s].ln())
        + edge_expectation(&mats, &marg, |t, i, j| pis[t][j].ln() - pis[t][i].ln());
    let elbo = edge_expectation(&mats, &marg, |t, i, j| mats[t].get(j, i).ln() - mats[t].get(i, j).ln())
        + terminal_expectation(terminal, |s| chain.prior[s].ln());
    let kl_posterior = log_marginal - elbo;
    Ok(KlSplit {
        irreversibility_term,
        annealing_term,
        kl_posterior,
        residual: (irreversibility_term + annealing_term - kl_posterior).abs(),
    })
}

/// Exact `0.5 * (KL(F || R) + KL(R || F))` between the forward path ensemble
/// (heating from `pi_{T_1}`) and the reverse ensemble (cooling from
/// `pi_{T_K}`), by enumeration over all paths `s_0..s_K`.
pub fn path_hysteresis(family: &TransitionFamily, schedule: &TemperatureSchedule) -> Result<f64> {
    let n = family.n_states();
    let k = schedule.len();
    if k == 0 {
        return Ok(0.0);
    }
    if (n as f64).powi(k as i32 + 1) > MAX_PATHS as f64 {
        return Err(WalkbackError::Config("path enumeration exceeds the cap".into()));
    }
    let mats: Vec<StochasticMatrix> = schedule
        .temps()
        .iter()
        .map(|&t| family.matrix(t))
        .collect::<Result<_>>()?;
    let start = stationary_distribution(&mats[0])?;
    let end = stationary_distribution(&mats[k - 1])?;
    let mut kl_fr = 0.0;
    let mut kl_rf = 0.0;
    let total = n.pow(k as u32 + 1);
    let mut path = vec![0usize; k + 1];
    for code in 0..total {
        let mut c = code;
        for s in path.iter_mut() {
            *s = c % n;
            c /= n;
        }
        let mut f = start[path[0]];
        let mut r = end[path[k]];
        for t in 0..k {
            f *= mats[t].get(path[t], path[t + 1]);
            r *= mats[t].get(path[t + 1], path[t]);
        }
        if f > 0.0 {
            kl_fr += f * (f / r).ln();
        }
        if r > 0.0 {
            kl_rf += r * (r / f).ln();
        }
    }
    Ok(0.5 * (kl_fr + kl_rf))
}
