//! Walkback training: heat a trajectory from a data point with the current
//! operator, then raise `log p_T(s_{t-1} | s_t)` for every step of it.

use std::fmt;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diffnet::{Optimizer, OptimizerKind};
use crate::error::{check_dim, Result, WalkbackError};
use crate::estimators::{reversibility_report, DEFAULT_BURN_IN};
use crate::operators::{
    BernoulliPrior, CategoricalPrior, Operator, Prior, PriorMoments, TransitionOperator, PROB_FLOOR,
};
use crate::schedule::{tmax_from_variance, HeatingRule, TemperatureSchedule};

/// A heated path `s_0..s_K` with both directional log-densities of every step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub temps: Vec<f64>,
    pub steps: Vec<usize>,
    /// `log q_{T_t}(s_t | s_{t-1})`.
    pub fwd_logp: Vec<f64>,
    /// `log p_{T_t}(s_{t-1} | s_t)`.
    pub bwd_logp: Vec<f64>,
    pub terminal_prior_logp: f64,
}

impl Trajectory {
    /// Number of transitions `K`.
    pub fn len(&self) -> usize {
        self.temps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.temps.is_empty()
    }

    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("a trajectory holds at least s_0")
    }

    /// Single-sample variational bound `sum ln p - sum ln q + ln p*(s_K)`.
    pub fn bound(&self) -> f64 {
        self.bwd_logp.iter().sum::<f64>() - self.fwd_logp.iter().sum::<f64>() + self.terminal_prior_logp
    }
}

fn heat_path<O: TransitionOperator, R: Rng + ?Sized>(
    op: &O,
    schedule: &TemperatureSchedule,
    x0: &[f64],
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    check_dim(op.dim(), x0.len(), "trajectory start")?;
    let k = schedule.len();
    let mut states = Vec::with_capacity(k + 1);
    let mut fwd = Vec::with_capacity(k);
    let mut bwd = Vec::with_capacity(k);
    states.push(x0.to_vec());
    for (&temp, &step) in schedule.temps().iter().zip(schedule.step_indices()) {
        let prev = states.last().expect("non-empty");
        let next = op.sample_step(prev, temp, step, rng)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(WalkbackError::Training(format!(
                "non-finite state at step {} (T = {temp})",
                states.len()
            )));
        }
        let f = op.log_density(prev, &next, temp, step)?;
        let b = op.log_density(&next, prev, temp, step)?;
        if !f.is_finite() || !b.is_finite() {
            return Err(WalkbackError::Training(format!(
                "non-finite log-density at step {} (T = {temp})",
                states.len()
            )));
        }
        fwd.push(f);
        bwd.push(b);
        states.push(next);
    }
    Ok((states, fwd, bwd))
}

/// Runs the heating process from `x0`, recording both directional
/// log-densities of every step and `log p*(s_K)`.
pub fn heat_trajectory<O: TransitionOperator, R: Rng + ?Sized>(
    op: &O,
    prior: &Prior,
    schedule: &TemperatureSchedule,
    x0: &[f64],
    rng: &mut R,
) -> Result<Trajectory> {
    let (states, fwd_logp, bwd_logp) = heat_path(op, schedule, x0, rng)?;
    let terminal_prior_logp = prior.log_density(states.last().expect("non-empty"))?;
    if !terminal_prior_logp.is_finite() {
        return Err(WalkbackError::Training(
            "non-finite prior log-density at the terminal state".into(),
        ));
    }
    Ok(Trajectory {
        states,
        temps: schedule.temps().to_vec(),
        steps: schedule.step_indices().to_vec(),
        fwd_logp,
        bwd_logp,
        terminal_prior_logp,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateMode {
    /// One optimizer step per transition.
    #[default]
    Online,
    /// One optimizer step per trajectory (or per minibatch inside `train`).
    Accumulated,
}

impl std::str::FromStr for UpdateMode {
    type Err = WalkbackError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "online" => Ok(UpdateMode::Online),
            "accumulated" => Ok(UpdateMode::Accumulated),
            other => Err(WalkbackError::Config(format!("unknown update mode `{other}`"))),
        }
    }
}

/// Adds `scale * grad log p_{T_t}(s_{t-1} | s_t)` for one transition `t` (1-based).
pub fn accumulate_step_grad<O: TransitionOperator>(op: &mut O, traj: &Trajectory, t: usize, scale: f64) -> Result<f64> {
    op.accumulate_log_density_grad(
        &traj.states[t],
        &traj.states[t - 1],
        traj.temps[t - 1],
        traj.steps[t - 1],
        scale,
    )
}

/// Adds `scale * grad sum_t log p_{T_t}(s_{t-1} | s_t)` over the whole trajectory.
pub fn accumulate_walkback_grad<O: TransitionOperator>(op: &mut O, traj: &Trajectory, scale: f64) -> Result<()> {
    for t in 1..=traj.len() {
        accumulate_step_grad(op, traj, t, scale)?;
    }
    Ok(())
}

/// Trains the operator to revert every step of `traj` and returns the
/// trajectory's bound contribution, measured before any update.
pub fn walkback_update<O: TransitionOperator>(
    op: &mut O,
    traj: &Trajectory,
    optimizer: &mut Optimizer,
    mode: UpdateMode,
) -> Result<f64> {
    let bound = traj.bound();
    if traj.is_empty() {
        return Ok(bound);
    }
    op.zero_grad();
    match mode {
        UpdateMode::Online => {
            for t in 1..=traj.len() {
                accumulate_step_grad(op, traj, t, -1.0)?;
                optimizer.step(&mut op.nets_mut())?;
            }
        }
        UpdateMode::Accumulated => {
            accumulate_walkback_grad(op, traj, -1.0)?;
            optimizer.step(&mut op.nets_mut())?;
        }
    }
    Ok(bound)
}

/// Generative sampling: draws `s_K ~ p*` and applies the cooling schedule.
/// Returns every `every_k`-th state (counting `s_K` as state 0) followed by
/// the final state when it was not already recorded.
pub fn sample_chain<O: TransitionOperator, R: Rng + ?Sized>(
    op: &O,
    prior: &Prior,
    cooling: &TemperatureSchedule,
    every_k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if every_k == 0 {
        return Err(WalkbackError::Usage("every_k must be at least 1".into()));
    }
    let mut s = prior.sample(rng);
    let mut out = vec![s.clone()];
    let n = cooling.len();
    for (i, (&temp, &step)) in cooling.temps().iter().zip(cooling.step_indices()).enumerate() {
        s = op.sample_step(&s, temp, step, rng)?;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(WalkbackError::Operator(format!("sampling diverged at step {}", i + 1)));
        }
        if (i + 1) % every_k == 0 || i + 1 == n {
            out.push(s.clone());
        }
    }
    Ok(out)
}

/// Final states of `n` independent cooling chains. Chain `i` uses its own
/// stream of a generator seeded with `seed`, so the output does not depend on
/// thread scheduling.
pub fn generate<O: TransitionOperator + Sync>(
    op: &O,
    prior: &Prior,
    cooling: &TemperatureSchedule,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = indexed_rng(seed, i as u64);
            let chain = sample_chain(op, prior, cooling, cooling.len().max(1), &mut rng)?;
            Ok(chain.last().expect("non-empty").clone())
        })
        .collect()
}

pub(crate) fn indexed_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Extra flat steps are drawn from `0..=n1`.
    pub n1: usize,
    /// Flat steps always present before the random ones.
    pub n_flat_min: usize,
    /// Overrides `T_max = total data variance / base variance`.
    pub tmax: Option<f64>,
    pub rule: HeatingRule,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub update_mode: UpdateMode,
    /// EMA rate of the prior moments, applied once per minibatch.
    pub prior_rate: f64,
    /// Heated trajectories per validation point.
    pub val_trajectories: usize,
    /// Length of the chain behind the per-epoch reversibility column; 0 disables it.
    pub reversibility_chain: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n1: 4,
            n_flat_min: 0,
            tmax: None,
            rule: HeatingRule::Doubling,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            update_mode: UpdateMode::Online,
            prior_rate: 0.1,
            val_trajectories: 1,
            reversibility_chain: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(WalkbackError::Config(
                "learning rate must be finite and non-negative".into(),
            ));
        }
        if self.patience == 0 {
            return Err(WalkbackError::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.val_trajectories == 0 {
            return Err(WalkbackError::Config(
                "batch size and validation trajectories must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.prior_rate) {
            return Err(WalkbackError::Config("prior rate must lie in [0, 1]".into()));
        }
        if self.rule == HeatingRule::Custom {
            return Err(WalkbackError::Config(
                "training needs the doubling or sqrt2 rule".into(),
            ));
        }
        if let Some(t) = self.tmax {
            if !(t >= 1.0) || !t.is_finite() {
                return Err(WalkbackError::Config(format!("Tmax must be finite and >= 1, got {t}")));
            }
        }
        Ok(())
    }

    /// Heating schedule with `n` random flat steps on top of `n_flat_min`.
    pub fn schedule(&self, tmax: f64, n: usize) -> Result<TemperatureSchedule> {
        TemperatureSchedule::heating(tmax, self.n_flat_min + n, self.rule)
    }

    /// Fixed evaluation schedule with the full `n1` flat steps.
    pub fn eval_schedule(&self, tmax: f64) -> Result<TemperatureSchedule> {
        self.schedule(tmax, self.n1)
    }
}

/// Resolves `T_max`: the configured override, else total variance of the
/// points over the Gaussian operator's base noise variance.
pub fn resolve_tmax(config: &TrainConfig, op: &Operator, points: &[Vec<f64>]) -> Result<f64> {
    if let Some(t) = config.tmax {
        return Ok(t);
    }
    match op {
        Operator::Gaussian(g) => {
            let moments = PriorMoments::from_points(points, 1.0)?;
            tmax_from_variance(moments.total_variance(), g.base_variance)
        }
        _ => Err(WalkbackError::Config(
            "Tmax must be given for discrete and binary operators".into(),
        )),
    }
}

/// Prior matching a batch of terminal states, in the family the operator needs.
pub fn fit_prior(op: &Operator, terminals: &[Vec<f64>], rate: f64) -> Result<Prior> {
    match op {
        Operator::Gaussian(_) => Ok(Prior::Gaussian(PriorMoments::from_points(terminals, rate)?)),
        Operator::Discrete(d) => {
            let n = d.n_states();
            let mut probs = vec![PROB_FLOOR; n];
            for s in terminals {
                probs[d.state_index(s)?] += 1.0;
            }
            let z: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= z);
            Ok(Prior::Categorical(CategoricalPrior::new(probs, rate)?))
        }
        Operator::Bernoulli(b) => {
            let dim = b.dim();
            let mut probs = vec![0.5; dim];
            if !terminals.is_empty() {
                for (i, p) in probs.iter_mut().enumerate() {
                    let m = terminals.iter().map(|s| s[i]).sum::<f64>() / terminals.len() as f64;
                    *p = m.clamp(1e-6, 1.0 - 1e-6);
                }
            }
            Ok(Prior::Bernoulli(BernoulliPrior::new(probs, rate)?))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_bound: f64,
    pub val_bound: f64,
    /// Reversibility ratio of the temperature-1 chain.
    pub reversibility: Option<f64>,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {:>4}  train {:>12.5}  val {:>12.5}",
            self.epoch, self.train_bound, self.val_bound
        )?;
        match self.reversibility {
            Some(r) => write!(f, "  rev {r:.4}"),
            None => Ok(()),
        }
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trainer {
    pub config: TrainConfig,
    pub tmax: f64,
    pub operator: Operator,
    pub prior: Prior,
    pub optimizer: Optimizer,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub best_operator: Operator,
    pub best_prior: Prior,
    pub stale_epochs: usize,
    pub log: Vec<EpochRecord>,
}

impl Trainer {
    /// Sets up the optimizer and fits the prior to terminal states of
    /// trajectories heated from the training points.
    pub fn new(operator: Operator, train: &[Vec<f64>], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(WalkbackError::Usage("no training points".into()));
        }
        let tmax = resolve_tmax(&config, &operator, train)?;
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let schedule = config.eval_schedule(tmax)?;
        let mut terminals = Vec::new();
        for x in train.iter().take(512) {
            let (states, _, _) = heat_path(&operator, &schedule, x, &mut rng)?;
            terminals.push(states.last().expect("non-empty").clone());
        }
        let prior = fit_prior(&operator, &terminals, config.prior_rate)?;
        Ok(Trainer {
            tmax,
            best_operator: operator.clone(),
            best_prior: prior.clone(),
            operator,
            prior,
            optimizer,
            rng,
            epoch: 0,
            best_val: f64::NEG_INFINITY,
            best_epoch: 0,
            stale_epochs: 0,
            log: Vec::new(),
            config,
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.max_epochs || self.stale_epochs >= self.config.patience
    }

    /// Mean per-trajectory bound over `points` on the fixed evaluation
    /// schedule, with a generator reseeded identically every call.
    pub fn validation_bound(&self, points: &[Vec<f64>]) -> Result<f64> {
        mean_bound(
            &self.operator,
            &self.prior,
            &self.config.eval_schedule(self.tmax)?,
            points,
            self.config.val_trajectories,
            self.config.seed ^ 0x7661_6c69_6461_7465,
        )
    }

    /// One pass over the shuffled training points.
    pub fn run_epoch(&mut self, train: &[Vec<f64>], val: &[Vec<f64>]) -> Result<EpochRecord> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut self.rng);
        let mut total = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let mut terminals = Vec::with_capacity(batch.len());
            let trajs: Vec<Trajectory> = match self.config.update_mode {
                UpdateMode::Online => {
                    let mut out = Vec::with_capacity(batch.len());
                    for &i in batch {
                        let schedule = self.draw_schedule()?;
                        let traj = heat_trajectory(&self.operator, &self.prior, &schedule, &train[i], &mut self.rng)?;
                        walkback_update(&mut self.operator, &traj, &mut self.optimizer, UpdateMode::Online)?;
                        out.push(traj);
                    }
                    out
                }
                UpdateMode::Accumulated => {
                    let jobs: Vec<(usize, TemperatureSchedule, u64)> = batch
                        .iter()
                        .map(|&i| Ok((i, self.draw_schedule()?, self.rng.random())))
                        .collect::<Result<_>>()?;
                    let op = &self.operator;
                    let prior = &self.prior;
                    let trajs: Vec<Trajectory> = jobs
                        .par_iter()
                        .map(|(i, s, seed)| {
                            heat_trajectory(op, prior, s, &train[*i], &mut ChaCha8Rng::seed_from_u64(*seed))
                        })
                        .collect::<Result<_>>()?;
                    self.operator.zero_grad();
                    let scale = -1.0 / trajs.len() as f64;
                    for traj in &trajs {
                        accumulate_walkback_grad(&mut self.operator, traj, scale)?;
                    }
                    self.optimizer.step(&mut self.operator.nets_mut())?;
                    trajs
                }
            };
            for traj in &trajs {
                total += traj.bound();
                terminals.push(traj.terminal().to_vec());
            }
            self.prior.update(&terminals)?;
        }
        self.epoch += 1;
        let train_bound = total / train.len() as f64;
        let val_points = if val.is_empty() { train } else { val };
        let val_bound = self.validation_bound(val_points)?;
        if !val_bound.is_finite() {
            return Err(WalkbackError::Training(format!(
                "validation bound diverged to {val_bound} at epoch {}",
                self.epoch
            )));
        }
        let reversibility = self.reversibility(&train[0]);
        let record = EpochRecord {
            epoch: self.epoch,
            train_bound,
            val_bound,
            reversibility,
        };
        if val_bound > self.best_val {
            self.best_val = val_bound;
            self.best_epoch = self.epoch;
            self.best_operator = self.operator.clone();
            self.best_prior = self.prior.clone();
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
        }
        debug!("{record}");
        self.log.push(record.clone());
        Ok(record)
    }

    fn draw_schedule(&mut self) -> Result<TemperatureSchedule> {
        let n = self.rng.random_range(0..=self.config.n1);
        self.config.schedule(self.tmax, n)
    }

    fn reversibility(&self, start: &[f64]) -> Option<f64> {
        let len = self.config.reversibility_chain;
        if len <= DEFAULT_BURN_IN {
            return None;
        }
        let mut rng = indexed_rng(self.config.seed, u64::MAX);
        reversibility_report(&self.operator, start, 1.0, len, DEFAULT_BURN_IN, &mut rng)
            .ok()
            .map(|r| r.ratio)
    }

    /// Runs epochs until the epoch limit or early stopping. `after_epoch`
    /// sees the trainer and whether the epoch set a new best.
    pub fn fit(
        &mut self,
        train: &[Vec<f64>],
        val: &[Vec<f64>],
        mut after_epoch: impl FnMut(&Trainer, bool) -> Result<()>,
    ) -> Result<()> {
        while !self.finished() {
            let record = self.run_epoch(train, val)?;
            info!("{record}");
            let improved = self.best_epoch == self.epoch;
            after_epoch(self, improved)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::io::write_json_atomic(path, self)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}

/// Mean per-trajectory bound over `points`, one independent stream per point.
pub fn mean_bound<O: TransitionOperator + Sync>(
    op: &O,
    prior: &Prior,
    schedule: &TemperatureSchedule,
    points: &[Vec<f64>],
    per_point: usize,
    seed: u64,
) -> Result<f64> {
    if points.is_empty() {
        return Err(WalkbackError::Usage("no points to evaluate".into()));
    }
    let sums: Vec<f64> = points
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = indexed_rng(seed, i as u64);
            let mut s = 0.0;
            for _ in 0..per_point {
                s += heat_trajectory(op, prior, schedule, x, &mut rng)?.bound();
            }
            Ok(s / per_point as f64)
        })
        .collect::<Result<_>>()?;
    Ok(sums.iter().sum::<f64>() / points.len() as f64)
}

/// Result of a complete run: the best operator and prior by validation bound.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub operator: Operator,
    pub prior: Prior,
    pub tmax: f64,
    pub best_epoch: usize,
    pub best_val: f64,
    pub log: Vec<EpochRecord>,
}

/// Trains on the dataset's train split with early stopping on its validation split.
pub fn train(dataset: &Dataset, operator: Operator, config: TrainConfig) -> Result<TrainOutcome> {
    let train = dataset.train_points();
    let val = dataset.validation_points();
    let mut trainer = Trainer::new(operator, &train, config)?;
    trainer.fit(&train, &val, |_, _| Ok(()))?;
    Ok(trainer.into_outcome())
}

impl Trainer {
    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            operator: self.best_operator,
            prior: self.best_prior,
            tmax: self.tmax,
            best_epoch: self.best_epoch,
            best_val: self.best_val,
            log: self.log,
        }
    }
}

/// Writes the epoch log as CSV with a header row.
pub fn write_log_csv(log: &[EpochRecord], path: &std::path::Path) -> Result<()> {
    let tmp = crate::io::temp_path(path);
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        for r in log {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{Activation, ParamNet};
    use crate::estimators::elbo_samples;
    use crate::operators::{DiscreteOperator, GaussianConfig, GaussianOperator};

    fn frozen_walk(dim: usize, std: f64) -> GaussianOperator {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mu = ParamNet::mlp(
            dim,
            &[],
            dim,
            Activation::Identity,
            Activation::Identity,
            None,
            &mut rng,
        )
        .unwrap();
        let mut sigma = mu.clone();
        mu.set_params(&vec![0.0; mu.param_count()]).unwrap();
        sigma.set_params(&vec![0.0; sigma.param_count()]).unwrap();
        sigma.output_bias_mut().fill(std.exp_m1().ln());
        GaussianOperator::from_nets(0.0, mu, sigma, 1e-4, std * std).unwrap()
    }

    fn unit_prior(dim: usize) -> Prior {
        Prior::Gaussian(PriorMoments::new(vec![0.0; dim], vec![1.0; dim], 0.1).unwrap())
    }

    fn small_gaussian(seed: u64) -> GaussianOperator {
        let config = GaussianConfig {
            dim: 2,
            hidden: vec![8],
            base_variance: 0.25,
            affine_steps: Some(4),
            ..GaussianConfig::default()
        };
        GaussianOperator::new(&config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn empty_schedule_keeps_only_the_start() {
        let op = frozen_walk(2, 1.0);
        let s = TemperatureSchedule::custom(vec![]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = heat_trajectory(&op, &unit_prior(2), &s, &[0.5, 0.5], &mut rng).unwrap();
        assert_eq!(t.states, vec![vec![0.5, 0.5]]);
        assert!(t.fwd_logp.is_empty() && t.bwd_logp.is_empty());
    }

    #[test]
    fn frozen_walk_has_zero_mean_displacement() {
        let op = frozen_walk(1, 1.0);
        let s = TemperatureSchedule::custom(vec![1.0; 5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let disp: Vec<f64> = (0..n)
            .map(|_| {
                heat_trajectory(&op, &unit_prior(1), &s, &[0.0], &mut rng)
                    .unwrap()
                    .terminal()[0]
            })
            .collect();
        let mean = disp.iter().sum::<f64>() / n as f64;
        // variance after 5 unit steps is 5
        assert!(mean.abs() < 3.0 * (5.0 / n as f64).sqrt());
    }

    #[test]
    fn recorded_log_densities_are_reproducible() {
        let op = small_gaussian(3);
        let s = TemperatureSchedule::heating(8.0, 1, HeatingRule::Doubling).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = heat_trajectory(&op, &unit_prior(2), &s, &[0.1, -0.4], &mut rng).unwrap();
        assert_eq!(t.states.len(), t.len() + 1);
        for k in 0..t.len() {
            let f = op
                .log_density(&t.states[k], &t.states[k + 1], t.temps[k], t.steps[k])
                .unwrap();
            assert_eq!(f.to_bits(), t.fwd_logp[k].to_bits());
        }
    }

    #[test]
    fn empty_trajectory_update_returns_prior_term() {
        let mut op = small_gaussian(4);
        let before = op.params_flat();
        let prior = unit_prior(2);
        let s = TemperatureSchedule::custom(vec![]).unwrap();
        let t = heat_trajectory(&op, &prior, &s, &[0.3, 0.2], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1).unwrap();
        let loss = walkback_update(&mut op, &t, &mut opt, UpdateMode::Online).unwrap();
        assert_eq!(loss, prior.log_density(&[0.3, 0.2]).unwrap());
        assert_eq!(op.params_flat(), before);
    }

    #[test]
    fn one_step_gradient_is_the_normal_score() {
        // d = 1, alpha = 1, linear F_mu(s) = w s + b, constant sigma: the gradient of
        // log N(x; w s + b, sigma^2) is ((x - mu) / sigma^2) * (s, 1)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mu = ParamNet::mlp(1, &[], 1, Activation::Identity, Activation::Identity, None, &mut rng).unwrap();
        mu.set_params(&[0.7, -0.2]).unwrap();
        let mut sigma = mu.clone();
        sigma.set_params(&[0.0, 0.0]).unwrap();
        let sd = std::f64::consts::LN_2; // softplus(0)
        let mut op = GaussianOperator::from_nets(1.0, mu, sigma, 1e-4, 1.0).unwrap();
        let traj = Trajectory {
            states: vec![vec![0.4], vec![1.3]],
            temps: vec![1.0],
            steps: vec![0],
            fwd_logp: vec![0.0],
            bwd_logp: vec![0.0],
            terminal_prior_logp: 0.0,
        };
        op.zero_grad();
        accumulate_walkback_grad(&mut op, &traj, 1.0).unwrap();
        let g = op.grads_flat();
        let (x, s) = (0.4, 1.3);
        let m = 0.7 * s - 0.2;
        let score = (x - m) / (sd * sd);
        assert!((g[0] - score * s).abs() < 1e-12);
        assert!((g[1] - score).abs() < 1e-12);
    }

    #[test]
    fn bound_contribution_matches_the_estimator() {
        let mut op = small_gaussian(6);
        let prior = unit_prior(2);
        let s = TemperatureSchedule::heating(4.0, 2, HeatingRule::Doubling).unwrap();
        let x = [0.2, 0.9];
        let t = heat_trajectory(&op, &prior, &s, &x, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let est = elbo_samples(&op, &prior, &s, &x, 1, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1e-3).unwrap();
        let loss = walkback_update(&mut op, &t, &mut opt, UpdateMode::Accumulated).unwrap();
        assert!((loss - est[0]).abs() < 1e-12);
    }

    #[test]
    fn step_gradient_ignores_other_steps() {
        let mut op = small_gaussian(8);
        let prior = unit_prior(2);
        let s = TemperatureSchedule::heating(8.0, 1, HeatingRule::Doubling).unwrap();
        let t = heat_trajectory(&op, &prior, &s, &[0.0, 0.5], &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        op.zero_grad();
        accumulate_step_grad(&mut op, &t, 2, 1.0).unwrap();
        let g = op.grads_flat();
        let mut shuffled = t.clone();
        // scramble every state other than s_1 and s_2
        shuffled.states[0] = vec![9.0, -9.0];
        shuffled.states[3] = vec![-4.0, 4.0];
        shuffled.states[4] = vec![1.0, 1.0];
        op.zero_grad();
        accumulate_step_grad(&mut op, &shuffled, 2, 1.0).unwrap();
        assert_eq!(op.grads_flat(), g);
        op.zero_grad();
    }

    #[test]
    fn one_parameter_set_serves_every_step() {
        let op = small_gaussian(9);
        let s = TemperatureSchedule::heating(16.0, 3, HeatingRule::Doubling).unwrap();
        assert!(s.len() > 1);
        assert_eq!(op.nets().len(), 2);
        // every step index reads the same networks; only the affine table is per step
        assert_eq!(op.mu_net.affine_steps(), Some(4));
    }

    fn gmm_dataset() -> Dataset {
        crate::data::gen_gmm(
            400,
            &[vec![-2.0], vec![2.0]],
            &[vec![0.3], vec![0.3]],
            &[0.5, 0.5],
            &mut ChaCha8Rng::seed_from_u64(10),
        )
        .unwrap()
    }

    fn gmm_operator() -> Operator {
        let config = GaussianConfig {
            dim: 1,
            hidden: vec![16],
            base_variance: 0.05,
            ..GaussianConfig::default()
        };
        GaussianOperator::new(&config, &mut ChaCha8Rng::seed_from_u64(11))
            .unwrap()
            .into()
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let ds = gmm_dataset();
        let op = gmm_operator();
        let before = op.params_flat();
        let config = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 2,
            reversibility_chain: 0,
            ..TrainConfig::default()
        };
        let out = train(&ds, op, config).unwrap();
        assert_eq!(out.operator.params_flat(), before);
        assert_eq!(out.log.len(), 2);
    }

    #[test]
    fn training_improves_the_validation_bound() {
        let ds = gmm_dataset();
        let config = TrainConfig {
            max_epochs: 8,
            learning_rate: 3e-3,
            reversibility_chain: 0,
            ..TrainConfig::default()
        };
        let train_pts = ds.train_points();
        let val = ds.validation_points();
        let mut trainer = Trainer::new(gmm_operator(), &train_pts, config).unwrap();
        let initial = trainer.validation_bound(&val).unwrap();
        trainer.fit(&train_pts, &val, |_, _| Ok(())).unwrap();
        assert!(trainer.best_val > initial, "{} <= {initial}", trainer.best_val);
    }

    #[test]
    fn prior_tracks_terminal_states_of_a_frozen_operator() {
        let ds = gmm_dataset();
        let config = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 6,
            n1: 0,
            prior_rate: 0.5,
            reversibility_chain: 0,
            ..TrainConfig::default()
        };
        let train_pts = ds.train_points();
        let mut trainer = Trainer::new(gmm_operator(), &train_pts, config).unwrap();
        trainer.fit(&train_pts, &[], |_, _| Ok(())).unwrap();
        let s = trainer.config.eval_schedule(trainer.tmax).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let terminals: Vec<Vec<f64>> = train_pts
            .iter()
            .map(|x| {
                heat_trajectory(&trainer.operator, &trainer.prior, &s, x, &mut rng)
                    .unwrap()
                    .terminal()
                    .to_vec()
            })
            .collect();
        let target = PriorMoments::from_points(&terminals, 1.0).unwrap();
        let Prior::Gaussian(p) = &trainer.prior else {
            panic!("gaussian prior expected")
        };
        // EMA over batches of 64 points: allow a few batch standard errors
        let tol = 4.0 * (target.variance[0] / 64.0).sqrt();
        assert!(
            (p.mean[0] - target.mean[0]).abs() < tol,
            "{} vs {}",
            p.mean[0],
            target.mean[0]
        );
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let ds = gmm_dataset();
        let config = TrainConfig {
            max_epochs: 4,
            patience: 100,
            reversibility_chain: 0,
            ..TrainConfig::default()
        };
        let train_pts = ds.train_points();
        let val = ds.validation_points();
        let mut full = Trainer::new(gmm_operator(), &train_pts, config.clone()).unwrap();
        full.fit(&train_pts, &val, |_, _| Ok(())).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        let mut first = Trainer::new(
            gmm_operator(),
            &train_pts,
            TrainConfig {
                max_epochs: 2,
                ..config.clone()
            },
        )
        .unwrap();
        first.fit(&train_pts, &val, |_, _| Ok(())).unwrap();
        first.save(&path).unwrap();
        let mut resumed = Trainer::load(&path).unwrap();
        resumed.config.max_epochs = 4;
        resumed.fit(&train_pts, &val, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.log, full.log);
        assert_eq!(resumed.operator.params_flat(), full.operator.params_flat());
    }

    #[test]
    fn accumulated_mode_trains_a_discrete_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let op: Operator = DiscreteOperator::learned(3, 0.1, &mut rng).unwrap().into();
        let pts: Vec<Vec<f64>> = (0..60).map(|i| vec![(i % 3 == 0) as u8 as f64]).collect();
        let config = TrainConfig {
            tmax: Some(4.0),
            max_epochs: 3,
            update_mode: UpdateMode::Accumulated,
            learning_rate: 0.05,
            reversibility_chain: 300,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(op, &pts, config).unwrap();
        trainer.fit(&pts, &pts, |_, _| Ok(())).unwrap();
        assert_eq!(trainer.log.len(), 3);
        assert!(trainer.log.iter().all(|r| r.reversibility.is_some_and(f64::is_finite)));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            tmax: Some(0.5),
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn sample_chain_thins_the_output() {
        let op = frozen_walk(1, 0.5);
        let heat = TemperatureSchedule::custom(vec![1.0; 10]).unwrap();
        let cool = TemperatureSchedule::cooling(&heat, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let out = sample_chain(&op, &unit_prior(1), &cool, 4, &mut rng).unwrap();
        // prior draw, steps 4, 8, 12, then the final step 13
        assert_eq!(out.len(), 5);
        assert!(sample_chain(&op, &unit_prior(1), &cool, 0, &mut rng).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let op = small_gaussian(15);
        let heat = TemperatureSchedule::heating(4.0, 1, HeatingRule::Doubling).unwrap();
        let cool = TemperatureSchedule::cooling(&heat, 2).unwrap();
        let a = generate(&op, &unit_prior(2), &cool, 50, 3).unwrap();
        let b = generate(&op, &unit_prior(2), &cool, 50, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
    }
}
