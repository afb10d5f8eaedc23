//! Command-line front end: dataset generation, training, sampling,
//! evaluation and the diagnostic reports.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_circle, gen_gmm, gen_swiss_roll, load_csv, save_csv, Dataset, Scaler};
use crate::diffnet::{Activation, OptimizerKind};
use crate::error::{Result, WalkbackError};
use crate::estimators::{
    elbo_samples, jeffreys_bound_check, log_mean_exp, mutual_info_identity_check, reversibility_report, BoundEstimate,
    JeffreysCheck, ReversibilityReport, DEFAULT_BURN_IN,
};
use crate::io::{read_json, write_atomic, write_json_atomic};
use crate::operators::{
    binarize, BernoulliOperator, DiscreteOperator, GaussianConfig, GaussianOperator, Operator, Prior,
    TransitionOperator,
};
use crate::oracle::{
    detailed_balance_residual, entropy_production, exact_decomposition, exact_marginal, kl_split, path_hysteresis,
    stationary_distribution, time_reversal, total_variation, DiscreteChain, TransitionFamily,
};
use crate::schedule::{ramp_len, tmax_from_variance, HeatingRule, TemperatureSchedule};
use crate::training::{indexed_rng, sample_chain, write_log_csv, TrainConfig, Trainer, UpdateMode};

/// When set, this variable replaces every command's `--seed`.
pub const SEED_ENV: &str = "WALKBACK_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "walkback",
    version,
    about = "Variational walkback: train and inspect transition operators"
)]
pub struct Cli {
    /// Worker threads for trajectory work (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a toy dataset as CSV.
    GenData(GenDataArgs),
    /// Train an operator; writes checkpoint.json, train_log.csv and run_config.json.
    Train(TrainArgs),
    /// Draw samples by running the cooling schedule from the prior.
    Sample(SampleArgs),
    /// Variational and importance-sampling log-likelihood estimates.
    Evaluate(EvaluateArgs),
    /// Time-reversibility report of the temperature-1 chain.
    Diagnose(DiagnoseArgs),
    /// Exact identities of a finite-state chain file.
    Oracle(OracleArgs),
    /// JS, Jeffreys and mutual-information checks for two distributions.
    Divergence(DivergenceArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ToyDataset {
    SwissRoll,
    Circle,
    Gmm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorKind {
    Gaussian,
    Bernoulli,
    /// Learned Metropolis chain over the integer states in the data.
    Discrete,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub dataset: ToyDataset,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Jitter standard deviation; defaults to 0.25 (swiss roll), 0.05 (circle).
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub header: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// CSV file, or a toy dataset name generated on the fly with `--n` points.
    #[arg(long, required_unless_present = "config")]
    pub dataset: Option<String>,
    /// Run configuration JSON from an earlier run; replaces the model and training flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Flat temperature-1 steps present in every trajectory.
    #[arg(long, default_value_t = 0)]
    pub steps: usize,
    /// Extra flat steps drawn uniformly from 0..=n1.
    #[arg(long, default_value_t = 4)]
    pub n1: usize,
    /// Overrides Tmax = total data variance / base variance.
    #[arg(long)]
    pub tmax: Option<f64>,
    #[arg(long, default_value = "doubling")]
    pub rule: HeatingRule,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value = "adam")]
    pub optimizer: OptimizerKind,
    #[arg(long, default_value = "online")]
    pub update_mode: UpdateMode,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub operator: OperatorKind,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    pub hidden: Vec<usize>,
    /// Gaussian noise variance at temperature 1.
    #[arg(long, default_value_t = 0.01)]
    pub base_variance: f64,
    /// Chain length of the per-epoch reversibility column (0 disables it).
    #[arg(long, default_value_t = 250)]
    pub reversibility_chain: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Everything a training run depends on, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: String,
    pub n: usize,
    pub operator: OperatorKind,
    pub hidden: Vec<usize>,
    pub alpha: f64,
    pub base_variance: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub train: TrainConfig,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(WalkbackError::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.base_variance > 0.0) || !self.base_variance.is_finite() {
            return Err(WalkbackError::Config("base variance must be positive".into()));
        }
        if !(self.train_frac > 0.0 && self.val_frac > 0.0 && self.train_frac + self.val_frac <= 1.0) {
            return Err(WalkbackError::Config(
                "split fractions must be positive and sum to at most 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of independent chains.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Temperature-1 steps appended to the cooling schedule.
    #[arg(long, default_value_t = 0)]
    pub extra_flat_steps: usize,
    /// Also dump every k-th state of each chain.
    #[arg(long)]
    pub every_k: Option<usize>,
    /// Destination of the chain dump; defaults to `<out>` with a `.chain.csv` suffix.
    #[arg(long)]
    pub chain_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub header: bool,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV file, or a toy dataset name generated with `--n` points.
    #[arg(long)]
    pub dataset: String,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Heated trajectories per data point.
    #[arg(long, default_value_t = 16)]
    pub n_traj: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub chain_length: usize,
    #[arg(long, default_value_t = DEFAULT_BURN_IN)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct OracleArgs {
    /// Chain file: `temperature` blocks of matrix rows, optional `data` and `prior` lines.
    #[arg(long)]
    pub chain: PathBuf,
    /// Explicit heating temperatures, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub temps: Option<Vec<f64>>,
    /// Build the schedule from `--steps` flat steps and a ramp to this Tmax.
    #[arg(long)]
    pub tmax: Option<f64>,
    #[arg(long, default_value = "doubling")]
    pub rule: HeatingRule,
    /// Flat steps; for a single-temperature file, the schedule length.
    #[arg(long, default_value_t = 0)]
    pub steps: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct DivergenceArgs {
    /// File of probabilities separated by whitespace or commas.
    #[arg(long)]
    pub p: PathBuf,
    #[arg(long)]
    pub q: PathBuf,
    /// Mixture weight of `q`.
    #[arg(long, default_value_t = 0.5)]
    pub pi: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Trained model as written by `train`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub operator: Operator,
    pub prior: Prior,
    pub tmax: f64,
    pub train: TrainConfig,
    /// Maps data units to the model's standardized units.
    pub scaler: Scaler,
    pub best_epoch: usize,
    pub best_val: f64,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn heating(&self) -> Result<TemperatureSchedule> {
        self.train.eval_schedule(self.tmax)
    }
}

#[derive(Serialize)]
struct RunRecord<'a, T: Serialize> {
    command: &'a str,
    seed: u64,
    args: &'a T,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluateReport {
    pub n_points: usize,
    pub n_traj: usize,
    /// Mean over points of the per-point mean bound.
    pub elbo: BoundEstimate,
    /// Mean over points of the per-point importance-sampling estimate.
    pub is_loglik: BoundEstimate,
    /// Add to a standardized-unit log-likelihood to express it in data units.
    pub scaler_log_det: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TemperatureReport {
    pub temperature: f64,
    pub stationary: Option<Vec<f64>>,
    pub detailed_balance_residual: Option<f64>,
    /// Largest entry of `|P_R - P|`; zero exactly for reversible chains.
    pub reversal_max_diff: Option<f64>,
    /// `TV(pi P_R, pi)`.
    pub reversal_stationarity: Option<f64>,
    pub entropy_production: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StateReport {
    pub s0: usize,
    pub log_marginal: f64,
    pub elbo: f64,
    pub kl_posterior: f64,
    pub decomposition_residual: f64,
    pub irreversibility_term: Option<f64>,
    pub annealing_term: Option<f64>,
    pub split_residual: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OracleReport {
    pub n_states: usize,
    pub temperatures: Vec<f64>,
    pub data_dist: Vec<f64>,
    pub prior: Vec<f64>,
    pub per_temperature: Vec<TemperatureReport>,
    pub exact_marginal: Vec<f64>,
    pub marginal_tv_to_data: f64,
    pub per_state: Vec<StateReport>,
    pub max_decomposition_residual: f64,
    pub max_split_residual: Option<f64>,
    pub path_hysteresis: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub pi: f64,
    pub js: f64,
    pub mutual_information: f64,
    pub identity_diff: f64,
    pub jeffreys: JeffreysCheck,
}

/// Seed from `WALKBACK_SEED` when set, else the flag value.
pub fn effective_seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|e| WalkbackError::Usage(format!("{SEED_ENV}=`{v}` is not a u64: {e}"))),
        Err(_) => Ok(flag),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Diagnose(a) => cmd_diagnose(&a),
        Command::Oracle(a) => cmd_oracle(&a),
        Command::Divergence(a) => cmd_divergence(&a),
    }
}

/// `<path>.run.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn write_record<T: Serialize>(out: &Path, command: &str, seed: u64, args: &T) -> Result<()> {
    write_json_atomic(&sidecar_path(out), &RunRecord { command, seed, args })
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => write_json_atomic(path, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn toy(kind: ToyDataset, n: usize, noise: Option<f64>, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    match kind {
        ToyDataset::SwissRoll => gen_swiss_roll(n, noise.unwrap_or(0.25), rng),
        ToyDataset::Circle => gen_circle(n, 1.0, noise.unwrap_or(0.05), rng),
        ToyDataset::Gmm => {
            let means = vec![vec![-2.0, -2.0], vec![-2.0, 2.0], vec![2.0, -2.0], vec![2.0, 2.0]];
            let s = noise.unwrap_or(0.3);
            gen_gmm(n, &means, &vec![vec![s, s]; 4], &[0.25; 4], rng)
        }
    }
}

/// Points from a CSV path, or from a toy generator when `source` names one.
fn load_points(source: &str, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let path = Path::new(source);
    if path.exists() {
        return load_csv(path);
    }
    match ToyDataset::from_str(source, true) {
        Ok(kind) => Ok(toy(kind, n, None, &mut ChaCha8Rng::seed_from_u64(seed))?.points),
        Err(_) => Err(WalkbackError::Usage(format!(
            "dataset `{source}` is neither a file nor one of swiss-roll, circle, gmm"
        ))),
    }
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let seed = effective_seed(args.seed)?;
    let ds = toy(args.dataset, args.n, args.noise, &mut ChaCha8Rng::seed_from_u64(seed))?;
    save_csv(&ds.points, &args.out, args.header)?;
    write_record(&args.out, "gen-data", seed, args)?;
    info!("wrote {} points to {}", ds.len(), args.out.display());
    Ok(())
}

impl TrainArgs {
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut rc = match &self.config {
            Some(path) => read_json::<RunConfig>(path)?,
            None => RunConfig {
                dataset: self.dataset.clone().unwrap_or_default(),
                n: self.n,
                operator: self.operator,
                hidden: self.hidden.clone(),
                alpha: self.alpha,
                base_variance: self.base_variance,
                train_frac: 0.8,
                val_frac: 0.1,
                train: TrainConfig {
                    n1: self.n1,
                    n_flat_min: self.steps,
                    tmax: self.tmax,
                    rule: self.rule,
                    learning_rate: self.lr,
                    optimizer: self.optimizer,
                    batch_size: self.batch_size,
                    max_epochs: self.epochs,
                    patience: self.patience,
                    seed: self.seed,
                    update_mode: self.update_mode,
                    reversibility_chain: self.reversibility_chain,
                    ..TrainConfig::default()
                },
                out: self.out.clone(),
            },
        };
        rc.out = self.out.clone();
        if self.config.is_none() || std::env::var_os(SEED_ENV).is_some() {
            rc.train.seed = effective_seed(rc.train.seed)?;
        }
        rc.validate()?;
        Ok(rc)
    }
}

fn build_operator(rc: &RunConfig, dataset: &Dataset, rng: &mut ChaCha8Rng) -> Result<Operator> {
    let dim = dataset.dim;
    let tmax = match rc.train.tmax {
        Some(t) => t,
        None => tmax_from_variance(dataset.total_variance(), rc.base_variance)?,
    };
    let steps = rc.train.n_flat_min + rc.train.n1 + ramp_len(tmax, rc.train.rule);
    match rc.operator {
        OperatorKind::Gaussian => {
            let config = GaussianConfig {
                dim,
                hidden: rc.hidden.clone(),
                alpha: rc.alpha,
                base_variance: rc.base_variance,
                affine_steps: Some(steps.max(1)),
                ..GaussianConfig::default()
            };
            Ok(GaussianOperator::new(&config, rng)?.into())
        }
        OperatorKind::Bernoulli => {
            Ok(BernoulliOperator::new(dim, &rc.hidden, Activation::Tanh, rc.alpha, Some(steps.max(1)), rng)?.into())
        }
        OperatorKind::Discrete => {
            if dim != 1 {
                return Err(WalkbackError::Domain(
                    "discrete operator needs one integer column".into(),
                ));
            }
            let mut n = 0;
            for p in &dataset.points {
                let v = p[0];
                if v.fract() != 0.0 || v < 0.0 {
                    return Err(WalkbackError::Domain(format!(
                        "discrete state {v} is not a non-negative integer"
                    )));
                }
                n = n.max(v as usize + 1);
            }
            Ok(DiscreteOperator::energy(n.max(2), 0.1, rng)?.into())
        }
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let rc = args.run_config()?;
    let seed = rc.train.seed;
    let mut raw = load_points(&rc.dataset, rc.n, seed)?;
    if rc.operator == OperatorKind::Bernoulli {
        binarize(&mut raw);
    }
    let mut dataset = match rc.operator {
        OperatorKind::Gaussian => Dataset::standardized(raw)?,
        _ => Dataset::new(raw)?,
    };
    dataset.split(rc.train_frac, rc.val_frac, &mut indexed_rng(seed, 1))?;
    let train = dataset.train_points();
    let val = dataset.validation_points();
    if val.is_empty() {
        return Err(WalkbackError::Usage("dataset too small for a validation split".into()));
    }
    let operator = build_operator(&rc, &dataset, &mut indexed_rng(seed, 2))?;
    std::fs::create_dir_all(&rc.out)?;
    write_json_atomic(&rc.out.join("run_config.json"), &rc)?;

    let mut trainer = Trainer::new(operator, &train, rc.train.clone())?;
    info!(
        "training on {} points, validating on {}, Tmax {:.3}",
        train.len(),
        val.len(),
        trainer.tmax
    );
    let log_path = rc.out.join("train_log.csv");
    trainer.fit(&train, &val, |t, _| write_log_csv(&t.log, &log_path))?;
    let outcome = trainer.into_outcome();
    let checkpoint = Checkpoint {
        operator: outcome.operator,
        prior: outcome.prior,
        tmax: outcome.tmax,
        train: rc.train.clone(),
        scaler: dataset.scaler.clone(),
        best_epoch: outcome.best_epoch,
        best_val: outcome.best_val,
    };
    write_json_atomic(&rc.out.join("checkpoint.json"), &checkpoint)?;
    write_log_csv(&outcome.log, &log_path)?;
    info!(
        "best validation bound {:.4} at epoch {} of {}",
        outcome.best_val,
        outcome.best_epoch,
        outcome.log.len()
    );
    Ok(())
}

/// Recorded states of `n` cooling chains, one generator stream per chain.
fn run_chains(
    ck: &Checkpoint,
    cooling: &TemperatureSchedule,
    n: usize,
    every_k: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = indexed_rng(seed, i as u64);
            sample_chain(&ck.operator, &ck.prior, cooling, every_k, &mut rng)
        })
        .collect()
}

pub fn cmd_sample(args: &SampleArgs) -> Result<()> {
    let seed = effective_seed(args.seed)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cooling = TemperatureSchedule::cooling(&ck.heating()?, args.extra_flat_steps)?;
    let k = cooling.len();
    let every_k = args.every_k.unwrap_or(k.max(1));
    let chains = run_chains(&ck, &cooling, args.n, every_k, seed)?;
    let samples: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| ck.scaler.inverse(c.last().expect("non-empty")))
        .collect();
    save_csv(&samples, &args.out, args.header)?;
    if args.every_k.is_some() {
        let path = args.chain_out.clone().unwrap_or_else(|| {
            let mut s = args.out.as_os_str().to_owned();
            s.push(".chain.csv");
            PathBuf::from(s)
        });
        write_chain_dump(&chains, every_k, k, &ck.scaler, &path, args.header)?;
    }
    write_record(&args.out, "sample", seed, args)?;
    info!("wrote {} samples after {k} cooling steps", samples.len());
    Ok(())
}

/// Rows `chain, step, x0, x1, ...` for every recorded state.
fn write_chain_dump(
    chains: &[Vec<Vec<f64>>],
    every_k: usize,
    k: usize,
    scaler: &Scaler,
    path: &Path,
    header: bool,
) -> Result<()> {
    let mut out = String::new();
    if header {
        if let Some(first) = chains.first().and_then(|c| c.first()) {
            out.push_str("chain,step");
            for i in 0..first.len() {
                out.push_str(&format!(",x{i}"));
            }
            out.push('\n');
        }
    }
    for (c, states) in chains.iter().enumerate() {
        for (j, s) in states.iter().enumerate() {
            let step = (j * every_k).min(k);
            out.push_str(&format!("{c},{step}"));
            for v in scaler.inverse(s) {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
    }
    write_atomic(path, out.as_bytes())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let seed = effective_seed(args.seed)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let points: Vec<Vec<f64>> = load_points(&args.dataset, args.n, seed)?
        .iter()
        .map(|p| ck.scaler.transform(p))
        .collect();
    if points.is_empty() {
        return Err(WalkbackError::Usage("no points to evaluate".into()));
    }
    let dim = ck.operator.dim();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(WalkbackError::Dimension {
            expected: dim,
            got: p.len(),
            context: "evaluation point",
        });
    }
    let heat = ck.heating()?;
    let per_point: Vec<(f64, f64)> = points
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = indexed_rng(seed, i as u64);
            let samples = elbo_samples(&ck.operator, &ck.prior, &heat, x, args.n_traj, &mut rng)?;
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            Ok((mean, log_mean_exp(&samples)?))
        })
        .collect::<Result<_>>()?;
    let elbos: Vec<f64> = per_point.iter().map(|p| p.0).collect();
    let lls: Vec<f64> = per_point.iter().map(|p| p.1).collect();
    let report = EvaluateReport {
        n_points: points.len(),
        n_traj: args.n_traj,
        elbo: BoundEstimate::from_samples(&elbos)?,
        is_loglik: BoundEstimate::from_samples(&lls)?,
        scaler_log_det: -ck.scaler.std.iter().map(|s| s.ln()).sum::<f64>(),
    };
    emit_json(&report, args.out.as_deref())?;
    if let Some(out) = &args.out {
        write_record(out, "evaluate", seed, args)?;
    }
    Ok(())
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let seed = effective_seed(args.seed)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cooling = TemperatureSchedule::cooling(&ck.heating()?, 0)?;
    let mut rng = indexed_rng(seed, 0);
    let chain = sample_chain(&ck.operator, &ck.prior, &cooling, cooling.len().max(1), &mut rng)?;
    let start = chain.last().expect("non-empty");
    let report: ReversibilityReport =
        reversibility_report(&ck.operator, start, 1.0, args.chain_length, args.burn_in, &mut rng)?;
    emit_json(&report, args.out.as_deref())?;
    if let Some(out) = &args.out {
        write_record(out, "diagnose", seed, args)?;
    }
    Ok(())
}

fn oracle_schedule(args: &OracleArgs, chain: &DiscreteChain) -> Result<TemperatureSchedule> {
    if let Some(temps) = &args.temps {
        return TemperatureSchedule::custom(temps.clone());
    }
    if let Some(tmax) = args.tmax {
        return TemperatureSchedule::heating(tmax, args.steps, args.rule);
    }
    match &chain.family {
        TransitionFamily::Tabulated(blocks) => {
            let mut temps: Vec<f64> = blocks.iter().map(|(t, _)| *t).collect();
            temps.sort_by(f64::total_cmp);
            TemperatureSchedule::custom(temps)
        }
        _ => TemperatureSchedule::custom(vec![1.0; args.steps.max(1)]),
    }
}

pub fn oracle_report(chain: &DiscreteChain, schedule: &TemperatureSchedule) -> Result<OracleReport> {
    let mut distinct: Vec<f64> = schedule.temps().to_vec();
    distinct.dedup();
    let mut per_temperature = Vec::with_capacity(distinct.len());
    for &t in &distinct {
        let p = chain.family.matrix(t)?;
        let mut rep = TemperatureReport {
            temperature: t,
            stationary: None,
            detailed_balance_residual: None,
            reversal_max_diff: None,
            reversal_stationarity: None,
            entropy_production: None,
        };
        if p.is_irreducible() {
            let (pi, reversal) = time_reversal(&p)?;
            rep.detailed_balance_residual = Some(detailed_balance_residual(&p, &pi));
            rep.reversal_max_diff = Some(p.max_abs_diff(&reversal));
            rep.reversal_stationarity = Some(total_variation(&reversal.propagate(&pi), &pi));
            rep.entropy_production = Some(entropy_production(&p)?);
            rep.stationary = Some(pi);
        } else if let Ok(pi) = stationary_distribution(&p) {
            rep.stationary = Some(pi);
        }
        per_temperature.push(rep);
    }
    let marginal = exact_marginal(chain, schedule)?;
    let mut per_state = Vec::new();
    for (s0, &m) in marginal.iter().enumerate() {
        if !(m > 0.0) {
            continue;
        }
        let d = exact_decomposition(chain, schedule, s0)?;
        let split = kl_split(chain, schedule, s0).ok();
        per_state.push(StateReport {
            s0,
            log_marginal: d.log_marginal,
            elbo: d.elbo,
            kl_posterior: d.kl_posterior,
            decomposition_residual: d.residual,
            irreversibility_term: split.map(|s| s.irreversibility_term),
            annealing_term: split.map(|s| s.annealing_term),
            split_residual: split.map(|s| s.residual),
        });
    }
    let max_decomposition_residual = per_state.iter().map(|s| s.decomposition_residual).fold(0.0, f64::max);
    let max_split_residual = per_state
        .iter()
        .map(|s| s.split_residual)
        .try_fold(0.0, |acc: f64, r| r.map(|r| acc.max(r)));
    Ok(OracleReport {
        n_states: chain.n_states(),
        temperatures: schedule.temps().to_vec(),
        data_dist: chain.data_dist.clone(),
        prior: chain.prior.clone(),
        per_temperature,
        marginal_tv_to_data: total_variation(&marginal, &chain.data_dist),
        exact_marginal: marginal,
        per_state,
        max_decomposition_residual,
        max_split_residual,
        path_hysteresis: path_hysteresis(&chain.family, schedule).ok(),
    })
}

pub fn cmd_oracle(args: &OracleArgs) -> Result<()> {
    let chain = DiscreteChain::load(&args.chain)?;
    let schedule = oracle_schedule(args, &chain)?;
    let report = oracle_report(&chain, &schedule)?;
    emit_json(&report, args.out.as_deref())?;
    if let Some(out) = &args.out {
        write_record(out, "oracle", 0, args)?;
    }
    Ok(())
}

fn read_distribution(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let content = line.split('#').next().unwrap_or("");
        for tok in content
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
        {
            out.push(tok.parse::<f64>().map_err(|e| WalkbackError::Parse {
                line: idx + 1,
                message: format!("`{tok}`: {e}"),
            })?);
        }
    }
    Ok(out)
}

pub fn cmd_divergence(args: &DivergenceArgs) -> Result<()> {
    let p = read_distribution(&args.p)?;
    let q = read_distribution(&args.q)?;
    let (js, mi, diff) = mutual_info_identity_check(&p, &q, args.pi)?;
    let report = DivergenceReport {
        pi: args.pi,
        js,
        mutual_information: mi,
        identity_diff: diff,
        jeffreys: jeffreys_bound_check(&p, &q)?,
    };
    emit_json(&report, args.out.as_deref())?;
    if let Some(out) = &args.out {
        write_record(out, "divergence", 0, args)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse_into_a_run_config() {
        let cli = Cli::try_parse_from([
            "walkback",
            "train",
            "--dataset",
            "circle",
            "--steps",
            "3",
            "--n1",
            "2",
            "--rule",
            "sqrt2",
            "--lr",
            "0.01",
            "--optimizer",
            "sgd",
            "--update-mode",
            "accumulated",
            "--hidden",
            "8,4",
            "--out",
            "o",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else {
            panic!("wrong command")
        };
        let rc = a.run_config().unwrap();
        assert_eq!(rc.train.n_flat_min, 3);
        assert_eq!(rc.train.n1, 2);
        assert_eq!(rc.train.rule, HeatingRule::Sqrt2);
        assert_eq!(rc.train.optimizer, OptimizerKind::Sgd);
        assert_eq!(rc.train.update_mode, UpdateMode::Accumulated);
        assert_eq!(rc.hidden, vec![8, 4]);
    }

    #[test]
    fn run_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rc = RunConfig {
            dataset: "swiss-roll".into(),
            n: 100,
            operator: OperatorKind::Gaussian,
            hidden: vec![16],
            alpha: 0.5,
            base_variance: 0.02,
            train_frac: 0.8,
            val_frac: 0.1,
            train: TrainConfig::default(),
            out: dir.path().join("run"),
        };
        let path = dir.path().join("rc.json");
        write_json_atomic(&path, &rc).unwrap();
        assert_eq!(read_json::<RunConfig>(&path).unwrap(), rc);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(
            Cli::try_parse_from(["walkback", "train", "--dataset", "x", "--rule", "linear", "--out", "o"]).is_err()
        );
        assert!(Cli::try_parse_from(["walkback", "train", "--out", "o"]).is_err());
        let cli = Cli::try_parse_from(["walkback", "train", "--dataset", "x", "--alpha", "2", "--out", "o"]).unwrap();
        let Command::Train(a) = cli.command else {
            panic!("wrong command")
        };
        assert!(matches!(a.run_config(), Err(WalkbackError::Config(_))));
    }

    #[test]
    fn sidecar_appends_suffix() {
        assert_eq!(sidecar_path(Path::new("a/b.csv")), PathBuf::from("a/b.csv.run.json"));
    }

    #[test]
    fn unknown_dataset_is_a_usage_error() {
        assert!(matches!(
            load_points("no-such-thing", 10, 0),
            Err(WalkbackError::Usage(_))
        ));
    }
}
