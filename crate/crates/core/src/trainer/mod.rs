//! Training loops, evaluation and run exports.
//!
//! Each step draws a batch, splits it at random into active and hold-out
//! points, evaluates the configured objective and takes one Adam step on its
//! negation. Runs are deterministic given the configuration.

mod checkpoint;
mod config;
mod export;
pub mod verify;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, Tensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{DataSource, Precision, RunConfig};
pub use export::{read_curves, write_curves, write_latents, CurveRow};

use crate::amortization::{encode, encode_gaussian, LatentParamTable, MlpParams, HIDDEN_UNITS};
use crate::bayes::draw_noise;
use crate::data::{batches, load_csv, load_idx, synth_gp_dataset, write_atomic, BatchPlan, Dataset};
use crate::error::{GpError, Result};
use crate::estimators::{exact_log_marginal_with, random_split};
use crate::kernel::KernelParams;
use crate::linalg::JitterPolicy;
use crate::matrix::Mat;
use crate::metrics::{knn_accuracy, mae, nlpd, predict, rmse, MetricsBlock};
use crate::objective::{batch_value_and_grad, Ablation, Mode, ObjectiveOptions};
use crate::optim::{AdamConfig, ModelParams, ParamSet};
use crate::real::Real;

/// Largest training set for which the final exact log marginal is reported.
pub const EXACT_EVAL_MAX: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Batch objectives summed over the epoch, divided by the number of
    /// points seen.
    pub objective: f64,
    pub seconds: f64,
    pub amplitude: f64,
    pub lengthscale: f64,
    pub noise: f64,
    /// Mean and minimum per-point KL over the epoch (Bayesian mode).
    pub mean_kl: Option<f64>,
    pub min_kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config_hash: String,
    pub config: String,
    pub epochs: Vec<EpochRecord>,
    pub metrics: Option<MetricsBlock>,
    /// `log p(x | z)` of the whole training set at the final parameters
    /// (means in Bayesian mode); absent above [`EXACT_EVAL_MAX`] rows.
    pub final_exact_log_marginal: Option<f64>,
}

impl RunLog {
    pub fn objectives(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.objective).collect()
    }

    /// Mean objective over the first and last `k` epochs.
    pub fn head_tail_means(&self, k: usize) -> (f64, f64) {
        let o = self.objectives();
        let k = k.min(o.len()).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        (mean(&o[..k]), mean(&o[o.len() - k..]))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: RunLog,
    /// Final parameters, widened to 64-bit.
    pub params: ModelParams<f64>,
    pub train: Dataset,
    pub test: Dataset,
}

/// Generating kernel of the `synth` source: (amplitude, lengthscale, noise).
/// Smooth relative to z ~ N(0, I), so neighbouring rows are correlated.
pub const SYNTH_KERNEL: (f64, f64, f64) = (1.0, 1.0, 0.1);

/// Loads the configured data source and cuts the train/test subsets.
pub fn prepare_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let full = match &cfg.data {
        DataSource::Synth { d } => {
            let (a, l, s) = SYNTH_KERNEL;
            let p = KernelParams::from_natural(a, l, s);
            synth_gp_dataset(cfg.n_train + cfg.n_test, cfg.q, *d, &p, cfg.data_seed)?.0
        }
        DataSource::Idx { images, labels } => load_idx(images, labels.as_deref())?,
        DataSource::Csv { path, labels } => load_csv(path, *labels)?,
    };
    full.shuffled_split(cfg.n_train, cfg.n_test, cfg.data_seed)
}

fn init_params(cfg: &RunConfig, d: usize, n: usize) -> ModelParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [a, l, s] = cfg.kernel_init;
    let bayes = cfg.mode == Mode::BayesianSas;
    let sizes = [d, HIDDEN_UNITS[0], HIDDEN_UNITS[1], cfg.q];
    let (mean_net, var_net, latents) = if cfg.amortized {
        let m = MlpParams::init(sizes, &mut rng);
        let v = bayes.then(|| MlpParams::init(sizes, &mut rng));
        (Some(m), v, None)
    } else {
        (None, None, Some(LatentParamTable::init(n, cfg.q, bayes, &mut rng)))
    };
    ModelParams { kernel: KernelParams::from_natural(a, l, s), mean_net, var_net, latents }
}

/// Seed of the stream that draws active sets and reparameterization noise.
fn step_seed(seed: u64) -> u64 {
    seed ^ 0xD1B5_4A32_D192_ED03
}

fn fit<T: Real>(cfg: &RunConfig, train: &Dataset) -> Result<(Vec<EpochRecord>, ModelParams<f64>)> {
    let n = train.n();
    let x: Mat<T> = train.x.cast();
    let mut ps = ParamSet::new(init_params(cfg, train.d(), n).cast::<T>());
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed));
    let plan = BatchPlan { batch_size: cfg.batch, seed: cfg.seed, drop_last: true };
    let adam = AdamConfig::with_lr(cfg.lr);
    let bayes = cfg.mode == Mode::BayesianSas;
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let (mut total, mut seen) = (0.0, 0usize);
        let (mut kl_sum, mut kl_min) = (0.0, f64::INFINITY);
        for rows in batches(n, &plan, epoch as u64) {
            let xb = x.select_rows(&rows);
            let split = random_split(rows.len(), cfg.active_set, &mut rng)?;
            let noise = bayes.then(|| (0..cfg.num_mc).map(|_| draw_noise(rows.len(), cfg.q, &mut rng)).collect::<Vec<_>>());
            let opts = ObjectiveOptions {
                mode: cfg.mode,
                ablation: cfg.ablation,
                jitter: JitterPolicy::relative(cfg.jitter),
                kl_scale: n as f64 / rows.len() as f64,
            };
            let (eval, grad) = batch_value_and_grad(&ps.values, &xb, &rows, &split, &opts, noise.as_deref())?;
            if !eval.value.is_finite() {
                return Err(GpError::NonFinite(format!("objective {} at epoch {}", eval.value, epoch + 1)));
            }
            if let Some(kl) = &eval.kl {
                for v in kl {
                    kl_sum += v.f64();
                    kl_min = kl_min.min(v.f64());
                }
            }
            ps.grads.axpy(-T::one(), &grad)?;
            ps.adam_step(&adam)?;
            if !ps.values.is_finite() {
                return Err(GpError::NonFinite(format!("parameters after a step in epoch {}", epoch + 1)));
            }
            total += eval.value.f64();
            seen += rows.len();
        }
        let k = ps.values.kernel;
        records.push(EpochRecord {
            epoch: epoch + 1,
            objective: total / seen as f64,
            seconds: start.elapsed().as_secs_f64(),
            amplitude: k.amplitude().f64(),
            lengthscale: k.lengthscale().f64(),
            noise: k.noise().f64(),
            mean_kl: bayes.then(|| kl_sum / seen as f64),
            min_kl: bayes.then_some(kl_min),
        });
    }
    Ok((records, ps.values.cast()))
}

/// Latent means (and variances in Bayesian mode) of `ds` under `params`.
/// Free latent tables only cover the training rows.
pub fn latents_of(params: &ModelParams<f64>, ds: &Dataset) -> Result<(Mat<f64>, Option<Mat<f64>>)> {
    match (&params.mean_net, &params.var_net, &params.latents) {
        (Some(m), Some(v), _) => {
            let q = encode_gaussian(&ds.x, m, v)?;
            let var = q.variances();
            Ok((q.mu, Some(var)))
        }
        (Some(m), None, _) => Ok((encode(&ds.x, m)?, None)),
        (None, _, Some(t)) => {
            if t.n() != ds.n() {
                return Err(GpError::InvalidConfig("free latents exist only for the training rows".into()));
            }
            Ok((t.z.clone(), t.log_var.as_ref().map(|lv| lv.map(f64::exp))))
        }
        (None, _, None) => Err(GpError::InvalidConfig("no encoder and no latent table".into())),
    }
}

/// Predictive metrics on `test`, conditioning on `cfg.eval_active_sets`
/// random training active sets of size `cfg.active_set` (metrics averaged
/// over the draws), plus 1-NN accuracy when labels exist. `None` when there
/// is no test set or no encoder to place test points.
pub fn evaluate(params: &ModelParams<f64>, cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<Option<MetricsBlock>> {
    if test.n() == 0 || params.mean_net.is_none() {
        return Ok(None);
    }
    let (z_train, _) = latents_of(params, train)?;
    let (z_test, _) = latents_of(params, test)?;
    let jitter = JitterPolicy::relative(cfg.jitter);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E6C_63D0_676A_9A99);
    let a = cfg.active_set.min(train.n());
    let (mut r, mut m, mut l) = (0.0, 0.0, 0.0);
    for _ in 0..cfg.eval_active_sets {
        let mut idx = index::sample(&mut rng, train.n(), a).into_vec();
        idx.sort_unstable();
        let pred = predict(&train.x.select_rows(&idx), &z_train.select_rows(&idx), &z_test, &params.kernel, &jitter)?;
        r += rmse(&test.x, &pred)?;
        m += mae(&test.x, &pred)?;
        l += nlpd(&test.x, &pred)?;
    }
    let s = cfg.eval_active_sets as f64;
    let knn = match (&train.labels, &test.labels) {
        (Some(a), Some(b)) => Some(knn_accuracy(&z_train, a, &z_test, b)?),
        _ => None,
    };
    Ok(Some(MetricsBlock {
        rmse: r / s,
        mae: m / s,
        nlpd: l / s,
        knn_accuracy: knn,
        n_test: test.n(),
        active_sets: cfg.eval_active_sets,
    }))
}

/// Trains on already prepared data, then evaluates.
pub fn train_on(cfg: &RunConfig, train: Dataset, test: Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.n() < cfg.batch {
        return Err(GpError::InvalidConfig(format!("{} training rows for batch size {}", train.n(), cfg.batch)));
    }
    let (epochs, params) = match cfg.precision {
        Precision::F64 => fit::<f64>(cfg, &train)?,
        Precision::F32 => fit::<f32>(cfg, &train)?,
    };
    let metrics = evaluate(&params, cfg, &train, &test)?;
    let final_exact_log_marginal = if train.n() <= EXACT_EVAL_MAX {
        let (z, _) = latents_of(&params, &train)?;
        Some(exact_log_marginal_with(&train.x, &z, &params.kernel, &JitterPolicy::relative(cfg.jitter))?)
    } else {
        None
    };
    let log = RunLog { config_hash: cfg.hash(), config: cfg.run_text(), epochs, metrics, final_exact_log_marginal };
    Ok(TrainOutcome { log, params, train, test })
}

/// Loads data, trains, evaluates and, when `cfg.out` is set, writes the run
/// exports.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, test) = prepare_data(cfg)?;
    let outcome = train_on(cfg, train, test)?;
    if let Some(out) = &cfg.out {
        write_outputs(out, cfg, &outcome)?;
    }
    Ok(outcome)
}

/// Point-latent training.
pub fn train_sas(cfg: &RunConfig) -> Result<TrainOutcome> {
    if cfg.mode != Mode::Sas {
        return Err(GpError::InvalidConfig("train_sas needs mode = sas".into()));
    }
    train(cfg)
}

/// Variational training.
pub fn train_bayesian_sas(cfg: &RunConfig) -> Result<TrainOutcome> {
    if cfg.mode != Mode::BayesianSas {
        return Err(GpError::InvalidConfig("train_bayesian_sas needs mode = bayesian-sas".into()));
    }
    train(cfg)
}

/// Point-latent training on one term of the objective.
pub fn run_ablation(cfg: &RunConfig) -> Result<TrainOutcome> {
    if cfg.ablation == Ablation::None {
        return Err(GpError::InvalidConfig("run_ablation needs ablation ≠ none".into()));
    }
    train_sas(cfg)
}

pub const CURVES_FILE: &str = "curves.csv";
pub const LATENTS_FILE: &str = "latents.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const RUN_LOG_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Writes `curves.csv`, `latents.csv` (training rows), `metrics.json`,
/// `run.json` and `checkpoint.json` into `dir`.
pub fn write_outputs(dir: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let path = |f: &str| dir.join(f);
    write_curves(&path(CURVES_FILE), &outcome.log.epochs)?;
    let (z, var) = latents_of(&outcome.params, &outcome.train)?;
    write_latents(&path(LATENTS_FILE), &z, var.as_ref(), outcome.train.labels.as_deref())?;
    let metrics = serde_json::json!({
        "config_hash": outcome.log.config_hash,
        "metrics": outcome.log.metrics,
        "final_exact_log_marginal": outcome.log.final_exact_log_marginal,
        "final_objective": outcome.log.epochs.last().map(|e| e.objective),
    });
    write_atomic(&path(METRICS_FILE), to_pretty(&metrics)?.as_bytes())?;
    write_atomic(&path(RUN_LOG_FILE), to_pretty(&outcome.log)?.as_bytes())?;
    Checkpoint::from_params(&outcome.params, cfg.seed, cfg.run_text()).save(&path(CHECKPOINT_FILE))?;
    Ok([CURVES_FILE, LATENTS_FILE, METRICS_FILE, RUN_LOG_FILE, CHECKPOINT_FILE].map(path).to_vec())
}

pub(crate) fn to_pretty<S: Serialize>(v: &S) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| GpError::InvalidConfig(e.to_string()))
}
