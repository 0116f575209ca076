//! Per-batch training objectives over a full [`ModelParams`].
//!
//! The value returned is the estimator itself (larger is better); its
//! gradient is taken with respect to every tensor present in the parameter
//! set. Latents come from the encoder when one is present and from the free
//! table otherwise.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::amortization::{encode_backward, encode_gaussian_backward, encode_gaussian_taped, encode_taped};
use crate::bayes::{elbo_value_and_grad, NoiseRecord, VariationalPosterior};
use crate::error::{GpError, Result};
use crate::estimators::{sas_value_and_grad, ActiveSplit, EstimatorReport, SasOptions, SasTerms};
use crate::kernel::LatentPoints;
use crate::linalg::JitterPolicy;
use crate::matrix::Mat;
use crate::optim::ModelParams;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Point latents, objective = SAS estimate.
    #[default]
    Sas,
    /// Mean-field Gaussian latents, objective = SAS-based ELBO.
    BayesianSas,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sas => "sas",
            Mode::BayesianSas => "bayesian-sas",
        })
    }
}

impl FromStr for Mode {
    type Err = GpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sas" => Ok(Mode::Sas),
            "bayesian-sas" | "bsas" => Ok(Mode::BayesianSas),
            _ => Err(GpError::InvalidConfig(format!("unknown mode `{s}` (sas | bayesian-sas)"))),
        }
    }
}

/// Which part of the SAS objective is optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    ConditionalOnly,
    ActiveOnly,
}

impl Ablation {
    pub fn terms(self) -> SasTerms {
        match self {
            Ablation::None => SasTerms::Full,
            Ablation::ConditionalOnly => SasTerms::ConditionalOnly,
            Ablation::ActiveOnly => SasTerms::ActiveOnly,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::ConditionalOnly => "conditional-only",
            Ablation::ActiveOnly => "active-only",
        })
    }
}

impl FromStr for Ablation {
    type Err = GpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "conditional-only" => Ok(Ablation::ConditionalOnly),
            "active-only" => Ok(Ablation::ActiveOnly),
            _ => Err(GpError::InvalidConfig(format!(
                "unknown ablation `{s}` (none | conditional-only | active-only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveOptions {
    pub mode: Mode,
    pub ablation: Ablation,
    pub jitter: JitterPolicy,
    /// Multiplier on the summed KL term (`N / B` under mini-batching).
    pub kl_scale: f64,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self { mode: Mode::Sas, ablation: Ablation::None, jitter: JitterPolicy::default(), kl_scale: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct BatchEval<T> {
    /// Estimator value (SAS estimate or ELBO) for the batch.
    pub value: T,
    pub report: EstimatorReport<T>,
    /// Unscaled per-point KL (Bayesian mode).
    pub kl: Option<Vec<T>>,
}

/// Latents of a batch: encoder output or table rows.
pub fn batch_latents<T: Real>(params: &ModelParams<T>, x: &Mat<T>, rows: &[usize]) -> Result<LatentPoints<T>> {
    match (&params.mean_net, &params.latents) {
        (Some(net), _) => crate::amortization::encode(x, net),
        (None, Some(table)) => Ok(table.points(rows)),
        (None, None) => Err(GpError::InvalidConfig("no encoder and no latent table".into())),
    }
}

/// Variational posterior of a batch: encoder pair output or table rows.
pub fn batch_posterior<T: Real>(params: &ModelParams<T>, x: &Mat<T>, rows: &[usize]) -> Result<VariationalPosterior<T>> {
    match (&params.mean_net, &params.var_net, &params.latents) {
        (Some(m), Some(v), _) => crate::amortization::encode_gaussian(x, m, v),
        (None, None, Some(table)) => table.posterior(rows),
        _ => Err(GpError::InvalidConfig("Bayesian mode needs both encoders or a latent table with variances".into())),
    }
}

/// Objective value and gradient for one batch.
///
/// `x` holds the batch rows, `rows` their dataset indices (used to address
/// the free latent table) and `split` indexes into the batch. Bayesian mode
/// requires the reparameterization noise, which is held fixed.
pub fn batch_value_and_grad<T: Real>(
    params: &ModelParams<T>,
    x: &Mat<T>,
    rows: &[usize],
    split: &ActiveSplit,
    opts: &ObjectiveOptions,
    noise: Option<&[NoiseRecord<T>]>,
) -> Result<(BatchEval<T>, ModelParams<T>)> {
    if rows.len() != x.rows() {
        return Err(GpError::DimensionMismatch(format!("{} row indices for a batch of {}", rows.len(), x.rows())));
    }
    let sas_opts = SasOptions { terms: opts.ablation.terms(), jitter: opts.jitter };
    let mut grad = params.zeros_like();
    match opts.mode {
        Mode::Sas => {
            let (z, tape) = match (&params.mean_net, &params.latents) {
                (Some(net), _) => {
                    let (z, tape) = encode_taped(x, net)?;
                    (z, Some(tape))
                }
                (None, Some(table)) => (table.points(rows), None),
                (None, None) => return Err(GpError::InvalidConfig("no encoder and no latent table".into())),
            };
            let (report, g) = sas_value_and_grad(x, &z, split, &params.kernel, &sas_opts)?;
            grad.kernel = g.kernel;
            match (tape, &params.mean_net) {
                (Some(tape), Some(net)) => grad.mean_net = Some(encode_backward(net, &tape, &g.dz, false)?.0),
                _ => grad.latents.as_mut().expect("table present").scatter_add(rows, &g.dz, None),
            }
            Ok((BatchEval { value: report.total, report, kl: None }, grad))
        }
        Mode::BayesianSas => {
            let noise = noise.ok_or_else(|| GpError::InvalidConfig("Bayesian objective needs noise".into()))?;
            let kl_scale = T::of(opts.kl_scale);
            match (&params.mean_net, &params.var_net, &params.latents) {
                (Some(m), Some(v), _) => {
                    let (q, tape) = encode_gaussian_taped(x, m, v)?;
                    let (r, g) = elbo_value_and_grad(x, &q, split, &params.kernel, noise, kl_scale, &sas_opts)?;
                    let (gm, gv) = encode_gaussian_backward(m, v, &tape, &g.d_mu, &g.d_log_var)?;
                    grad.kernel = g.kernel;
                    grad.mean_net = Some(gm);
                    grad.var_net = Some(gv);
                    Ok((BatchEval { value: r.report.total, report: r.report, kl: Some(r.kl_per_point) }, grad))
                }
                (None, None, Some(table)) => {
                    let q = table.posterior(rows)?;
                    let (r, g) = elbo_value_and_grad(x, &q, split, &params.kernel, noise, kl_scale, &sas_opts)?;
                    grad.kernel = g.kernel;
                    grad.latents.as_mut().expect("table present").scatter_add(rows, &g.d_mu, Some(&g.d_log_var));
                    Ok((BatchEval { value: r.report.total, report: r.report, kl: Some(r.kl_per_point) }, grad))
                }
                _ => Err(GpError::InvalidConfig(
                    "Bayesian mode needs both encoders or a latent table with variances".into(),
                )),
            }
        }
    }
}
