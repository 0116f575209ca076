//! Mean-field variational treatment of the latents.
//!
//! `q(z_n) = N(μ_n, diag σ_n²)` against the prior `N(0, I)`. The SAS terms
//! are estimated with reparameterized samples `z = μ + σ ⊙ ε`; the KL term is
//! closed form.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{GpError, Result};
use crate::estimators::{sas_value_and_grad, ActiveSplit, EstimatorReport, SasOptions};
use crate::kernel::{KernelParams, LatentPoints};
use crate::matrix::Mat;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior<T> {
    /// `M x Q`
    pub mu: Mat<T>,
    /// `M x Q`, `σ² = exp(log_var)`
    pub log_var: Mat<T>,
}

impl<T: Real> VariationalPosterior<T> {
    pub fn new(mu: Mat<T>, log_var: Mat<T>) -> Result<Self> {
        if mu.shape() != log_var.shape() {
            return Err(GpError::DimensionMismatch(format!(
                "mean is {:?} but log-variance is {:?}",
                mu.shape(),
                log_var.shape()
            )));
        }
        Ok(Self { mu, log_var })
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self { mu: self.mu.select_rows(idx), log_var: self.log_var.select_rows(idx) }
    }

    pub fn variances(&self) -> Mat<T> {
        self.log_var.map(|v| v.exp())
    }
}

/// `KL_n = ½ Σ_q (μ² + σ² - 1 - log σ²)` per row.
pub fn kl_to_standard_normal<T: Real>(q: &VariationalPosterior<T>) -> Vec<T> {
    let half = T::of(0.5);
    (0..q.mu.rows())
        .map(|n| {
            q.mu.row(n)
                .iter()
                .zip(q.log_var.row(n))
                .map(|(&m, &lv)| half * (m * m + lv.exp() - T::one() - lv))
                .sum()
        })
        .collect()
}

/// Standard-normal noise used for one reparameterized draw.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecord<T> {
    pub eps: Mat<T>,
}

pub fn draw_noise<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> NoiseRecord<T> {
    NoiseRecord { eps: Mat::from_fn(rows, cols, |_, _| T::of(StandardNormal.sample(rng))) }
}

/// `z = μ + exp(log_var / 2) ⊙ ε`.
pub fn reparameterize<T: Real>(q: &VariationalPosterior<T>, noise: &NoiseRecord<T>) -> LatentPoints<T> {
    let half = T::of(0.5);
    Mat::from_fn(q.mu.rows(), q.mu.cols(), |i, j| q.mu[(i, j)] + (half * q.log_var[(i, j)]).exp() * noise.eps[(i, j)])
}

pub fn reparam_sample<T: Real, R: Rng + ?Sized>(q: &VariationalPosterior<T>, rng: &mut R) -> (LatentPoints<T>, NoiseRecord<T>) {
    let noise = draw_noise(q.mu.rows(), q.mu.cols(), rng);
    (reparameterize(q, &noise), noise)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboReport<T> {
    /// `total = E[cond] + E[active] - kl_scale · Σ KL_n` (terms averaged over
    /// Monte-Carlo samples).
    pub report: EstimatorReport<T>,
    /// Unscaled per-point KL over the batch.
    pub kl_per_point: Vec<T>,
    /// `kl_scale · Σ KL_n`
    pub kl_term: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboGrad<T> {
    pub kernel: KernelParams<T>,
    pub d_mu: Mat<T>,
    pub d_log_var: Mat<T>,
}

/// ELBO estimate and gradient at fixed noise. One joint draw of all batch
/// latents per entry of `noise`; `kl_scale` is `N / B` under mini-batching.
pub fn elbo_value_and_grad<T: Real>(
    x: &Mat<T>,
    q: &VariationalPosterior<T>,
    split: &ActiveSplit,
    p: &KernelParams<T>,
    noise: &[NoiseRecord<T>],
    kl_scale: T,
    opts: &SasOptions,
) -> Result<(ElboReport<T>, ElboGrad<T>)> {
    if noise.is_empty() {
        return Err(GpError::InvalidConfig("at least one Monte-Carlo sample is required".into()));
    }
    if q.mu.rows() != x.rows() {
        return Err(GpError::DimensionMismatch(format!("x has {} rows, q has {}", x.rows(), q.mu.rows())));
    }
    let (m, qd) = q.mu.shape();
    let inv_s = T::one() / T::of(noise.len() as f64);
    let half = T::of(0.5);
    let mut cond = T::zero();
    let mut active = T::zero();
    let mut kernel = KernelParams::zeros();
    let mut d_mu = Mat::zeros(m, qd);
    let mut d_log_var = Mat::zeros(m, qd);
    for rec in noise {
        if rec.eps.shape() != (m, qd) {
            return Err(GpError::DimensionMismatch("noise record shape".into()));
        }
        let z = reparameterize(q, rec);
        let (r, g) = sas_value_and_grad(x, &z, split, p, opts)?;
        let (wc, wa) = opts.terms.weights();
        if wc {
            cond = cond + r.term_conditional * inv_s;
        }
        if wa {
            active = active + r.term_active * inv_s;
        }
        for k in 0..3 {
            kernel.raw[k] = kernel.raw[k] + g.kernel.raw[k] * inv_s;
        }
        for i in 0..m {
            for j in 0..qd {
                let dz = g.dz[(i, j)] * inv_s;
                d_mu[(i, j)] = d_mu[(i, j)] + dz;
                let sd = (half * q.log_var[(i, j)]).exp();
                d_log_var[(i, j)] = d_log_var[(i, j)] + dz * half * sd * rec.eps[(i, j)];
            }
        }
    }
    let kl = kl_to_standard_normal(q);
    let kl_term = kl_scale * kl.iter().copied().sum::<T>();
    for i in 0..m {
        for j in 0..qd {
            d_mu[(i, j)] = d_mu[(i, j)] - kl_scale * q.mu[(i, j)];
            d_log_var[(i, j)] = d_log_var[(i, j)] - kl_scale * half * (q.log_var[(i, j)].exp() - T::one());
        }
    }
    let report = EstimatorReport {
        total: cond + active - kl_term,
        term_conditional: cond,
        term_active: active,
        per_point: None,
    };
    Ok((ElboReport { report, kl_per_point: kl, kl_term }, ElboGrad { kernel, d_mu, d_log_var }))
}

/// Monte-Carlo ELBO estimate with `num_mc` fresh joint draws.
pub fn elbo_estimate<T: Real, R: Rng + ?Sized>(
    x: &Mat<T>,
    q: &VariationalPosterior<T>,
    split: &ActiveSplit,
    p: &KernelParams<T>,
    rng: &mut R,
    num_mc: usize,
    kl_scale: T,
) -> Result<ElboReport<T>> {
    let noise: Vec<NoiseRecord<T>> = (0..num_mc).map(|_| draw_noise(q.mu.rows(), q.mu.cols(), rng)).collect();
    Ok(elbo_value_and_grad(x, q, split, p, &noise, kl_scale, &SasOptions::default())?.0)
}
