//! Predictive-quality metrics and nearest-neighbour evaluation of latents.

use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::estimators::conditional_moments_with;
use crate::kernel::{KernelParams, LatentPoints};
use crate::linalg::JitterPolicy;
use crate::matrix::Mat;
use crate::real::Real;

/// Gaussian predictive per test point; one variance shared by all output
/// dimensions of a point.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveOutput<T> {
    /// `N* x D`
    pub mu_star: Mat<T>,
    /// `N*`, positive
    pub v_star: Vec<T>,
}

impl<T: Real> PredictiveOutput<T> {
    pub fn new(mu_star: Mat<T>, v_star: Vec<T>) -> Result<Self> {
        if v_star.len() != mu_star.rows() {
            return Err(GpError::DimensionMismatch(format!(
                "{} variances for {} predictive means",
                v_star.len(),
                mu_star.rows()
            )));
        }
        if let Some(v) = v_star.iter().find(|v| !(**v > T::zero())) {
            return Err(GpError::NonFinite(format!("predictive variance {v} is not positive")));
        }
        Ok(Self { mu_star, v_star })
    }
}

/// Predictive distribution of test latents given an observed active set.
pub fn predict<T: Real>(
    x_active: &Mat<T>,
    z_active: &LatentPoints<T>,
    z_test: &LatentPoints<T>,
    p: &KernelParams<T>,
    jitter: &JitterPolicy,
) -> Result<PredictiveOutput<T>> {
    let m = conditional_moments_with(x_active, z_active, z_test, p, jitter)?;
    PredictiveOutput::new(m.means, m.variances)
}

fn check<T: Real>(x: &Mat<T>, pred: &PredictiveOutput<T>) -> Result<()> {
    if x.shape() != pred.mu_star.shape() {
        return Err(GpError::DimensionMismatch(format!(
            "test data is {:?} but predictions are {:?}",
            x.shape(),
            pred.mu_star.shape()
        )));
    }
    if x.rows() == 0 || x.cols() == 0 {
        return Err(GpError::DimensionMismatch("empty test set".into()));
    }
    Ok(())
}

/// Root mean squared error over all `N* · D` entries.
pub fn rmse<T: Real>(x: &Mat<T>, pred: &PredictiveOutput<T>) -> Result<f64> {
    check(x, pred)?;
    let s: f64 = x.as_slice().iter().zip(pred.mu_star.as_slice()).map(|(&a, &b)| (a - b).f64().powi(2)).sum();
    Ok((s / x.as_slice().len() as f64).sqrt())
}

/// Mean absolute error over all `N* · D` entries.
pub fn mae<T: Real>(x: &Mat<T>, pred: &PredictiveOutput<T>) -> Result<f64> {
    check(x, pred)?;
    let s: f64 = x.as_slice().iter().zip(pred.mu_star.as_slice()).map(|(&a, &b)| (a - b).f64().abs()).sum();
    Ok(s / x.as_slice().len() as f64)
}

/// Negative log predictive density per entry:
/// `½ log 2π + (1 / 2N*D) Σ_n Σ_d [log v_n + (x_nd - μ_nd)² / v_n]`.
pub fn nlpd<T: Real>(x: &Mat<T>, pred: &PredictiveOutput<T>) -> Result<f64> {
    check(x, pred)?;
    let d = x.cols();
    let mut s = 0.0;
    for (n, &v) in pred.v_star.iter().enumerate() {
        let v = v.f64();
        let r2: f64 = x.row(n).iter().zip(pred.mu_star.row(n)).map(|(&a, &b)| (a - b).f64().powi(2)).sum();
        s += d as f64 * v.ln() + r2 / v;
    }
    Ok(0.5 * (2.0 * std::f64::consts::PI).ln() + s / (2.0 * x.as_slice().len() as f64))
}

/// 1-nearest-neighbour classification accuracy in latent space (Euclidean,
/// ties to the lowest training index).
pub fn knn_accuracy<T: Real>(
    train_latents: &Mat<T>,
    train_labels: &[u32],
    test_latents: &Mat<T>,
    test_labels: &[u32],
) -> Result<f64> {
    if train_latents.rows() != train_labels.len() || test_latents.rows() != test_labels.len() {
        return Err(GpError::DimensionMismatch("latents and labels differ in length".into()));
    }
    if train_latents.cols() != test_latents.cols() {
        return Err(GpError::DimensionMismatch("train and test latents differ in dimension".into()));
    }
    if train_labels.is_empty() || test_labels.is_empty() {
        return Err(GpError::DimensionMismatch("empty train or test set".into()));
    }
    let mut hits = 0usize;
    for (t, &label) in test_labels.iter().enumerate() {
        let q = test_latents.row(t);
        let mut best = (f64::INFINITY, 0usize);
        for i in 0..train_latents.rows() {
            let d: f64 = q.iter().zip(train_latents.row(i)).map(|(&a, &b)| (a - b).f64().powi(2)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        if train_labels[best.1] == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / test_labels.len() as f64)
}

/// Metrics written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBlock {
    pub rmse: f64,
    pub mae: f64,
    pub nlpd: f64,
    /// Present when both train and test labels exist.
    pub knn_accuracy: Option<f64>,
    pub n_test: usize,
    /// Number of random training active sets the predictive metrics are
    /// averaged over.
    pub active_sets: usize,
}
