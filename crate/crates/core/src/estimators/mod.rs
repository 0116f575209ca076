//! Log-marginal-likelihood estimators for GP decoders.
//!
//! * [`exact_log_marginal`]: `log N(x | 0, K_NN + σ_n² I)` summed over the
//!   output dimensions.
//! * [`sas_estimate`]: active term plus conditionally independent hold-out
//!   log-predictives for one random split of a batch.
//! * [`exact_two_term`]: the same split scored with the full hold-out
//!   covariance, which recovers the exact marginal.
//! * [`cv`]: leave-r-out cross-validation scores and the identities that tie
//!   them to the marginal likelihood.

pub mod cv;
mod sas;
mod split;

pub use cv::{
    cv_identity_check, cv_score, unbiased_marginal_sample, unbiased_marginal_term, CvIdentity, CvMode,
    DEFAULT_EXHAUSTIVE_CAP, IDENTITY_MAX_N,
};
pub use sas::{
    conditional_moments, conditional_moments_with, exact_two_term, lower_bound_tendency, sas_estimate,
    sas_value_and_grad, ConditionalMoments, EstimatorReport, LowerBoundReport, SasGrad, SasOptions, SasTerms,
};
pub use split::{random_split, ActiveSplit};

use crate::error::{GpError, Result};
use crate::kernel::{gram, KernelParams, LatentPoints};
use crate::linalg::{cholesky_with_policy, gaussian_logpdf_zero_mean, JitterPolicy};
use crate::matrix::Mat;
use crate::real::Real;

/// Largest problem the exact (O(N³)) oracles accept.
pub const ORACLE_CAP: usize = 4096;

pub fn exact_log_marginal<T: Real>(x: &Mat<T>, z: &LatentPoints<T>, p: &KernelParams<T>) -> Result<T> {
    exact_log_marginal_with(x, z, p, &JitterPolicy::EXACT_FIRST)
}

pub fn exact_log_marginal_with<T: Real>(
    x: &Mat<T>,
    z: &LatentPoints<T>,
    p: &KernelParams<T>,
    jitter: &JitterPolicy,
) -> Result<T> {
    if x.rows() > ORACLE_CAP {
        return Err(GpError::CapExceeded { needed: x.rows() as u128, cap: ORACLE_CAP as u128 });
    }
    if x.rows() != z.rows() {
        return Err(GpError::DimensionMismatch(format!("x has {} rows, z has {}", x.rows(), z.rows())));
    }
    let f = cholesky_with_policy(&gram(z, p, true), jitter)?;
    gaussian_logpdf_zero_mean(x, &f)
}

/// Exact log marginal and its gradient: the SAS objective with every point
/// in the active set.
pub fn exact_log_marginal_grad<T: Real>(
    x: &Mat<T>,
    z: &LatentPoints<T>,
    p: &KernelParams<T>,
) -> Result<(T, SasGrad<T>)> {
    if x.rows() > ORACLE_CAP {
        return Err(GpError::CapExceeded { needed: x.rows() as u128, cap: ORACLE_CAP as u128 });
    }
    let split = ActiveSplit::new((0..x.rows()).collect(), Vec::new(), x.rows())?;
    let (r, g) = sas_value_and_grad(x, z, &split, p, &SasOptions::default())?;
    Ok((r.total, g))
}
