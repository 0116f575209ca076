//! Leave-r-out cross-validation scores.
//!
//! `S_CV(x|r)` averages, over every hold-out set `R` of size `r`, the mean
//! hold-out log-predictive `(1/r) Σ_{n∈R} log p(x_n | x_A, z)`. Summing it
//! over `r = 1..N` gives `log p(x|z)`; splitting that sum at any `R` gives
//! the cumulative part `S_CCV(x|R) = Σ_{r≤R} S_CV(x|r)` and the
//! preparatory part `S_PCV(x|R) = E_A[log p(x_A | z_A)]` with `|A| = N - R`.

use itertools::Itertools;
use rand::seq::index;
use rand::{Rng, RngCore};

use super::sas::sas_estimate;
use super::split::ActiveSplit;
use super::{exact_log_marginal, ORACLE_CAP};
use crate::error::{GpError, Result};
use crate::kernel::{KernelParams, LatentPoints};
use crate::matrix::Mat;
use crate::real::Real;

pub const DEFAULT_EXHAUSTIVE_CAP: u128 = 1_000_000;
/// Largest `N` for [`cv_identity_check`] (all `2^N` subsets are visited).
pub const IDENTITY_MAX_N: usize = 8;

pub enum CvMode<'a> {
    /// Average over all `C(N, r)` hold-out sets; fails if that exceeds `cap`.
    Exhaustive { cap: u128 },
    /// Monte-Carlo average over uniformly drawn hold-out sets.
    Sampled { num_permutations: usize, rng: &'a mut dyn RngCore },
}

impl Default for CvMode<'_> {
    fn default() -> Self {
        CvMode::Exhaustive { cap: DEFAULT_EXHAUSTIVE_CAP }
    }
}

pub(crate) fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Sum of hold-out log-predictives for one hold-out set.
fn holdout_sum<T: Real>(x: &Mat<T>, z: &LatentPoints<T>, p: &KernelParams<T>, holdout: Vec<usize>) -> Result<T> {
    let split = ActiveSplit::from_holdout(holdout, x.rows())?;
    Ok(sas_estimate(x, z, &split, p)?.term_conditional)
}

/// `S_CV(x | r)`.
pub fn cv_score<T: Real>(x: &Mat<T>, z: &LatentPoints<T>, p: &KernelParams<T>, r: usize, mode: CvMode<'_>) -> Result<T> {
    let n = x.rows();
    if r == 0 || r > n {
        return Err(GpError::InvalidSplit(format!("hold-out size {r} must be in 1..={n}")));
    }
    let rt = T::of(r as f64);
    match mode {
        CvMode::Exhaustive { cap } => {
            let c = binomial(n, r);
            if c > cap {
                return Err(GpError::CapExceeded { needed: c, cap });
            }
            let mut acc = T::zero();
            for holdout in (0..n).combinations(r) {
                acc = acc + holdout_sum(x, z, p, holdout)? / rt;
            }
            Ok(acc / T::of(c as f64))
        }
        CvMode::Sampled { num_permutations, rng } => {
            if num_permutations == 0 {
                return Err(GpError::InvalidConfig("num_permutations must be ≥ 1".into()));
            }
            let mut acc = T::zero();
            for _ in 0..num_permutations {
                let mut holdout = index::sample(rng, n, r).into_vec();
                holdout.sort_unstable();
                acc = acc + holdout_sum(x, z, p, holdout)? / rt;
            }
            Ok(acc / T::of(num_permutations as f64))
        }
    }
}

#[derive(Debug, Clone)]
pub struct CvIdentity<T> {
    /// Exact log marginal.
    pub lhs: T,
    /// `Σ_{r=1}^{N} S_CV(x|r)`.
    pub rhs: T,
    /// `S_CV(x|r)` at index `r - 1`.
    pub s_cv: Vec<T>,
    /// `S_CCV(x|R)` at index `R - 1`.
    pub s_ccv: Vec<T>,
    /// `S_PCV(x|R)` at index `R - 1`, computed directly from active-set
    /// marginals rather than from the CV scores.
    pub s_pcv: Vec<T>,
}

impl<T: Real> CvIdentity<T> {
    pub fn identity_error(&self) -> f64 {
        (self.lhs - self.rhs).abs().f64()
    }

    /// `max_R |S_CCV(x|R) + S_PCV(x|R) - log p(x|z)|`.
    pub fn max_decomposition_error(&self) -> f64 {
        self.s_ccv
            .iter()
            .zip(&self.s_pcv)
            .map(|(&c, &p)| (c + p - self.lhs).abs().f64())
            .fold(0.0, f64::max)
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.identity_error() <= tol && self.max_decomposition_error() <= tol
    }
}

/// Evaluates both sides of the CV/marginal-likelihood identity by
/// exhaustive subset enumeration (`N ≤ 8`).
pub fn cv_identity_check<T: Real>(x: &Mat<T>, z: &LatentPoints<T>, p: &KernelParams<T>) -> Result<CvIdentity<T>> {
    let n = x.rows();
    if n > IDENTITY_MAX_N {
        return Err(GpError::CapExceeded { needed: 1u128 << n, cap: 1u128 << IDENTITY_MAX_N });
    }
    if n == 0 {
        return Err(GpError::InvalidSplit("empty data".into()));
    }
    let lhs = exact_log_marginal(x, z, p)?;
    let s_cv = (1..=n).map(|r| cv_score(x, z, p, r, CvMode::default())).collect::<Result<Vec<T>>>()?;
    let rhs = s_cv.iter().copied().sum();

    let mut s_ccv = Vec::with_capacity(n);
    let mut acc = T::zero();
    for &s in &s_cv {
        acc = acc + s;
        s_ccv.push(acc);
    }

    let mut s_pcv = Vec::with_capacity(n);
    for r in 1..=n {
        let a = n - r;
        if a == 0 {
            s_pcv.push(T::zero());
            continue;
        }
        let mut sum = T::zero();
        for active in (0..n).combinations(a) {
            sum = sum + exact_log_marginal(&x.select_rows(&active), &z.select_rows(&active), p)?;
        }
        s_pcv.push(sum / T::of(binomial(n, a) as f64));
    }
    Ok(CvIdentity { lhs, rhs, s_cv, s_ccv, s_pcv })
}

/// `(N / r) Σ_{n∈R} log p(x_n | x_A, z)` for a given hold-out set of size `r`.
pub fn unbiased_marginal_term<T: Real>(
    x: &Mat<T>,
    z: &LatentPoints<T>,
    p: &KernelParams<T>,
    holdout: &[usize],
) -> Result<T> {
    let n = x.rows();
    if holdout.is_empty() {
        return Err(GpError::InvalidSplit("hold-out set must be non-empty".into()));
    }
    let s = holdout_sum(x, z, p, holdout.to_vec())?;
    Ok(T::of(n as f64) / T::of(holdout.len() as f64) * s)
}

/// One draw of the unbiased marginal-likelihood estimator: `r ~ U{1..N}`,
/// then a uniform hold-out set of size `r`.
pub fn unbiased_marginal_sample<T: Real, R: Rng + ?Sized>(
    x: &Mat<T>,
    z: &LatentPoints<T>,
    p: &KernelParams<T>,
    rng: &mut R,
) -> Result<T> {
    let n = x.rows();
    if n > ORACLE_CAP {
        return Err(GpError::CapExceeded { needed: n as u128, cap: ORACLE_CAP as u128 });
    }
    if n == 0 {
        return Err(GpError::InvalidSplit("empty data".into()));
    }
    let r = rng.random_range(1..=n);
    let mut holdout = index::sample(rng, n, r).into_vec();
    holdout.sort_unstable();
    unbiased_marginal_term(x, z, p, &holdout)
}
