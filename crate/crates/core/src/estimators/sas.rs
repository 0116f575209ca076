//! The stochastic-active-set objective and its reverse-mode gradient.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::split::ActiveSplit;
use crate::error::{GpError, Result};
use crate::kernel::{cross_gram, cross_gram_backward, gram, gram_backward, KernelParams, LatentPoints};
use crate::linalg::{cholesky_with_policy, gaussian_logpdf_zero_mean, inverse, solve, CholFactor, JitterPolicy};
use crate::matrix::Mat;
use crate::real::Real;

/// Objective value with its two summands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport<T> {
    pub total: T,
    /// `Σ_{n∈R} log p(x_n | x_A, z)`
    pub term_conditional: T,
    /// `log p(x_A | z_A)`
    pub term_active: T,
    /// Hold-out log-predictives, in the order of `split.holdout`.
    pub per_point: Option<Vec<T>>,
}

/// Which summands enter `total` (and the gradient).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SasTerms {
    #[default]
    Full,
    ConditionalOnly,
    ActiveOnly,
}

impl SasTerms {
    pub(crate) fn weights(self) -> (bool, bool) {
        match self {
            SasTerms::Full => (true, true),
            SasTerms::ConditionalOnly => (true, false),
            SasTerms::ActiveOnly => (false, true),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SasOptions {
    pub terms: SasTerms,
    pub jitter: JitterPolicy,
}

impl Default for SasOptions {
    fn default() -> Self {
        Self { terms: SasTerms::Full, jitter: JitterPolicy::EXACT_FIRST }
    }
}

/// Gradient of an objective with respect to the kernel hyperparameters and
/// the latent rows of the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SasGrad<T> {
    pub kernel: KernelParams<T>,
    pub dz: Mat<T>,
}

/// Predictive moments of hold-out points given an active set.
#[derive(Debug, Clone)]
pub struct ConditionalMoments<T> {
    /// `R x D`
    pub means: Mat<T>,
    /// One variance per hold-out point, shared across output dimensions.
    pub variances: Vec<T>,
}

/// Intermediate quantities of one active-set factorization, shared between
/// the active term and every conditional factor.
struct ActiveState<T> {
    factor: CholFactor<T>,
    /// `(K_AA + σ_n² I)⁻¹ x_A`
    alpha: Mat<T>,
}

impl<T: Real> ActiveState<T> {
    fn new(xa: &Mat<T>, za: &LatentPoints<T>, p: &KernelParams<T>, jitter: &JitterPolicy) -> Result<Self> {
        let c = gram(za, p, true);
        let factor = cholesky_with_policy(&c, jitter)?;
        let alpha = solve(&factor, xa)?;
        Ok(Self { factor, alpha })
    }
}

struct CondState<T> {
    k_ra: Mat<T>,
    /// `K_RA (K_AA + σ_n² I)⁻¹`
    w: Mat<T>,
    means: Mat<T>,
    variances: Vec<T>,
}

fn conditionals<T: Real>(
    st: &ActiveState<T>,
    za: &LatentPoints<T>,
    zr: &LatentPoints<T>,
    p: &KernelParams<T>,
) -> Result<CondState<T>> {
    let k_ra = cross_gram(zr, za, p);
    let means = k_ra.matmul(&st.alpha);
    let w = solve(&st.factor, &k_ra.transpose())?.transpose();
    let prior = p.prior_variance();
    let mut variances = Vec::with_capacity(zr.rows());
    for n in 0..zr.rows() {
        let q: T = k_ra.row(n).iter().zip(w.row(n)).map(|(&a, &b)| a * b).sum();
        let c = prior - q;
        if !(c > T::zero()) {
            return Err(GpError::NotPositiveDefinite { pivot: n, value: c.f64(), jitter: st.factor.jitter().f64() });
        }
        variances.push(c);
    }
    Ok(CondState { k_ra, w, means, variances })
}

/// `m_{n|A} = K_nA (K_AA + σ_n² I)⁻¹ x_A`,
/// `c_{n|A} = K_nn + σ_n² - K_nA (K_AA + σ_n² I)⁻¹ K_An`.
pub fn conditional_moments<T: Real>(
    xa: &Mat<T>,
    za: &LatentPoints<T>,
    zr: &LatentPoints<T>,
    p: &KernelParams<T>,
) -> Result<ConditionalMoments<T>> {
    conditional_moments_with(xa, za, zr, p, &JitterPolicy::EXACT_FIRST)
}

pub fn conditional_moments_with<T: Real>(
    xa: &Mat<T>,
    za: &LatentPoints<T>,
    zr: &LatentPoints<T>,
    p: &KernelParams<T>,
    jitter: &JitterPolicy,
) -> Result<ConditionalMoments<T>> {
    check_rows(xa, za, "x_A", "z_A")?;
    let st = ActiveState::new(xa, za, p, jitter)?;
    let c = conditionals(&st, za, zr, p)?;
    Ok(ConditionalMoments { means: c.means, variances: c.variances })
}

fn check_rows<T: Real>(x: &Mat<T>, z: &Mat<T>, xn: &str, zn: &str) -> Result<()> {
    if x.rows() != z.rows() {
        return Err(GpError::DimensionMismatch(format!(
            "{xn} has {} rows but {zn} has {}",
            x.rows(),
            z.rows()
        )));
    }
    Ok(())
}

fn log_normal_iso<T: Real>(x: &[T], m: &[T], c: T) -> T {
    let d = T::of(x.len() as f64);
    let sq: T = x.iter().zip(m).map(|(&a, &b)| (a - b) * (a - b)).sum();
    -T::of(0.5) * (d * (T::of(2.0 * PI) * c).ln() + sq / c)
}

/// `Σ_{n∈R} log p(x_n | x_A, z) + log p(x_A | z_A)`, hold-out points treated
/// as conditionally independent given the active set.
pub fn sas_estimate<T: Real>(
    x: &Mat<T>,
    z: &LatentPoints<T>,
    split: &ActiveSplit,
    p: &KernelParams<T>,
) -> Result<EstimatorReport<T>> {
    Ok(sas_eval(x, z, split, p, &SasOptions::default(), false)?.0)
}

/// Value and gradient of the selected SAS terms. The split is constant.
pub fn sas_value_and_grad<T: Real>(
    x: &Mat<T>,
    z: &LatentPoints<T>,
    split: &ActiveSplit,
    p: &KernelParams<T>,
    opts: &SasOptions,
) -> Result<(EstimatorReport<T>, SasGrad<T>)> {
    let (r, g) = sas_eval(x, z, split, p, opts, true)?;
    Ok((r, g.expect("gradient requested")))
}

fn sas_eval<T: Real>(
    x: &Mat<T>,
    z: &LatentPoints<T>,
    split: &ActiveSplit,
    p: &KernelParams<T>,
    opts: &SasOptions,
    want_grad: bool,
) -> Result<(EstimatorReport<T>, Option<SasGrad<T>>)> {
    check_rows(x, z, "x", "z")?;
    split.validate(x.rows())?;
    let (use_cond, use_active) = opts.terms.weights();
    let d = x.cols();

    let xa = x.select_rows(&split.active);
    let za = z.select_rows(&split.active);
    let xr = x.select_rows(&split.holdout);
    let zr = z.select_rows(&split.holdout);

    let st = ActiveState::new(&xa, &za, p, &opts.jitter)?;
    let term_active = gaussian_logpdf_zero_mean(&xa, &st.factor)?;
    let cond = conditionals(&st, &za, &zr, p)?;
    let per_point: Vec<T> =
        (0..zr.rows()).map(|n| log_normal_iso(xr.row(n), cond.means.row(n), cond.variances[n])).collect();
    let term_conditional: T = per_point.iter().copied().sum();

    let total = match opts.terms {
        SasTerms::Full => term_conditional + term_active,
        SasTerms::ConditionalOnly => term_conditional,
        SasTerms::ActiveOnly => term_active,
    };
    let report = EstimatorReport { total, term_conditional, term_active, per_point: Some(per_point) };
    if !want_grad {
        return Ok((report, None));
    }

    let (na, nr) = (za.rows(), zr.rows());
    let half = T::of(0.5);
    let dt = T::of(d as f64);
    let mut grad = KernelParams::zeros();
    let mut dza = Mat::zeros(na, z.cols());
    let mut dzr = Mat::zeros(nr, z.cols());
    // ∂L/∂C_A before symmetrization
    let mut dc = Mat::zeros(na, na);

    if use_active && na > 0 {
        let cinv = inverse(&st.factor);
        let aat = st.alpha.matmul_t(&st.alpha);
        for i in 0..na {
            for j in 0..na {
                dc[(i, j)] = half * (aat[(i, j)] - dt * cinv[(i, j)]);
            }
        }
    }

    let mut noise_extra = T::zero();
    if use_cond && nr > 0 {
        // adjoints of the predictive means (R x D) and variances (R)
        let mut e = Mat::zeros(nr, d);
        let mut gamma = vec![T::zero(); nr];
        for n in 0..nr {
            let c = cond.variances[n];
            let mut sq = T::zero();
            for k in 0..d {
                let r = xr[(n, k)] - cond.means[(n, k)];
                e[(n, k)] = r / c;
                sq = sq + r * r;
            }
            gamma[n] = -half * dt / c + half * sq / (c * c);
        }
        let gsum: T = gamma.iter().copied().sum();
        // c_n = σ_a² + σ_n² - ...
        grad.raw[0] = grad.raw[0] + gsum * p.amplitude();
        noise_extra = gsum;

        let mut dk = e.matmul_t(&st.alpha);
        let mut gw = cond.w.clone();
        for n in 0..nr {
            let g = gamma[n];
            let two_g = g + g;
            for j in 0..na {
                dk[(n, j)] = dk[(n, j)] - two_g * cond.w[(n, j)];
                gw[(n, j)] = g * cond.w[(n, j)];
            }
        }
        if na > 0 {
            // Wᵀ diag(γ) W
            dc.axpy(T::one(), &cond.w.t_matmul(&gw));
            // α = C⁻¹ x_A  ⇒  ∂/∂C = -(C⁻¹ ᾱ) αᵀ
            let alpha_bar = cond.k_ra.t_matmul(&e);
            let beta = solve(&st.factor, &alpha_bar)?;
            dc.axpy(-T::one(), &beta.matmul_t(&st.alpha));
        }
        cross_gram_backward(&zr, &za, p, &cond.k_ra, &dk, &mut grad, &mut dzr, &mut dza);
    }

    if na > 0 {
        let g = dc.symmetrized();
        let k_aa = gram(&za, p, false).into_mat();
        gram_backward(&za, p, &k_aa, &g, &mut grad, &mut dza);
        let tr: T = (0..na).map(|i| g[(i, i)]).sum();
        noise_extra = noise_extra + tr;
    }
    grad.raw[2] = grad.raw[2] + noise_extra * p.noise();

    let mut dz = Mat::zeros(z.rows(), z.cols());
    for (k, &i) in split.active.iter().enumerate() {
        dz.row_mut(i).copy_from_slice(dza.row(k));
    }
    for (k, &i) in split.holdout.iter().enumerate() {
        dz.row_mut(i).copy_from_slice(dzr.row(k));
    }
    Ok((report, Some(SasGrad { kernel: grad, dz })))
}

/// `log p(x_R | x_A, z) + log p(x_A | z_A)` with the full joint predictive
/// covariance over `R`; equals the exact log marginal for any split.
pub fn exact_two_term<T: Real>(
    x: &Mat<T>,
    z: &LatentPoints<T>,
    split: &ActiveSplit,
    p: &KernelParams<T>,
) -> Result<T> {
    check_rows(x, z, "x", "z")?;
    split.validate(x.rows())?;
    if split.holdout.len() > super::ORACLE_CAP {
        return Err(GpError::CapExceeded { needed: split.holdout.len() as u128, cap: super::ORACLE_CAP as u128 });
    }
    let xa = x.select_rows(&split.active);
    let za = z.select_rows(&split.active);
    let xr = x.select_rows(&split.holdout);
    let zr = z.select_rows(&split.holdout);
    let st = ActiveState::new(&xa, &za, p, &JitterPolicy::EXACT_FIRST)?;
    let active = gaussian_logpdf_zero_mean(&xa, &st.factor)?;
    if zr.rows() == 0 {
        return Ok(active);
    }
    let cond = conditionals(&st, &za, &zr, p)?;
    let mut cov = gram(&zr, p, true).into_mat();
    cov.axpy(-T::one(), &cond.w.matmul_t(&cond.k_ra));
    let cov = crate::linalg::SymMatrix::new_unchecked(cov.symmetrized());
    let fr = cholesky_with_policy(&cov, &JitterPolicy::EXACT_FIRST)?;
    let resid = xr.sub(&cond.means);
    Ok(active + gaussian_logpdf_zero_mean(&resid, &fr)?)
}

/// Outcome of comparing the SAS estimate against the exact marginal on
/// random instances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LowerBoundReport {
    pub instances: usize,
    pub below_or_equal: usize,
    pub fraction: f64,
    pub mean_gap: f64,
    pub max_abs_gap: f64,
}

/// Draws `instances` random problems (latents `N(0, I)`, data from the GP
/// prior with default hyperparameters) and counts how often
/// `sas_estimate ≤ exact_log_marginal`.
pub fn lower_bound_tendency(instances: usize, n: usize, active: usize, d: usize, q: usize, seed: u64) -> Result<LowerBoundReport> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let p = KernelParams::<f64>::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut below = 0;
    let mut gaps = Vec::with_capacity(instances);
    for i in 0..instances {
        let (ds, z) = crate::data::synth_gp_dataset(n, q, d, &p, seed.wrapping_add(i as u64))?;
        let split = super::random_split(n, active, &mut rng)?;
        let sas = sas_estimate(&ds.x, &z, &split, &p)?.total;
        let exact = super::exact_log_marginal(&ds.x, &z, &p)?;
        if sas <= exact {
            below += 1;
        }
        gaps.push(sas - exact);
    }
    let mean_gap = gaps.iter().sum::<f64>() / instances.max(1) as f64;
    let max_abs_gap = gaps.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    Ok(LowerBoundReport {
        instances,
        below_or_equal: below,
        fraction: below as f64 / instances.max(1) as f64,
        mean_gap,
        max_abs_gap,
    })
}
