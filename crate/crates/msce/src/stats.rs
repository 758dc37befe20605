//! Distribution kernels: standard Laplace, delta-Laplace, generalized
//! Pareto, the multivariate normal log-density, and the Gaussian-copula
//! residual model with delta-Laplace margins.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{CholeskyFactor, LinalgError, SquareMatrix};
use crate::special::{self, SpecialError};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("probability must lie in (0,1), got {0}")]
    ProbabilityDomain(f64),
    #[error("delta-Laplace margin requires sigma > 0 and delta > 0, got sigma={sigma}, delta={delta}")]
    InvalidMargin { sigma: f64, delta: f64 },
    #[error("generalized Pareto requires sigma > 0, got {0}")]
    InvalidGpScale(f64),
    #[error("residual model dimension mismatch: {margins} margins vs {corr}-dim correlation")]
    ResidualDimension { margins: usize, corr: usize },
    #[error("correlation matrix must be symmetric with unit diagonal")]
    NotCorrelation,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Special(#[from] SpecialError),
    #[error("input vector has length {got}, model dimension is {want}")]
    InputLength { got: usize, want: usize },
}

// ---------------------------------------------------------------------------
// standard Laplace

/// CDF of the standard Laplace distribution (density e^{-|x|}/2).
pub fn std_laplace_cdf(x: f64) -> f64 {
    if x < 0.0 {
        0.5 * x.exp()
    } else {
        1.0 - 0.5 * (-x).exp()
    }
}

/// Quantile of the standard Laplace distribution; exact inverse of
/// [`std_laplace_cdf`].
pub fn std_laplace_quantile(p: f64) -> Result<f64, StatsError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(StatsError::ProbabilityDomain(p));
    }
    Ok(if p < 0.5 { (2.0 * p).ln() } else { -(2.0 * (1.0 - p)).ln() })
}

/// Log-density of the standard Laplace distribution.
pub fn std_laplace_logpdf(x: f64) -> f64 {
    -x.abs() - std::f64::consts::LN_2
}

// ---------------------------------------------------------------------------
// delta-Laplace (generalized Gaussian)

/// Delta-Laplace margin with mean `mu`, standard deviation `sigma`, and
/// shape `delta`: delta = 2 is Gaussian, delta = 1 is Laplace. The internal
/// scale is kappa*sigma with kappa² = Γ(1/δ)/Γ(3/δ), which makes the
/// variance exactly sigma² for every shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaLaplaceMargin {
    pub mu: f64,
    pub sigma: f64,
    pub delta: f64,
}

/// Precomputed constants for repeated density evaluations of one margin.
#[derive(Debug, Clone, Copy)]
pub struct DeltaLaplaceKernel {
    mu: f64,
    delta: f64,
    inv_delta: f64,
    /// kappa * sigma
    scale: f64,
    /// log( delta / (2 kappa sigma Γ(1/δ)) )
    log_norm: f64,
}

impl DeltaLaplaceMargin {
    pub fn new(mu: f64, sigma: f64, delta: f64) -> Result<Self, StatsError> {
        if !(sigma > 0.0) || !(delta > 0.0) || !sigma.is_finite() || !delta.is_finite() {
            return Err(StatsError::InvalidMargin { sigma, delta });
        }
        Ok(Self { mu, sigma, delta })
    }

    /// kappa² = Γ(1/δ)/Γ(3/δ).
    pub fn kappa(&self) -> f64 {
        (0.5 * (special::ln_gamma(1.0 / self.delta) - special::ln_gamma(3.0 / self.delta))).exp()
    }

    pub fn kernel(&self) -> DeltaLaplaceKernel {
        let lg1 = special::ln_gamma(1.0 / self.delta);
        let lg3 = special::ln_gamma(3.0 / self.delta);
        let kappa = (0.5 * (lg1 - lg3)).exp();
        let scale = kappa * self.sigma;
        let log_norm = self.delta.ln() - std::f64::consts::LN_2 - scale.ln() - lg1;
        DeltaLaplaceKernel {
            mu: self.mu,
            delta: self.delta,
            inv_delta: 1.0 / self.delta,
            scale,
            log_norm,
        }
    }
}

impl DeltaLaplaceKernel {
    pub fn logpdf(&self, z: f64) -> f64 {
        let t = ((z - self.mu) / self.scale).abs();
        self.log_norm - t.powf(self.delta)
    }

    /// CDF via the regularized lower incomplete gamma:
    /// F(z) = 1/2 + sign(z−μ)/2 · P(1/δ, |(z−μ)/(κσ)|^δ).
    pub fn cdf(&self, z: f64) -> f64 {
        let (lo, _) = self.cdf_pair(z);
        lo
    }

    /// Lower and upper tail probabilities, each computed on its own small
    /// side so both stay relatively accurate deep in the tails.
    pub fn cdf_pair(&self, z: f64) -> (f64, f64) {
        let t = ((z - self.mu) / self.scale).abs();
        let x = t.powf(self.delta);
        let (p, q) = special::reg_inc_gamma(self.inv_delta, x)
            .unwrap_or_else(|_| if x > 1.0 { (1.0, 0.0) } else { (0.0, 1.0) });
        if z >= self.mu {
            (0.5 + 0.5 * p, 0.5 * q)
        } else {
            (0.5 * q, 0.5 + 0.5 * p)
        }
    }

    /// Quantile by monotone bracketing and bisection to 1e-12 in
    /// probability.
    pub fn quantile(&self, p: f64) -> Result<f64, StatsError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(StatsError::ProbabilityDomain(p));
        }
        if p == 0.5 {
            return Ok(self.mu);
        }
        // expand a bracket around mu in the direction of p
        let dir = if p > 0.5 { 1.0 } else { -1.0 };
        let mut step = self.scale;
        let mut lo = self.mu;
        let mut hi = self.mu + dir * step;
        for _ in 0..200 {
            let f = self.cdf(hi);
            if (dir > 0.0 && f >= p) || (dir < 0.0 && f <= p) {
                break;
            }
            lo = hi;
            step *= 2.0;
            hi = self.mu + dir * step;
        }
        let (mut a, mut b) = if dir > 0.0 { (lo, hi) } else { (hi, lo) };
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            let f = self.cdf(mid);
            if (f - p).abs() <= 1e-12 || (b - a) <= f64::EPSILON * (a.abs() + b.abs() + 1.0) {
                return Ok(mid);
            }
            if f < p {
                a = mid;
            } else {
                b = mid;
            }
        }
        Ok(0.5 * (a + b))
    }
}

/// Log-density of one delta-Laplace margin. Convenience wrapper around
/// [`DeltaLaplaceMargin::kernel`] for one-off evaluations.
pub fn dl_logpdf(z: f64, m: &DeltaLaplaceMargin) -> f64 {
    m.kernel().logpdf(z)
}

pub fn dl_cdf(z: f64, m: &DeltaLaplaceMargin) -> f64 {
    m.kernel().cdf(z)
}

pub fn dl_quantile(p: f64, m: &DeltaLaplaceMargin) -> Result<f64, StatsError> {
    m.kernel().quantile(p)
}

// ---------------------------------------------------------------------------
// generalized Pareto

/// Shape below which the GP density switches to its exponential limit.
pub const GP_XI_EPS: f64 = 1e-8;

/// Log-density of the generalized Pareto distribution for an exceedance
/// y >= 0. Returns −∞ beyond a finite upper endpoint (xi < 0) instead of
/// erroring, so likelihood code can treat impossible data as rejections.
pub fn gp_logpdf(y: f64, sigma: f64, xi: f64) -> Result<f64, StatsError> {
    if !(sigma > 0.0) {
        return Err(StatsError::InvalidGpScale(sigma));
    }
    if y < 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if xi.abs() < GP_XI_EPS {
        return Ok(-sigma.ln() - y / sigma);
    }
    let t = 1.0 + xi * y / sigma;
    if t <= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(-sigma.ln() - (1.0 / xi + 1.0) * t.ln())
}

/// GP survival-complement CDF: F(y) = 1 − (1 + ξy/σ)^{−1/ξ}.
pub fn gp_cdf(y: f64, sigma: f64, xi: f64) -> Result<f64, StatsError> {
    if !(sigma > 0.0) {
        return Err(StatsError::InvalidGpScale(sigma));
    }
    if y <= 0.0 {
        return Ok(0.0);
    }
    if xi.abs() < GP_XI_EPS {
        return Ok(1.0 - (-y / sigma).exp());
    }
    let t = 1.0 + xi * y / sigma;
    if t <= 0.0 {
        // beyond the upper endpoint for xi < 0
        return Ok(1.0);
    }
    Ok(1.0 - t.powf(-1.0 / xi))
}

/// GP quantile for p in [0, 1).
pub fn gp_quantile(p: f64, sigma: f64, xi: f64) -> Result<f64, StatsError> {
    if !(sigma > 0.0) {
        return Err(StatsError::InvalidGpScale(sigma));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(StatsError::ProbabilityDomain(p));
    }
    if xi.abs() < GP_XI_EPS {
        return Ok(-sigma * (1.0 - p).ln());
    }
    Ok(sigma / xi * ((1.0 - p).powf(-xi) - 1.0))
}

// ---------------------------------------------------------------------------
// multivariate normal

/// Log-density of a zero-mean multivariate normal with the given
/// correlation (or covariance) matrix, via Cholesky factorization.
pub fn mvn_logpdf(w: &[f64], corr: &SquareMatrix) -> Result<f64, StatsError> {
    let chol = corr.cholesky()?;
    mvn_logpdf_chol(w, &chol)
}

/// Same as [`mvn_logpdf`] but with a precomputed factor, for hot loops that
/// share one factorization across many evaluations.
pub fn mvn_logpdf_chol(w: &[f64], chol: &CholeskyFactor) -> Result<f64, StatsError> {
    let d = chol.dim();
    if w.len() != d {
        return Err(StatsError::InputLength { got: w.len(), want: d });
    }
    let quad = chol.quad_form(w)?;
    Ok(-0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + chol.log_det() + quad))
}

// ---------------------------------------------------------------------------
// Gaussian-copula residual model

/// Joint residual model: delta-Laplace margins tied together by a Gaussian
/// copula with the given correlation matrix. The factorization is done once
/// at construction and shared read-only across evaluations.
#[derive(Debug)]
pub struct ResidualModel {
    margins: Vec<DeltaLaplaceMargin>,
    kernels: Vec<DeltaLaplaceKernel>,
    corr: SquareMatrix,
    chol: CholeskyFactor,
    clamp_count: AtomicU64,
}

/// Margins whose CDF lands within this distance of 0 or 1 are clamped
/// before the normal quantile; occurrences are counted on the model.
const COPULA_CLAMP: f64 = 1e-15;

impl ResidualModel {
    pub fn new(margins: Vec<DeltaLaplaceMargin>, corr: SquareMatrix) -> Result<Self, StatsError> {
        if margins.len() != corr.dim() {
            return Err(StatsError::ResidualDimension { margins: margins.len(), corr: corr.dim() });
        }
        if !corr.is_symmetric(1e-12) || (0..corr.dim()).any(|i| (corr[(i, i)] - 1.0).abs() > 1e-12)
        {
            return Err(StatsError::NotCorrelation);
        }
        let chol = corr.cholesky()?;
        let kernels = margins.iter().map(|m| m.kernel()).collect();
        Ok(Self { margins, kernels, corr, chol, clamp_count: AtomicU64::new(0) })
    }

    pub fn dim(&self) -> usize {
        self.margins.len()
    }

    pub fn margins(&self) -> &[DeltaLaplaceMargin] {
        &self.margins
    }

    pub fn corr(&self) -> &SquareMatrix {
        &self.corr
    }

    pub fn chol(&self) -> &CholeskyFactor {
        &self.chol
    }

    /// Number of tail clamps since construction.
    pub fn clamp_count(&self) -> u64 {
        self.clamp_count.load(Ordering::Relaxed)
    }

    /// Gaussian-scale scores w_i = Φ⁻¹(F_i(z_i)).
    pub fn gaussian_scores(&self, z: &[f64]) -> Result<Vec<f64>, StatsError> {
        if z.len() != self.dim() {
            return Err(StatsError::InputLength { got: z.len(), want: self.dim() });
        }
        let mut w = Vec::with_capacity(z.len());
        for (zi, k) in z.iter().zip(&self.kernels) {
            let (lo, hi) = k.cdf_pair(*zi);
            // invert on the small tail; clamp hard zeros/ones
            let wi = if lo <= 0.5 {
                let p = if lo < COPULA_CLAMP {
                    self.clamp_count.fetch_add(1, Ordering::Relaxed);
                    log::trace!("copula clamp: lower tail {:e} at z={}", lo, zi);
                    COPULA_CLAMP
                } else {
                    lo
                };
                special::normal_quantile(p)?
            } else {
                let q = if hi < COPULA_CLAMP {
                    self.clamp_count.fetch_add(1, Ordering::Relaxed);
                    log::trace!("copula clamp: upper tail {:e} at z={}", hi, zi);
                    COPULA_CLAMP
                } else {
                    hi
                };
                -special::normal_quantile(q)?
            };
            w.push(wi);
        }
        Ok(w)
    }

    /// Joint log-density: mvn(w; Σ) − Σ log φ(w_i) + Σ log f_i(z_i) with
    /// w_i = Φ⁻¹(F_i(z_i)).
    pub fn log_density(&self, z: &[f64]) -> Result<f64, StatsError> {
        let w = self.gaussian_scores(z)?;
        let mut out = mvn_logpdf_chol(&w, &self.chol)?;
        for (wi, (zi, k)) in w.iter().zip(z.iter().zip(&self.kernels)) {
            out -= special::normal_logpdf(*wi);
            out += k.logpdf(*zi);
        }
        Ok(out)
    }

    /// Draws one residual vector: w ~ N(0, Σ), z_i = F_i⁻¹(Φ(w_i)).
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> Result<Vec<f64>, StatsError> {
        use rand_distr::StandardNormal;
        let iid: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let w = self.chol.mul_lower(&iid)?;
        w.iter()
            .zip(&self.kernels)
            .map(|(wi, k)| {
                let p = special::normal_cdf(*wi).clamp(COPULA_CLAMP, 1.0 - COPULA_CLAMP);
                k.quantile(p)
            })
            .collect()
    }
}
