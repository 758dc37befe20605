//! Directional-seasonal marginal extreme-value model per (quantity,
//! location): 16 covariate bins, a generalized Pareto tail with common shape
//! and penalized per-bin scales, empirical body below the threshold, the
//! probability integral transform to standard Laplace scale, and
//! return-level simulation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::mcmc::percentile;
use crate::optim::{bfgs_max, OptimError};
use crate::seed::task_seed;
use crate::stats::{gp_cdf, gp_logpdf, gp_quantile, std_laplace_cdf, std_laplace_quantile, StatsError};

pub const N_BINS: usize = 16;
pub const DEFAULT_TAU: f64 = 0.7;
pub const DEFAULT_TAU_RANGE: (f64, f64) = (0.6, 0.8);
pub const DEFAULT_N_BOOT: usize = 100;
pub const DEFAULT_MIN_EXCEEDANCES: usize = 20;
/// Common GP shape is box-constrained to this interval.
pub const XI_LIMIT: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MarginalError {
    #[error("angle {0} outside (0, 360]")]
    AngleDomain(f64),
    #[error("bin id {0} outside 1..=16")]
    BinDomain(usize),
    #[error("bin {bin} has {count} exceedances, fewer than the required {needed}; merge bins or lower tau")]
    TooFewExceedances { bin: usize, count: usize, needed: usize },
    #[error("bin {0} has no fitted marginal")]
    EmptyBin(usize),
    #[error("bin {0} has no sub-threshold body values")]
    EmptyBody(usize),
    #[error("no exceedances anywhere; nothing to fit")]
    NoExceedances,
    #[error("optimizer did not converge after {iterations} iterations (last objective {last_objective})")]
    NonConvergence { iterations: usize, last_objective: f64 },
    #[error("{failed} of {total} bootstrap members failed (more than 20%)")]
    TooManyFailures { failed: usize, total: usize },
    #[error("fitted shape {0} >= 1: the tail mean is infinite, return levels are unstable")]
    TailMeanInfinite(f64),
    #[error("invalid marginal configuration: {0}")]
    BadConfig(&'static str),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

impl From<OptimError> for MarginalError {
    fn from(e: OptimError) -> Self {
        match e {
            OptimError::NonConvergence { iterations, last_objective } => {
                MarginalError::NonConvergence { iterations, last_objective }
            }
            OptimError::BadStart => MarginalError::NoExceedances,
        }
    }
}

/// Eight directional octants centred on the cardinal and semi-cardinal
/// directions crossed with two seasonal halves centred on seasonal degrees
/// 0 and 180.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinScheme {
    pub n_dir_bins: usize,
    pub n_season_bins: usize,
}

impl Default for BinScheme {
    fn default() -> Self {
        Self { n_dir_bins: 8, n_season_bins: 2 }
    }
}

impl BinScheme {
    pub fn n_bins(&self) -> usize {
        self.n_dir_bins * self.n_season_bins
    }

    /// Bin id in 1..=16. Octant boundaries sit at 22.5 + 45k degrees and are
    /// lower-exclusive, upper-inclusive; winter is (270, 90] in seasonal
    /// degrees and summer (90, 270]. Winter bins come first (1..=8, octants
    /// N, NE, ..., NW), then summer (9..=16).
    pub fn assign(&self, direction_deg: f64, season_deg: f64) -> Result<usize, MarginalError> {
        for a in [direction_deg, season_deg] {
            if !(a > 0.0 && a <= 360.0) {
                return Err(MarginalError::AngleDomain(a));
            }
        }
        let mut shifted = direction_deg + 22.5;
        if shifted > 360.0 {
            shifted -= 360.0;
        }
        let octant = ((shifted / 45.0).ceil() as usize).clamp(1, 8) - 1;
        let summer = season_deg > 90.0 && season_deg <= 270.0;
        Ok(if summer { 8 } else { 0 } + octant + 1)
    }
}

/// One observed value with its covariate bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinnedSample {
    pub value: f64,
    pub bin: usize,
}

fn group_bins(samples: &[BinnedSample]) -> Result<Vec<Vec<f64>>, MarginalError> {
    let mut groups = vec![Vec::new(); N_BINS];
    for s in samples {
        if s.bin < 1 || s.bin > N_BINS {
            return Err(MarginalError::BinDomain(s.bin));
        }
        groups[s.bin - 1].push(s.value);
    }
    Ok(groups)
}

/// Per-bin tail fit plus the sorted sub-threshold body used for the
/// empirical part of the transform. Ensemble members are stored without
/// bodies to keep them light.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMarginal {
    pub threshold_u: f64,
    pub sigma: f64,
    pub n_exceedances: usize,
    pub body: Vec<f64>,
}

/// Fitted marginal model for one (quantity, location) column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GPMarginalModel {
    pub scheme: BinScheme,
    pub tau: f64,
    pub xi: f64,
    pub penalty_lambda: f64,
    pub bins: Vec<Option<BinMarginal>>,
}

impl GPMarginalModel {
    pub fn bin(&self, bin: usize) -> Result<&BinMarginal, MarginalError> {
        if bin < 1 || bin > self.bins.len() {
            return Err(MarginalError::BinDomain(bin));
        }
        self.bins[bin - 1].as_ref().ok_or(MarginalError::EmptyBin(bin))
    }
}

/// Piecewise-linear empirical CDF of the body: plotting positions i/(n+1)
/// at the distinct sorted values, anchored at zero just below the smallest
/// value and at one exactly at the threshold.
struct BodyCdf {
    xs: Vec<f64>,
    ps: Vec<f64>,
}

impl BodyCdf {
    fn new(b: &BinMarginal, bin: usize) -> Result<Self, MarginalError> {
        if b.body.is_empty() {
            return Err(MarginalError::EmptyBody(bin));
        }
        let n = b.body.len() as f64;
        let mut xs = Vec::with_capacity(b.body.len() + 2);
        let mut ps = Vec::with_capacity(b.body.len() + 2);
        let first = b.body[0];
        let anchor_gap = ((b.threshold_u - first) / (n + 1.0)).max(1e-9 * (1.0 + first.abs()));
        xs.push(first - anchor_gap);
        ps.push(0.0);
        for (i, v) in b.body.iter().enumerate() {
            if *v >= b.threshold_u {
                break; // collapses into the threshold anchor
            }
            let p = (i + 1) as f64 / (n + 1.0);
            if *v > xs[xs.len() - 1] {
                xs.push(*v);
                ps.push(p);
            } else {
                // tied value: keep the highest plotting position
                let last = ps.len() - 1;
                ps[last] = p;
            }
        }
        xs.push(b.threshold_u);
        ps.push(1.0);
        Ok(Self { xs, ps })
    }

    fn cdf(&self, v: f64) -> f64 {
        if v <= self.xs[0] {
            return 0.0;
        }
        if v >= self.xs[self.xs.len() - 1] {
            return 1.0;
        }
        let hi = self.xs.partition_point(|x| *x < v);
        let (x0, x1) = (self.xs[hi - 1], self.xs[hi]);
        let (p0, p1) = (self.ps[hi - 1], self.ps[hi]);
        p0 + (p1 - p0) * (v - x0) / (x1 - x0)
    }

    fn quantile(&self, p: f64) -> f64 {
        if p <= 0.0 {
            return self.xs[0];
        }
        if p >= 1.0 {
            return self.xs[self.xs.len() - 1];
        }
        let hi = self.ps.partition_point(|q| *q < p).max(1);
        let (x0, x1) = (self.xs[hi - 1], self.xs[hi]);
        let (p0, p1) = (self.ps[hi - 1], self.ps[hi]);
        x0 + (x1 - x0) * (p - p0) / (p1 - p0)
    }
}

/// Maximizes the penalized GP likelihood over (xi, log sigma_b) for the
/// non-empty exceedance groups. Returns the common shape and per-bin scales.
fn fit_core(
    exceedances: &[Vec<f64>],
    lambda: f64,
) -> Result<(f64, Vec<Option<f64>>), MarginalError> {
    let active: Vec<usize> = (0..exceedances.len())
        .filter(|b| !exceedances[*b].is_empty())
        .collect();
    if active.is_empty() {
        return Err(MarginalError::NoExceedances);
    }
    let mut init = Vec::with_capacity(active.len() + 1);
    init.push(0.0); // xi = 0
    for &b in &active {
        let mean = exceedances[b].iter().sum::<f64>() / exceedances[b].len() as f64;
        init.push(mean.max(1e-12).ln());
    }
    let objective = |theta: &[f64]| {
        let xi = XI_LIMIT * theta[0].tanh();
        let mut total = 0.0;
        for (a, &b) in active.iter().enumerate() {
            let sigma = theta[1 + a].exp();
            if sigma == 0.0 || !sigma.is_finite() {
                // log sigma wandered past the floating-point range
                return f64::NEG_INFINITY;
            }
            for y in &exceedances[b] {
                total += gp_logpdf(*y, sigma, xi).expect("positive scale");
            }
        }
        if lambda > 0.0 && active.len() > 1 {
            let mean_ls = theta[1..].iter().sum::<f64>() / active.len() as f64;
            let spread: f64 = theta[1..].iter().map(|ls| (ls - mean_ls).powi(2)).sum();
            total -= lambda * spread;
        }
        total
    };
    let (theta, _, _) = bfgs_max(objective, init, 500, 1e-9)?;
    let xi = XI_LIMIT * theta[0].tanh();
    let mut sigma = vec![None; exceedances.len()];
    for (a, &b) in active.iter().enumerate() {
        sigma[b] = Some(theta[1 + a].exp());
    }
    Ok((xi, sigma))
}

/// Fits the penalized piecewise-constant GP model: per-bin thresholds at the
/// tau quantile, common shape, penalized scales, empirical bodies.
pub fn fit_penalized_gp(
    samples: &[BinnedSample],
    tau: f64,
    lambda: f64,
    min_exceedances: usize,
) -> Result<GPMarginalModel, MarginalError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(MarginalError::BadConfig("tau must lie in (0, 1)"));
    }
    if lambda < 0.0 {
        return Err(MarginalError::BadConfig("lambda must be non-negative"));
    }
    let mut groups = group_bins(samples)?;
    for g in &mut groups {
        g.sort_by(f64::total_cmp);
    }
    let mut thresholds = vec![f64::NAN; N_BINS];
    let mut exceed = vec![Vec::new(); N_BINS];
    for (b, g) in groups.iter().enumerate() {
        if g.is_empty() {
            continue;
        }
        let u = percentile(g, tau);
        thresholds[b] = u;
        exceed[b] = g.iter().filter(|v| **v > u).map(|v| v - u).collect();
        if exceed[b].len() < min_exceedances {
            return Err(MarginalError::TooFewExceedances {
                bin: b + 1,
                count: exceed[b].len(),
                needed: min_exceedances,
            });
        }
    }
    let (xi, sigma) = fit_core(&exceed, lambda)?;
    let bins = (0..N_BINS)
        .map(|b| {
            sigma[b].map(|s| BinMarginal {
                threshold_u: thresholds[b],
                sigma: s,
                n_exceedances: exceed[b].len(),
                body: groups[b].iter().filter(|v| **v <= thresholds[b]).copied().collect(),
            })
        })
        .collect();
    Ok(GPMarginalModel {
        scheme: BinScheme::default(),
        tau,
        xi,
        penalty_lambda: lambda,
        bins,
    })
}

/// Cross-validation table for one penalty grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda: f64,
    pub lambda_grid: Vec<f64>,
    pub mean_heldout_loglik: Vec<f64>,
}

/// Picks the penalty maximizing mean held-out exceedance log-likelihood over
/// k folds stratified by bin. Thresholds are fixed on the full data so every
/// fold scores the same exceedance set definition.
pub fn select_penalty_cv(
    samples: &[BinnedSample],
    tau: f64,
    lambda_grid: &[f64],
    k_folds: usize,
    seed: u64,
) -> Result<CvResult, MarginalError> {
    if lambda_grid.is_empty() {
        return Err(MarginalError::BadConfig("lambda grid is empty"));
    }
    if k_folds < 2 {
        return Err(MarginalError::BadConfig("k_folds must be at least 2"));
    }
    let mut groups = group_bins(samples)?;
    for g in &mut groups {
        g.sort_by(f64::total_cmp);
    }
    let thresholds: Vec<f64> = groups
        .iter()
        .map(|g| if g.is_empty() { f64::NAN } else { percentile(g, tau) })
        .collect();
    // per-bin exceedances with fold labels assigned round-robin after a
    // seeded shuffle, stratifying folds by bin
    let mut folded: Vec<Vec<(f64, usize)>> = vec![Vec::new(); N_BINS];
    for (b, g) in groups.iter().enumerate() {
        let mut ys: Vec<f64> =
            g.iter().filter(|v| **v > thresholds[b]).map(|v| v - thresholds[b]).collect();
        if ys.is_empty() {
            continue;
        }
        let mut rng = ChaCha12Rng::seed_from_u64(task_seed(seed, b as u64));
        for i in (1..ys.len()).rev() {
            let j = rng.random_range(0..=i);
            ys.swap(i, j);
        }
        folded[b] = ys.into_iter().enumerate().map(|(i, y)| (y, i % k_folds)).collect();
    }
    if folded.iter().all(Vec::is_empty) {
        return Err(MarginalError::NoExceedances);
    }

    let tasks = lambda_grid.len() * k_folds;
    let scored: Vec<Result<(f64, usize), MarginalError>> = exec::map_indexed(tasks, |t| {
        let lambda = lambda_grid[t / k_folds];
        let fold = t % k_folds;
        let train: Vec<Vec<f64>> = folded
            .iter()
            .map(|ys| ys.iter().filter(|(_, f)| *f != fold).map(|(y, _)| *y).collect())
            .collect();
        let (xi, sigma) = fit_core(&train, lambda)?;
        let mut loglik = 0.0;
        let mut count = 0usize;
        let mut skipped = 0usize;
        for (b, ys) in folded.iter().enumerate() {
            for (y, f) in ys.iter().filter(|(_, f)| *f == fold) {
                match sigma[b] {
                    Some(s) => {
                        loglik += gp_logpdf(*y, s, xi).expect("positive scale");
                        count += 1;
                        let _ = f;
                    }
                    None => skipped += 1,
                }
            }
        }
        if skipped > 0 {
            log::info!("cv fold {fold}: skipped {skipped} held-out values in unfit bins");
        }
        Ok((loglik, count))
    });

    let mut mean_heldout = Vec::with_capacity(lambda_grid.len());
    for (li, _lambda) in lambda_grid.iter().enumerate() {
        let mut total = 0.0;
        let mut count = 0usize;
        for f in 0..k_folds {
            let (l, c) = scored[li * k_folds + f].as_ref().map_err(clone_err)?;
            total += l;
            count += c;
        }
        mean_heldout.push(if count == 0 { f64::NEG_INFINITY } else { total / count as f64 });
    }
    let best = mean_heldout
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("non-empty grid");
    Ok(CvResult {
        lambda: lambda_grid[best],
        lambda_grid: lambda_grid.to_vec(),
        mean_heldout_loglik: mean_heldout,
    })
}

fn clone_err(e: &MarginalError) -> MarginalError {
    // errors from parallel tasks are aggregated by value; reconstruct the
    // only variants fit_core can produce
    match e {
        MarginalError::NonConvergence { iterations, last_objective } => {
            MarginalError::NonConvergence {
                iterations: *iterations,
                last_objective: *last_objective,
            }
        }
        MarginalError::NoExceedances => MarginalError::NoExceedances,
        other => MarginalError::BadConfig(match other {
            MarginalError::BadConfig(s) => s,
            _ => "cross-validation fold failed",
        }),
    }
}

/// Bootstrap ensemble with randomized thresholds plus the element-wise
/// median model used for the final transform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginalEnsemble {
    pub members: Vec<GPMarginalModel>,
    pub median_model: GPMarginalModel,
    pub n_failed: usize,
    pub seed: u64,
}

fn median_of(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    percentile(&v, 0.5)
}

/// Fits `n_boot` members on with-replacement resamples, each with its own
/// threshold quantile drawn uniformly from `tau_range`. Failed members are
/// dropped; more than 20% failures is a hard error. Member bodies are
/// dropped (the median model keeps full-data bodies).
pub fn bootstrap_margins(
    samples: &[BinnedSample],
    n_boot: usize,
    tau_range: (f64, f64),
    lambda: f64,
    min_exceedances: usize,
    seed: u64,
) -> Result<MarginalEnsemble, MarginalError> {
    if n_boot < 1 {
        return Err(MarginalError::BadConfig("n_boot must be at least 1"));
    }
    if !(tau_range.0 > 0.0 && tau_range.1 < 1.0 && tau_range.0 <= tau_range.1) {
        return Err(MarginalError::BadConfig("tau_range must satisfy 0 < lo <= hi < 1"));
    }
    let fits: Vec<Result<GPMarginalModel, MarginalError>> = exec::map_indexed(n_boot, |b| {
        let mut rng = ChaCha12Rng::seed_from_u64(task_seed(seed, b as u64));
        let tau = tau_range.0 + (tau_range.1 - tau_range.0) * rng.random::<f64>();
        let resample: Vec<BinnedSample> = (0..samples.len())
            .map(|_| samples[rng.random_range(0..samples.len())])
            .collect();
        let mut model = fit_penalized_gp(&resample, tau, lambda, min_exceedances)?;
        for bin in model.bins.iter_mut().flatten() {
            bin.body = Vec::new();
        }
        Ok(model)
    });
    let total = fits.len();
    let mut members = Vec::with_capacity(total);
    let mut failed = 0usize;
    for f in fits {
        match f {
            Ok(m) => members.push(m),
            Err(e) => {
                failed += 1;
                log::warn!("bootstrap member dropped: {e}");
            }
        }
    }
    if failed * 5 > total {
        return Err(MarginalError::TooManyFailures { failed, total });
    }

    // element-wise median model over members, bodies rebuilt from full data
    let tau = median_of(members.iter().map(|m| m.tau).collect());
    let xi = median_of(members.iter().map(|m| m.xi).collect());
    let mut groups = group_bins(samples)?;
    for g in &mut groups {
        g.sort_by(f64::total_cmp);
    }
    let bins: Vec<Option<BinMarginal>> = (0..N_BINS)
        .map(|b| {
            let fitted: Vec<&BinMarginal> =
                members.iter().filter_map(|m| m.bins[b].as_ref()).collect();
            if fitted.is_empty() {
                return None;
            }
            let threshold_u = median_of(fitted.iter().map(|f| f.threshold_u).collect());
            let sigma = median_of(fitted.iter().map(|f| f.sigma).collect());
            let body: Vec<f64> =
                groups[b].iter().filter(|v| **v <= threshold_u).copied().collect();
            let n_exceedances = groups[b].len() - body.len();
            Some(BinMarginal { threshold_u, sigma, n_exceedances, body })
        })
        .collect();
    let median_model = GPMarginalModel {
        scheme: BinScheme::default(),
        tau,
        xi,
        penalty_lambda: lambda,
        bins,
    };
    Ok(MarginalEnsemble { members, median_model, n_failed: failed, seed })
}

const TAIL_CEIL: f64 = 1.0 - 1e-12;

/// Composite marginal CDF: tau times the empirical body below the threshold,
/// tau + (1-tau) times the GP tail above it.
pub fn marginal_cdf(v: f64, bin: usize, model: &GPMarginalModel) -> Result<f64, MarginalError> {
    let b = model.bin(bin)?;
    if v <= b.threshold_u {
        let body = BodyCdf::new(b, bin)?;
        Ok((model.tau * body.cdf(v)).max(1e-12))
    } else {
        let mut fg = gp_cdf(v - b.threshold_u, b.sigma, model.xi)?;
        if fg >= 1.0 {
            log::warn!("value {v} in bin {bin} beyond the GP upper endpoint; CDF clamped");
            fg = TAIL_CEIL;
        }
        Ok(model.tau + (1.0 - model.tau) * fg)
    }
}

/// Inverse of `marginal_cdf` on (0, 1).
pub fn marginal_quantile(p: f64, bin: usize, model: &GPMarginalModel) -> Result<f64, MarginalError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(MarginalError::Stats(StatsError::ProbabilityDomain(p)));
    }
    let b = model.bin(bin)?;
    if p <= model.tau {
        let body = BodyCdf::new(b, bin)?;
        Ok(body.quantile(p / model.tau))
    } else {
        Ok(b.threshold_u + gp_quantile((p - model.tau) / (1.0 - model.tau), b.sigma, model.xi)?)
    }
}

/// Physical value to standard Laplace scale through the fitted marginal CDF.
pub fn pit_to_laplace(v: f64, bin: usize, model: &GPMarginalModel) -> Result<f64, MarginalError> {
    let f = marginal_cdf(v, bin, model)?;
    Ok(std_laplace_quantile(f)?)
}

/// Standard Laplace scale back to physical units; the exact reverse of
/// `pit_to_laplace` above the body anchor.
pub fn laplace_to_physical(l: f64, bin: usize, model: &GPMarginalModel) -> Result<f64, MarginalError> {
    marginal_quantile(std_laplace_cdf(l), bin, model)
}

/// One draw from the composite marginal of a bin.
pub fn sample_physical<R: Rng>(
    bin: usize,
    model: &GPMarginalModel,
    rng: &mut R,
) -> Result<f64, MarginalError> {
    let b = model.bin(bin)?;
    let p: f64 = rng.random();
    if p < model.tau {
        let body = BodyCdf::new(b, bin)?;
        Ok(body.quantile(p / model.tau))
    } else {
        Ok(b.threshold_u + gp_quantile((p - model.tau) / (1.0 - model.tau), b.sigma, model.xi)?)
    }
}

/// Empirical quantiles of the simulated n-year maximum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReturnLevelSummary {
    pub n_years: f64,
    pub n_sims: usize,
    pub q025: f64,
    pub median: f64,
    pub q975: f64,
}

/// Simulates the n-year maximum under the fitted marginal: Poisson event
/// counts per bin at the given annual rates, values drawn from the composite
/// body + tail distribution. Simulations with no events at all yield -inf.
pub fn return_level_sim(
    model: &GPMarginalModel,
    events_per_year_per_bin: &[f64],
    n_years: f64,
    n_sims: usize,
    seed: u64,
) -> Result<ReturnLevelSummary, MarginalError> {
    if model.xi >= 1.0 {
        return Err(MarginalError::TailMeanInfinite(model.xi));
    }
    if events_per_year_per_bin.len() != N_BINS {
        return Err(MarginalError::BadConfig("need one rate per bin (16)"));
    }
    if n_sims < 100 {
        return Err(MarginalError::BadConfig("n_sims must be at least 100"));
    }
    if !(n_years > 0.0) || events_per_year_per_bin.iter().any(|r| !(*r >= 0.0)) {
        return Err(MarginalError::BadConfig("rates and n_years must be non-negative"));
    }
    for (b, r) in events_per_year_per_bin.iter().enumerate() {
        if *r > 0.0 {
            model.bin(b + 1)?; // rate on an unfit bin is a config error
        }
    }
    let maxima_res: Vec<Result<f64, MarginalError>> = exec::map_indexed(n_sims, |s| {
        let mut rng = ChaCha12Rng::seed_from_u64(task_seed(seed, s as u64));
        let mut max = f64::NEG_INFINITY;
        for (b, rate) in events_per_year_per_bin.iter().enumerate() {
            if *rate <= 0.0 {
                continue;
            }
            let count = Poisson::new(rate * n_years)
                .map_err(|_| MarginalError::BadConfig("invalid Poisson rate"))?
                .sample(&mut rng) as u64;
            for _ in 0..count {
                max = max.max(sample_physical(b + 1, model, &mut rng)?);
            }
        }
        Ok(max)
    });
    let mut maxima = Vec::with_capacity(n_sims);
    for m in maxima_res {
        maxima.push(m?);
    }
    maxima.sort_by(f64::total_cmp);
    Ok(ReturnLevelSummary {
        n_years,
        n_sims,
        q025: percentile(&maxima, 0.025),
        median: percentile(&maxima, 0.5),
        q975: percentile(&maxima, 0.975),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn bin_assignment_examples() {
        let s = BinScheme::default();
        // north, mid-winter
        assert_eq!(s.assign(360.0, 360.0).unwrap(), 1);
        // east, mid-summer
        assert_eq!(s.assign(90.0, 180.0).unwrap(), 11);
        // boundary is upper-inclusive: 22.5 still north
        assert_eq!(s.assign(22.5, 360.0).unwrap(), 1);
        assert_eq!(s.assign(22.5 + 1e-9, 360.0).unwrap(), 2);
    }

    #[test]
    fn bin_boundary_sweep() {
        let s = BinScheme::default();
        for k in 0..8usize {
            let edge = 22.5 + 45.0 * k as f64;
            // the edge belongs to octant k, just above it to octant k+1
            assert_eq!(s.assign(edge, 45.0).unwrap(), k + 1);
            let above = edge + 1e-7;
            let expect = (k + 1) % 8 + 1;
            assert_eq!(s.assign(above, 45.0).unwrap(), expect);
        }
        // season boundary: 90 is winter's inclusive edge, 90+eps is summer
        assert_eq!(s.assign(360.0, 90.0).unwrap(), 1);
        assert_eq!(s.assign(360.0, 90.0 + 1e-9).unwrap(), 9);
        assert_eq!(s.assign(360.0, 270.0).unwrap(), 9);
        assert_eq!(s.assign(360.0, 270.0 + 1e-9).unwrap(), 1);
    }

    #[test]
    fn bin_domain_rejected() {
        let s = BinScheme::default();
        assert!(s.assign(0.0, 180.0).is_err());
        assert!(s.assign(360.5, 180.0).is_err());
        assert!(s.assign(90.0, 0.0).is_err());
        assert!(s.assign(90.0, -5.0).is_err());
    }

    /// Inverse-CDF draws from the composite body-uniform + GP-tail marginal.
    fn synth_bin(
        n: usize,
        bin: usize,
        u: f64,
        sigma: f64,
        xi: f64,
        tau: f64,
        rng: &mut impl Rng,
    ) -> Vec<BinnedSample> {
        (0..n)
            .map(|_| {
                let p: f64 = rng.random();
                let value = if p < tau {
                    u * (p / tau)
                } else {
                    u + gp_quantile((p - tau) / (1.0 - tau), sigma, xi).unwrap()
                };
                BinnedSample { value, bin }
            })
            .collect()
    }

    #[test]
    fn single_bin_recovery() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let samples = synth_bin(5000, 1, 5.0, 2.0, 0.1, 0.7, &mut rng);
        let m = fit_penalized_gp(&samples, 0.7, 0.0, 20).unwrap();
        let b = m.bin(1).unwrap();
        assert_relative_eq!(b.sigma, 2.0, max_relative = 0.1);
        assert_abs_diff_eq!(m.xi, 0.1, epsilon = 0.05);
        assert_relative_eq!(b.threshold_u, 5.0, max_relative = 0.05);
        assert!(m.bins.iter().filter(|b| b.is_some()).count() == 1);
    }

    /// 1-D scale MLE at fixed shape by ternary search.
    fn sigma_mle_at_xi(ys: &[f64], xi: f64) -> f64 {
        let ll = |s: f64| ys.iter().map(|y| gp_logpdf(*y, s, xi).unwrap()).sum::<f64>();
        let (mut lo, mut hi) = (1e-3, 50.0);
        for _ in 0..300 {
            let a = lo + (hi - lo) / 3.0;
            let b = hi - (hi - lo) / 3.0;
            if ll(a) < ll(b) {
                lo = a;
            } else {
                hi = b;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn unpenalized_fit_matches_per_bin_mle() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let mut samples = synth_bin(2000, 1, 4.0, 1.0, 0.1, 0.7, &mut rng);
        samples.extend(synth_bin(2000, 2, 4.0, 3.0, 0.1, 0.7, &mut rng));
        let m = fit_penalized_gp(&samples, 0.7, 0.0, 20).unwrap();
        // at lambda = 0 and fixed common shape, each sigma_b solves its own
        // 1-D likelihood; compare against a ternary-search oracle
        for bin in [1usize, 2] {
            let b = m.bin(bin).unwrap();
            let ys: Vec<f64> = {
                let mut g: Vec<f64> = samples
                    .iter()
                    .filter(|s| s.bin == bin)
                    .map(|s| s.value)
                    .collect();
                g.sort_by(f64::total_cmp);
                let u = percentile(&g, 0.7);
                g.iter().filter(|v| **v > u).map(|v| v - u).collect()
            };
            let oracle = sigma_mle_at_xi(&ys, m.xi);
            assert_relative_eq!(b.sigma, oracle, max_relative = 1e-4);
        }
    }

    #[test]
    fn huge_penalty_shrinks_scales_together() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let mut samples = synth_bin(800, 3, 4.0, 1.0, 0.0, 0.7, &mut rng);
        samples.extend(synth_bin(800, 7, 4.0, 2.5, 0.0, 0.7, &mut rng));
        samples.extend(synth_bin(800, 12, 4.0, 0.5, 0.0, 0.7, &mut rng));
        let m = fit_penalized_gp(&samples, 0.7, 1e8, 20).unwrap();
        let sigmas: Vec<f64> = m.bins.iter().flatten().map(|b| b.sigma).collect();
        assert_eq!(sigmas.len(), 3);
        for s in &sigmas {
            assert_relative_eq!(*s, sigmas[0], max_relative = 1e-3);
        }
        assert!(m.xi.abs() <= XI_LIMIT);
    }

    #[test]
    fn objective_invariant_to_bin_relabeling() {
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        let mut samples = synth_bin(600, 2, 4.0, 1.0, 0.05, 0.7, &mut rng);
        samples.extend(synth_bin(600, 5, 4.0, 2.0, 0.05, 0.7, &mut rng));
        let m1 = fit_penalized_gp(&samples, 0.7, 3.0, 20).unwrap();
        // swap the two labels
        let relabeled: Vec<BinnedSample> = samples
            .iter()
            .map(|s| BinnedSample { value: s.value, bin: if s.bin == 2 { 5 } else { 2 } })
            .collect();
        let m2 = fit_penalized_gp(&relabeled, 0.7, 3.0, 20).unwrap();
        assert_relative_eq!(m1.xi, m2.xi, epsilon = 1e-6);
        assert_relative_eq!(
            m1.bin(2).unwrap().sigma,
            m2.bin(5).unwrap().sigma,
            max_relative = 1e-6
        );
        assert_relative_eq!(
            m1.bin(5).unwrap().sigma,
            m2.bin(2).unwrap().sigma,
            max_relative = 1e-6
        );
    }

    #[test]
    fn too_few_exceedances_names_bin() {
        let mut rng = ChaCha12Rng::seed_from_u64(25);
        let mut samples = synth_bin(500, 1, 4.0, 1.0, 0.0, 0.7, &mut rng);
        samples.extend(synth_bin(30, 9, 4.0, 1.0, 0.0, 0.7, &mut rng));
        let err = fit_penalized_gp(&samples, 0.7, 0.0, 20);
        assert!(matches!(err, Err(MarginalError::TooFewExceedances { bin: 9, .. })));
    }

    #[test]
    fn cv_grid_of_one_returns_it() {
        let mut rng = ChaCha12Rng::seed_from_u64(26);
        let samples = synth_bin(400, 1, 4.0, 1.0, 0.0, 0.7, &mut rng);
        let r = select_penalty_cv(&samples, 0.7, &[2.5], 5, 7).unwrap();
        assert_eq!(r.lambda, 2.5);
        assert_eq!(r.mean_heldout_loglik.len(), 1);
        assert!(r.mean_heldout_loglik[0].is_finite());
    }

    #[test]
    fn cv_prefers_shrinkage_for_common_scale() {
        // many small bins with one true scale: free per-bin fits overfit
        // badly enough that pooling should win held-out likelihood
        let mut wins = 0;
        for seed in 0..12u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(100 + seed);
            let mut samples = Vec::new();
            for b in 1..=8 {
                samples.extend(synth_bin(100, b, 4.0, 1.5, 0.05, 0.7, &mut rng));
            }
            let r = select_penalty_cv(&samples, 0.7, &[0.01, 1e4], 4, seed).unwrap();
            if r.lambda == 1e4 {
                wins += 1;
            }
        }
        assert!(wins >= 9, "shrinkage won only {wins}/12 seeds");
    }

    #[test]
    fn cv_rejects_shrinkage_for_contrasting_scales() {
        let mut wins = 0;
        for seed in 0..12u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(200 + seed);
            let mut samples = synth_bin(300, 1, 4.0, 0.3, 0.05, 0.7, &mut rng);
            samples.extend(synth_bin(300, 2, 4.0, 3.0, 0.05, 0.7, &mut rng));
            let r = select_penalty_cv(&samples, 0.7, &[0.01, 1e4], 4, seed).unwrap();
            if r.lambda == 0.01 {
                wins += 1;
            }
        }
        assert!(wins >= 9, "low penalty won only {wins}/12 seeds");
    }

    #[test]
    fn bootstrap_member_matches_its_resample() {
        let mut rng = ChaCha12Rng::seed_from_u64(27);
        let samples = synth_bin(600, 1, 4.0, 1.2, 0.05, 0.7, &mut rng);
        let ens = bootstrap_margins(&samples, 1, (0.7, 0.7), 0.0, 20, 99).unwrap();
        assert_eq!(ens.members.len(), 1);
        assert_eq!(ens.n_failed, 0);
        // reconstruct the member's resample with the same derived seed
        let mut mrng = ChaCha12Rng::seed_from_u64(task_seed(99, 0));
        let _tau: f64 = 0.7 + 0.0 * mrng.random::<f64>();
        let resample: Vec<BinnedSample> = (0..samples.len())
            .map(|_| samples[mrng.random_range(0..samples.len())])
            .collect();
        let direct = fit_penalized_gp(&resample, 0.7, 0.0, 20).unwrap();
        assert_eq!(ens.members[0].xi, direct.xi);
        assert_eq!(ens.members[0].bin(1).unwrap().sigma, direct.bin(1).unwrap().sigma);
        // member bodies are stripped, median model keeps them
        assert!(ens.members[0].bin(1).unwrap().body.is_empty());
        assert!(!ens.median_model.bin(1).unwrap().body.is_empty());
        // median of a single member is that member
        assert_eq!(ens.median_model.xi, direct.xi);
    }

    #[test]
    fn median_model_is_element_wise_median() {
        let mut rng = ChaCha12Rng::seed_from_u64(28);
        let samples = synth_bin(600, 4, 4.0, 1.2, 0.05, 0.7, &mut rng);
        let ens = bootstrap_margins(&samples, 5, (0.6, 0.8), 0.0, 10, 3).unwrap();
        let mut sigmas: Vec<f64> =
            ens.members.iter().map(|m| m.bin(4).unwrap().sigma).collect();
        sigmas.sort_by(f64::total_cmp);
        assert_eq!(ens.median_model.bin(4).unwrap().sigma, percentile(&sigmas, 0.5));
    }

    #[test]
    fn bootstrap_hard_error_on_mass_failure() {
        // every resample of a 40-value bin yields far fewer than 20
        // exceedances at tau = 0.7, so all members fail
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let samples = synth_bin(40, 1, 4.0, 1.0, 0.0, 0.7, &mut rng);
        let err = bootstrap_margins(&samples, 10, (0.7, 0.7), 0.0, 20, 1);
        assert!(matches!(err, Err(MarginalError::TooManyFailures { failed: 10, total: 10 })));
    }

    #[test]
    fn ensemble_bands_cover_truth() {
        let mut covered = 0;
        for rep in 0..20u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(1000 + rep);
            let samples = synth_bin(500, 1, 4.0, 2.0, 0.1, 0.7, &mut rng);
            let ens = bootstrap_margins(&samples, 30, (0.6, 0.8), 0.0, 10, rep).unwrap();
            let mut sigmas: Vec<f64> =
                ens.members.iter().map(|m| m.bin(1).unwrap().sigma).collect();
            sigmas.sort_by(f64::total_cmp);
            let lo = percentile(&sigmas, 0.025);
            let hi = percentile(&sigmas, 0.975);
            if lo <= 2.0 && 2.0 <= hi {
                covered += 1;
            }
        }
        assert!(covered >= 15, "sigma band covered truth in only {covered}/20 replications");
    }

    fn fitted_model() -> GPMarginalModel {
        let mut rng = ChaCha12Rng::seed_from_u64(30);
        let samples = synth_bin(3000, 1, 5.0, 2.0, 0.1, 0.7, &mut rng);
        fit_penalized_gp(&samples, 0.7, 0.0, 20).unwrap()
    }

    #[test]
    fn threshold_maps_to_its_laplace_quantile() {
        let m = fitted_model();
        let u = m.bin(1).unwrap().threshold_u;
        let l = pit_to_laplace(u, 1, &m).unwrap();
        assert_relative_eq!(l, std_laplace_quantile(0.7).unwrap(), epsilon = 1e-12);
        assert_relative_eq!(l, 0.5108256237659907, epsilon = 1e-12);
        // super-threshold on laplace scale iff super-threshold physically
        assert!(pit_to_laplace(u + 0.01, 1, &m).unwrap() > l);
        assert!(pit_to_laplace(u - 0.01, 1, &m).unwrap() < l);
    }

    #[test]
    fn pit_round_trip_for_exceedances() {
        let m = fitted_model();
        let u = m.bin(1).unwrap().threshold_u;
        for v in [u + 0.001, u + 0.5, u + 2.0, u + 10.0] {
            let l = pit_to_laplace(v, 1, &m).unwrap();
            let back = laplace_to_physical(l, 1, &m).unwrap();
            assert_relative_eq!(back, v, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn pit_strictly_increasing() {
        let m = fitted_model();
        let b = m.bin(1).unwrap();
        let lo = b.body[0];
        let hi = b.threshold_u + 8.0;
        let mut prev = f64::NEG_INFINITY;
        for i in 0..400 {
            let v = lo + (hi - lo) * i as f64 / 399.0;
            let l = pit_to_laplace(v, 1, &m).unwrap();
            assert!(l > prev, "pit not increasing at v = {v}");
            prev = l;
        }
    }

    #[test]
    fn pit_of_simulated_draws_is_laplace() {
        // 5000 draws from the fitted model, transformed: one-sample KS
        // against the standard Laplace below the 1% critical value
        let m = fitted_model();
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let n = 5000usize;
        let mut ls: Vec<f64> = (0..n)
            .map(|_| {
                let v = sample_physical(1, &m, &mut rng).unwrap();
                pit_to_laplace(v, 1, &m).unwrap()
            })
            .collect();
        ls.sort_by(f64::total_cmp);
        let mut ks: f64 = 0.0;
        for (i, l) in ls.iter().enumerate() {
            let f = std_laplace_cdf(*l);
            ks = ks.max((f - i as f64 / n as f64).abs());
            ks = ks.max(((i + 1) as f64 / n as f64 - f).abs());
        }
        let critical = 1.6276 / (n as f64).sqrt();
        assert!(ks < critical, "KS statistic {ks} exceeds 1% critical value {critical}");
    }

    #[test]
    fn beyond_endpoint_clamps() {
        let mut m = fitted_model();
        m.xi = -0.4;
        let b = m.bin(1).unwrap();
        let endpoint = b.threshold_u - b.sigma / m.xi;
        let l = pit_to_laplace(endpoint + 5.0, 1, &m).unwrap();
        assert!(l.is_finite());
        assert!(l > 10.0);
    }

    #[test]
    fn transform_of_empty_bin_errors() {
        let m = fitted_model();
        assert!(matches!(pit_to_laplace(1.0, 2, &m), Err(MarginalError::EmptyBin(2))));
        assert!(matches!(pit_to_laplace(1.0, 17, &m), Err(MarginalError::BinDomain(17))));
    }

    #[test]
    fn return_level_matches_exponential_closed_form() {
        // xi = 0, one bin: the n-year max solves
        // exp(-R (1-tau) exp(-(v-u)/sigma)) = q
        let mut bins = vec![None; N_BINS];
        let body: Vec<f64> = (0..999).map(|i| 5.0 * (i + 1) as f64 / 1000.0).collect();
        bins[0] = Some(BinMarginal { threshold_u: 5.0, sigma: 2.0, n_exceedances: 300, body });
        let m = GPMarginalModel {
            scheme: BinScheme::default(),
            tau: 0.7,
            xi: 0.0,
            penalty_lambda: 0.0,
            bins,
        };
        let mut rates = vec![0.0; N_BINS];
        rates[0] = 10.0;
        let r = return_level_sim(&m, &rates, 100.0, 4000, 5).unwrap();
        let big_r = 10.0 * 100.0;
        let expected_median = 5.0 + 2.0 * ((0.3 * big_r) / std::f64::consts::LN_2).ln();
        assert_abs_diff_eq!(r.median, expected_median, epsilon = 0.15);
        assert!(r.q025 < r.median && r.median < r.q975);
    }

    #[test]
    fn zero_rate_degenerates() {
        let m = fitted_model();
        let rates = vec![0.0; N_BINS];
        let r = return_level_sim(&m, &rates, 1.0, 200, 5).unwrap();
        assert_eq!(r.median, f64::NEG_INFINITY);
    }

    #[test]
    fn infinite_tail_mean_rejected() {
        let mut m = fitted_model();
        m.xi = 1.0;
        let mut rates = vec![0.0; N_BINS];
        rates[0] = 1.0;
        assert!(matches!(
            return_level_sim(&m, &rates, 100.0, 200, 5),
            Err(MarginalError::TailMeanInfinite(_))
        ));
    }

    #[test]
    fn ensemble_json_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(32);
        let samples = synth_bin(400, 1, 4.0, 1.0, 0.0, 0.7, &mut rng);
        let ens = bootstrap_margins(&samples, 3, (0.6, 0.8), 0.5, 10, 1).unwrap();
        let s = serde_json::to_string(&ens).unwrap();
        let back: MarginalEnsemble = serde_json::from_str(&s).unwrap();
        assert_eq!(back.members.len(), 3);
        assert_eq!(back.median_model, ens.median_model);
    }
}
