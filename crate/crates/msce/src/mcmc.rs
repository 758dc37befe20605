//! Posterior sampling: random-search initialization, Metropolis-within-Gibbs
//! warmup with per-coordinate step adaptation, and the adaptive joint
//! Metropolis sampler with an empirical-covariance proposal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::linalg::{CholeskyFactor, RunningCovariance, SquareMatrix};
use crate::model::Bound;
use crate::seed::task_seed;

#[derive(Debug, Error)]
pub enum MCMCError {
    #[error("all {0} random-search draws had log-posterior -inf; widen the prior box or lower the data threshold")]
    AllDrawsRejected(usize),
    #[error("starting point has non-finite log-posterior")]
    NonFiniteStart,
    #[error("invalid MCMC config: {0}")]
    BadConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCMCConfig {
    /// Metropolis-within-Gibbs warmup sweeps.
    pub n1: usize,
    /// Adaptive joint iterations.
    pub n2: usize,
    /// Uniform draws for the starting-point search.
    pub n_random_search: usize,
    /// Weight of the fixed safe component in the proposal mixture.
    pub epsilon: f64,
    /// Fraction of the adaptive chain discarded as burn-in.
    pub burn_in_frac: f64,
    pub seed: u64,
}

impl Default for MCMCConfig {
    fn default() -> Self {
        Self {
            n1: 250,
            n2: 19750,
            n_random_search: 2000,
            epsilon: 0.05,
            burn_in_frac: 0.25,
            seed: 0,
        }
    }
}

impl MCMCConfig {
    fn validate(&self) -> Result<(), MCMCError> {
        if self.n1 < 1 || self.n2 < 1 {
            return Err(MCMCError::BadConfig("n1 and n2 must be at least 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) && self.epsilon != 1.0 {
            return Err(MCMCError::BadConfig("epsilon must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.burn_in_frac) {
            return Err(MCMCError::BadConfig("burn_in_frac must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Adaptive-phase states with their log-posteriors and phase acceptance
/// rates. Samples before `burn_in` are excluded from summaries.
#[derive(Debug, Clone)]
pub struct PosteriorChain {
    pub samples: Vec<Vec<f64>>,
    pub log_posts: Vec<f64>,
    pub accept_rate_warmup: f64,
    pub accept_rate_adaptive: f64,
    pub burn_in: usize,
}

/// Coordinate-wise posterior mean and central 95% interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSummary {
    pub mean: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let h = p * (sorted.len() - 1) as f64;
    let i = (h.floor() as usize).min(sorted.len() - 2);
    let (lo, hi) = (sorted[i], sorted[i + 1]);
    if lo == hi {
        // equal neighbours would otherwise produce inf - inf = NaN
        return lo;
    }
    lo + (h - i as f64) * (hi - lo)
}

impl PosteriorChain {
    /// A degenerate chain holding one state; summaries collapse to it.
    pub fn from_single(sample: Vec<f64>, log_post: f64) -> Self {
        Self {
            samples: vec![sample],
            log_posts: vec![log_post],
            accept_rate_warmup: 0.0,
            accept_rate_adaptive: 0.0,
            burn_in: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn post_burn_in(&self) -> &[Vec<f64>] {
        &self.samples[self.burn_in.min(self.samples.len().saturating_sub(1))..]
    }

    fn coord_sorted(&self, d: usize) -> Vec<f64> {
        let mut v: Vec<f64> = self.post_burn_in().iter().map(|s| s[d]).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    pub fn summary(&self) -> ChainSummary {
        let kept = self.post_burn_in();
        let n = kept.len() as f64;
        let dim = self.dim();
        let mut mean = vec![0.0; dim];
        for s in kept {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut lo = Vec::with_capacity(dim);
        let mut hi = Vec::with_capacity(dim);
        for d in 0..dim {
            let sorted = self.coord_sorted(d);
            lo.push(percentile(&sorted, 0.025));
            hi.push(percentile(&sorted, 0.975));
        }
        ChainSummary { mean, lo, hi }
    }

    /// Coordinate-wise posterior median after burn-in.
    pub fn median_params(&self) -> Vec<f64> {
        (0..self.dim()).map(|d| percentile(&self.coord_sorted(d), 0.5)).collect()
    }

    pub fn mean_params(&self) -> Vec<f64> {
        self.summary().mean
    }
}

/// Draws a point uniformly inside the box; lower-open bounds are respected
/// exactly by using the (0, 1] side of the unit draw.
fn draw_in_box<R: Rng>(bounds: &[Bound], rng: &mut R) -> Vec<f64> {
    bounds
        .iter()
        .map(|b| {
            let u: f64 = 1.0 - rng.random::<f64>();
            b.lo + b.width() * u
        })
        .collect()
}

/// Best of `n_random_search` uniform draws inside the box.
pub fn random_search_init<F>(
    logpost: F,
    bounds: &[Bound],
    config: &MCMCConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, f64), MCMCError>
where
    F: Fn(&[f64]) -> f64,
{
    config.validate()?;
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..config.n_random_search {
        let theta = draw_in_box(bounds, rng);
        let lp = logpost(&theta);
        if lp.is_finite() && best.as_ref().is_none_or(|(_, b)| lp > *b) {
            best = Some((theta, lp));
        }
    }
    best.ok_or(MCMCError::AllDrawsRejected(config.n_random_search))
}

/// Warmup result: final state, per-coordinate proposal scales, the sweep
/// states, and the acceptance rate.
pub struct WarmupResult {
    pub state: Vec<f64>,
    pub log_post: f64,
    pub scales: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
    pub accept_rate: f64,
}

const GIBBS_TARGET_ACCEPT: f64 = 0.44;

/// Metropolis-within-Gibbs sweeps with stochastic-approximation scale
/// adaptation toward per-coordinate acceptance 0.44.
pub fn gibbs_warmup<F>(
    logpost: F,
    start: Vec<f64>,
    bounds: &[Bound],
    config: &MCMCConfig,
    rng: &mut impl Rng,
) -> Result<WarmupResult, MCMCError>
where
    F: Fn(&[f64]) -> f64,
{
    config.validate()?;
    let mut lp = logpost(&start);
    if !lp.is_finite() {
        return Err(MCMCError::NonFiniteStart);
    }
    let dim = start.len();
    let mut state = start;
    let mut log_scales: Vec<f64> = bounds.iter().map(|b| (0.1 * b.width().max(1e-12)).ln()).collect();
    let mut samples = Vec::with_capacity(config.n1);
    let mut accepted = 0usize;
    for sweep in 0..config.n1 {
        let gamma = ((sweep + 1) as f64).powf(-0.6);
        for d in 0..dim {
            let old = state[d];
            let step: f64 = rng.sample::<f64, _>(StandardNormal) * log_scales[d].exp();
            state[d] = old + step;
            let lp_new = logpost(&state);
            let acc = lp_new - lp > rng.random::<f64>().max(f64::MIN_POSITIVE).ln();
            if acc {
                lp = lp_new;
                accepted += 1;
            } else {
                state[d] = old;
            }
            log_scales[d] += gamma * (if acc { 1.0 - GIBBS_TARGET_ACCEPT } else { -GIBBS_TARGET_ACCEPT });
        }
        samples.push(state.clone());
    }
    Ok(WarmupResult {
        state,
        log_post: lp,
        scales: log_scales.iter().map(|l| l.exp()).collect(),
        samples,
        accept_rate: accepted as f64 / (config.n1 * dim) as f64,
    })
}

const COV_REFRESH_EVERY: usize = 50;
const COV_REGULARIZATION: f64 = 1e-10;
// Fading-memory window for the empirical proposal covariance. A finite
// half-life lets the kernel follow the chain out of the initialization
// transient instead of averaging over it for the whole run.
const COV_HALF_LIFE: f64 = 700.0;

/// Adaptive joint Metropolis: proposal mixture
/// (1-eps) N(0, 2.38^2/d * Sigma_emp) + eps N(0, 0.1^2/d * I), with
/// Sigma_emp the running covariance of the chain itself, accumulated with a
/// 700-iteration half-life and refactorized every 50 iterations. The
/// empirical component stays off until the chain has produced 2d states, so
/// the kernel grows from the safe component rather than inheriting the
/// warmup transient.
pub fn adaptive_chain<F>(
    logpost: F,
    start: Vec<f64>,
    config: &MCMCConfig,
    rng: &mut impl Rng,
) -> Result<PosteriorChain, MCMCError>
where
    F: Fn(&[f64]) -> f64,
{
    config.validate()?;
    let dim = start.len();
    let mut lp = logpost(&start);
    if !lp.is_finite() {
        return Err(MCMCError::NonFiniteStart);
    }
    let scale_emp = 2.38 * 2.38 / dim as f64;
    let safe_sd = (0.01 / dim as f64).sqrt();

    let mut cov = RunningCovariance::with_half_life(dim, COV_HALF_LIFE);
    let mut state = start;
    let mut factor: Option<CholeskyFactor> = None;
    let mut samples = Vec::with_capacity(config.n2);
    let mut log_posts = Vec::with_capacity(config.n2);
    let mut accepted = 0usize;

    for iter in 0..config.n2 {
        let use_empirical = config.epsilon < 1.0
            && cov.count() > 2 * dim
            && rng.random::<f64>() >= config.epsilon;
        if use_empirical && (factor.is_none() || iter % COV_REFRESH_EVERY == 0) {
            factor = cov.covariance().and_then(|c| {
                let mut m = SquareMatrix::from_fn(dim, |i, j| scale_emp * c[(i, j)]);
                for i in 0..dim {
                    m[(i, i)] += COV_REGULARIZATION;
                }
                match m.cholesky() {
                    Ok(f) => Some(f),
                    Err(e) => {
                        log::warn!("adaptive proposal covariance not factorizable ({e}); using safe kernel");
                        None
                    }
                }
            });
        }
        let z: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let proposal: Vec<f64> = match (&factor, use_empirical) {
            (Some(f), true) => {
                let step = f.mul_lower(&z).expect("dimension fixed");
                state.iter().zip(step).map(|(x, s)| x + s).collect()
            }
            _ => state.iter().zip(&z).map(|(x, s)| x + safe_sd * s).collect(),
        };
        let lp_new = logpost(&proposal);
        if lp_new - lp > rng.random::<f64>().max(f64::MIN_POSITIVE).ln() {
            state = proposal;
            lp = lp_new;
            accepted += 1;
        }
        cov.push(&state);
        samples.push(state.clone());
        log_posts.push(lp);
    }
    Ok(PosteriorChain {
        burn_in: (config.burn_in_frac * config.n2 as f64).floor() as usize,
        samples,
        log_posts,
        accept_rate_warmup: 0.0,
        accept_rate_adaptive: accepted as f64 / config.n2 as f64,
    })
}

/// Full schedule for one chain: random search, warmup, adaptive phase.
pub fn run_chain<F>(
    logpost: F,
    bounds: &[Bound],
    config: &MCMCConfig,
) -> Result<PosteriorChain, MCMCError>
where
    F: Fn(&[f64]) -> f64,
{
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let (start, _) = random_search_init(&logpost, bounds, config, &mut rng)?;
    let warmup = gibbs_warmup(&logpost, start, bounds, config, &mut rng)?;
    let mut chain = adaptive_chain(&logpost, warmup.state, config, &mut rng)?;
    chain.accept_rate_warmup = warmup.accept_rate;
    Ok(chain)
}

/// Independent chains with seeds derived from the config seed; chains run in
/// parallel, each internally sequential.
pub fn run_chains<F>(
    logpost: F,
    bounds: &[Bound],
    config: &MCMCConfig,
    n_chains: usize,
) -> Result<Vec<PosteriorChain>, MCMCError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let results = exec::map_indexed(n_chains, |c| {
        let mut cfg = config.clone();
        cfg.seed = task_seed(config.seed, c as u64);
        run_chain(&logpost, bounds, &cfg)
    });
    results.into_iter().collect()
}
