//! MSCE dependence model: parameter layout with piecewise-linear distance
//! profiles, the conditional Gaussian-copula correlation, and the conditioned
//! log-posterior.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::linalg::{LinalgError, SquareMatrix};
use crate::stats::{DeltaLaplaceMargin, ResidualModel, StatsError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("pair index (j={j}, k={k}) outside 1..={p} x 1..={m}")]
    IndexOutOfRange { j: usize, k: usize, p: usize, m: usize },
    #[error("node distances must be strictly increasing and match value count")]
    BadNodes,
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("conditioning correlation has |entry| = 1 at index {index}")]
    DegenerateConditioning { index: usize },
    #[error("dataset is empty")]
    EmptyData,
    #[error("conditioning value at event {index} does not exceed the threshold {u}")]
    BelowThreshold { index: usize, u: f64 },
    #[error("transect distances must be positive and strictly increasing")]
    BadDistances,
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Position bookkeeping for the conditioned vector: remote pairs (j,k) for
/// locations j = 1..p and quantities k = 1..m in the order
/// (1,1)..(p,1),(1,2)..(p,m), with the conditioning pair (0,1) prepended in
/// the extended set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteIndex {
    pub p: usize,
    pub m: usize,
}

impl RemoteIndex {
    /// A(j,k) = p(k-1) + j, in 1..=mp.
    pub fn a(&self, j: usize, k: usize) -> Result<usize, ModelError> {
        if j < 1 || j > self.p || k < 1 || k > self.m {
            return Err(ModelError::IndexOutOfRange { j, k, p: self.p, m: self.m });
        }
        Ok(self.p * (k - 1) + j)
    }

    /// A*(j,k): the extended set maps (0,1) to 0 and keeps remote pairs at
    /// their A(j,k) positions.
    pub fn a_star(&self, j: usize, k: usize) -> Result<usize, ModelError> {
        if j == 0 && k == 1 {
            return Ok(0);
        }
        self.a(j, k)
    }

    /// Zero-based column of (j,k) in the remote data matrix.
    pub fn col(&self, j: usize, k: usize) -> Result<usize, ModelError> {
        Ok(self.a(j, k)? - 1)
    }

    /// Number of conditioned variates mp.
    pub fn len(&self) -> usize {
        self.p * self.m
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (j, k) pairs in A order, 1-based.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (1..=self.m).flat_map(move |k| (1..=self.p).map(move |j| (j, k)))
    }
}

/// Distance profile eta(d): linear interpolation between node values, clamped
/// to the end values outside the node range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinearFn {
    pub node_distances_km: Vec<f64>,
    pub node_values: Vec<f64>,
}

impl PiecewiseLinearFn {
    pub fn new(node_distances_km: Vec<f64>, node_values: Vec<f64>) -> Result<Self, ModelError> {
        if node_distances_km.is_empty()
            || node_distances_km.len() != node_values.len()
            || node_distances_km.windows(2).any(|w| w[1] <= w[0])
            || node_distances_km.iter().any(|d| !d.is_finite())
        {
            return Err(ModelError::BadNodes);
        }
        Ok(Self { node_distances_km, node_values })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_values.len()
    }

    pub fn eval(&self, d: f64) -> f64 {
        let ds = &self.node_distances_km;
        let vs = &self.node_values;
        if d <= ds[0] {
            return vs[0];
        }
        if d >= ds[ds.len() - 1] {
            return vs[vs.len() - 1];
        }
        let hi = ds.partition_point(|nd| *nd < d);
        let (d0, d1) = (ds[hi - 1], ds[hi]);
        let h = d1 - d0;
        (vs[hi - 1] * (d1 - d) + vs[hi] * (d - d0)) / h
    }
}

/// The five distance profiles of one quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityProfiles {
    pub alpha: PiecewiseLinearFn,
    pub beta: PiecewiseLinearFn,
    pub mu: PiecewiseLinearFn,
    pub sigma: PiecewiseLinearFn,
    pub delta: PiecewiseLinearFn,
}

/// Inclusive-or-open box for one scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub lo: f64,
    pub hi: f64,
    pub lo_open: bool,
}

impl Bound {
    pub const fn new(lo: f64, hi: f64, lo_open: bool) -> Self {
        Self { lo, hi, lo_open }
    }

    pub fn contains(&self, v: f64) -> bool {
        v.is_finite() && v <= self.hi && if self.lo_open { v > self.lo } else { v >= self.lo }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

pub const ALPHA_BOUND: Bound = Bound::new(0.0, 2.0, true);
pub const BETA_BOUND: Bound = Bound::new(-5.0, 1.0, false);
pub const MU_BOUND: Bound = Bound::new(-5.0, 5.0, false);
pub const SIGMA_BOUND: Bound = Bound::new(0.0, 5.0, true);
pub const DELTA_BOUND: Bound = Bound::new(0.1, 5.0, false);
pub const UNIT_BOUND: Bound = Bound::new(0.0, 1.0, true);

/// Index of the unordered pair (k, k'), k < k', in the strict upper triangle
/// laid out row-major; 1-based quantity indices.
fn tri_strict(k: usize, kp: usize, m: usize) -> usize {
    debug_assert!(k < kp && kp <= m);
    (k - 1) * m - k * (k - 1) / 2 + (kp - k - 1)
}

/// Index of the pair (k, k'), k <= k', in the upper triangle with diagonal.
fn tri_incl(k: usize, kp: usize, m: usize) -> usize {
    debug_assert!(k <= kp && kp <= m);
    (k - 1) * (m + 1) - (k - 1) * k / 2 + (kp - k)
}

/// Full parameter set of the dependence model. `lambda` holds the strict
/// upper triangle (k < k'), `rho` and `kappa` the upper triangle with
/// diagonal, all as scaled values in (0, 1]; actual correlation ranges are
/// `rho_unit_km * rho` and `kappa_unit * kappa`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MSCEParams {
    pub profiles: Vec<QuantityProfiles>,
    pub lambda: Vec<f64>,
    pub rho: Vec<f64>,
    pub kappa: Vec<f64>,
    pub rho_unit_km: f64,
    pub kappa_unit: f64,
}

impl MSCEParams {
    pub fn m(&self) -> usize {
        self.profiles.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let m = self.m();
        if m == 0 {
            return Err(ModelError::DimensionMismatch { what: "quantities", expected: 1, got: 0 });
        }
        let strict = m * (m - 1) / 2;
        let incl = m * (m + 1) / 2;
        if self.lambda.len() != strict {
            return Err(ModelError::DimensionMismatch {
                what: "lambda length",
                expected: strict,
                got: self.lambda.len(),
            });
        }
        if self.rho.len() != incl {
            return Err(ModelError::DimensionMismatch {
                what: "rho length",
                expected: incl,
                got: self.rho.len(),
            });
        }
        if self.kappa.len() != incl {
            return Err(ModelError::DimensionMismatch {
                what: "kappa length",
                expected: incl,
                got: self.kappa.len(),
            });
        }
        Ok(())
    }

    /// lambda_{k,k'} with the convention lambda_{k,k} = 1; 1-based indices.
    pub fn lambda_between(&self, k: usize, kp: usize) -> f64 {
        if k == kp {
            1.0
        } else {
            let (a, b) = (k.min(kp), k.max(kp));
            self.lambda[tri_strict(a, b, self.m())]
        }
    }

    /// Actual correlation range rho_{k,k'} in km.
    pub fn rho_between(&self, k: usize, kp: usize) -> f64 {
        let (a, b) = (k.min(kp), k.max(kp));
        self.rho_unit_km * self.rho[tri_incl(a, b, self.m())]
    }

    /// Actual powered-exponential exponent kappa_{k,k'}.
    pub fn kappa_between(&self, k: usize, kp: usize) -> f64 {
        let (a, b) = (k.min(kp), k.max(kp));
        self.kappa_unit * self.kappa[tri_incl(a, b, self.m())]
    }

    /// True when every node value and cross-quantity parameter sits inside
    /// its uniform prior box.
    pub fn in_box(&self) -> bool {
        self.profiles.iter().all(|q| {
            q.alpha.node_values.iter().all(|v| ALPHA_BOUND.contains(*v))
                && q.beta.node_values.iter().all(|v| BETA_BOUND.contains(*v))
                && q.mu.node_values.iter().all(|v| MU_BOUND.contains(*v))
                && q.sigma.node_values.iter().all(|v| SIGMA_BOUND.contains(*v))
                && q.delta.node_values.iter().all(|v| DELTA_BOUND.contains(*v))
        }) && self
            .lambda
            .iter()
            .chain(&self.rho)
            .chain(&self.kappa)
            .all(|v| UNIT_BOUND.contains(*v))
    }
}

/// Fixed shape of the packed parameter vector: m quantities with n_nod nodes
/// each, shared node distances, and the scaling units. Pack order is, per
/// quantity, the alpha, beta, mu, sigma, delta node blocks, followed by the
/// lambda, rho, kappa triangles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub m: usize,
    pub node_distances_km: Vec<f64>,
    pub rho_unit_km: f64,
    pub kappa_unit: f64,
}

pub const DEFAULT_RHO_UNIT_KM: f64 = 100.0;
pub const DEFAULT_KAPPA_UNIT: f64 = 5.0;
pub const DEFAULT_N_NOD: usize = 5;

impl ParamLayout {
    pub fn new(
        m: usize,
        node_distances_km: Vec<f64>,
        rho_unit_km: f64,
        kappa_unit: f64,
    ) -> Result<Self, ModelError> {
        if m == 0 {
            return Err(ModelError::DimensionMismatch { what: "quantities", expected: 1, got: 0 });
        }
        if node_distances_km.is_empty()
            || node_distances_km.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(ModelError::BadNodes);
        }
        Ok(Self { m, node_distances_km, rho_unit_km, kappa_unit })
    }

    /// Equally spaced nodes spanning the remote distances d_1..d_p.
    pub fn spanning(
        m: usize,
        n_nod: usize,
        distances_km: &[f64],
        rho_unit_km: f64,
        kappa_unit: f64,
    ) -> Result<Self, ModelError> {
        if distances_km.is_empty() || n_nod < 1 {
            return Err(ModelError::BadNodes);
        }
        let (first, last) = (distances_km[0], distances_km[distances_km.len() - 1]);
        let nodes = if n_nod == 1 || distances_km.len() == 1 {
            vec![first]
        } else {
            (0..n_nod)
                .map(|i| first + (last - first) * i as f64 / (n_nod - 1) as f64)
                .collect()
        };
        Self::new(m, nodes, rho_unit_km, kappa_unit)
    }

    pub fn n_nod(&self) -> usize {
        self.node_distances_km.len()
    }

    fn n_strict(&self) -> usize {
        self.m * (self.m - 1) / 2
    }

    fn n_incl(&self) -> usize {
        self.m * (self.m + 1) / 2
    }

    /// Packed length m(5 n_nod + (3m+1)/2).
    pub fn dim(&self) -> usize {
        5 * self.m * self.n_nod() + self.n_strict() + 2 * self.n_incl()
    }

    /// The prior box, one bound per packed coordinate.
    pub fn bounds(&self) -> Vec<Bound> {
        let mut out = Vec::with_capacity(self.dim());
        for _ in 0..self.m {
            for b in [ALPHA_BOUND, BETA_BOUND, MU_BOUND, SIGMA_BOUND, DELTA_BOUND] {
                out.extend(std::iter::repeat_n(b, self.n_nod()));
            }
        }
        out.extend(std::iter::repeat_n(UNIT_BOUND, self.n_strict()));
        out.extend(std::iter::repeat_n(UNIT_BOUND, 2 * self.n_incl()));
        out
    }

    pub fn in_support(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && self.bounds().iter().zip(theta).all(|(b, v)| b.contains(*v))
    }

    pub fn pack(&self, params: &MSCEParams) -> Result<Vec<f64>, ModelError> {
        params.validate()?;
        if params.m() != self.m {
            return Err(ModelError::DimensionMismatch {
                what: "quantities",
                expected: self.m,
                got: params.m(),
            });
        }
        let mut out = Vec::with_capacity(self.dim());
        for q in &params.profiles {
            for f in [&q.alpha, &q.beta, &q.mu, &q.sigma, &q.delta] {
                if f.n_nodes() != self.n_nod() {
                    return Err(ModelError::DimensionMismatch {
                        what: "profile nodes",
                        expected: self.n_nod(),
                        got: f.n_nodes(),
                    });
                }
                out.extend_from_slice(&f.node_values);
            }
        }
        out.extend_from_slice(&params.lambda);
        out.extend_from_slice(&params.rho);
        out.extend_from_slice(&params.kappa);
        Ok(out)
    }

    pub fn unpack(&self, theta: &[f64]) -> Result<MSCEParams, ModelError> {
        if theta.len() != self.dim() {
            return Err(ModelError::DimensionMismatch {
                what: "packed vector",
                expected: self.dim(),
                got: theta.len(),
            });
        }
        let n = self.n_nod();
        let mut pos = 0;
        let mut take = |len: usize| {
            let s = theta[pos..pos + len].to_vec();
            pos += len;
            s
        };
        let mut profiles = Vec::with_capacity(self.m);
        for _ in 0..self.m {
            let mut block = || {
                PiecewiseLinearFn::new(self.node_distances_km.clone(), take(n))
            };
            profiles.push(QuantityProfiles {
                alpha: block()?,
                beta: block()?,
                mu: block()?,
                sigma: block()?,
                delta: block()?,
            });
        }
        let lambda = take(self.n_strict());
        let rho = take(self.n_incl());
        let kappa = take(self.n_incl());
        Ok(MSCEParams {
            profiles,
            lambda,
            rho,
            kappa,
            rho_unit_km: self.rho_unit_km,
            kappa_unit: self.kappa_unit,
        })
    }
}

/// Conditioned events on standard Laplace scale: conditioning values x_i
/// (quantity 1 at r_0, all above the threshold u) and the n x mp remote
/// matrix in RemoteIndex column order.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceDataset {
    x: Vec<f64>,
    remote: Vec<f64>,
    distances_km: Vec<f64>,
    quantities: Vec<String>,
    u: f64,
}

impl LaplaceDataset {
    pub fn new(
        x: Vec<f64>,
        remote: Vec<f64>,
        distances_km: Vec<f64>,
        quantities: Vec<String>,
        u: f64,
    ) -> Result<Self, ModelError> {
        if x.is_empty() || quantities.is_empty() {
            return Err(ModelError::EmptyData);
        }
        if distances_km.is_empty()
            || distances_km[0] <= 0.0
            || distances_km.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(ModelError::BadDistances);
        }
        let mp = distances_km.len() * quantities.len();
        if remote.len() != x.len() * mp {
            return Err(ModelError::DimensionMismatch {
                what: "remote matrix",
                expected: x.len() * mp,
                got: remote.len(),
            });
        }
        if let Some(i) = x.iter().position(|xi| !(*xi > u)) {
            return Err(ModelError::BelowThreshold { index: i, u });
        }
        Ok(Self { x, remote, distances_km, quantities, u })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn p(&self) -> usize {
        self.distances_km.len()
    }

    pub fn m(&self) -> usize {
        self.quantities.len()
    }

    pub fn index(&self) -> RemoteIndex {
        RemoteIndex { p: self.p(), m: self.m() }
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn u(&self) -> f64 {
        self.u
    }

    pub fn distances_km(&self) -> &[f64] {
        &self.distances_km
    }

    pub fn quantities(&self) -> &[String] {
        &self.quantities
    }

    pub fn remote_row(&self, i: usize) -> &[f64] {
        let mp = self.p() * self.m();
        &self.remote[i * mp..(i + 1) * mp]
    }

    pub fn remote_col(&self, a: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.remote_row(i)[a]).collect()
    }
}

/// Correlation of the unconditioned standard Gaussian field over the extended
/// index set, entry lambda_{k,k'}^{|k-k'|} exp(-(dist/rho_{k,k'})^{kappa_{k,k'}}).
pub fn unconditional_corr(
    params: &MSCEParams,
    distances_km: &[f64],
) -> Result<SquareMatrix, ModelError> {
    params.validate()?;
    if distances_km.is_empty() || distances_km.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ModelError::BadDistances);
    }
    let idx = RemoteIndex { p: distances_km.len(), m: params.m() };
    // extended set: position 0 is (0,1), then (j,k) in A order
    let mut pairs = Vec::with_capacity(idx.len() + 1);
    pairs.push((0usize, 1usize));
    pairs.extend(idx.pairs());
    let loc = |j: usize| if j == 0 { 0.0 } else { distances_km[j - 1] };

    let dim = pairs.len();
    let mut sigma = SquareMatrix::identity(dim);
    for a in 0..dim {
        for b in a + 1..dim {
            let (j, k) = pairs[a];
            let (jp, kp) = pairs[b];
            let lam = params.lambda_between(k, kp).powi(k.abs_diff(kp) as i32);
            let d = (loc(j) - loc(jp)).abs();
            let decay = if d == 0.0 {
                1.0
            } else {
                (-(d / params.rho_between(k, kp)).powf(params.kappa_between(k, kp))).exp()
            };
            let v = lam * decay;
            sigma[(a, b)] = v;
            sigma[(b, a)] = v;
        }
    }
    Ok(sigma)
}

/// Correlation of the remote field after conditioning on index 0 of the
/// extended matrix.
pub fn conditional_corr(sigma_star: &SquareMatrix) -> Result<SquareMatrix, ModelError> {
    let dim = sigma_star.dim() - 1;
    let s0: Vec<f64> = (0..dim).map(|a| sigma_star[(a + 1, 0)]).collect();
    let mut denom = Vec::with_capacity(dim);
    for (a, s) in s0.iter().enumerate() {
        if s.abs() >= 1.0 {
            return Err(ModelError::DegenerateConditioning { index: a + 1 });
        }
        denom.push((1.0 - s * s).sqrt());
    }
    let mut out = SquareMatrix::identity(dim);
    for a in 0..dim {
        for b in a + 1..dim {
            let v = (sigma_star[(a + 1, b + 1)] - s0[a] * s0[b]) / (denom[a] * denom[b]);
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
    }
    Ok(out)
}

/// Parameter vector evaluated at the transect distances: per-column alpha and
/// beta, and the residual model with conditional correlation. One Cholesky
/// factorization is shared across all events.
pub struct ConditionedModel {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    beta_sum: f64,
    residual: ResidualModel,
}

impl ConditionedModel {
    pub fn new(params: &MSCEParams, distances_km: &[f64]) -> Result<Self, ModelError> {
        let sigma_star = unconditional_corr(params, distances_km)?;
        let corr = conditional_corr(&sigma_star)?;
        let idx = RemoteIndex { p: distances_km.len(), m: params.m() };
        let mut alpha = Vec::with_capacity(idx.len());
        let mut beta = Vec::with_capacity(idx.len());
        let mut margins = Vec::with_capacity(idx.len());
        for (j, k) in idx.pairs() {
            let q = &params.profiles[k - 1];
            let d = distances_km[j - 1];
            alpha.push(q.alpha.eval(d));
            beta.push(q.beta.eval(d));
            margins.push(DeltaLaplaceMargin::new(
                q.mu.eval(d),
                q.sigma.eval(d),
                q.delta.eval(d),
            )?);
        }
        let beta_sum = beta.iter().sum();
        let residual = ResidualModel::new(margins, corr)?;
        Ok(Self { alpha, beta, beta_sum, residual })
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn residual(&self) -> &ResidualModel {
        &self.residual
    }

    /// z_a = (y_a - alpha_a x) / x^beta_a for one event.
    pub fn residuals(&self, x: f64, y: &[f64]) -> Vec<f64> {
        self.alpha
            .iter()
            .zip(&self.beta)
            .zip(y)
            .map(|((a, b), ya)| (ya - a * x) / x.powf(*b))
            .collect()
    }

    /// Log-likelihood contribution of one event, including the
    /// change-of-variables term -sum_a beta_a log x.
    pub fn event_loglik(&self, x: f64, y: &[f64]) -> Result<f64, StatsError> {
        let z = self.residuals(x, y);
        Ok(self.residual.log_density(&z)? - self.beta_sum * x.ln())
    }

    /// Draws one remote vector given the conditioning value x.
    pub fn simulate_event<R: rand::Rng>(&self, x: f64, rng: &mut R) -> Result<Vec<f64>, StatsError> {
        let z = self.residual.sample(rng)?;
        Ok(self
            .alpha
            .iter()
            .zip(&self.beta)
            .zip(z)
            .map(|((a, b), za)| a * x + x.powf(*b) * za)
            .collect())
    }
}

/// Log-posterior of the dependence model under uniform box priors: the summed
/// event log-likelihood inside the box, negative infinity outside it or when
/// the implied correlation is not positive definite.
pub fn msce_logposterior(params: &MSCEParams, data: &LaplaceDataset) -> Result<f64, ModelError> {
    params.validate()?;
    if params.m() != data.m() {
        return Err(ModelError::DimensionMismatch {
            what: "quantities",
            expected: data.m(),
            got: params.m(),
        });
    }
    if !params.in_box() {
        return Ok(f64::NEG_INFINITY);
    }
    let model = match ConditionedModel::new(params, data.distances_km()) {
        Ok(m) => m,
        Err(ModelError::Stats(StatsError::Linalg(LinalgError::NotPositiveDefinite { .. })))
        | Err(ModelError::DegenerateConditioning { .. }) => return Ok(f64::NEG_INFINITY),
        Err(e) => return Err(e),
    };
    let contributions = exec::map_indexed(data.n(), |i| {
        model.event_loglik(data.x()[i], data.remote_row(i))
    });
    let mut total = 0.0;
    for c in contributions {
        total += c?;
    }
    Ok(total)
}

/// Packed-vector posterior for the sampler: support check, unpack, evaluate.
/// Structural mismatches are ruled out here once so the closure is total.
pub fn posterior_fn<'a>(
    layout: &'a ParamLayout,
    data: &'a LaplaceDataset,
) -> Result<impl Fn(&[f64]) -> f64 + Sync + 'a, ModelError> {
    if layout.m != data.m() {
        return Err(ModelError::DimensionMismatch {
            what: "quantities",
            expected: data.m(),
            got: layout.m,
        });
    }
    Ok(move |theta: &[f64]| {
        if !layout.in_support(theta) {
            return f64::NEG_INFINITY;
        }
        let params = layout.unpack(theta).expect("support check fixes the shape");
        msce_logposterior(&params, data).expect("dataset validated at construction")
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{dl_logpdf, std_laplace_logpdf};
    use approx::assert_relative_eq;

    #[test]
    fn remote_index_formula() {
        let idx = RemoteIndex { p: 13, m: 3 };
        assert_eq!(idx.a(1, 1).unwrap(), 1);
        assert_eq!(idx.a(13, 3).unwrap(), 39);
        assert_eq!(idx.a_star(0, 1).unwrap(), 0);
        assert_eq!(idx.a_star(1, 1).unwrap(), 1);
        assert!(idx.a(0, 1).is_err());
        assert!(idx.a(14, 1).is_err());
        assert!(idx.a(1, 4).is_err());
        let pairs: Vec<_> = idx.pairs().collect();
        assert_eq!(pairs.len(), 39);
        assert_eq!(pairs[0], (1, 1));
        assert_eq!(pairs[13], (1, 2));
        for (j, k) in idx.pairs() {
            assert_eq!(pairs[idx.col(j, k).unwrap()], (j, k));
        }
    }

    #[test]
    fn triangle_index_formulas() {
        // strict triangle, m = 3: (1,2) (1,3) (2,3)
        assert_eq!(tri_strict(1, 2, 3), 0);
        assert_eq!(tri_strict(1, 3, 3), 1);
        assert_eq!(tri_strict(2, 3, 3), 2);
        // inclusive triangle, m = 3: every pair hits a distinct slot
        let expected = [((1, 1), 0), ((1, 2), 1), ((1, 3), 2), ((2, 2), 3), ((2, 3), 4), ((3, 3), 5)];
        for ((k, kp), idx) in expected {
            assert_eq!(tri_incl(k, kp, 3), idx, "pair ({k},{kp})");
        }
        // the accessors read the slots just listed, in either argument order
        let mut params = simple_params(3);
        params.rho = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        assert_eq!(params.rho_between(2, 2), 100.0 * 0.4);
        assert_eq!(params.rho_between(3, 2), 100.0 * 0.5);
        assert_eq!(params.rho_between(3, 3), 100.0 * 0.6);
    }

    #[test]
    fn pwl_interpolation() {
        let f = PiecewiseLinearFn::new(vec![100.0, 200.0, 400.0], vec![0.2, 0.6, 0.1]).unwrap();
        assert_eq!(f.eval(100.0), 0.2);
        assert_eq!(f.eval(200.0), 0.6);
        assert_relative_eq!(f.eval(150.0), 0.4, epsilon = 1e-15);
        assert_relative_eq!(f.eval(300.0), 0.35, epsilon = 1e-15);
        assert_eq!(f.eval(500.0), 0.1);
        assert_eq!(f.eval(10.0), 0.2);
        assert!(PiecewiseLinearFn::new(vec![1.0, 1.0], vec![0.0, 0.0]).is_err());
        assert!(PiecewiseLinearFn::new(vec![1.0], vec![0.0, 0.0]).is_err());
    }

    fn const_profiles(m: usize, nodes: &[f64], alpha: f64, beta: f64) -> Vec<QuantityProfiles> {
        (0..m)
            .map(|_| QuantityProfiles {
                alpha: PiecewiseLinearFn::new(nodes.to_vec(), vec![alpha; nodes.len()]).unwrap(),
                beta: PiecewiseLinearFn::new(nodes.to_vec(), vec![beta; nodes.len()]).unwrap(),
                mu: PiecewiseLinearFn::new(nodes.to_vec(), vec![0.0; nodes.len()]).unwrap(),
                sigma: PiecewiseLinearFn::new(nodes.to_vec(), vec![1.0; nodes.len()]).unwrap(),
                delta: PiecewiseLinearFn::new(nodes.to_vec(), vec![2.0; nodes.len()]).unwrap(),
            })
            .collect()
    }

    fn simple_params(m: usize) -> MSCEParams {
        let nodes = [100.0, 600.0];
        MSCEParams {
            profiles: const_profiles(m, &nodes, 0.5, 0.2),
            lambda: vec![0.7; m * (m - 1) / 2],
            rho: vec![0.8; m * (m + 1) / 2],
            kappa: vec![0.3; m * (m + 1) / 2],
            rho_unit_km: 100.0,
            kappa_unit: 5.0,
        }
    }

    #[test]
    fn unconditional_corr_examples() {
        let mut params = simple_params(3);
        // lambda pairs (1,2), (1,3), (2,3)
        params.lambda = vec![0.9, 0.7, 0.5];
        let d = vec![100.0, 200.0];
        let s = unconditional_corr(&params, &d).unwrap();
        assert_eq!(s.dim(), 7);
        let idx = RemoteIndex { p: 2, m: 3 };
        // same location, same quantity
        for a in 0..7 {
            assert_eq!(s[(a, a)], 1.0);
        }
        // distance = actual rho, same quantity: exp(-1) whatever kappa
        // actual rho = 100 * 0.8 = 80; rebuild with matching spacing
        let s2 = unconditional_corr(&params, &[80.0, 160.0]).unwrap();
        let a = idx.a_star(1, 1).unwrap();
        let b = idx.a_star(2, 1).unwrap();
        assert_relative_eq!(s2[(a, b)], (-1.0f64).exp(), epsilon = 1e-15);
        // k=1, k'=3 at distance zero: lambda^2 = 0.49
        let a13 = idx.a_star(1, 1).unwrap();
        let b13 = idx.a_star(1, 3).unwrap();
        assert_relative_eq!(s[(a13, b13)], 0.49, epsilon = 1e-15);
        // symmetry is exact
        for a in 0..7 {
            for b in 0..7 {
                assert_eq!(s[(a, b)], s[(b, a)]);
            }
        }
    }

    #[test]
    fn conditional_corr_hand_case() {
        // 2x2 remote block with sigma*_{a0} = sigma*_{b0} = 0.5, sigma*_{ab} = 0.8
        let s = SquareMatrix::from_fn(3, |i, j| match (i.min(j), i.max(j)) {
            (a, b) if a == b => 1.0,
            (0, _) => 0.5,
            _ => 0.8,
        });
        let c = conditional_corr(&s).unwrap();
        assert_eq!(c.dim(), 2);
        assert_eq!(c[(0, 0)], 1.0);
        assert_relative_eq!(c[(0, 1)], (0.8 - 0.25) / 0.75, epsilon = 1e-15);
        assert_eq!(c[(0, 1)], c[(1, 0)]);
    }

    #[test]
    fn conditional_corr_no_conditioning_effect() {
        let s = SquareMatrix::from_fn(4, |i, j| {
            if i == j {
                1.0
            } else if i == 0 || j == 0 {
                0.0
            } else {
                0.3
            }
        });
        let c = conditional_corr(&s).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(c[(a, b)], s[(a + 1, b + 1)]);
            }
        }
    }

    #[test]
    fn conditional_corr_degenerate_rejected() {
        let s = SquareMatrix::from_fn(2, |_, _| 1.0);
        assert!(matches!(
            conditional_corr(&s),
            Err(ModelError::DegenerateConditioning { index: 1 })
        ));
    }

    fn tiny_dataset(x: Vec<f64>, remote: Vec<f64>, p: usize, m: usize) -> LaplaceDataset {
        let distances: Vec<f64> = (1..=p).map(|j| 100.0 * j as f64).collect();
        let names: Vec<String> = (1..=m).map(|k| format!("q{k}")).collect();
        LaplaceDataset::new(x, remote, distances, names, 0.5).unwrap()
    }

    #[test]
    fn logposterior_exact_residual_zero() {
        // single event, mp = 1, alpha = 1, beta = 0, standard normal margin
        let nodes = [100.0, 600.0];
        let params = MSCEParams {
            profiles: const_profiles(1, &nodes, 1.0, 0.0),
            lambda: vec![],
            rho: vec![0.8],
            kappa: vec![0.3],
            rho_unit_km: 100.0,
            kappa_unit: 5.0,
        };
        let x = 2.0;
        let data = tiny_dataset(vec![x], vec![x], 1, 1);
        let lp = msce_logposterior(&params, &data).unwrap();
        assert_relative_eq!(lp, -0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
    }

    #[test]
    fn logposterior_jacobian_vanishes_at_beta_zero() {
        let nodes = [100.0, 600.0];
        let mut params = simple_params(2);
        params.profiles = const_profiles(2, &nodes, 0.5, 0.0);
        let x = vec![1.0, 2.0, 3.0];
        let p = 2;
        let mp = p * 2;
        let remote: Vec<f64> = (0..x.len() * mp).map(|i| 0.3 + 0.1 * i as f64).collect();
        let data = tiny_dataset(x.clone(), remote.clone(), p, 2);
        let lp = msce_logposterior(&params, &data).unwrap();
        // direct: sum of residual log-densities, no jacobian
        let model = ConditionedModel::new(&params, data.distances_km()).unwrap();
        let mut direct = 0.0;
        for i in 0..x.len() {
            let z = model.residuals(x[i], data.remote_row(i));
            direct += model.residual().log_density(&z).unwrap();
        }
        assert_relative_eq!(lp, direct, epsilon = 1e-12);
    }

    #[test]
    fn logposterior_out_of_box_is_neg_inf() {
        let mut params = simple_params(2);
        let data = tiny_dataset(vec![1.0], vec![0.1; 4], 2, 2);
        params.lambda[0] = 1.5;
        assert_eq!(msce_logposterior(&params, &data).unwrap(), f64::NEG_INFINITY);
        params.lambda[0] = 0.0; // open lower bound
        assert_eq!(msce_logposterior(&params, &data).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn logposterior_event_permutation_invariant() {
        let params = simple_params(1);
        let x = vec![1.0, 1.5, 2.5, 4.0];
        let remote: Vec<f64> = (0..x.len() * 3).map(|i| (i as f64 * 0.37).sin()).collect();
        let data = tiny_dataset(x.clone(), remote.clone(), 3, 1);
        let lp = msce_logposterior(&params, &data).unwrap();
        // reverse event order
        let xr: Vec<f64> = x.iter().rev().copied().collect();
        let mut rr = Vec::new();
        for i in (0..x.len()).rev() {
            rr.extend_from_slice(&remote[i * 3..(i + 1) * 3]);
        }
        let datar = tiny_dataset(xr, rr, 3, 1);
        let lpr = msce_logposterior(&params, &datar).unwrap();
        assert_relative_eq!(lp, lpr, epsilon = 1e-10);
    }

    #[test]
    fn far_field_reduces_to_standard_laplace() {
        // alpha, beta -> 0 at the far node; delta=1, mu=0, sigma=sqrt(2)
        // leaves the conditional distribution standard Laplace
        let nodes = vec![100.0, 600.0];
        let mk = |v0: f64, v1: f64| PiecewiseLinearFn::new(nodes.clone(), vec![v0, v1]).unwrap();
        let params = MSCEParams {
            profiles: vec![QuantityProfiles {
                alpha: mk(0.9, 1e-300),
                beta: mk(0.3, 0.0),
                mu: mk(0.0, 0.0),
                sigma: mk(1.0, std::f64::consts::SQRT_2),
                delta: mk(2.0, 1.0),
            }],
            lambda: vec![],
            rho: vec![0.8],
            kappa: vec![0.3],
            rho_unit_km: 100.0,
            kappa_unit: 5.0,
        };
        let model = ConditionedModel::new(&params, &[900.0]).unwrap();
        let x = 3.0;
        for z in [-2.0, -0.3, 0.0, 1.2, 4.0] {
            // alpha ~ 0, beta = 0: y = z itself
            let ll = model.event_loglik(x, &[z]).unwrap();
            assert_relative_eq!(ll, std_laplace_logpdf(z), epsilon = 1e-10);
            let margin = DeltaLaplaceMargin::new(0.0, std::f64::consts::SQRT_2, 1.0).unwrap();
            assert_relative_eq!(ll, dl_logpdf(z, &margin), epsilon = 1e-10);
        }
    }

    #[test]
    fn pack_unpack_round_trip() {
        let layout = ParamLayout::spanning(
            3,
            5,
            &[100.0, 200.0, 300.0, 400.0, 500.0, 600.0],
            100.0,
            5.0,
        )
        .unwrap();
        assert_eq!(layout.dim(), 90);
        assert_eq!(layout.node_distances_km[0], 100.0);
        assert_eq!(*layout.node_distances_km.last().unwrap(), 600.0);
        let theta: Vec<f64> = layout
            .bounds()
            .iter()
            .enumerate()
            .map(|(i, b)| b.lo + b.width() * (0.1 + 0.8 * (i as f64 / 90.0)))
            .collect();
        assert!(layout.in_support(&theta));
        let params = layout.unpack(&theta).unwrap();
        let repacked = layout.pack(&params).unwrap();
        assert_eq!(theta, repacked);
        // two-quantity layout: 2*(5*3) + 1 + 2*3 = 37
        let l2 = ParamLayout::spanning(2, 3, &[50.0, 150.0], 100.0, 5.0).unwrap();
        assert_eq!(l2.dim(), 37);
    }

    #[test]
    fn support_boundaries() {
        let layout = ParamLayout::spanning(1, 2, &[100.0, 600.0], 100.0, 5.0).unwrap();
        let mid: Vec<f64> =
            layout.bounds().iter().map(|b| b.lo + 0.5 * b.width()).collect();
        assert!(layout.in_support(&mid));
        let mut t = mid.clone();
        t[0] = 0.0; // alpha lower bound is open
        assert!(!layout.in_support(&t));
        t[0] = 2.0; // upper bound inclusive
        assert!(layout.in_support(&t));
        let mut t2 = mid.clone();
        t2[2] = -5.0; // beta lower bound closed
        assert!(layout.in_support(&t2));
        t2[2] = -5.000001;
        assert!(!layout.in_support(&t2));
    }

    #[test]
    fn params_json_round_trip() {
        let params = simple_params(2);
        let s = serde_json::to_string(&params).unwrap();
        let back: MSCEParams = serde_json::from_str(&s).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn dataset_validation() {
        assert!(matches!(
            LaplaceDataset::new(vec![1.0], vec![0.0], vec![100.0], vec!["q".into()], 2.0),
            Err(ModelError::BelowThreshold { index: 0, .. })
        ));
        assert!(LaplaceDataset::new(
            vec![1.0],
            vec![0.0, 0.0],
            vec![100.0],
            vec!["q".into()],
            0.5
        )
        .is_err());
    }
}
