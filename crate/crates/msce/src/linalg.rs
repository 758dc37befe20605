//! Dense symmetric matrices and Cholesky factorization for the moderate
//! dimensions used here (correlation matrices up to roughly 60 x 60).

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite: leading minor of order {order} is not positive")]
    NotPositiveDefinite { order: usize },
    #[error("dimension mismatch: matrix is {dim}x{dim}, vector has length {len}")]
    DimensionMismatch { dim: usize, len: usize },
}

/// Row-major square matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                if (self[(i, j)] - self[(j, i)]).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    /// Lower Cholesky factor L with A = L Lᵀ. Fails on the first
    /// non-positive pivot, reporting the order of the offending leading
    /// minor (1-based).
    pub fn cholesky(&self) -> Result<CholeskyFactor, LinalgError> {
        let n = self.dim;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(LinalgError::NotPositiveDefinite { order: i + 1 });
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(CholeskyFactor { dim: n, l })
    }
}

impl std::ops::Index<(usize, usize)> for SquareMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.dim + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for SquareMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.dim + j]
    }
}

/// Lower-triangular Cholesky factor.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    dim: usize,
    l: Vec<f64>,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// log det(A) = 2 Σ log L_ii.
    pub fn log_det(&self) -> f64 {
        (0..self.dim).map(|i| self.l[i * self.dim + i].ln()).sum::<f64>() * 2.0
    }

    /// Solves L v = b (forward substitution).
    pub fn solve_lower(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let n = self.dim;
        if b.len() != n {
            return Err(LinalgError::DimensionMismatch { dim: n, len: b.len() });
        }
        let mut v = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * v[k];
            }
            v[i] = s / self.l[i * n + i];
        }
        Ok(v)
    }

    /// Quadratic form bᵀ A⁻¹ b = ‖L⁻¹ b‖².
    pub fn quad_form(&self, b: &[f64]) -> Result<f64, LinalgError> {
        let v = self.solve_lower(b)?;
        Ok(v.iter().map(|x| x * x).sum())
    }

    /// y = L z, mapping iid standard normals to correlated draws.
    pub fn mul_lower(&self, z: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let n = self.dim;
        if z.len() != n {
            return Err(LinalgError::DimensionMismatch { dim: n, len: z.len() });
        }
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = 0.0;
            for k in 0..=i {
                s += self.l[i * n + k] * z[k];
            }
            y[i] = s;
        }
        Ok(y)
    }
}

/// Running mean and covariance accumulated by rank-1 updates.
///
/// With a finite half-life the estimator forgets exponentially: every push
/// multiplies the weight of all earlier samples by 2^(-1/half_life), so the
/// estimate tracks the recent window instead of the whole history.
#[derive(Debug, Clone)]
pub struct RunningCovariance {
    dim: usize,
    count: usize,
    // sum of (decayed) sample weights; equals count when lambda = 1
    weight: f64,
    // per-push decay applied to earlier weights; 1.0 = equal weighting
    lambda: f64,
    mean: Vec<f64>,
    // weighted sum of outer products of deviations, row-major
    m2: Vec<f64>,
}

impl RunningCovariance {
    /// Equal-weight estimator over the full history.
    pub fn new(dim: usize) -> Self {
        Self::with_half_life(dim, f64::INFINITY)
    }

    /// Estimator whose memory of past samples halves every `half_life`
    /// pushes; `f64::INFINITY` recovers the equal-weight estimator.
    pub fn with_half_life(dim: usize, half_life: f64) -> Self {
        assert!(half_life > 0.0, "half_life must be positive");
        let lambda = if half_life.is_finite() {
            (-std::f64::consts::LN_2 / half_life).exp()
        } else {
            1.0
        };
        Self {
            dim,
            count: 0,
            weight: 0.0,
            lambda,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim * dim],
        }
    }

    /// Number of samples pushed, ignoring decay.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim);
        self.count += 1;
        if self.lambda < 1.0 {
            // Scaling every prior weight by lambda leaves the mean unchanged
            // and scales the scatter matrix linearly.
            self.weight *= self.lambda;
            for v in &mut self.m2 {
                *v *= self.lambda;
            }
        }
        self.weight += 1.0;
        let w = self.weight;
        let mut delta = vec![0.0; self.dim];
        for i in 0..self.dim {
            delta[i] = x[i] - self.mean[i];
            self.mean[i] += delta[i] / w;
        }
        for i in 0..self.dim {
            let d2_i = x[i] - self.mean[i];
            for j in 0..self.dim {
                self.m2[i * self.dim + j] += delta[j] * d2_i;
            }
        }
    }

    /// Sample covariance, dividing by the accumulated weight minus 1 so the
    /// equal-weight case matches the usual n − 1 form; `None` until two
    /// samples.
    pub fn covariance(&self) -> Option<SquareMatrix> {
        if self.count < 2 {
            return None;
        }
        let n = self.weight - 1.0;
        Some(SquareMatrix {
            dim: self.dim,
            data: self.m2.iter().map(|v| v / n).collect(),
        })
    }
}
