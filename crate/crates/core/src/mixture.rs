//! Shared-covariance Gaussian mixtures: log-densities, the cost matrix
//! `C_ij = -log N(x_i; μ_j, Σ)`, the negative log-likelihood and seeded
//! sampling from the generative process (draw a class, then a point).
//!
//! Other conditional families plug into the transport side of the crate by
//! producing a [`CostMatrix`]; only the Gaussian case is implemented here.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::divergence::masked_weighted_logsumexp;
use crate::error::{Error, Result};
use crate::types::{CostMatrix, Dataset, GmmParams};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Cholesky factor and log-determinant of a covariance, computed once and
/// reused for every density evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmLogDensityCache {
    cholesky_factor: DMatrix<f64>,
    log_det_sigma: f64,
    dimension: usize,
}

impl GmmLogDensityCache {
    pub fn new(sigma: &DMatrix<f64>) -> Result<Self> {
        if !sigma.is_square() || sigma.nrows() == 0 {
            return Err(Error::ShapeMismatch {
                expected: "non-empty square covariance".into(),
                found: format!("{}x{}", sigma.nrows(), sigma.ncols()),
            });
        }
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or(Error::NonPositiveDefiniteCovariance)?;
        let l = chol.unpack();
        let log_det_sigma = 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
        if !log_det_sigma.is_finite() {
            return Err(Error::NonPositiveDefiniteCovariance);
        }
        Ok(Self {
            dimension: l.nrows(),
            cholesky_factor: l,
            log_det_sigma,
        })
    }

    /// Lower-triangular `L` with `L Lᵀ = Σ`.
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.cholesky_factor
    }

    pub fn log_det_sigma(&self) -> f64 {
        self.log_det_sigma
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// `(x − μ)ᵀ Σ⁻¹ (x − μ)` via one triangular solve.
    fn mahalanobis_sq(&self, residual: &DVector<f64>) -> f64 {
        let z = self
            .cholesky_factor
            .solve_lower_triangular(residual)
            .expect("Cholesky factor has a positive diagonal");
        z.norm_squared()
    }
}

/// `log N(x; μ, Σ) = -(d/2) log 2π - ½ log det Σ - ½ (x−μ)ᵀ Σ⁻¹ (x−μ)`.
pub fn gmm_log_pdf(x: &DVector<f64>, mu: &DVector<f64>, cache: &GmmLogDensityCache) -> Result<f64> {
    let d = cache.dimension;
    for v in [x, mu] {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: v.len(),
            });
        }
    }
    let q = cache.mahalanobis_sq(&(x - mu));
    Ok(-0.5 * d as f64 * LN_2PI - 0.5 * cache.log_det_sigma - 0.5 * q)
}

/// `C_ij = -log N(x_i; μ_j, Σ)` for every point and component.
pub fn cost_matrix(params: &GmmParams, data: &Dataset) -> Result<CostMatrix> {
    if params.dimension() != data.dimension() {
        return Err(Error::DimensionMismatch {
            expected: params.dimension(),
            found: data.dimension(),
        });
    }
    let cache = GmmLogDensityCache::new(params.covariance())?;
    let (n, k) = (data.len(), params.n_components());
    let mut costs = DMatrix::zeros(n, k);
    for (i, x) in data.points().iter().enumerate() {
        for (j, mu) in params.means().iter().enumerate() {
            costs[(i, j)] = -gmm_log_pdf(x, mu, &cache)?;
        }
    }
    CostMatrix::new(costs)
}

/// Negative log-likelihood `-Σ_i log Σ_j π_j N(x_i; μ_j, Σ)`, in nats.
///
/// Components with zero weight are left out of the inner sum.
pub fn nll(params: &GmmParams, data: &Dataset) -> Result<f64> {
    let c = cost_matrix(params, data)?;
    Ok(nll_from_costs(params.weights().as_slice(), &c))
}

pub(crate) fn nll_from_costs(weights: &[f64], c: &CostMatrix) -> f64 {
    -(0..c.n_points())
        .map(|i| masked_weighted_logsumexp(weights, &c.negated_row(i)))
        .sum::<f64>()
}

/// Draws `n` labelled points: a class `j` with probability `π_j`, then a point
/// from `N(μ_j, Σ)`. Labels are reported 1-based. The stream is a ChaCha8
/// generator seeded with `seed`, consumed one label then `d` normals per point.
pub fn sample_gmm(params: &GmmParams, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidDataset("cannot sample zero points".into()));
    }
    let cache = GmmLogDensityCache::new(params.covariance())?;
    let classes = WeightedIndex::new(params.weights().as_slice())
        .map_err(|e| Error::InvalidParams(format!("weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = params.dimension();
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let j = classes.sample(&mut rng);
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        points.push(&params.means()[j] + cache.cholesky_factor() * z);
        labels.push(j + 1);
    }
    Dataset::new(points, Some(labels))
}
