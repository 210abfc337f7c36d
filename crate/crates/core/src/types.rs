//! Validated domain types: simplex points, couplings, cost matrices, model
//! parameters and datasets.
//!
//! All types are immutable once constructed. Every constructor checks the
//! invariants of its type and returns an [`Error`] instead of silently
//! repairing anything beyond the documented clamping of tiny negatives.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tolerance for simplex and coupling membership (row/column sums, total mass).
pub const MEMBERSHIP_TOL: f64 = 1e-10;

/// Tolerance for covariance symmetry, relative to `max(1, max |Σ_ij|)`.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Negative entries no smaller than `-CLAMP_TOL` are clamped to zero.
pub const CLAMP_TOL: f64 = 1e-12;

/// A point of the probability simplex: nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Validates `weights` with the default membership tolerance.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        validate_simplex(&weights, MEMBERSHIP_TOL)
    }

    /// The uniform distribution on `m` bins.
    ///
    /// # Panics
    /// If `m == 0`.
    pub fn uniform(m: usize) -> Self {
        assert!(m > 0, "uniform distribution needs at least one bin");
        Self(vec![1.0 / m as f64; m])
    }

    /// Point mass on bin `index` out of `m`.
    pub fn dirac(m: usize, index: usize) -> Self {
        assert!(index < m, "dirac index out of range");
        let mut w = vec![0.0; m];
        w[index] = 1.0;
        Self(w)
    }

    /// Wraps already-validated sums without renormalizing them.
    pub(crate) fn from_raw_unchecked(weights: Vec<f64>) -> Self {
        Self(weights)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Sum of the entries, accumulated left to right.
    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.0.iter().all(|&w| w > 0.0)
    }

    /// Errors with [`Error::NonPositiveWeight`] on the first zero entry.
    pub fn require_strictly_positive(&self) -> Result<()> {
        match self.0.iter().position(|&w| w <= 0.0) {
            Some(index) => Err(Error::NonPositiveWeight {
                index,
                value: self.0[index],
            }),
            None => Ok(()),
        }
    }

    /// L1 distance to another vector of the same length.
    pub fn l1_distance(&self, other: &ProbabilityVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

impl AsRef<[f64]> for ProbabilityVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Checks that `v` is a simplex point up to `tol`.
///
/// Entries in `[-tol, 0)` are clamped to zero. If the clamped vector's sum is
/// within `tol` of one it is renormalized (only when it is off by more than
/// [`CLAMP_TOL`], so exact inputs come back bit-for-bit unchanged).
pub fn validate_simplex(v: &[f64], tol: f64) -> Result<ProbabilityVector> {
    if v.is_empty() {
        return Err(Error::NotASimplexPoint {
            reason: "empty vector".into(),
        });
    }
    let mut w = Vec::with_capacity(v.len());
    for (i, &x) in v.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NotASimplexPoint {
                reason: format!("entry {i} is not finite ({x})"),
            });
        }
        if x < -tol {
            return Err(Error::NotASimplexPoint {
                reason: format!("entry {i} is negative ({x})"),
            });
        }
        w.push(x.max(0.0));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::NotASimplexPoint {
            reason: format!("entries sum to {sum}"),
        });
    }
    if (sum - 1.0).abs() > CLAMP_TOL {
        w.iter_mut().for_each(|x| *x /= sum);
    }
    Ok(ProbabilityVector(w))
}

/// A nonnegative `n × K` transport plan with a prescribed row marginal and,
/// for full couplings, a prescribed column marginal.
///
/// Without a column marginal this is a member of the semi-relaxed set
/// `{P ≥ 0 : P 1_K = a}`; with one it belongs to `{P ≥ 0 : P 1_K = a, Pᵀ 1_n = b}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    plan: DMatrix<f64>,
    row_marginal: ProbabilityVector,
    column_marginal: Option<ProbabilityVector>,
}

impl Coupling {
    pub fn new(
        mut plan: DMatrix<f64>,
        row_marginal: ProbabilityVector,
        column_marginal: Option<ProbabilityVector>,
    ) -> Result<Self> {
        let (n, k) = plan.shape();
        if n == 0 || k == 0 {
            return Err(Error::EmptyInput);
        }
        if row_marginal.len() != n {
            return Err(shape_err(
                format!("row marginal of length {n}"),
                row_marginal.len(),
            ));
        }
        if let Some(b) = &column_marginal {
            if b.len() != k {
                return Err(shape_err(format!("column marginal of length {k}"), b.len()));
            }
        }
        for i in 0..n {
            for j in 0..k {
                let x = plan[(i, j)];
                if !x.is_finite() {
                    return Err(Error::InvalidCoupling(format!(
                        "entry ({i}, {j}) is not finite"
                    )));
                }
                if x < 0.0 {
                    if x < -CLAMP_TOL {
                        return Err(Error::NegativeEntry {
                            row: i,
                            col: j,
                            value: x,
                        });
                    }
                    plan[(i, j)] = 0.0;
                }
            }
        }
        let rows = row_sums(&plan);
        for (i, (&s, &a)) in rows.iter().zip(row_marginal.as_slice()).enumerate() {
            if (s - a).abs() > MEMBERSHIP_TOL {
                return Err(Error::InvalidCoupling(format!(
                    "row {i} sums to {s}, expected {a}"
                )));
            }
        }
        if let Some(b) = &column_marginal {
            let cols = column_sums(&plan);
            for (j, (&s, &bj)) in cols.iter().zip(b.as_slice()).enumerate() {
                if (s - bj).abs() > MEMBERSHIP_TOL {
                    return Err(Error::InvalidCoupling(format!(
                        "column {j} sums to {s}, expected {bj}"
                    )));
                }
            }
        }
        let mass: f64 = rows.iter().sum();
        if (mass - 1.0).abs() > MEMBERSHIP_TOL {
            return Err(Error::InvalidCoupling(format!("total mass is {mass}")));
        }
        Ok(Self {
            plan,
            row_marginal,
            column_marginal,
        })
    }

    /// A member of the semi-relaxed set for row marginal `a`.
    pub fn semi_relaxed(plan: DMatrix<f64>, row_marginal: ProbabilityVector) -> Result<Self> {
        Self::new(plan, row_marginal, None)
    }

    /// A member of the semi-relaxed set for the uniform row marginal `1_n / n`.
    pub fn with_uniform_rows(plan: DMatrix<f64>) -> Result<Self> {
        let n = plan.nrows();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        Self::new(plan, ProbabilityVector::uniform(n), None)
    }

    /// The product coupling `a bᵀ`.
    pub fn product(a: &ProbabilityVector, b: &ProbabilityVector) -> Self {
        let plan = DMatrix::from_fn(a.len(), b.len(), |i, j| a.as_slice()[i] * b.as_slice()[j]);
        Self {
            plan,
            row_marginal: a.clone(),
            column_marginal: Some(b.clone()),
        }
    }

    pub fn plan(&self) -> &DMatrix<f64> {
        &self.plan
    }

    pub fn into_plan(self) -> DMatrix<f64> {
        self.plan
    }

    pub fn n_rows(&self) -> usize {
        self.plan.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.plan.ncols()
    }

    /// The prescribed row marginal `a`.
    pub fn target_row_marginal(&self) -> &ProbabilityVector {
        &self.row_marginal
    }

    /// The prescribed column marginal `b`, if this is a full coupling.
    pub fn target_column_marginal(&self) -> Option<&ProbabilityVector> {
        self.column_marginal.as_ref()
    }

    pub fn total_mass(&self) -> f64 {
        row_sums(&self.plan).iter().sum()
    }
}

fn shape_err(expected: String, found: usize) -> Error {
    Error::ShapeMismatch {
        expected,
        found: found.to_string(),
    }
}

/// Row sums, each accumulated left to right.
pub(crate) fn row_sums(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).sum())
        .collect()
}

/// Column sums, each accumulated top to bottom.
pub(crate) fn column_sums(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.ncols())
        .map(|j| (0..m.nrows()).map(|i| m[(i, j)]).sum())
        .collect()
}

/// `P 1_K`: the realized row sums of the plan.
///
/// The sums are returned as computed, without renormalization, so they add up
/// to the plan's total mass (which is one up to [`MEMBERSHIP_TOL`]).
pub fn row_marginal(p: &Coupling) -> ProbabilityVector {
    ProbabilityVector::from_raw_unchecked(row_sums(&p.plan))
}

/// `Pᵀ 1_n`: the realized column sums of the plan.
pub fn column_marginal(p: &Coupling) -> ProbabilityVector {
    ProbabilityVector::from_raw_unchecked(column_sums(&p.plan))
}

/// Cost matrix `C_ij = -log P(x_i | j, θ)`, in nats. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(DMatrix<f64>);

impl CostMatrix {
    pub fn new(costs: DMatrix<f64>) -> Result<Self> {
        if costs.nrows() == 0 || costs.ncols() == 0 {
            return Err(Error::EmptyInput);
        }
        for i in 0..costs.nrows() {
            for j in 0..costs.ncols() {
                let value = costs[(i, j)];
                if !value.is_finite() {
                    return Err(Error::NonFiniteCost {
                        row: i,
                        col: j,
                        value,
                    });
                }
            }
        }
        Ok(Self(costs))
    }

    /// Row-major constructor, convenient for small literal instances.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != k) {
            return Err(shape_err(format!("rows of length {k}"), bad.len()));
        }
        Self::new(DMatrix::from_fn(n, k, |i, j| rows[i][j]))
    }

    pub fn costs(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n_points(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.0.ncols()
    }

    /// Row `i` negated: the log-density vector `h = -C_i·`.
    pub fn negated_row(&self, i: usize) -> Vec<f64> {
        (0..self.0.ncols()).map(|j| -self.0[(i, j)]).collect()
    }
}

/// Parameters of a shared-covariance Gaussian mixture: `K` means in `R^d`,
/// one `d × d` covariance, and mixture weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    means: Vec<DVector<f64>>,
    covariance: DMatrix<f64>,
    weights: ProbabilityVector,
}

impl GmmParams {
    pub fn new(
        means: Vec<DVector<f64>>,
        covariance: DMatrix<f64>,
        weights: ProbabilityVector,
    ) -> Result<Self> {
        let k = means.len();
        if k == 0 {
            return Err(Error::InvalidParams(
                "at least one component is required".into(),
            ));
        }
        if weights.len() != k {
            return Err(shape_err(format!("{k} weights"), weights.len()));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::InvalidParams("dimension must be at least 1".into()));
        }
        for mu in &means {
            if mu.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: mu.len(),
                });
            }
            if mu.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParams("mean has a non-finite entry".into()));
            }
        }
        if covariance.shape() != (d, d) {
            return Err(Error::ShapeMismatch {
                expected: format!("{d}x{d} covariance"),
                found: format!("{}x{}", covariance.nrows(), covariance.ncols()),
            });
        }
        check_spd(&covariance)?;
        Ok(Self {
            means,
            covariance,
            weights,
        })
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn weights(&self) -> &ProbabilityVector {
        &self.weights
    }

    pub fn n_components(&self) -> usize {
        self.means.len()
    }

    pub fn dimension(&self) -> usize {
        self.covariance.nrows()
    }

    /// Same component parameters with different mixture weights.
    pub fn with_weights(&self, weights: ProbabilityVector) -> Result<Self> {
        if weights.len() != self.n_components() {
            return Err(shape_err(
                format!("{} weights", self.n_components()),
                weights.len(),
            ));
        }
        Ok(Self {
            weights,
            ..self.clone()
        })
    }
}

/// Checks finiteness, symmetry and positive definiteness (via Cholesky).
pub(crate) fn check_spd(sigma: &DMatrix<f64>) -> Result<()> {
    if sigma.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParams(
            "covariance has a non-finite entry".into(),
        ));
    }
    let scale = sigma.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    let d = sigma.nrows();
    for i in 0..d {
        for j in 0..i {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::InvalidParams(format!(
                    "covariance is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    if sigma.clone().cholesky().is_none() {
        return Err(Error::NonPositiveDefiniteCovariance);
    }
    Ok(())
}

/// `n` observations in `R^d`, optionally labelled with classes `1..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Vec<DVector<f64>>,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(points: Vec<DVector<f64>>, labels: Option<Vec<usize>>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::InvalidDataset(
                "at least one point is required".into(),
            ));
        };
        let d = first.len();
        if d == 0 {
            return Err(Error::InvalidDataset(
                "points must have dimension at least 1".into(),
            ));
        }
        for (i, x) in points.iter().enumerate() {
            if x.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: x.len(),
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!("point {i} is not finite")));
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != points.len() {
                return Err(Error::InvalidDataset(format!(
                    "{} labels for {} points",
                    labels.len(),
                    points.len()
                )));
            }
            if let Some(i) = labels.iter().position(|&l| l == 0) {
                return Err(Error::InvalidDataset(format!(
                    "label of point {i} is 0; labels start at 1"
                )));
            }
        }
        Ok(Self { points, labels })
    }

    /// Unlabelled dataset from row-major coordinates.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        Self::new(
            rows.iter().map(|r| DVector::from_column_slice(r)).collect(),
            None,
        )
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.points[0].len()
    }

    /// Errors unless every label lies in `1..=k`.
    pub fn check_labels(&self, k: usize) -> Result<()> {
        if let Some(labels) = &self.labels {
            if let Some(i) = labels.iter().position(|&l| l == 0 || l > k) {
                return Err(Error::InvalidDataset(format!(
                    "label {} of point {i} is outside 1..={k}",
                    labels[i]
                )));
            }
        }
        Ok(())
    }

    /// Sample mean, accumulated in point order.
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dimension());
        for x in &self.points {
            m += x;
        }
        m / self.len() as f64
    }

    /// Biased (divide-by-n) sample covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let d = self.dimension();
        let mut s = DMatrix::zeros(d, d);
        for x in &self.points {
            let r = x - &mean;
            s += &r * r.transpose();
        }
        s / self.len() as f64
    }
}
