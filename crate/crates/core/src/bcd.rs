//! Block-coordinate descent on the entropic OT objective
//!
//! ```text
//! min_{π, θ} min_{P 1 = 1/n} ⟨C(θ), P⟩ + KL(P | (1/n) πᵀ)
//! ```
//!
//! for a shared-covariance Gaussian mixture. One sweep minimizes exactly over
//! the plan `P`, then the weights `π`, then the means, then the covariance.
//! Each block update is the corresponding EM step, so a sweep coincides with
//! one EM iteration; [`reference_em_sweep`] implements that iteration
//! separately in the responsibilities formulation for cross-checking.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::divergence::gibbs_optimum;
use crate::eot::eot_objective;
use crate::error::{Error, Result};
use crate::mixture::{cost_matrix, nll_from_costs};
use crate::types::{column_marginal, CostMatrix, Coupling, Dataset, GmmParams, ProbabilityVector};

/// Column masses below this make a component empty.
pub const MASS_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// `K` distinct data points as means, the sample covariance, uniform weights.
    RandomPoints,
    /// Start from parameters handed to [`fit`].
    Provided,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitSettings {
    pub max_sweeps: usize,
    /// Stop once a sweep lowers the NLL by less than this many nats.
    pub nll_tolerance: f64,
    /// Lower bound on covariance eigenvalues. Zero disables flooring, and a
    /// singular covariance is then an error.
    pub covariance_floor: f64,
    pub init_strategy: InitStrategy,
    pub seed: u64,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            max_sweeps: 500,
            nll_tolerance: 1e-8,
            covariance_floor: 0.0,
            init_strategy: InitStrategy::RandomPoints,
            seed: 0,
        }
    }
}

impl FitSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_sweeps == 0 {
            return Err(Error::InvalidSettings(
                "max_sweeps must be at least 1".into(),
            ));
        }
        if !(self.nll_tolerance > 0.0) {
            return Err(Error::InvalidSettings(format!(
                "nll_tolerance must be positive, got {}",
                self.nll_tolerance
            )));
        }
        if !(self.covariance_floor >= 0.0 && self.covariance_floor.is_finite()) {
            return Err(Error::InvalidSettings(format!(
                "covariance_floor must be a nonnegative number, got {}",
                self.covariance_floor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    Tolerance,
    MaxSweeps,
    /// The covariance floor had to be applied.
    Degenerate,
}

impl TerminationReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Tolerance => "tolerance",
            Self::MaxSweeps => "max_sweeps",
            Self::Degenerate => "degenerate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub final_params: GmmParams,
    /// NLL at the starting parameters.
    pub initial_nll: f64,
    /// NLL after each sweep.
    pub nll_trajectory: Vec<f64>,
    /// Transport objective `⟨C(θ_t), P_t⟩ + KL(P_t | (1/n) π_tᵀ)` after each
    /// sweep. Sits between consecutive values of `nll_trajectory / n`.
    pub eot_value_trajectory: Vec<f64>,
    pub sweeps_used: usize,
    pub converged: bool,
    pub termination_reason: TerminationReason,
}

/// Plan update: row `i` is `(1/n)` times the Gibbs posterior of `π` under
/// the log-densities `-C_i·`, i.e. the E-step responsibilities scaled by `1/n`.
pub fn update_plan(params: &GmmParams, c: &CostMatrix) -> Result<Coupling> {
    let (n, k) = (c.n_points(), c.n_components());
    if params.n_components() != k {
        return Err(Error::ShapeMismatch {
            expected: format!("{} cost columns", params.n_components()),
            found: k.to_string(),
        });
    }
    let mut plan = DMatrix::zeros(n, k);
    for i in 0..n {
        let row = gibbs_optimum(params.weights(), &c.negated_row(i))?;
        for (j, p) in row.as_slice().iter().enumerate() {
            plan[(i, j)] = p / n as f64;
        }
    }
    Coupling::with_uniform_rows(plan)
}

/// Weight update `π = Pᵀ 1`.
pub fn update_weights(p: &Coupling) -> ProbabilityVector {
    column_marginal(p)
}

/// Mean update `μ_j = Σ_i P_ij x_i / Σ_i P_ij`.
///
/// Fails with [`Error::EmptyComponent`] (1-based component index) when a
/// column carries less than [`MASS_FLOOR`].
pub fn update_means(p: &Coupling, data: &Dataset) -> Result<Vec<DVector<f64>>> {
    check_rows(p, data)?;
    let plan = p.plan();
    (0..plan.ncols())
        .map(|j| {
            let mass: f64 = (0..plan.nrows()).map(|i| plan[(i, j)]).sum();
            if !(mass >= MASS_FLOOR) {
                return Err(Error::EmptyComponent {
                    component: j + 1,
                    mass,
                    sweep: None,
                });
            }
            let mut acc = DVector::zeros(data.dimension());
            for (i, x) in data.points().iter().enumerate() {
                acc.axpy(plan[(i, j)], x, 1.0);
            }
            Ok(acc / mass)
        })
        .collect()
}

/// Covariance update `Σ = Σ_ij P_ij (x_i − μ_j)(x_i − μ_j)ᵀ`.
///
/// `P` has total mass one (rows sum to `1/n`), so this is the mass-weighted
/// scatter; with responsibilities `γ = nP` it reads `(1/n) Σ_ij γ_ij (…)(…)ᵀ`.
/// The result is exactly symmetric. No flooring is applied here.
pub fn update_covariance(
    p: &Coupling,
    data: &Dataset,
    means: &[DVector<f64>],
) -> Result<DMatrix<f64>> {
    check_rows(p, data)?;
    let d = data.dimension();
    if means.len() != p.n_cols() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} means", p.n_cols()),
            found: means.len().to_string(),
        });
    }
    if let Some(bad) = means.iter().find(|m| m.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bad.len(),
        });
    }
    let plan = p.plan();
    let mut sigma = DMatrix::zeros(d, d);
    for (i, x) in data.points().iter().enumerate() {
        for (j, mu) in means.iter().enumerate() {
            let w = plan[(i, j)];
            if w == 0.0 {
                continue;
            }
            let r = x - mu;
            for a in 0..d {
                for b in 0..d {
                    sigma[(a, b)] += w * (r[a] * r[b]);
                }
            }
        }
    }
    Ok(sigma)
}

/// Raises every eigenvalue of `sigma` to at least `floor`.
///
/// Returns the (possibly) modified matrix and whether clamping happened. A
/// zero floor leaves the matrix untouched.
pub fn apply_covariance_floor(sigma: DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    if floor <= 0.0 {
        return (sigma, false);
    }
    let eig = SymmetricEigen::new(sigma.clone());
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return (sigma, false);
    }
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let rebuilt =
        &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    let symmetric = (&rebuilt + rebuilt.transpose()) * 0.5;
    (symmetric, true)
}

fn check_rows(p: &Coupling, data: &Dataset) -> Result<()> {
    if p.n_rows() != data.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} plan rows", data.len()),
            found: p.n_rows().to_string(),
        });
    }
    Ok(())
}

struct Sweep {
    params: GmmParams,
    plan: Coupling,
    floored: bool,
}

// P → π → μ → Σ. Σ is taken around the freshly updated means.
fn sweep(params: &GmmParams, c: &CostMatrix, data: &Dataset, floor: f64) -> Result<Sweep> {
    let plan = update_plan(params, c)?;
    let weights = update_weights(&plan);
    let means = update_means(&plan, data)?;
    let (sigma, floored) = apply_covariance_floor(update_covariance(&plan, data, &means)?, floor);
    let params = GmmParams::new(means, sigma, weights)?;
    Ok(Sweep {
        params,
        plan,
        floored,
    })
}

/// One BCD sweep without covariance flooring.
pub fn bcd_sweep(params: &GmmParams, data: &Dataset) -> Result<GmmParams> {
    let c = cost_matrix(params, data)?;
    Ok(sweep(params, &c, data, 0.0)?.params)
}

/// Default initialization: `k` distinct data points drawn with `seed` as the
/// means, the biased sample covariance, uniform weights.
pub fn initial_params(
    data: &Dataset,
    k: usize,
    seed: u64,
    covariance_floor: f64,
) -> Result<GmmParams> {
    if k == 0 {
        return Err(Error::InvalidSettings(
            "number of components must be at least 1".into(),
        ));
    }
    if data.len() < k {
        return Err(Error::TooFewPoints { n: data.len(), k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, data.len(), k);
    let means = picks.iter().map(|i| data.points()[i].clone()).collect();
    let (sigma, _) = apply_covariance_floor(data.covariance(), covariance_floor);
    GmmParams::new(means, sigma, ProbabilityVector::uniform(k))
}

/// Fits a `k`-component shared-covariance mixture by block-coordinate descent.
pub fn fit(
    data: &Dataset,
    k: usize,
    settings: &FitSettings,
    init: Option<&GmmParams>,
) -> Result<FitReport> {
    settings.validate()?;
    if k == 0 {
        return Err(Error::InvalidSettings(
            "number of components must be at least 1".into(),
        ));
    }
    if data.len() < k {
        return Err(Error::TooFewPoints { n: data.len(), k });
    }
    let mut params = match (settings.init_strategy, init) {
        (_, Some(p)) => {
            if p.n_components() != k {
                return Err(Error::InvalidParams(format!(
                    "initial parameters have {} components, expected {k}",
                    p.n_components()
                )));
            }
            if p.dimension() != data.dimension() {
                return Err(Error::DimensionMismatch {
                    expected: data.dimension(),
                    found: p.dimension(),
                });
            }
            p.clone()
        }
        (InitStrategy::Provided, None) => {
            return Err(Error::InvalidSettings(
                "init strategy is `provided` but no parameters were given".into(),
            ))
        }
        (InitStrategy::RandomPoints, None) => {
            initial_params(data, k, settings.seed, settings.covariance_floor)?
        }
    };

    let n = data.len();
    let uniform = ProbabilityVector::uniform(n);
    let mut costs = cost_matrix(&params, data)?;
    let initial_nll = nll_from_costs(params.weights().as_slice(), &costs);
    let mut previous = initial_nll;
    let mut nll_trajectory = Vec::new();
    let mut eot_value_trajectory = Vec::new();
    let mut reason = TerminationReason::MaxSweeps;

    for t in 1..=settings.max_sweeps {
        let step =
            sweep(&params, &costs, data, settings.covariance_floor).map_err(|e| match e {
                Error::EmptyComponent {
                    component, mass, ..
                } => Error::EmptyComponent {
                    component,
                    mass,
                    sweep: Some(t),
                },
                other => other,
            })?;
        params = step.params;
        costs = cost_matrix(&params, data)?;
        let current = nll_from_costs(params.weights().as_slice(), &costs);
        nll_trajectory.push(current);
        eot_value_trajectory.push(eot_objective(
            &step.plan,
            &costs,
            &uniform,
            params.weights(),
            1.0,
        )?);
        if step.floored {
            reason = TerminationReason::Degenerate;
            break;
        }
        if previous - current < settings.nll_tolerance {
            reason = TerminationReason::Tolerance;
            break;
        }
        previous = current;
    }

    Ok(FitReport {
        final_params: params,
        initial_nll,
        sweeps_used: nll_trajectory.len(),
        nll_trajectory,
        eot_value_trajectory,
        converged: reason == TerminationReason::Tolerance,
        termination_reason: reason,
    })
}

/// One textbook EM iteration: posterior responsibilities from an explicit
/// inverse and determinant, then the usual M-step with the covariance pooled
/// around the new means.
pub fn reference_em_sweep(params: &GmmParams, data: &Dataset) -> Result<GmmParams> {
    let (n, k, d) = (data.len(), params.n_components(), params.dimension());
    if data.dimension() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: data.dimension(),
        });
    }
    let sigma = params.covariance();
    let precision = sigma
        .clone()
        .try_inverse()
        .ok_or(Error::NonPositiveDefiniteCovariance)?;
    let log_norm = -0.5 * d as f64 * LN_2PI - 0.5 * sigma.determinant().ln();
    let pi = params.weights().as_slice();

    let mut gamma = vec![vec![0.0; k]; n];
    for (i, x) in data.points().iter().enumerate() {
        let log_joint: Vec<f64> = params
            .means()
            .iter()
            .zip(pi)
            .map(|(mu, &w)| {
                if w <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let r = x - mu;
                w.ln() + log_norm - 0.5 * r.dot(&(&precision * &r))
            })
            .collect();
        let top = log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = log_joint.iter().map(|l| (l - top).exp()).sum();
        for j in 0..k {
            gamma[i][j] = (log_joint[j] - top).exp() / norm;
        }
    }

    let counts: Vec<f64> = (0..k).map(|j| gamma.iter().map(|g| g[j]).sum()).collect();
    if let Some(j) = counts.iter().position(|&c| !(c / n as f64 >= MASS_FLOOR)) {
        return Err(Error::EmptyComponent {
            component: j + 1,
            mass: counts[j] / n as f64,
            sweep: None,
        });
    }
    let weights = ProbabilityVector::new(counts.iter().map(|c| c / n as f64).collect())?;
    let means: Vec<DVector<f64>> = (0..k)
        .map(|j| {
            let mut acc = DVector::zeros(d);
            for (i, x) in data.points().iter().enumerate() {
                acc += x * gamma[i][j];
            }
            acc / counts[j]
        })
        .collect();
    let mut cov = DMatrix::zeros(d, d);
    for (i, x) in data.points().iter().enumerate() {
        for (j, mu) in means.iter().enumerate() {
            let r = x - mu;
            cov += (&r * r.transpose()) * gamma[i][j];
        }
    }
    cov /= n as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    GmmParams::new(means, cov, weights)
}

/// The parameter block of the transport objective, scaled by `n`:
/// `½ Σ_ij n P_ij (x_i − μ_j)ᵀ Σ⁻¹ (x_i − μ_j) + (n/2) m log det Σ`, with `m`
/// the total mass of `P`. Its stationary points are the mean and covariance
/// updates.
pub fn m_step_objective(
    p: &DMatrix<f64>,
    data: &Dataset,
    means: &[DVector<f64>],
    sigma: &DMatrix<f64>,
) -> Result<f64> {
    let n = data.len() as f64;
    let precision = sigma
        .clone()
        .try_inverse()
        .ok_or(Error::NonPositiveDefiniteCovariance)?;
    let det = sigma.determinant();
    if !(det > 0.0) {
        return Err(Error::NonPositiveDefiniteCovariance);
    }
    let mut quad = 0.0;
    let mut mass = 0.0;
    for (i, x) in data.points().iter().enumerate() {
        for (j, mu) in means.iter().enumerate() {
            let r = x - mu;
            quad += p[(i, j)] * r.dot(&(&precision * &r));
            mass += p[(i, j)];
        }
    }
    Ok(0.5 * n * quad + 0.5 * n * mass * det.ln())
}
