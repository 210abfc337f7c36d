//! Entropic optimal transport solvers.
//!
//! The full problem `min_{P ∈ U(a,b)} ⟨C,P⟩ + ε KL(P | a bᵀ)` is solved by
//! log-domain Sinkhorn iterations on dual potentials. The semi-relaxed problem
//! (row marginal only, ε = 1) decouples over rows and has a closed form.

use nalgebra::{DMatrix, DVector};

use crate::divergence::{kl_to_product, masked_gibbs_weights, masked_weighted_logsumexp};
use crate::error::{Error, Result};
use crate::types::{
    column_marginal, column_sums, CostMatrix, Coupling, ProbabilityVector, MEMBERSHIP_TOL,
};

/// Alternations of `min_over_pi_semi_relaxed` stop once the weights move less
/// than this in L1.
pub const WEIGHT_FIXED_POINT_TOL: f64 = 1e-12;

/// Upper bound on plan/weight alternations in `min_over_pi_semi_relaxed`.
pub const MAX_WEIGHT_ALTERNATIONS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornSettings {
    /// Regularization strength ε.
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Stop when the L1 deviation of the column marginal falls below this.
    pub marginal_tolerance: f64,
}

impl Default for SinkhornSettings {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            max_iterations: 10_000,
            marginal_tolerance: 1e-9,
        }
    }
}

impl SinkhornSettings {
    pub fn new(epsilon: f64, max_iterations: usize, marginal_tolerance: f64) -> Result<Self> {
        let s = Self {
            epsilon,
            max_iterations,
            marginal_tolerance,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidSettings(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.marginal_tolerance > 0.0) {
            return Err(Error::InvalidSettings(format!(
                "marginal_tolerance must be positive, got {}",
                self.marginal_tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidSettings(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// A coupling together with its objective value.
#[derive(Debug, Clone, PartialEq)]
pub struct EotSolution {
    coupling: Coupling,
    value: f64,
    iterations_used: usize,
    converged: bool,
    marginal_residual: f64,
}

impl EotSolution {
    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    pub fn into_coupling(self) -> Coupling {
        self.coupling
    }

    /// Objective value at [`Self::coupling`], in nats.
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn iterations_used(&self) -> usize {
        self.iterations_used
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    /// L1 deviation of the realized column marginal from the prescribed one.
    /// Zero for problems without a column constraint.
    pub fn marginal_residual(&self) -> f64 {
        self.marginal_residual
    }
}

fn check_shapes(c: &CostMatrix, a: &ProbabilityVector, b: &ProbabilityVector) -> Result<()> {
    if c.n_points() != a.len() || c.n_components() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} cost matrix", a.len(), b.len()),
            found: format!("{}x{}", c.n_points(), c.n_components()),
        });
    }
    Ok(())
}

/// `⟨C, P⟩ + ε KL(P | a bᵀ)`.
pub fn eot_objective(
    p: &Coupling,
    c: &CostMatrix,
    a: &ProbabilityVector,
    b: &ProbabilityVector,
    epsilon: f64,
) -> Result<f64> {
    check_shapes(c, a, b)?;
    if p.plan().shape() != c.costs().shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} coupling", c.n_points(), c.n_components()),
            found: format!("{}x{}", p.n_rows(), p.n_cols()),
        });
    }
    let plan = p.plan();
    let costs = c.costs();
    let mut transport = 0.0;
    for i in 0..plan.nrows() {
        for j in 0..plan.ncols() {
            transport += costs[(i, j)] * plan[(i, j)];
        }
    }
    let kl = kl_to_product(plan, a.as_slice(), b.as_slice())?;
    Ok(transport + epsilon * kl)
}

/// Log-domain Sinkhorn for the full entropic problem.
///
/// Rows and columns with zero mass are removed before iterating and restored
/// as zeros. Each iteration ends with a row scaling, so the returned plan
/// meets the row marginal to rounding and the column marginal to
/// `marginal_tolerance` (in L1) when converged. After a fixed number of plain
/// iterations the column update becomes a damped Newton step on the
/// semi-dual; plain scaling can stall for thousands of iterations on nearly
/// hard assignments.
pub fn sinkhorn(
    a: &ProbabilityVector,
    b: &ProbabilityVector,
    c: &CostMatrix,
    settings: &SinkhornSettings,
) -> Result<EotSolution> {
    settings.validate()?;
    check_shapes(c, a, b)?;
    let rows: Vec<usize> = (0..a.len()).filter(|&i| a.as_slice()[i] > 0.0).collect();
    let cols: Vec<usize> = (0..b.len()).filter(|&j| b.as_slice()[j] > 0.0).collect();
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::DegenerateMarginal(
            "marginal has empty support".into(),
        ));
    }
    let eps = settings.epsilon;
    let costs = c.costs();
    let log_a: Vec<f64> = rows.iter().map(|&i| a.as_slice()[i].ln()).collect();
    let log_b: Vec<f64> = cols.iter().map(|&j| b.as_slice()[j].ln()).collect();
    let b_sup: Vec<f64> = cols.iter().map(|&j| b.as_slice()[j]).collect();
    // scaled cost on the support
    let cost = DMatrix::from_fn(rows.len(), cols.len(), |r, s| {
        costs[(rows[r], cols[s])] / eps
    });

    let a_sup: Vec<f64> = rows.iter().map(|&i| a.as_slice()[i]).collect();
    let problem = Reduced {
        log_a: &log_a,
        log_b: &log_b,
        a: &a_sup,
        b: &b_sup,
        cost: &cost,
    };

    // f is updated first: from g = 0 the first plan is the semi-relaxed
    // solution, so a column marginal that is already a fixed point converges
    // immediately.
    let mut f = vec![0.0; rows.len()];
    let mut g = vec![0.0; cols.len()];
    let mut log_plan = DMatrix::zeros(rows.len(), cols.len());
    let mut iterations = 0;
    let mut residual = f64::INFINITY;

    while iterations < settings.max_iterations {
        iterations += 1;
        problem.row_potentials(&g, &mut f);
        problem.log_plan(&f, &g, &mut log_plan);
        let plan = log_plan.map(f64::exp);
        let col = column_sums(&plan);
        residual = col.iter().zip(&b_sup).map(|(x, y)| (x - y).abs()).sum();
        if residual <= settings.marginal_tolerance {
            break;
        }
        if iterations <= PLAIN_SINKHORN_ITERATIONS
            || !problem.newton_column_step(&plan, &col, &f, &mut g, residual)
        {
            problem.column_potentials(&f, &mut g);
        }
    }

    let mut plan = DMatrix::zeros(a.len(), b.len());
    for (r, &i) in rows.iter().enumerate() {
        for (s, &j) in cols.iter().enumerate() {
            plan[(i, j)] = log_plan[(r, s)].exp();
        }
    }
    let realized = column_sums(&plan);
    let within_membership = realized
        .iter()
        .zip(b.as_slice())
        .all(|(x, y)| (x - y).abs() <= MEMBERSHIP_TOL);
    let column_target = within_membership.then(|| b.clone());
    let coupling = Coupling::new(plan, a.clone(), column_target)?;
    let value = eot_objective(&coupling, c, a, b, eps)?;
    Ok(EotSolution {
        coupling,
        value,
        iterations_used: iterations,
        converged: residual <= settings.marginal_tolerance,
        marginal_residual: residual,
    })
}

/// Plain Sinkhorn iterations before column updates switch to Newton steps.
const PLAIN_SINKHORN_ITERATIONS: usize = 100;

// The support-restricted problem on ε-scaled costs.
struct Reduced<'a> {
    log_a: &'a [f64],
    log_b: &'a [f64],
    a: &'a [f64],
    b: &'a [f64],
    cost: &'a DMatrix<f64>,
}

impl Reduced<'_> {
    fn row_potentials(&self, g: &[f64], f: &mut [f64]) {
        let mut scratch = vec![0.0; g.len()];
        for (r, fr) in f.iter_mut().enumerate() {
            for s in 0..g.len() {
                scratch[s] = self.log_b[s] + g[s] - self.cost[(r, s)];
            }
            *fr = -logsumexp(&scratch);
        }
    }

    fn column_potentials(&self, f: &[f64], g: &mut [f64]) {
        let mut scratch = vec![0.0; f.len()];
        for (s, gs) in g.iter_mut().enumerate() {
            for r in 0..f.len() {
                scratch[r] = self.log_a[r] + f[r] - self.cost[(r, s)];
            }
            *gs = -logsumexp(&scratch);
        }
    }

    fn log_plan(&self, f: &[f64], g: &[f64], out: &mut DMatrix<f64>) {
        for r in 0..f.len() {
            for s in 0..g.len() {
                out[(r, s)] = self.log_a[r] + self.log_b[s] + f[r] + g[s] - self.cost[(r, s)];
            }
        }
    }

    // Dual objective with f eliminated; concave in g.
    fn semi_dual(&self, f: &[f64], g: &[f64]) -> f64 {
        let rows: f64 = self.a.iter().zip(f).map(|(a, f)| a * f).sum();
        let cols: f64 = self.b.iter().zip(g).map(|(b, g)| b * g).sum();
        rows + cols
    }

    /// Damped Newton ascent on the semi-dual in g, with the last column
    /// potential pinned to fix the additive gauge. Returns false when the
    /// Hessian is numerically singular or no step is accepted; the caller then
    /// falls back to a plain column update.
    fn newton_column_step(
        &self,
        plan: &DMatrix<f64>,
        col: &[f64],
        f: &[f64],
        g: &mut [f64],
        residual: f64,
    ) -> bool {
        let k = g.len();
        if k < 2 {
            return false;
        }
        let m = k - 1;
        let grad = DVector::from_fn(m, |j, _| self.b[j] - col[j]);
        let mut h = DMatrix::from_fn(m, m, |j, l| if j == l { col[j] } else { 0.0 });
        for r in 0..plan.nrows() {
            for j in 0..m {
                let pj = plan[(r, j)] / self.a[r];
                for l in 0..m {
                    h[(j, l)] -= pj * plan[(r, l)];
                }
            }
        }
        let Some(chol) = h.cholesky() else {
            return false;
        };
        let step = chol.solve(&grad);
        let slope = grad.dot(&step);
        if !(slope.is_finite() && slope > 0.0) {
            return false;
        }
        let base = self.semi_dual(f, g);
        let mut f_try = vec![0.0; f.len()];
        let mut g_try = g.to_vec();
        let mut log_try = DMatrix::zeros(plan.nrows(), k);
        let mut t = 1.0;
        for _ in 0..40 {
            for j in 0..m {
                g_try[j] = g[j] + t * step[j];
            }
            self.row_potentials(&g_try, &mut f_try);
            let value = self.semi_dual(&f_try, &g_try);
            let armijo = value >= base + 1e-4 * t * slope;
            // near the optimum the dual gain drops below rounding; accept on
            // a smaller marginal residual instead
            let flat = value >= base - 1e-12 * base.abs().max(1.0);
            let accept = armijo || {
                flat && {
                    self.log_plan(&f_try, &g_try, &mut log_try);
                    let c = column_sums(&log_try.map(f64::exp));
                    let r: f64 = c.iter().zip(self.b).map(|(x, y)| (x - y).abs()).sum();
                    r < residual
                }
            };
            if accept {
                g.copy_from_slice(&g_try);
                return true;
            }
            t *= 0.5;
        }
        false
    }
}

fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Closed-form solution of the semi-relaxed problem
/// `min_{P 1 = 1/n} ⟨C, P⟩ + KL(P | (1/n) πᵀ)`.
///
/// Row `i` of the plan is `(1/n)` times the Gibbs posterior of `π` under the
/// log-densities `-C_i·`. Components with `π_j = 0` get an all-zero column.
pub fn semi_relaxed_solve(pi: &ProbabilityVector, c: &CostMatrix) -> Result<EotSolution> {
    let n = c.n_points();
    let a = ProbabilityVector::uniform(n);
    check_shapes(c, &a, pi)?;
    let mut plan = DMatrix::zeros(n, pi.len());
    for i in 0..n {
        let row = masked_gibbs_weights(pi.as_slice(), &c.negated_row(i));
        for (j, p) in row.into_iter().enumerate() {
            plan[(i, j)] = p / n as f64;
        }
    }
    let coupling = Coupling::semi_relaxed(plan, a.clone())?;
    let value = eot_objective(&coupling, c, &a, pi, 1.0)?;
    Ok(EotSolution {
        coupling,
        value,
        iterations_used: 1,
        converged: true,
        marginal_residual: 0.0,
    })
}

/// `-(1/n) Σ_i log Σ_j π_j exp(-C_ij)`: the optimal semi-relaxed value
/// expressed through log-sum-exp instead of the plan.
pub fn semi_relaxed_value_by_logsumexp(pi: &ProbabilityVector, c: &CostMatrix) -> Result<f64> {
    let n = c.n_points();
    check_shapes(c, &ProbabilityVector::uniform(n), pi)?;
    let total: f64 = (0..n)
        .map(|i| masked_weighted_logsumexp(pi.as_slice(), &c.negated_row(i)))
        .sum();
    Ok(-total / n as f64)
}

/// Outcome of minimizing the semi-relaxed problem jointly over the plan and
/// the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMinimization {
    /// `π̂ = P̂ᵀ 1`, the column marginal of the returned plan.
    pub weights: ProbabilityVector,
    /// `P̂` with value `⟨C, P̂⟩ + KL(P̂ | (1/n) π̂ᵀ)`.
    pub solution: EotSolution,
    /// Objective after each alternation, evaluated at `(P_t, π_{t+1})`.
    pub trajectory: Vec<f64>,
}

/// `min_π min_{P 1 = 1/n} ⟨C,P⟩ + KL(P | (1/n) πᵀ)` from a uniform start.
pub fn min_over_pi_semi_relaxed(c: &CostMatrix) -> Result<WeightMinimization> {
    min_over_pi_semi_relaxed_from(c, &ProbabilityVector::uniform(c.n_components()))
}

/// Alternates the closed-form plan update with `π ← Pᵀ 1` until the weights
/// stop moving ([`WEIGHT_FIXED_POINT_TOL`]) or [`MAX_WEIGHT_ALTERNATIONS`]
/// is reached.
pub fn min_over_pi_semi_relaxed_from(
    c: &CostMatrix,
    start: &ProbabilityVector,
) -> Result<WeightMinimization> {
    min_over_pi_semi_relaxed_with_budget(c, start, MAX_WEIGHT_ALTERNATIONS)
}

/// As [`min_over_pi_semi_relaxed_from`] with an explicit alternation budget.
/// When the minimizing weights sit on the boundary of the simplex the
/// fixed-point iteration can need far more than the default budget.
pub fn min_over_pi_semi_relaxed_with_budget(
    c: &CostMatrix,
    start: &ProbabilityVector,
    max_alternations: usize,
) -> Result<WeightMinimization> {
    if max_alternations == 0 {
        return Err(Error::InvalidSettings(
            "max_alternations must be positive".into(),
        ));
    }
    let n = c.n_points();
    let a = ProbabilityVector::uniform(n);
    let mut pi = start.clone();
    let mut trajectory = Vec::new();
    loop {
        let sol = semi_relaxed_solve(&pi, c)?;
        let next = column_marginal(sol.coupling());
        let value = eot_objective(sol.coupling(), c, &a, &next, 1.0)?;
        trajectory.push(value);
        let delta = next.l1_distance(&pi);
        if delta < WEIGHT_FIXED_POINT_TOL || trajectory.len() >= max_alternations {
            let coupling = Coupling::new(sol.into_coupling().into_plan(), a, Some(next.clone()))?;
            return Ok(WeightMinimization {
                weights: next,
                solution: EotSolution {
                    coupling,
                    value,
                    iterations_used: trajectory.len(),
                    converged: delta < WEIGHT_FIXED_POINT_TOL,
                    marginal_residual: 0.0,
                },
                trajectory,
            });
        }
        pi = next;
    }
}
