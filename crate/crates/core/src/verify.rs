//! Randomized end-to-end checks of the likelihood/transport identities.
//!
//! Each check draws seeded instances, measures a residual per instance and
//! compares the worst one against a per-check tolerance. Reports are fully
//! determined by the seed and trial count.
//!
//! Instance distribution: `K ∈ 1..=4`, `d ∈ 1..=3`, `n ∈ 1..=50`, means
//! uniform in `[-3, 3]^d`, `Σ = AAᵀ + 0.1 I` with standard normal `A`, and
//! weights from a flat Dirichlet.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::bcd::{
    bcd_sweep, fit, m_step_objective, reference_em_sweep, update_covariance, update_means,
    update_plan, FitSettings,
};
use crate::divergence::{
    gibbs_objective, gibbs_optimum, kl_three_term_decomposition, kl_to_product,
    masked_gibbs_weights, weighted_logsumexp,
};
use crate::eot::{
    min_over_pi_semi_relaxed_with_budget, semi_relaxed_solve, sinkhorn, SinkhornSettings,
    WEIGHT_FIXED_POINT_TOL,
};
use crate::error::Result;
use crate::mixture::{cost_matrix, nll, nll_from_costs, sample_gmm};
use crate::types::{CostMatrix, Dataset, GmmParams, ProbabilityVector};

pub const IDENTITY_TOL: f64 = 1e-8;
pub const STRESS_IDENTITY_TOL: f64 = 1e-6;
pub const UPPER_BOUND_TOL: f64 = 1e-7;
pub const SINKHORN_MARGINAL_TOL: f64 = 1e-9;
pub const TIGHTNESS_TOL: f64 = 1e-7;
pub const MIN_OVER_PI_TOL: f64 = 1e-7;
pub const GRID_VALUE_TOL: f64 = 1e-6;
pub const GIBBS_VIOLATION_TOL: f64 = 1e-12;
pub const GIBBS_EQUALITY_TOL: f64 = 1e-10;
pub const GIBBS_ARGMAX_TOL: f64 = 1e-6;
pub const KL_DECOMPOSITION_TOL: f64 = 1e-10;
pub const EM_PARAM_TOL: f64 = 1e-10;
pub const EM_NLL_TOL: f64 = 1e-9;
pub const MONOTONE_TOL: f64 = 1e-9;
pub const STATIONARITY_TOL: f64 = 1e-4;

/// Alternation budget for weight minimization. Boundary minimizers converge
/// slowly; the 1e-12 fixed-point rule still stops most runs far earlier.
pub const WEIGHT_ALTERNATION_BUDGET: usize = 200_000;
/// Random simplex points drawn per Gibbs-variational instance.
pub const GIBBS_RANDOM_POINTS: usize = 1000;
/// Sweeps per paired EM/BCD run.
pub const EM_SWEEPS: usize = 20;
/// Central-difference step for the stationarity check.
pub const FD_STEP: f64 = 1e-5;

// Independent generator streams; the NLL identity and the upper bound share
// the instance stream so they run on the same instances.
const STREAM_INSTANCE: u64 = 1;
const STREAM_MIN_OVER_PI: u64 = 2;
const STREAM_GIBBS: u64 = 3;
const STREAM_KL: u64 = 4;
const STREAM_EM: u64 = 5;
const STREAM_FIT: u64 = 6;
const STREAM_STATIONARITY: u64 = 7;
const STREAM_STRICTNESS: u64 = 8;

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRecord {
    pub name: String,
    pub instances_run: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// A quantity that is reported but not asserted.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub seed: u64,
    pub trials: usize,
    pub checks: Vec<CheckRecord>,
    pub observations: Vec<Observation>,
}

impl VerificationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckRecord> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Accumulates residuals for one check.
#[derive(Debug, Clone)]
pub struct Tracker {
    name: &'static str,
    tolerance: f64,
    instances: usize,
    max_residual: f64,
    passed: bool,
}

impl Tracker {
    pub fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            instances: 0,
            max_residual: 0.0,
            passed: true,
        }
    }

    /// Records one instance. NaN residuals count as failures.
    pub fn push(&mut self, residual: f64) {
        self.instances += 1;
        if residual.is_nan() {
            self.passed = false;
            self.max_residual = f64::INFINITY;
            return;
        }
        if residual > self.tolerance {
            self.passed = false;
        }
        self.max_residual = self.max_residual.max(residual);
    }

    pub fn finish(self) -> CheckRecord {
        CheckRecord {
            name: self.name.to_string(),
            instances_run: self.instances,
            max_residual: self.max_residual,
            tolerance: self.tolerance,
            passed: self.passed,
        }
    }
}

/// A random mixture and a dataset sampled from it.
#[derive(Debug, Clone)]
pub struct Instance {
    pub params: GmmParams,
    pub data: Dataset,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Flat Dirichlet draw on `k` bins.
pub fn random_simplex_point(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// Random parameters from the instance distribution.
pub fn random_params(rng: &mut impl Rng, k: usize, d: usize) -> GmmParams {
    let means = (0..k)
        .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-3.0..=3.0)))
        .collect();
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let sigma = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let weights =
        ProbabilityVector::new(random_simplex_point(rng, k)).expect("normalized Dirichlet draw");
    GmmParams::new(means, sigma, weights).expect("instance covariance is positive definite")
}

fn draw_instance(rng: &mut ChaCha8Rng, k: usize, max_n: usize) -> Instance {
    let d = rng.random_range(1..=3);
    let n = rng.random_range(1..=max_n);
    let params = random_params(rng, k, d);
    let data = sample_gmm(&params, n, rng.random()).expect("n >= 1");
    Instance { params, data }
}

/// The instance used by trial `seed` of the identity and upper-bound checks.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = rng_for(seed, STREAM_INSTANCE);
    let k = rng.random_range(1..=4);
    draw_instance(&mut rng, k, 50)
}

/// Like [`random_instance`] with the number of components fixed.
pub fn random_instance_with_components(seed: u64, k: usize) -> Instance {
    let mut rng = rng_for(seed, STREAM_MIN_OVER_PI);
    draw_instance(&mut rng, k, 50)
}

/// The adversarial-scale instance: means at `±100·1`, `Σ = 0.01 I`.
pub fn stress_instance(seed: u64) -> Instance {
    let d = 2;
    let params = GmmParams::new(
        vec![
            DVector::from_element(d, 100.0),
            DVector::from_element(d, -100.0),
        ],
        DMatrix::identity(d, d) * 0.01,
        ProbabilityVector::uniform(2),
    )
    .expect("valid stress parameters");
    let data = sample_gmm(&params, 50, seed).expect("n >= 1");
    Instance { params, data }
}

fn trial_seed(seed: u64, t: usize) -> u64 {
    seed.wrapping_add(t as u64)
}

/// `|(1/n) NLL − semi-relaxed value|` on random instances and one stress instance.
pub fn check_identity_nll(seed: u64, trials: usize) -> Result<Vec<CheckRecord>> {
    let mut random = Tracker::new("nll_semi_relaxed_identity", IDENTITY_TOL);
    for t in 0..trials {
        random.push(identity_residual(&random_instance(trial_seed(seed, t)))?);
    }
    let mut stress = Tracker::new("nll_semi_relaxed_identity_stress", STRESS_IDENTITY_TOL);
    stress.push(identity_residual(&stress_instance(seed))?);
    Ok(vec![random.finish(), stress.finish()])
}

/// `|(1/n) NLL(π, θ) − min_{P 1 = 1/n} ⟨C(θ), P⟩ + KL(P | (1/n) πᵀ)|`.
pub fn identity_residual(inst: &Instance) -> Result<f64> {
    let n = inst.data.len() as f64;
    let c = cost_matrix(&inst.params, &inst.data)?;
    let sol = semi_relaxed_solve(inst.params.weights(), &c)?;
    Ok((nll(&inst.params, &inst.data)? / n - sol.value()).abs())
}

/// Residuals of the upper bound on one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpperBoundOutcome {
    /// `(1/n) NLL − OT_1(1/n, π, C)`; nonpositive when the bound holds.
    pub gap: f64,
    pub marginal_residual: f64,
    pub converged: bool,
}

pub fn upper_bound_outcome(inst: &Instance) -> Result<UpperBoundOutcome> {
    let n = inst.data.len();
    let c = cost_matrix(&inst.params, &inst.data)?;
    let sol = sinkhorn(
        &ProbabilityVector::uniform(n),
        inst.params.weights(),
        &c,
        &SinkhornSettings::default(),
    )?;
    Ok(UpperBoundOutcome {
        gap: nll(&inst.params, &inst.data)? / n as f64 - sol.value(),
        marginal_residual: sol.marginal_residual(),
        converged: sol.converged(),
    })
}

/// `|OT_1(1/n, π̂, C) − (1/n) NLL(π̂)|` at the weight minimizer `π̂`, which is
/// the column marginal of its own semi-relaxed plan.
pub fn tightness_residual(inst: &Instance) -> Result<f64> {
    let n = inst.data.len();
    let c = cost_matrix(&inst.params, &inst.data)?;
    let start = ProbabilityVector::uniform(c.n_components());
    let best = min_over_pi_semi_relaxed_with_budget(&c, &start, WEIGHT_ALTERNATION_BUDGET)?;
    let sol = sinkhorn(
        &ProbabilityVector::uniform(n),
        &best.weights,
        &c,
        &SinkhornSettings::default(),
    )?;
    Ok((sol.value() - nll_from_costs(best.weights.as_slice(), &c) / n as f64).abs())
}

/// The upper bound `(1/n) NLL ≤ OT_1(1/n, π, C)`, Sinkhorn feasibility, and
/// tightness at the weight minimizer. Strictness for generic `π` is only
/// observed.
pub fn check_upper_bound(seed: u64, trials: usize) -> Result<(Vec<CheckRecord>, Vec<Observation>)> {
    let mut bound = Tracker::new("eot_upper_bound", UPPER_BOUND_TOL);
    let mut marginal = Tracker::new("sinkhorn_marginal_residual", SINKHORN_MARGINAL_TOL);
    let mut tight = Tracker::new("eot_upper_bound_tightness", TIGHTNESS_TOL);
    for t in 0..trials {
        let inst = random_instance(trial_seed(seed, t));
        let out = upper_bound_outcome(&inst)?;
        bound.push(out.gap.max(0.0));
        marginal.push(if out.converged {
            out.marginal_residual
        } else {
            f64::INFINITY
        });
        tight.push(tightness_residual(&inst)?);
    }

    // strictness: K ≥ 2 instances with weights redrawn away from the data
    let mut strict = 0usize;
    let mut smallest = f64::INFINITY;
    let mut rng = rng_for(seed, STREAM_STRICTNESS);
    let runs = trials.min(20);
    for _ in 0..runs {
        let k = rng.random_range(2..=4);
        let inst = draw_instance(&mut rng, k, 50);
        let out = upper_bound_outcome(&inst)?;
        let slack = -out.gap;
        if slack > 1e-7 {
            strict += 1;
        }
        smallest = smallest.min(slack);
    }
    let observations = vec![
        Observation {
            name: "upper_bound_strict_instances".into(),
            value: strict as f64,
        },
        Observation {
            name: "upper_bound_strictness_runs".into(),
            value: runs as f64,
        },
        Observation {
            name: "upper_bound_min_slack".into(),
            value: if runs == 0 { 0.0 } else { smallest },
        },
    ];
    Ok((
        vec![bound.finish(), marginal.finish(), tight.finish()],
        observations,
    ))
}

/// Minimizes `π ↦ (1/n) NLL(π, θ)` by the fixed-point iteration
/// `π ← mean_i posterior_i(π)`.
pub fn minimize_nll_over_weights(c: &CostMatrix) -> ProbabilityVector {
    let (n, k) = (c.n_points(), c.n_components());
    let mut pi = vec![1.0 / k as f64; k];
    for _ in 0..WEIGHT_ALTERNATION_BUDGET {
        let mut next = vec![0.0; k];
        for i in 0..n {
            let post = masked_gibbs_weights(&pi, &c.negated_row(i));
            for (acc, p) in next.iter_mut().zip(post) {
                *acc += p;
            }
        }
        next.iter_mut().for_each(|x| *x /= n as f64);
        let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if delta < WEIGHT_FIXED_POINT_TOL {
            break;
        }
    }
    ProbabilityVector::new(pi).expect("average of posteriors is a simplex point")
}

/// Brute-force `min_{t ∈ [0,1]} -(1/n) Σ_i log(t e^{-C_i1} + (1-t) e^{-C_i2})`
/// on a grid of step `1e-4`, refined twice around the best cell.
pub fn grid_min_two_component(c: &CostMatrix) -> f64 {
    assert_eq!(c.n_components(), 2, "grid oracle is for two components");
    let costs = c.costs();
    let n = c.n_points();
    let objective = |t: f64| {
        let mut total = 0.0;
        for i in 0..n {
            let (u, v) = (-costs[(i, 0)], -costs[(i, 1)]);
            let m = u.max(v);
            total += (t * (u - m).exp() + (1.0 - t) * (v - m).exp()).ln() + m;
        }
        -total / n as f64
    };
    let (mut lo, mut hi, mut best) = (0.0_f64, 1.0_f64, f64::INFINITY);
    for step in [1e-4, 1e-7, 1e-10] {
        let count = ((hi - lo) / step).round() as usize;
        let mut best_t = lo;
        for s in 0..=count {
            let t = (lo + s as f64 * step).min(1.0);
            let v = objective(t);
            if v < best {
                best = v;
                best_t = t;
            }
        }
        lo = (best_t - step).max(0.0);
        hi = (best_t + step).min(1.0);
    }
    best
}

/// Residuals of the weight-minimized equality on one cost matrix:
/// `(|left − right|, max distance of either side to the grid)`; the grid part
/// is `None` unless `K = 2`.
pub fn min_over_pi_residuals(c: &CostMatrix) -> Result<(f64, Option<f64>)> {
    let n = c.n_points() as f64;
    let left = nll_from_costs(minimize_nll_over_weights(c).as_slice(), c) / n;
    let start = ProbabilityVector::uniform(c.n_components());
    let right = min_over_pi_semi_relaxed_with_budget(c, &start, WEIGHT_ALTERNATION_BUDGET)?
        .solution
        .value();
    let grid = (c.n_components() == 2).then(|| {
        let g = grid_min_two_component(c);
        (left - g).abs().max((right - g).abs())
    });
    Ok(((left - right).abs(), grid))
}

/// `min_π (1/n) NLL = min_π OT_1` on random instances, plus a grid
/// cross-check on two-component instances.
pub fn check_min_over_pi_equality(seed: u64, trials: usize) -> Result<Vec<CheckRecord>> {
    let mut general = Tracker::new("min_over_pi_equality", MIN_OVER_PI_TOL);
    let mut two = Tracker::new("min_over_pi_equality_k2", MIN_OVER_PI_TOL);
    let mut grid = Tracker::new("min_over_pi_grid_k2", GRID_VALUE_TOL);
    for t in 0..trials {
        let inst = random_instance(trial_seed(seed, t));
        let c = cost_matrix(&inst.params, &inst.data)?;
        general.push(min_over_pi_residuals(&c)?.0);

        let inst = random_instance_with_components(trial_seed(seed, t), 2);
        let c = cost_matrix(&inst.params, &inst.data)?;
        let (eq, g) = min_over_pi_residuals(&c)?;
        two.push(eq);
        grid.push(g.expect("two components"));
    }
    Ok(vec![general.finish(), two.finish(), grid.finish()])
}

/// Residuals of the Gibbs variational identity on one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GibbsOutcome {
    /// Largest `objective(p) − logsumexp` over the random points (clamped at 0).
    pub violation: f64,
    /// `|objective(p*) − logsumexp|`.
    pub equality: f64,
    /// Largest entrywise distance between the grid argmax and `p*`, for `K ≤ 3`.
    pub argmax: Option<f64>,
}

pub fn gibbs_outcome(
    rng: &mut impl Rng,
    pi: &ProbabilityVector,
    h: &[f64],
    with_grid: bool,
) -> Result<GibbsOutcome> {
    let k = pi.len();
    let lse = weighted_logsumexp(pi, h)?;
    let mut violation: f64 = 0.0;
    for _ in 0..GIBBS_RANDOM_POINTS {
        let p = ProbabilityVector::new(random_simplex_point(rng, k))?;
        violation = violation.max(gibbs_objective(pi, h, &p)? - lse);
    }
    let opt = gibbs_optimum(pi, h)?;
    let equality = (gibbs_objective(pi, h, &opt)? - lse).abs();
    let argmax = match (with_grid, k) {
        (true, 2) | (true, 3) => {
            let g = grid_argmax(pi.as_slice(), h);
            Some(
                g.iter()
                    .zip(opt.as_slice())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max),
            )
        }
        _ => None,
    };
    Ok(GibbsOutcome {
        violation,
        equality,
        argmax,
    })
}

// Σ h p − Σ p log(p/π), written out independently of the library path.
fn plain_gibbs_objective(pi: &[f64], h: &[f64], p: &[f64]) -> f64 {
    let mut v = 0.0;
    for j in 0..pi.len() {
        v += h[j] * p[j];
        if p[j] > 0.0 {
            v -= p[j] * (p[j] / pi[j]).ln();
        }
    }
    v
}

/// Grid argmax of the variational objective over `Δ_2` or `Δ_3`: a scan at
/// resolution `1e-3`, refined by factors of 100 around the best point down to
/// `1e-9`.
pub fn grid_argmax(pi: &[f64], h: &[f64]) -> Vec<f64> {
    match pi.len() {
        2 => {
            let (mut lo, mut hi, mut best_t) = (0.0_f64, 1.0_f64, 0.0);
            for step in [1e-3, 1e-5, 1e-7, 1e-9] {
                let count = ((hi - lo) / step).round() as usize;
                let mut best = f64::NEG_INFINITY;
                for s in 0..=count {
                    let t = (lo + s as f64 * step).min(1.0);
                    let v = plain_gibbs_objective(pi, h, &[t, 1.0 - t]);
                    if v > best {
                        best = v;
                        best_t = t;
                    }
                }
                lo = (best_t - 2.0 * step).max(0.0);
                hi = (best_t + 2.0 * step).min(1.0);
            }
            vec![best_t, 1.0 - best_t]
        }
        3 => {
            let (mut lo, mut hi) = ([0.0_f64; 2], [1.0_f64; 2]);
            let mut best_p = [0.0, 0.0];
            for step in [1e-3, 1e-5, 1e-7, 1e-9] {
                let c0 = ((hi[0] - lo[0]) / step).round() as usize;
                let c1 = ((hi[1] - lo[1]) / step).round() as usize;
                let mut best = f64::NEG_INFINITY;
                for s0 in 0..=c0 {
                    let x = (lo[0] + s0 as f64 * step).min(1.0);
                    for s1 in 0..=c1 {
                        let y = lo[1] + s1 as f64 * step;
                        let z = 1.0 - x - y;
                        if y > 1.0 || z < 0.0 {
                            continue;
                        }
                        let v = plain_gibbs_objective(pi, h, &[x, y, z]);
                        if v > best {
                            best = v;
                            best_p = [x, y];
                        }
                    }
                }
                for a in 0..2 {
                    lo[a] = (best_p[a] - 2.0 * step).max(0.0);
                    hi[a] = (best_p[a] + 2.0 * step).min(1.0);
                }
            }
            vec![best_p[0], best_p[1], (1.0 - best_p[0] - best_p[1]).max(0.0)]
        }
        k => panic!("grid argmax supports 2 or 3 bins, got {k}"),
    }
}

/// The Gibbs variational identity on random instances: `K ∈ 1..=6`, strictly positive `π`,
/// `h ∈ [-5, 5]^K`.
pub fn check_gibbs_variational(seed: u64, trials: usize) -> Result<Vec<CheckRecord>> {
    let mut violation = Tracker::new("gibbs_random_points", GIBBS_VIOLATION_TOL);
    let mut equality = Tracker::new("gibbs_optimum_value", GIBBS_EQUALITY_TOL);
    let mut argmax = Tracker::new("gibbs_grid_argmax", GIBBS_ARGMAX_TOL);
    let mut rng = rng_for(seed, STREAM_GIBBS);
    for t in 0..trials {
        // every trial alternates through K = 2, 3 for the grid, then random K
        let k = match t % 3 {
            0 => 2,
            1 => 3,
            _ => rng.random_range(1..=6),
        };
        let pi = ProbabilityVector::new(random_simplex_point(&mut rng, k))?;
        let h: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..=5.0)).collect();
        let out = gibbs_outcome(&mut rng, &pi, &h, true)?;
        violation.push(out.violation);
        equality.push(out.equality);
        if let Some(a) = out.argmax {
            argmax.push(a);
        }
    }
    Ok(vec![violation.finish(), equality.finish(), argmax.finish()])
}

/// The three-term KL decomposition on random full-support instances, plus
/// the product-coupling case.
pub fn check_kl_decomposition(seed: u64, trials: usize) -> Result<Vec<CheckRecord>> {
    let mut sum = Tracker::new("kl_decomposition", KL_DECOMPOSITION_TOL);
    let mut product = Tracker::new("kl_decomposition_product", KL_DECOMPOSITION_TOL);
    let mut rng = rng_for(seed, STREAM_KL);
    for _ in 0..trials {
        let n = rng.random_range(1..=6);
        let k = rng.random_range(1..=6);
        let flat = random_simplex_point(&mut rng, n * k);
        let p = DMatrix::from_vec(n, k, flat);
        let a = random_simplex_point(&mut rng, n);
        let b = random_simplex_point(&mut rng, k);
        let d = kl_three_term_decomposition(&p, &a, &b)?;
        sum.push((d.sum() - kl_to_product(&p, &a, &b)?).abs());

        let outer = DMatrix::from_fn(n, k, |i, j| a[i] * b[j]);
        let d = kl_three_term_decomposition(&outer, &a, &b)?;
        product.push(
            d.coupling_term
                .abs()
                .max(d.row_term.abs())
                .max(d.column_term.abs()),
        );
    }
    Ok(vec![sum.finish(), product.finish()])
}

/// The Gibbs variational identity and the KL decomposition together.
pub fn check_lemmas(seed: u64, trials: usize) -> Result<Vec<CheckRecord>> {
    let mut records = check_gibbs_variational(seed, trials)?;
    records.extend(check_kl_decomposition(seed, trials)?);
    Ok(records)
}

/// Largest deviations between paired BCD and reference EM runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedRunOutcome {
    pub max_param_deviation: f64,
    pub max_nll_deviation: f64,
}

fn max_param_deviation(a: &GmmParams, b: &GmmParams) -> f64 {
    let mut m = a.weights().l1_distance(b.weights()).max(0.0);
    m = m.max(
        a.weights()
            .as_slice()
            .iter()
            .zip(b.weights().as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max),
    );
    for (x, y) in a.means().iter().zip(b.means()) {
        m = m.max((x - y).amax());
    }
    m.max((a.covariance() - b.covariance()).amax())
}

/// Runs BCD sweeps and reference EM sweeps side by side from `start`.
pub fn paired_runs(start: &GmmParams, data: &Dataset, sweeps: usize) -> Result<PairedRunOutcome> {
    let mut bcd = start.clone();
    let mut em = start.clone();
    let mut out = PairedRunOutcome {
        max_param_deviation: 0.0,
        max_nll_deviation: 0.0,
    };
    for _ in 0..sweeps {
        bcd = bcd_sweep(&bcd, data)?;
        em = reference_em_sweep(&em, data)?;
        out.max_param_deviation = out.max_param_deviation.max(max_param_deviation(&bcd, &em));
        out.max_nll_deviation = out
            .max_nll_deviation
            .max((nll(&bcd, data)? - nll(&em, data)?).abs());
    }
    Ok(out)
}

/// A random starting state: data from one random mixture, parameters from
/// another with the same shape. `n ∈ K..=100`.
pub fn random_state(rng: &mut impl Rng) -> (GmmParams, Dataset) {
    let k = rng.random_range(1..=4);
    let d = rng.random_range(1..=3);
    let n = rng.random_range(k.max(5)..=100);
    let truth = random_params(rng, k, d);
    let data = sample_gmm(&truth, n, rng.random()).expect("n >= 1");
    let start = random_params(rng, k, d);
    (start, data)
}

// Draws states until one survives `attempt`; degenerate draws (an emptied
// component) are skipped and counted.
fn with_valid_state<T>(
    rng: &mut ChaCha8Rng,
    skipped: &mut usize,
    mut attempt: impl FnMut(&GmmParams, &Dataset) -> Result<T>,
) -> T {
    loop {
        let (start, data) = random_state(rng);
        match attempt(&start, &data) {
            Ok(v) => return v,
            Err(_) => *skipped += 1,
        }
    }
}

/// Paired 20-sweep trajectories of BCD and reference EM.
pub fn check_em_equivalence(
    seed: u64,
    trials: usize,
) -> Result<(Vec<CheckRecord>, Vec<Observation>)> {
    let mut params = Tracker::new("em_bcd_parameters", EM_PARAM_TOL);
    let mut nlls = Tracker::new("em_bcd_nll_trajectory", EM_NLL_TOL);
    let mut rng = rng_for(seed, STREAM_EM);
    let mut skipped = 0;
    for _ in 0..trials {
        let out = with_valid_state(&mut rng, &mut skipped, |s, d| paired_runs(s, d, EM_SWEEPS));
        params.push(out.max_param_deviation);
        nlls.push(out.max_nll_deviation);
    }
    let obs = vec![Observation {
        name: "em_bcd_skipped_states".into(),
        value: skipped as f64,
    }];
    Ok((vec![params.finish(), nlls.finish()], obs))
}

/// Largest per-sweep NLL increase (clamped at 0) of a fit from the default
/// initialization.
pub fn fit_monotonicity_residual(data: &Dataset, k: usize, seed: u64) -> Result<f64> {
    let settings = FitSettings {
        max_sweeps: 200,
        seed,
        ..Default::default()
    };
    let report = fit(data, k, &settings, None)?;
    let mut prev = report.initial_nll;
    let mut worst: f64 = 0.0;
    for &v in &report.nll_trajectory {
        worst = worst.max(v - prev);
        prev = v;
    }
    Ok(worst)
}

pub fn check_fit_monotonicity(
    seed: u64,
    trials: usize,
) -> Result<(Vec<CheckRecord>, Vec<Observation>)> {
    let mut mono = Tracker::new("fit_nll_monotone", MONOTONE_TOL);
    let mut rng = rng_for(seed, STREAM_FIT);
    let mut skipped = 0;
    for _ in 0..trials {
        let fit_seed: u64 = rng.random();
        let r = with_valid_state(&mut rng, &mut skipped, |s, d| {
            fit_monotonicity_residual(d, s.n_components(), fit_seed)
        });
        mono.push(r);
    }
    let obs = vec![Observation {
        name: "fit_skipped_states".into(),
        value: skipped as f64,
    }];
    Ok((vec![mono.finish()], obs))
}

/// Largest central-difference partial derivative of [`m_step_objective`] at
/// the outputs of the mean and covariance updates, over every mean entry and
/// every symmetric covariance perturbation.
pub fn stationarity_residual(start: &GmmParams, data: &Dataset) -> Result<f64> {
    let c = cost_matrix(start, data)?;
    let p = update_plan(start, &c)?;
    let means = update_means(&p, data)?;
    let sigma = update_covariance(&p, data, &means)?;
    let plan = p.plan();
    let f = |m: &[DVector<f64>], s: &DMatrix<f64>| m_step_objective(plan, data, m, s);
    let h = FD_STEP;
    let d = data.dimension();
    let mut worst: f64 = 0.0;
    for j in 0..means.len() {
        for a in 0..d {
            let mut up = means.clone();
            let mut dn = means.clone();
            up[j][a] += h;
            dn[j][a] -= h;
            worst = worst.max(((f(&up, &sigma)? - f(&dn, &sigma)?) / (2.0 * h)).abs());
        }
    }
    for a in 0..d {
        for b in 0..=a {
            let mut e = DMatrix::zeros(d, d);
            e[(a, b)] = h;
            e[(b, a)] = h;
            let g = (f(&means, &(&sigma + &e))? - f(&means, &(&sigma - &e))?) / (2.0 * h);
            worst = worst.max(g.abs());
        }
    }
    Ok(worst)
}

pub fn check_m_step_stationarity(seed: u64, trials: usize) -> Result<Vec<CheckRecord>> {
    let mut grad = Tracker::new("m_step_stationarity", STATIONARITY_TOL);
    let mut rng = rng_for(seed, STREAM_STATIONARITY);
    let mut skipped = 0;
    for _ in 0..trials {
        grad.push(with_valid_state(
            &mut rng,
            &mut skipped,
            stationarity_residual,
        ));
    }
    Ok(vec![grad.finish()])
}

/// Runs every check with `trials` instances each.
pub fn run_all(seed: u64, trials: usize) -> Result<VerificationReport> {
    let mut checks = check_identity_nll(seed, trials)?;
    let mut observations = Vec::new();
    let (c, o) = check_upper_bound(seed, trials)?;
    checks.extend(c);
    observations.extend(o);
    checks.extend(check_min_over_pi_equality(seed, trials)?);
    checks.extend(check_lemmas(seed, trials)?);
    let (c, o) = check_em_equivalence(seed, trials)?;
    checks.extend(c);
    observations.extend(o);
    let (c, o) = check_fit_monotonicity(seed, trials)?;
    checks.extend(c);
    observations.extend(o);
    checks.extend(check_m_step_stationarity(seed, trials)?);
    Ok(VerificationReport {
        seed,
        trials,
        checks,
        observations,
    })
}
