//! Kullback-Leibler divergences, weighted log-sum-exp and the Gibbs
//! variational principle.
//!
//! Conventions: `0 · log 0 = 0`, and `KL = +∞` whenever the first argument
//! has mass where the second has none. Infinity is a return value, not an
//! error. Sums are accumulated in row-major order so results are
//! bit-reproducible.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::types::{validate_simplex, ProbabilityVector, MEMBERSHIP_TOL};

/// `Σ_ij P_ij log(P_ij / Q_ij)` for nonnegative matrices of equal shape.
pub fn kl_matrix(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", p.nrows(), p.ncols()),
            found: format!("{}x{}", q.nrows(), q.ncols()),
        });
    }
    let mut total = 0.0;
    for i in 0..p.nrows() {
        for j in 0..p.ncols() {
            total += kl_term(p[(i, j)], q[(i, j)], i, j)?;
        }
    }
    Ok(total)
}

/// `Σ_j a_j log(a_j / b_j)` for nonnegative vectors of equal length.
pub fn kl_vector(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("length {}", a.len()),
            found: format!("length {}", b.len()),
        });
    }
    let mut total = 0.0;
    for (j, (&x, &y)) in a.iter().zip(b).enumerate() {
        total += kl_term(x, y, 0, j)?;
    }
    Ok(total)
}

fn kl_term(p: f64, q: f64, row: usize, col: usize) -> Result<f64> {
    if !p.is_finite() || !q.is_finite() {
        return Err(Error::NonFiniteInput(format!(
            "KL argument at ({row}, {col})"
        )));
    }
    if p < 0.0 {
        return Err(Error::NegativeEntry { row, col, value: p });
    }
    if q < 0.0 {
        return Err(Error::NegativeEntry { row, col, value: q });
    }
    Ok(if p == 0.0 {
        0.0
    } else if q == 0.0 {
        f64::INFINITY
    } else {
        p * (p.ln() - q.ln())
    })
}

fn check_lengths(pi: &ProbabilityVector, h: &[f64]) -> Result<()> {
    if pi.is_empty() || h.is_empty() {
        return Err(Error::EmptyInput);
    }
    if pi.len() != h.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("length {}", pi.len()),
            found: format!("length {}", h.len()),
        });
    }
    if let Some(j) = h.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput(format!("h[{j}] = {}", h[j])));
    }
    Ok(())
}

/// `log Σ_j w_j exp(h_j)` over the entries with `w_j > 0`, max-shifted.
///
/// Returns `-∞` if no weight is positive.
pub(crate) fn masked_weighted_logsumexp(w: &[f64], h: &[f64]) -> f64 {
    let shift = w
        .iter()
        .zip(h)
        .filter(|(&wj, _)| wj > 0.0)
        .map(|(&wj, &hj)| wj.ln() + hj)
        .fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return shift;
    }
    let s: f64 = w
        .iter()
        .zip(h)
        .filter(|(&wj, _)| wj > 0.0)
        .map(|(&wj, &hj)| (wj.ln() + hj - shift).exp())
        .sum();
    shift + s.ln()
}

/// `log Σ_j π_j exp(h_j)`, computed with max subtraction.
///
/// Every `π_j` must be strictly positive.
pub fn weighted_logsumexp(pi: &ProbabilityVector, h: &[f64]) -> Result<f64> {
    check_lengths(pi, h)?;
    pi.require_strictly_positive()?;
    Ok(masked_weighted_logsumexp(pi.as_slice(), h))
}

/// Posterior weights `p_k ∝ w_k exp(h_k)`, zero where `w_k = 0`.
pub(crate) fn masked_gibbs_weights(w: &[f64], h: &[f64]) -> Vec<f64> {
    let lse = masked_weighted_logsumexp(w, h);
    w.iter()
        .zip(h)
        .map(|(&wj, &hj)| {
            if wj > 0.0 {
                (wj.ln() + hj - lse).exp()
            } else {
                0.0
            }
        })
        .collect()
}

/// Maximizer of `p ↦ Σ_j h_j p_j − KL(p | π)` over the simplex:
/// `p_k = π_k exp(h_k) / Σ_j π_j exp(h_j)`.
pub fn gibbs_optimum(pi: &ProbabilityVector, h: &[f64]) -> Result<ProbabilityVector> {
    check_lengths(pi, h)?;
    pi.require_strictly_positive()?;
    validate_simplex(&masked_gibbs_weights(pi.as_slice(), h), MEMBERSHIP_TOL)
}

/// The variational objective `Σ_j h_j p_j − Σ_j p_j log(p_j / π_j)`.
pub fn gibbs_objective(pi: &ProbabilityVector, h: &[f64], p: &ProbabilityVector) -> Result<f64> {
    check_lengths(pi, h)?;
    pi.require_strictly_positive()?;
    if p.len() != pi.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("length {}", pi.len()),
            found: format!("length {}", p.len()),
        });
    }
    let linear: f64 = h.iter().zip(p.as_slice()).map(|(hj, pj)| hj * pj).sum();
    Ok(linear - kl_vector(p.as_slice(), pi.as_slice())?)
}

/// The three terms of `KL(P | a bᵀ) = KL(P | r cᵀ) + KL(r | a) + KL(c | b)`
/// where `r = P 1` and `c = Pᵀ 1` are the realized marginals of `P`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlDecomposition {
    /// `KL(P | r cᵀ)`: divergence from the product of its own marginals.
    pub coupling_term: f64,
    /// `KL(r | a)`.
    pub row_term: f64,
    /// `KL(c | b)`.
    pub column_term: f64,
}

impl KlDecomposition {
    pub fn sum(&self) -> f64 {
        self.coupling_term + self.row_term + self.column_term
    }
}

pub fn kl_three_term_decomposition(
    p: &DMatrix<f64>,
    a: &[f64],
    b: &[f64],
) -> Result<KlDecomposition> {
    let (n, k) = p.shape();
    if a.len() != n || b.len() != k {
        return Err(Error::ShapeMismatch {
            expected: format!("marginals of lengths {n} and {k}"),
            found: format!("lengths {} and {}", a.len(), b.len()),
        });
    }
    let r = crate::types::row_sums(p);
    let c = crate::types::column_sums(p);
    Ok(KlDecomposition {
        coupling_term: kl_to_outer(p, &r, &c)?,
        row_term: kl_vector(&r, a)?,
        column_term: kl_vector(&c, b)?,
    })
}

/// `KL(P | a bᵀ)` evaluated directly.
pub fn kl_to_product(p: &DMatrix<f64>, a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != p.nrows() || b.len() != p.ncols() {
        return Err(Error::ShapeMismatch {
            expected: format!("marginals of lengths {} and {}", p.nrows(), p.ncols()),
            found: format!("lengths {} and {}", a.len(), b.len()),
        });
    }
    kl_to_outer(p, a, b)
}

// KL(P | a bᵀ) with log(a_i b_j) = log a_i + log b_j, so tiny marginals do not
// underflow their product to zero.
fn kl_to_outer(p: &DMatrix<f64>, a: &[f64], b: &[f64]) -> Result<f64> {
    for (col, &x) in a.iter().chain(b).enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFiniteInput(format!("marginal entry {x}")));
        }
        if x < 0.0 {
            return Err(Error::NegativeEntry {
                row: 0,
                col,
                value: x,
            });
        }
    }
    let mut total = 0.0;
    for i in 0..p.nrows() {
        for j in 0..p.ncols() {
            let x = p[(i, j)];
            if !x.is_finite() {
                return Err(Error::NonFiniteInput(format!("KL argument at ({i}, {j})")));
            }
            if x < 0.0 {
                return Err(Error::NegativeEntry {
                    row: i,
                    col: j,
                    value: x,
                });
            }
            if x == 0.0 {
                continue;
            }
            if a[i] == 0.0 || b[j] == 0.0 {
                return Ok(f64::INFINITY);
            }
            total += x * (x.ln() - a[i].ln() - b[j].ln());
        }
    }
    Ok(total)
}
