//! Damped Newton solver for `G(θ, w) = 0`.
//!
//! The step solves `(H(θ,w) + λI) s = −G(θ,w)` with Levenberg-style damping
//! `λ` increased until the step reduces `‖G‖₂`. The inner linear solve is a
//! dense factorization for `D ≤ dense_cutoff` and conjugate gradient on
//! Hessian-vector products beyond that. Loose first-order optima break the
//! downstream linear approximation, so the default gradient tolerance is
//! strict.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimating::{
    eval_g_weighted, eval_h_weighted, EstimatingEquation, FitResult, Parameter, WeightVector,
};

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Convergence threshold on `‖G(θ,w)‖₂`.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Starting Levenberg damping; 0 gives a pure Newton first attempt.
    pub initial_damping: f64,
    /// Smallest acceptable singular value of `H` at a candidate optimum.
    pub min_hessian_eig: f64,
    /// Parameter dimension above which the inner solve switches to
    /// matrix-free conjugate gradient.
    pub dense_cutoff: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            grad_tol: 1e-10,
            max_iter: 100,
            initial_damping: 0.0,
            min_hessian_eig: 1e-10,
            dense_cutoff: 512,
        }
    }
}

/// Solve the damped linear system `(H + λI) s = −g`.
fn newton_step(h: &DMatrix<f64>, g: &DVector<f64>, damping: f64, dense: bool) -> Option<DVector<f64>> {
    let d = g.len();
    let mut a = h.clone();
    for i in 0..d {
        a[(i, i)] += damping;
    }
    if dense {
        a.lu().solve(&(-g))
    } else {
        conjugate_gradient(&a, &(-g), 1e-12, 10 * d)
    }
}

/// Plain CG; `a` need not be assembled sparsely here, but the solve touches it
/// only through matrix-vector products.
fn conjugate_gradient(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    rel_tol: f64,
    max_iter: usize,
) -> Option<DVector<f64>> {
    let mut x = DVector::zeros(b.len());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let b_norm = b.norm().max(1e-300);
    for _ in 0..max_iter {
        if rs.sqrt() / b_norm <= rel_tol {
            return Some(x);
        }
        let ap = a * &p;
        let denom = p.dot(&ap);
        if denom.abs() < 1e-300 || !denom.is_finite() {
            return None;
        }
        let alpha = rs / denom;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rs_new = r.dot(&r);
        p = &r + &p * (rs_new / rs);
        rs = rs_new;
    }
    Some(x)
}

/// Smallest singular value of a square matrix.
pub(crate) fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Compute `θ̂(w)` by damped Newton iteration from `init`.
///
/// Returns a non-converged [`FitResult`] (not an error) when `max_iter` is
/// exhausted. A singular Hessian at a candidate optimum is an error when the
/// Hessian is already singular at `init` (a structural rank deficiency, so no
/// locally unique root exists anywhere); if it degenerated only along the
/// iteration path the iterates are running away (e.g. separable logistic
/// data) and the result is a non-convergence report instead.
pub fn solve<E: EstimatingEquation>(
    eq: &E,
    w: &WeightVector,
    init: &Parameter,
    opts: &SolverOptions,
) -> Result<FitResult> {
    let dense = eq.dim() <= opts.dense_cutoff;
    let mut theta = init.clone();
    let mut g = eval_g_weighted(eq, &theta, w)?;
    let mut g_norm = g.norm();
    let mut damping = opts.initial_damping;

    for iter in 0..=opts.max_iter {
        if g_norm <= opts.grad_tol {
            let h = eval_h_weighted(eq, &theta, w)?;
            if dense {
                let sigma_min = smallest_singular_value(&h);
                if sigma_min < opts.min_hessian_eig {
                    let sigma_init =
                        smallest_singular_value(&eval_h_weighted(eq, init, w)?);
                    if sigma_init < opts.min_hessian_eig {
                        return Err(Error::SingularHessian {
                            sigma_min,
                            guard: opts.min_hessian_eig,
                            context: " at the fitted optimum".into(),
                        });
                    }
                    // degenerated only along the path: runaway iterates
                    return Ok(FitResult {
                        theta,
                        grad_norm: g_norm,
                        iterations: iter,
                        converged: false,
                    });
                }
            }
            return Ok(FitResult {
                theta,
                grad_norm: g_norm,
                iterations: iter,
                converged: true,
            });
        }
        if iter == opts.max_iter {
            break;
        }

        let h = eval_h_weighted(eq, &theta, w)?;
        let mut accepted = false;
        let mut local_damping = damping;
        for _ in 0..60 {
            let step = match newton_step(&h, &g, local_damping, dense) {
                Some(s) if s.iter().all(|v| v.is_finite()) => s,
                _ => {
                    local_damping = (local_damping * 10.0).max(1e-8);
                    continue;
                }
            };
            let candidate = Parameter::new(theta.values() + &step)?;
            let g_cand = eval_g_weighted(eq, &candidate, w)?;
            let cand_norm = g_cand.norm();
            if cand_norm.is_finite() && cand_norm < g_norm {
                theta = candidate;
                g = g_cand;
                g_norm = cand_norm;
                damping = local_damping * 0.25;
                accepted = true;
                break;
            }
            local_damping = (local_damping * 10.0).max(1e-8);
            if local_damping > 1e12 {
                break;
            }
        }
        if !accepted {
            // No damping level reduced the gradient; report where we stopped.
            return Ok(FitResult {
                theta,
                grad_norm: g_norm,
                iterations: iter,
                converged: false,
            });
        }
    }

    Ok(FitResult {
        theta,
        grad_norm: g_norm,
        iterations: opts.max_iter,
        converged: false,
    })
}

/// Exact refits for a batch of weight vectors, each warm-started at the base
/// solution. Entries run concurrently; output order matches input order and
/// per-entry failures do not abort the batch.
pub fn warm_start_batch<E: EstimatingEquation>(
    eq: &E,
    weights: &[WeightVector],
    base: &FitResult,
    opts: &SolverOptions,
) -> Result<Vec<Result<FitResult>>> {
    if !base.converged {
        return Err(Error::InvalidInput(
            "warm_start_batch requires a converged base fit".into(),
        ));
    }
    Ok(weights
        .par_iter()
        .map(|w| solve(eq, w, &base.theta, opts))
        .collect())
}
