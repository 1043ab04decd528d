//! The linear (infinitesimal-jackknife) approximation to re-weighted refits.
//!
//! `build_handle` assembles `H₁ = H(θ̂₁, 1_w)` once and factorizes it; every
//! subsequent weight vector costs a sparse gradient sum plus one back-solve:
//! `θ̂_IJ(w) = θ̂₁ − H₁⁻¹ G(θ̂₁, Δw)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimating::{
    eval_h_weighted, EstimatingEquation, FitResult, Parameter, WeightVector,
};

/// How linear systems in `H₁` are solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandleMode {
    /// One-time dense factorization, reused for every weight.
    Dense,
    /// Conjugate gradient on `H₁`-vector products; no factorization stored.
    MatrixFree,
}

#[derive(Debug)]
enum Factor {
    Chol(Cholesky<f64, Dyn>),
    Lu(LU<f64, Dyn, Dyn>),
    Cg,
}

/// `H₁` together with a reusable solve capability.
#[derive(Debug)]
pub struct HessianHandle {
    h1: DMatrix<f64>,
    factor: Factor,
    min_eig_estimate: f64,
    base_theta: Parameter,
}

/// Per-datum gradients at the base fit, one row per datum.
#[derive(Debug)]
pub struct GradientCache {
    g_at_base: DMatrix<f64>,
}

impl GradientCache {
    pub fn n_points(&self) -> usize {
        self.g_at_base.nrows()
    }

    pub fn dim(&self) -> usize {
        self.g_at_base.ncols()
    }

    /// `g_n(θ̂₁)` for datum `n`.
    pub fn row(&self, n: usize) -> DVector<f64> {
        self.g_at_base.row(n).transpose()
    }

    /// `G(θ̂₁, a) = (1/N) Σ a_n g_n(θ̂₁)` for a dense direction `a`.
    pub fn weighted_mean(&self, a: &DVector<f64>) -> DVector<f64> {
        (self.g_at_base.transpose() * a) / self.n_points() as f64
    }

    /// `G(θ̂₁, Δw)` using only the sparse support of `Δw`.
    pub fn delta_mean(&self, w: &WeightVector) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim());
        for (i, d) in w.delta() {
            acc.axpy(d, &self.row(i), 1.0);
        }
        acc / self.n_points() as f64
    }
}

impl HessianHandle {
    pub fn h1(&self) -> &DMatrix<f64> {
        &self.h1
    }

    pub fn base_theta(&self) -> &Parameter {
        &self.base_theta
    }

    pub fn min_eig_estimate(&self) -> f64 {
        self.min_eig_estimate
    }

    /// Solve `H₁ x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let x = match &self.factor {
            Factor::Chol(c) => Some(c.solve(b)),
            Factor::Lu(lu) => lu.solve(b),
            Factor::Cg => cg_solve(&self.h1, b, 1e-12, 20 * b.len().max(50)),
        };
        x.filter(|v| v.iter().all(|e| e.is_finite()))
            .ok_or_else(|| Error::SingularHessian {
                sigma_min: self.min_eig_estimate,
                guard: f64::NAN,
                context: " while solving against H1".into(),
            })
    }
}

fn cg_solve(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    rel_tol: f64,
    max_iter: usize,
) -> Option<DVector<f64>> {
    let mut x = DVector::zeros(b.len());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return Some(x);
    }
    for _ in 0..max_iter {
        if rs.sqrt() / b_norm <= rel_tol {
            break;
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

/// Estimate the smallest-magnitude eigenvalue by inverse power iteration
/// through an existing solve capability.
fn inverse_power_min_eig(solve: impl Fn(&DVector<f64>) -> Option<DVector<f64>>, d: usize) -> f64 {
    let mut v = DVector::from_element(d, 1.0 / (d as f64).sqrt());
    let mut inv_eig = 0.0f64;
    for _ in 0..20 {
        let u = match solve(&v) {
            Some(u) if u.iter().all(|e| e.is_finite()) => u,
            _ => return 0.0,
        };
        let norm = u.norm();
        if norm == 0.0 || !norm.is_finite() {
            return 0.0;
        }
        inv_eig = norm;
        v = u / norm;
    }
    1.0 / inv_eig
}

/// Guard for non-degeneracy at handle construction.
const MIN_HESSIAN_EIG: f64 = 1e-10;

/// Assemble `H₁` at a converged base fit, factorize it, and cache all
/// per-datum gradients `g_n(θ̂₁)`.
///
/// Cholesky is used when `H₁` is symmetric positive definite; otherwise a
/// general LU factorization covers asymmetric stacked Jacobians.
pub fn build_handle<E: EstimatingEquation>(
    eq: &E,
    base: &FitResult,
    mode: HandleMode,
) -> Result<(HessianHandle, GradientCache)> {
    if !base.converged {
        return Err(Error::InvalidInput(
            "build_handle requires a converged base fit".into(),
        ));
    }
    let n = eq.n_points();
    let d = eq.dim();
    let ones = WeightVector::ones(n);
    let h1 = eval_h_weighted(eq, &base.theta, &ones)?;

    let mut g_at_base = DMatrix::zeros(n, d);
    for i in 0..n {
        let gi = eq.eval_g(i, &base.theta);
        if gi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEvaluation { what: "g", index: i });
        }
        g_at_base.row_mut(i).copy_from(&gi.transpose());
    }

    let scale = h1.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let symmetric = (0..d).all(|i| {
        (0..i).all(|j| (h1[(i, j)] - h1[(j, i)]).abs() <= 1e-12 * scale)
    });

    let factor = match mode {
        HandleMode::MatrixFree => Factor::Cg,
        HandleMode::Dense => {
            if symmetric {
                match Cholesky::new(h1.clone()) {
                    Some(c) => Factor::Chol(c),
                    None => Factor::Lu(h1.clone().lu()),
                }
            } else {
                Factor::Lu(h1.clone().lu())
            }
        }
    };

    let min_eig_estimate = match &factor {
        Factor::Chol(c) => inverse_power_min_eig(|v| Some(c.solve(v)), d),
        Factor::Lu(lu) => inverse_power_min_eig(|v| lu.solve(v), d),
        Factor::Cg => inverse_power_min_eig(|v| cg_solve(&h1, v, 1e-12, 20 * d.max(50)), d),
    };
    if !(min_eig_estimate > MIN_HESSIAN_EIG) {
        return Err(Error::SingularHessian {
            sigma_min: min_eig_estimate,
            guard: MIN_HESSIAN_EIG,
            context: " when building the H1 handle (non-degeneracy assumption violated)".into(),
        });
    }

    Ok((
        HessianHandle {
            h1,
            factor,
            min_eig_estimate,
            base_theta: base.theta.clone(),
        },
        GradientCache { g_at_base },
    ))
}

/// `θ̂_IJ(w) = θ̂₁ − H₁⁻¹ G(θ̂₁, Δw)`.
pub fn ij_predict(
    handle: &HessianHandle,
    cache: &GradientCache,
    w: &WeightVector,
) -> Result<Parameter> {
    if w.len() != cache.n_points() {
        return Err(Error::DimensionMismatch(format!(
            "weight vector has length {}, cache covers {} data points",
            w.len(),
            cache.n_points()
        )));
    }
    let delta = w.delta();
    if delta.is_empty() {
        // Δw = 0 reproduces the base fit bitwise.
        return Ok(handle.base_theta.clone());
    }
    let rhs = cache.delta_mean(w);
    let correction = handle.solve(&rhs)?;
    Parameter::new(handle.base_theta.values() - correction)
}

/// Elementwise [`ij_predict`] sharing one factorization; entries run
/// concurrently and per-entry errors propagate per entry.
pub fn ij_batch(
    handle: &HessianHandle,
    cache: &GradientCache,
    weights: &[WeightVector],
) -> Vec<Result<Parameter>> {
    weights
        .par_iter()
        .map(|w| ij_predict(handle, cache, w))
        .collect()
}

/// Directional derivative of the refit map:
/// `dθ̂/dwᵀ|_{1_w} a = −H₁⁻¹ G(θ̂₁, a)`.
pub fn dtheta_dw_action(
    handle: &HessianHandle,
    cache: &GradientCache,
    direction: &DVector<f64>,
) -> Result<DVector<f64>> {
    if direction.len() != cache.n_points() {
        return Err(Error::DimensionMismatch(format!(
            "direction has length {}, cache covers {} data points",
            direction.len(),
            cache.n_points()
        )));
    }
    let rhs = cache.weighted_mean(direction);
    Ok(-handle.solve(&rhs)?)
}

/// Gauss-Legendre nodes and weights on [0, 1].
fn gauss_legendre_unit(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 1..=(n + 1) / 2 {
        // Newton iteration on P_n from the Chebyshev initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let k = k as f64;
                let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            pp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / pp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * pp * pp);
        out.push((x, w));
    }
    // mirror to the full node set, then map [-1,1] -> [0,1]
    let mut full = Vec::with_capacity(n);
    for &(x, w) in &out {
        full.push((-x, w));
    }
    if n % 2 == 1 {
        full.pop();
    }
    for &(x, w) in out.iter().rev() {
        full.push((x, w));
    }
    full.into_iter()
        .map(|(x, w)| (0.5 * (x + 1.0), 0.5 * w))
        .collect()
}

/// Quadrature approximation of the Taylor-remainder operator
/// `H̃(θ, w) = ∫₀¹ H(θ̂₁ + t(θ − θ̂₁), w) dt`, anchored at the handle's base
/// point. Diagnostic: `G(θ,w) − G(θ̂₁,w) = H̃(θ,w)(θ − θ̂₁)` for smooth models.
pub fn integrated_hessian<E: EstimatingEquation>(
    eq: &E,
    base_theta: &Parameter,
    theta: &Parameter,
    w: &WeightVector,
    quad_points: usize,
) -> Result<DMatrix<f64>> {
    if quad_points < 2 {
        return Err(Error::InvalidInput("quad_points must be at least 2".into()));
    }
    let d = eq.dim();
    let diff = theta.values() - base_theta.values();
    let mut acc = DMatrix::zeros(d, d);
    for (t, weight) in gauss_legendre_unit(quad_points) {
        let point = Parameter::new(base_theta.values() + &diff * t)?;
        acc += eval_h_weighted(eq, &point, w)? * weight;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimating::eval_g_weighted;
    use crate::models::{generate_synthetic, Dataset, GlmKind, GlmModel, SyntheticSpec};
    use crate::solver::{solve, SolverOptions};
    use approx::assert_abs_diff_eq;

    fn fit(eq: &GlmModel) -> FitResult {
        solve(
            eq,
            &WeightVector::ones(eq.n_points()),
            &Parameter::zeros(eq.dim()),
            &SolverOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn mean_model_handle_is_identity() {
        let eq = GlmModel::mean(vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let base = fit(&eq);
        let (handle, _) = build_handle(&eq, &base, HandleMode::Dense).unwrap();
        assert_abs_diff_eq!(handle.h1()[(0, 0)], 1.0, epsilon = 1e-14);
        let b = DVector::from_vec(vec![0.7]);
        assert_abs_diff_eq!(handle.solve(&b).unwrap()[0], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(handle.min_eig_estimate(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn rank_deficient_design_is_rejected() {
        // duplicate column makes XᵀX singular
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| 2.0 * i as f64).collect();
        let ds = Dataset::new(x, y, false).unwrap();
        let eq = GlmModel::new(GlmKind::Linear, ds).unwrap();
        // solve would also flag this; build the handle from a hand-made root
        let base = FitResult {
            theta: Parameter::from_slice(&[1.0, 1.0]).unwrap(),
            grad_norm: 0.0,
            iterations: 0,
            converged: true,
        };
        let err = build_handle(&eq, &base, HandleMode::Dense).unwrap_err();
        assert!(matches!(err, Error::SingularHessian { .. }), "{err}");
    }

    #[test]
    fn ij_at_ones_is_base_bitwise() {
        let eq = GlmModel::mean(vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let base = fit(&eq);
        let (handle, cache) = build_handle(&eq, &base, HandleMode::Dense).unwrap();
        let p = ij_predict(&handle, &cache, &WeightVector::ones(4)).unwrap();
        assert_eq!(p, base.theta);
    }

    #[test]
    fn mean_model_leave_one_out_closed_form() {
        let eq = GlmModel::mean(vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let base = fit(&eq);
        let (handle, cache) = build_handle(&eq, &base, HandleMode::Dense).unwrap();
        let w = WeightVector::leave_out(4, &[3]).unwrap();
        let p = ij_predict(&handle, &cache, &w).unwrap();
        // 3 + (3 - 6)/4 = 2.25; the exact refit is 2.0
        assert_abs_diff_eq!(p.values()[0], 2.25, epsilon = 1e-12);
        let refit = solve(&eq, &w, &base.theta, &SolverOptions::default()).unwrap();
        assert_abs_diff_eq!(refit.theta.values()[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn loo_identity_matches_formula_expansion() {
        let spec = SyntheticSpec::desk(GlmKind::Linear, 40, 3, 5);
        let ds = generate_synthetic(&spec).unwrap();
        let eq = GlmModel::new(GlmKind::Linear, ds).unwrap();
        let base = fit(&eq);
        let (handle, cache) = build_handle(&eq, &base, HandleMode::Dense).unwrap();
        for m in [0usize, 7, 39] {
            let w = WeightVector::leave_out(40, &[m]).unwrap();
            let p = ij_predict(&handle, &cache, &w).unwrap();
            let expect = base.theta.values()
                + handle.solve(&(cache.row(m) / 40.0)).unwrap();
            assert_abs_diff_eq!((p.values() - expect).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn dtheta_dw_ones_direction_is_zero() {
        let eq = GlmModel::mean(vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let base = fit(&eq);
        let (handle, cache) = build_handle(&eq, &base, HandleMode::Dense).unwrap();
        let a = DVector::from_element(4, 1.0);
        let d = dtheta_dw_action(&handle, &cache, &a).unwrap();
        assert!(d.norm() <= 1e-10, "norm = {}", d.norm());
    }

    #[test]
    fn dtheta_dw_indicator_on_mean_model() {
        let eq = GlmModel::mean(vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let base = fit(&eq);
        let (handle, cache) = build_handle(&eq, &base, HandleMode::Dense).unwrap();
        let mut a = DVector::zeros(4);
        a[3] = 1.0;
        let d = dtheta_dw_action(&handle, &cache, &a).unwrap();
        // -(θ̂₁ - x_m)/N = -(3-6)/4
        assert_abs_diff_eq!(d[0], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn dtheta_dw_matches_refit_finite_difference() {
        let spec = SyntheticSpec::desk(GlmKind::Logistic, 60, 3, 9);
        let ds = generate_synthetic(&spec).unwrap();
        let eq = GlmModel::new(GlmKind::Logistic, ds).unwrap();
        let base = fit(&eq);
        let (handle, cache) = build_handle(&eq, &base, HandleMode::Dense).unwrap();
        let mut a = DVector::zeros(60);
        a[5] = 1.0;
        a[17] = -2.0;
        let analytic = dtheta_dw_action(&handle, &cache, &a).unwrap();
        let eps = 1e-6;
        let w_pert = WeightVector::dense(DVector::from_element(60, 1.0) + &a * eps);
        let refit = solve(&eq, &w_pert, &base.theta, &SolverOptions::default()).unwrap();
        let fd = (refit.theta.values() - base.theta.values()) / eps;
        let rel = (&fd - &analytic).norm() / analytic.norm();
        assert!(rel <= 1e-5, "rel err = {rel}");
    }

    #[test]
    fn integrated_hessian_constant_integrand() {
        let eq = GlmModel::mean(vec![1.0, 2.0, 3.0]).unwrap();
        let base = fit(&eq);
        let w = WeightVector::ones(3);
        let h = integrated_hessian(&eq, &base.theta, &base.theta, &w, 4).unwrap();
        assert_abs_diff_eq!(h[(0, 0)], 1.0, epsilon = 1e-13);
    }

    #[test]
    fn integrated_hessian_taylor_identity_logistic() {
        let spec = SyntheticSpec::desk(GlmKind::Logistic, 50, 2, 21);
        let ds = generate_synthetic(&spec).unwrap();
        let eq = GlmModel::new(GlmKind::Logistic, ds).unwrap();
        let base = fit(&eq);
        let w = WeightVector::leave_out(50, &[3, 10]).unwrap();
        let theta = Parameter::new(
            base.theta.values() + DVector::from_vec(vec![0.2, -0.15, 0.1]),
        )
        .unwrap();
        let lhs = eval_g_weighted(&eq, &theta, &w).unwrap()
            - eval_g_weighted(&eq, &base.theta, &w).unwrap();
        let h_tilde = integrated_hessian(&eq, &base.theta, &theta, &w, 16).unwrap();
        let rhs = h_tilde * (theta.values() - base.theta.values());
        assert!((lhs - rhs).norm() <= 1e-6);
    }

    #[test]
    fn dense_and_matrix_free_agree() {
        let spec = SyntheticSpec::desk(GlmKind::Logistic, 80, 4, 33);
        let ds = generate_synthetic(&spec).unwrap();
        let eq = GlmModel::new(GlmKind::Logistic, ds).unwrap();
        let base = fit(&eq);
        let (hd, cd) = build_handle(&eq, &base, HandleMode::Dense).unwrap();
        let (hm, cm) = build_handle(&eq, &base, HandleMode::MatrixFree).unwrap();
        for m in 0..10 {
            let w = WeightVector::leave_out(80, &[m]).unwrap();
            let a = ij_predict(&hd, &cd, &w).unwrap();
            let b = ij_predict(&hm, &cm, &w).unwrap();
            assert!((a.values() - b.values()).norm() <= 1e-7);
        }
    }

    #[test]
    fn batch_equals_map() {
        let eq = GlmModel::mean(vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let base = fit(&eq);
        let (handle, cache) = build_handle(&eq, &base, HandleMode::Dense).unwrap();
        let weights: Vec<WeightVector> = (0..4)
            .map(|m| WeightVector::leave_out(4, &[m]).unwrap())
            .collect();
        let batch = ij_batch(&handle, &cache, &weights);
        for (w, b) in weights.iter().zip(&batch) {
            let single = ij_predict(&handle, &cache, w).unwrap();
            assert_eq!(b.as_ref().unwrap(), &single);
        }
    }
}
