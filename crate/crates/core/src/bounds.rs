//! Verifiable constants and the finite-sample error certificate.
//!
//! The certificate bounds `max_w ‖θ̂_IJ(w) − θ̂(w)‖₂` by `2 C_op² C_IJ δ²`
//! whenever the weight-family complexity `δ` stays below the threshold
//! `Δ_δ = min(Δ_θ/C_op, 1/(2 C_IJ C_op))` with `C_IJ = 1 + D C_w L_h C_op`.
//!
//! The suprema over the parameter domain are estimated by uniform sampling in
//! an L2 ball around the base fit; they are sampled lower bounds of the true
//! suprema, and every certificate carries that disclaimer in its metadata.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimating::{EstimatingEquation, FitResult, Parameter, WeightVector};
use crate::ij::{ij_predict, GradientCache, HessianHandle};
use crate::solver::smallest_singular_value;

/// Concrete stand-in for the abstract parameter domain: an L2 ball around the
/// base fit, probed at `n_samples` uniformly drawn points plus the center.
/// The radius doubles as the local-smoothness range `Δ_θ`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub center: Vec<f64>,
    pub radius: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn new(center: &Parameter, radius: f64, n_samples: usize, seed: u64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidInput("domain radius must be positive".into()));
        }
        if n_samples < 2 {
            return Err(Error::InvalidInput(
                "domain needs at least 2 samples".into(),
            ));
        }
        Ok(DomainSpec {
            center: center.values().iter().copied().collect(),
            radius,
            n_samples,
            seed,
        })
    }

    /// Default radius rule: twice the largest IJ offset over the weight
    /// family, so the ball contains the refits the certificate speaks about.
    pub fn auto(
        handle: &HessianHandle,
        cache: &GradientCache,
        weights: &[WeightVector],
        n_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut max_offset = 0.0f64;
        for w in weights {
            let p = ij_predict(handle, cache, w)?;
            max_offset = max_offset.max((p.values() - handle.base_theta().values()).norm());
        }
        let radius = (2.0 * max_offset).max(1e-6);
        Self::new(handle.base_theta(), radius, n_samples, seed)
    }

    /// Sampled probe points: the center first, then uniform draws in the
    /// ball.
    pub fn sample_points(&self) -> Vec<Parameter> {
        let center = DVector::from_vec(self.center.clone());
        let d = center.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(self.n_samples + 1);
        out.push(Parameter::new(center.clone()).expect("finite center"));
        for _ in 0..self.n_samples {
            let dir = DVector::from_iterator(
                d,
                (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)),
            );
            let norm = dir.norm().max(1e-300);
            let scale = self.radius * rng.gen::<f64>().powf(1.0 / d as f64);
            out.push(
                Parameter::new(&center + dir * (scale / norm)).expect("finite sample"),
            );
        }
        out
    }
}

/// Estimation metadata attached to every certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateMeta {
    pub domain_radius: f64,
    pub domain_samples: usize,
    pub domain_seed: u64,
    pub n_weights: usize,
    /// Constants and δ are maxima over sampled points, hence lower bounds of
    /// the true suprema; the certificate is empirical, not rigorous.
    pub sampled_suprema: bool,
}

/// The assembled constants, complexity, and bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IJCertificate {
    pub c_g: f64,
    pub c_h: f64,
    pub c_op: f64,
    pub l_h: f64,
    pub c_w: f64,
    /// `1 + D C_w L_h C_op`, exactly.
    pub c_ij: f64,
    /// The configured local-smoothness range `Δ_θ` (the domain radius).
    pub delta_theta: f64,
    /// `Δ_δ = min(Δ_θ/C_op, 1/(2 C_IJ C_op))`, exactly.
    pub delta_cap: f64,
    /// Measured set complexity `δ`.
    pub delta: f64,
    /// `2 C_op² C_IJ δ²`, exactly.
    pub bound: f64,
    /// `δ ≤ Δ_δ`.
    pub valid: bool,
    pub meta: CertificateMeta,
}

/// The domain-dependent constants alone (no weight family yet).
#[derive(Debug, Clone)]
pub struct ConstantEstimates {
    pub c_g: f64,
    pub c_h: f64,
    pub c_op: f64,
    pub l_h: f64,
}

fn frob_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Estimate `C_g`, `C_h`, `C_op`, and `L_h` over the sampled domain.
///
/// `C_g = max_θ ‖g(θ)‖₂/√N`, `C_h` likewise over the stacked Hessians,
/// `C_op = max_θ ‖H(θ,1_w)⁻¹‖_op` via the smallest singular value, and `L_h`
/// is the largest secant slope anchored at the base fit.
pub fn estimate_constants<E: EstimatingEquation>(
    eq: &E,
    base: &FitResult,
    domain: &DomainSpec,
) -> Result<ConstantEstimates> {
    if !base.converged {
        return Err(Error::InvalidInput(
            "estimate_constants requires a converged base fit".into(),
        ));
    }
    let n = eq.n_points();
    let d = eq.dim();
    let sqrt_n = (n as f64).sqrt();
    let points = domain.sample_points();
    let center = &points[0];

    // h_n at the center, kept for the secant bound
    let h_center: Vec<DMatrix<f64>> = (0..n).map(|i| eq.eval_h(i, center)).collect();

    let mut c_g = 0.0f64;
    let mut c_h = 0.0f64;
    let mut c_op = 0.0f64;
    let mut l_h = 0.0f64;

    for theta in &points {
        let mut g_sq = 0.0;
        let mut h_sq = 0.0;
        let mut diff_sq = 0.0;
        let mut h_mean = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let gi = eq.eval_g(i, theta);
            if gi.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteEvaluation { what: "g", index: i });
            }
            let hi = eq.eval_h(i, theta);
            g_sq += gi.norm_squared();
            h_sq += frob_sq(&hi);
            diff_sq += frob_sq(&(&hi - &h_center[i]));
            h_mean += hi;
        }
        h_mean /= n as f64;
        c_g = c_g.max((g_sq / n as f64).sqrt());
        c_h = c_h.max((h_sq / n as f64).sqrt());

        let sigma_min = smallest_singular_value(&h_mean);
        if sigma_min < 1e-12 {
            return Err(Error::SingularHessian {
                sigma_min,
                guard: 1e-12,
                context: format!(
                    " at sampled θ = {:?} (non-degeneracy assumption violated)",
                    theta.values().as_slice()
                ),
            });
        }
        c_op = c_op.max(1.0 / sigma_min);

        let dist = (theta.values() - center.values()).norm();
        if dist > 1e-12 {
            l_h = l_h.max(diff_sq.sqrt() / (sqrt_n * dist));
        }
    }

    Ok(ConstantEstimates { c_g, c_h, c_op, l_h })
}

/// Sampled estimate of the set complexity `δ`: the worst L1 norm, over the
/// weight family and the sampled domain, of the weighted-centered gradient
/// and Hessian averages.
pub fn compute_delta<E: EstimatingEquation>(
    eq: &E,
    base: &FitResult,
    domain: &DomainSpec,
    weights: &[WeightVector],
) -> Result<f64> {
    if !base.converged {
        return Err(Error::InvalidInput(
            "compute_delta requires a converged base fit".into(),
        ));
    }
    let n = eq.n_points();
    let d = eq.dim();
    let mut delta = 0.0f64;
    for theta in domain.sample_points() {
        // per-datum values at this θ, shared across the whole family
        let gs: Vec<DVector<f64>> = (0..n).map(|i| eq.eval_g(i, &theta)).collect();
        let hs: Vec<DMatrix<f64>> = (0..n).map(|i| eq.eval_h(i, &theta)).collect();
        for w in weights {
            let mut g_acc = DVector::<f64>::zeros(d);
            let mut h_acc = DMatrix::<f64>::zeros(d, d);
            for (i, dv) in w.delta() {
                g_acc.axpy(dv, &gs[i], 1.0);
                h_acc += &hs[i] * dv;
            }
            let g_l1: f64 = g_acc.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
            let h_l1: f64 = h_acc.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
            delta = delta.max(g_l1.max(h_l1));
        }
    }
    Ok(delta)
}

/// Assemble the full certificate for a weight family.
pub fn certify<E: EstimatingEquation>(
    eq: &E,
    base: &FitResult,
    domain: &DomainSpec,
    weights: &[WeightVector],
) -> Result<IJCertificate> {
    let consts = estimate_constants(eq, base, domain)?;
    let n = eq.n_points() as f64;
    let d = eq.dim() as f64;
    let c_w = weights
        .iter()
        .map(|w| w.l2_norm() / n.sqrt())
        .fold(0.0f64, f64::max);
    let delta = compute_delta(eq, base, domain, weights)?;

    let c_ij = 1.0 + d * c_w * consts.l_h * consts.c_op;
    let delta_cap = (domain.radius / consts.c_op).min(1.0 / (2.0 * c_ij * consts.c_op));
    let bound = 2.0 * consts.c_op * consts.c_op * c_ij * delta * delta;

    Ok(IJCertificate {
        c_g: consts.c_g,
        c_h: consts.c_h,
        c_op: consts.c_op,
        l_h: consts.l_h,
        c_w,
        c_ij,
        delta_theta: domain.radius,
        delta_cap,
        delta,
        bound,
        valid: delta <= delta_cap,
        meta: CertificateMeta {
            domain_radius: domain.radius,
            domain_samples: domain.n_samples,
            domain_seed: domain.seed,
            n_weights: weights.len(),
            sampled_suprema: true,
        },
    })
}

/// Fit a log-log regression of the worst IJ error in the leave-`k`-out family
/// against the dataset size, returning the slope.
///
/// The factory maps `(n, seed)` to an estimating equation over `n` data
/// points. `limit` caps the number of folds per size (seeded sampling).
pub fn convergence_rate_check<E, F>(
    factory: F,
    sizes: &[usize],
    k: usize,
    seed: u64,
    limit: Option<usize>,
) -> Result<f64>
where
    E: EstimatingEquation,
    F: Fn(usize, u64) -> Result<E>,
{
    use crate::ij::{build_handle, HandleMode};
    use crate::solver::{solve, warm_start_batch, SolverOptions};
    use crate::weights::leave_k_out;

    if k == 0 {
        return Err(Error::InvalidInput(
            "rate check requires k >= 1; the k = 0 family has zero error everywhere".into(),
        ));
    }
    if sizes.len() < 3 || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput(
            "sizes must be strictly increasing with at least 3 values".into(),
        ));
    }

    let opts = SolverOptions::default();
    let mut log_n = Vec::with_capacity(sizes.len());
    let mut log_err = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let eq = factory(n, seed)?;
        let base = solve(&eq, &WeightVector::ones(n), &Parameter::zeros(eq.dim()), &opts)?;
        if !base.converged {
            return Err(Error::NonConvergence(format!("base fit at N = {n}")));
        }
        let (handle, cache) = build_handle(&eq, &base, HandleMode::Dense)?;
        let family: Vec<WeightVector> = leave_k_out(n, k, limit, seed)?.collect();
        let refits = warm_start_batch(&eq, &family, &base, &opts)?;
        let mut max_err = 0.0f64;
        for (w, refit) in family.iter().zip(refits) {
            let refit = refit?;
            if !refit.converged {
                return Err(Error::NonConvergence(format!("refit at N = {n}")));
            }
            let ij = ij_predict(&handle, &cache, w)?;
            max_err = max_err.max((ij.values() - refit.theta.values()).norm());
        }
        if max_err <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "zero IJ error at N = {n}; slope is undefined"
            )));
        }
        log_n.push((n as f64).ln());
        log_err.push(max_err.ln());
    }

    // least-squares slope
    let m = log_n.len() as f64;
    let mean_x: f64 = log_n.iter().sum::<f64>() / m;
    let mean_y: f64 = log_err.iter().sum::<f64>() / m;
    let sxy: f64 = log_n
        .iter()
        .zip(&log_err)
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    let sxx: f64 = log_n.iter().map(|x| (x - mean_x).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Verify the tensor-array Hölder inequality
/// `‖(1/N) Σ w_n a_n‖₁ ≤ √D_A (‖w‖₂/√N)(‖a‖₂/√N)` on flattened tensors.
pub fn check_holder(w: &WeightVector, tensors: &[DVector<f64>]) -> Result<bool> {
    let n = tensors.len();
    if w.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} weights but {} tensors",
            w.len(),
            n
        )));
    }
    let d_a = tensors.first().map_or(0, |t| t.len());
    if tensors.iter().any(|t| t.len() != d_a) {
        return Err(Error::DimensionMismatch("ragged tensor array".into()));
    }
    if n == 0 || d_a == 0 {
        return Ok(true);
    }
    let mut acc = DVector::<f64>::zeros(d_a);
    for (i, t) in tensors.iter().enumerate() {
        acc.axpy(w.get(i), t, 1.0);
    }
    let lhs: f64 = acc.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let a_norm = tensors.iter().map(|t| t.norm_squared()).sum::<f64>().sqrt();
    let rhs = (d_a as f64).sqrt() * (w.l2_norm() / (n as f64).sqrt()) * (a_norm / (n as f64).sqrt());
    Ok(lhs <= rhs * (1.0 + 1e-12) + 1e-300)
}

/// Verify the operator-norm continuity implication: given
/// `‖A⁻¹‖_op ≤ c_op`, `‖A − B‖₁ ≤ ½ c_op⁻¹` implies `‖B⁻¹‖_op ≤ 2 c_op`.
pub fn check_opnorm_continuity(a: &DMatrix<f64>, b: &DMatrix<f64>, c_op: f64) -> Result<bool> {
    if a.nrows() != a.ncols() || a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(
            "matrices must be square and the same size".into(),
        ));
    }
    let sigma_a = smallest_singular_value(a);
    if sigma_a <= 0.0 || 1.0 / sigma_a > c_op * (1.0 + 1e-12) {
        return Err(Error::InvalidInput(format!(
            "precondition ‖A⁻¹‖_op ≤ c_op violated: {} > {}",
            1.0 / sigma_a,
            c_op
        )));
    }
    let diff_l1: f64 = (a - b).iter().map(|v| v.abs()).sum();
    if diff_l1 > 0.5 / c_op {
        // premise false; the implication holds vacuously
        return Ok(true);
    }
    let sigma_b = smallest_singular_value(b);
    Ok(sigma_b > 0.0 && 1.0 / sigma_b <= 2.0 * c_op * (1.0 + 1e-12))
}
