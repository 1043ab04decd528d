//! Weighted estimating equations and their aggregate quantities.
//!
//! An estimating equation supplies per-datum functions `g_n(θ) ∈ R^D` and
//! their parameter Jacobians `h_n(θ) ∈ R^{D×D}`. The weighted averages
//! `G(θ,w) = (1/N) Σ w_n g_n(θ)` and `H(θ,w) = (1/N) Σ w_n h_n(θ)` define the
//! root-finding problem `G(θ̂(w), w) = 0` that everything else in this crate
//! manipulates.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Chunk size for the fixed-chunk parallel reductions over `n`. Partial sums
/// are accumulated per chunk and then combined in chunk order, so the
/// summation tree is identical at every thread count.
const REDUCE_CHUNK: usize = 256;

/// A point in parameter space, a real vector of length `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter(DVector<f64>);

impl Parameter {
    /// Construct from a vector, rejecting NaN/Inf entries.
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "parameter entry {i} is not finite"
            )));
        }
        Ok(Parameter(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Parameter(DVector::zeros(dim))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

/// Per-datum weights of length `N`.
///
/// Leave-`k`-out weights differ from the all-ones vector in only `k` places,
/// so a sparse map with implicit default 1.0 is supported alongside the dense
/// form. The two representations agree entrywise and convert freely.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    n: usize,
    repr: Repr,
}

#[derive(Debug, Clone, PartialEq)]
enum Repr {
    Dense(DVector<f64>),
    /// Entries not present default to 1.0.
    Sparse(BTreeMap<usize, f64>),
}

impl WeightVector {
    /// The all-ones weight vector `1_w`.
    pub fn ones(n: usize) -> Self {
        WeightVector {
            n,
            repr: Repr::Sparse(BTreeMap::new()),
        }
    }

    pub fn dense(values: DVector<f64>) -> Self {
        WeightVector {
            n: values.len(),
            repr: Repr::Dense(values),
        }
    }

    /// Sparse representation: indices absent from `entries` weigh 1.0.
    pub fn sparse(n: usize, entries: BTreeMap<usize, f64>) -> Result<Self> {
        if let Some(&i) = entries.keys().find(|&&i| i >= n) {
            return Err(Error::InvalidInput(format!(
                "sparse weight index {i} out of range for n = {n}"
            )));
        }
        Ok(WeightVector {
            n,
            repr: Repr::Sparse(entries),
        })
    }

    /// Weight vector that zeroes out the given indices and is 1 elsewhere.
    pub fn leave_out(n: usize, indices: &[usize]) -> Result<Self> {
        Self::sparse(n, indices.iter().map(|&i| (i, 0.0)).collect())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        debug_assert!(i < self.n);
        match &self.repr {
            Repr::Dense(v) => v[i],
            Repr::Sparse(m) => m.get(&i).copied().unwrap_or(1.0),
        }
    }

    pub fn to_dense(&self) -> DVector<f64> {
        match &self.repr {
            Repr::Dense(v) => v.clone(),
            Repr::Sparse(m) => {
                let mut v = DVector::from_element(self.n, 1.0);
                for (&i, &w) in m {
                    v[i] = w;
                }
                v
            }
        }
    }

    /// Entries of `Δw = w − 1_w` that are nonzero, in index order.
    pub fn delta(&self) -> Vec<(usize, f64)> {
        match &self.repr {
            Repr::Dense(v) => v
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 1.0)
                .map(|(i, &w)| (i, w - 1.0))
                .collect(),
            Repr::Sparse(m) => m
                .iter()
                .filter(|(_, &w)| w != 1.0)
                .map(|(&i, &w)| (i, w - 1.0))
                .collect(),
        }
    }

    /// Number of entries that differ from 1.
    pub fn support_size(&self) -> usize {
        self.delta().len()
    }

    pub fn sum(&self) -> f64 {
        match &self.repr {
            Repr::Dense(v) => v.sum(),
            Repr::Sparse(m) => {
                self.n as f64 + m.values().map(|w| w - 1.0).sum::<f64>()
            }
        }
    }

    /// `‖w‖₂`.
    pub fn l2_norm(&self) -> f64 {
        match &self.repr {
            Repr::Dense(v) => v.norm(),
            Repr::Sparse(m) => {
                let ones = (self.n - m.len()) as f64;
                (ones + m.values().map(|w| w * w).sum::<f64>()).sqrt()
            }
        }
    }

    /// `‖Δw‖₂ = ‖w − 1_w‖₂`.
    pub fn delta_l2_norm(&self) -> f64 {
        self.delta()
            .iter()
            .map(|(_, d)| d * d)
            .sum::<f64>()
            .sqrt()
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if self.n != n {
            return Err(Error::DimensionMismatch(format!(
                "weight vector has length {}, equation has {} data points",
                self.n, n
            )));
        }
        Ok(())
    }
}

/// An abstract weighted estimating-equation problem over `N` data points and
/// a `D`-dimensional parameter.
///
/// Implementations must be pure: repeated calls with identical arguments
/// return identical values, and evaluation is safe from many threads.
pub trait EstimatingEquation: Sync {
    fn n_points(&self) -> usize;
    fn dim(&self) -> usize;

    /// Per-datum estimating function `g_n(θ) ∈ R^D`.
    fn eval_g(&self, index: usize, theta: &Parameter) -> DVector<f64>;

    /// Per-datum Jacobian `h_n(θ) = ∂g_n/∂θᵀ ∈ R^{D×D}`.
    fn eval_h(&self, index: usize, theta: &Parameter) -> DMatrix<f64>;
}

impl<E: EstimatingEquation + ?Sized> EstimatingEquation for &E {
    fn n_points(&self) -> usize {
        (**self).n_points()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval_g(&self, index: usize, theta: &Parameter) -> DVector<f64> {
        (**self).eval_g(index, theta)
    }
    fn eval_h(&self, index: usize, theta: &Parameter) -> DMatrix<f64> {
        (**self).eval_h(index, theta)
    }
}

/// Outcome of solving `G(θ, w) = 0`.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: Parameter,
    /// `‖G(θ, w)‖₂` at the returned point.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn check_dims(eq: &dyn EstimatingEquation, theta: &Parameter) -> Result<()> {
    if theta.dim() != eq.dim() {
        return Err(Error::DimensionMismatch(format!(
            "parameter has length {}, equation dimension is {}",
            theta.dim(),
            eq.dim()
        )));
    }
    Ok(())
}

/// `G(θ, w) = (1/N) Σ_n w_n g_n(θ)`.
pub fn eval_g_weighted<E: EstimatingEquation>(
    eq: &E,
    theta: &Parameter,
    w: &WeightVector,
) -> Result<DVector<f64>> {
    check_dims(eq, theta)?;
    w.check_len(eq.n_points())?;
    let n = eq.n_points();
    let d = eq.dim();
    let chunk_sums: Vec<Result<DVector<f64>>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut acc = DVector::zeros(d);
            for &i in chunk {
                let wi = w.get(i);
                if wi == 0.0 {
                    continue;
                }
                let gi = eq.eval_g(i, theta);
                if gi.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteEvaluation { what: "g", index: i });
                }
                acc.axpy(wi, &gi, 1.0);
            }
            Ok(acc)
        })
        .collect();
    let mut total = DVector::zeros(d);
    for s in chunk_sums {
        total += s?;
    }
    Ok(total / n as f64)
}

/// `H(θ, w) = (1/N) Σ_n w_n h_n(θ)`.
pub fn eval_h_weighted<E: EstimatingEquation>(
    eq: &E,
    theta: &Parameter,
    w: &WeightVector,
) -> Result<DMatrix<f64>> {
    check_dims(eq, theta)?;
    w.check_len(eq.n_points())?;
    let n = eq.n_points();
    let d = eq.dim();
    let chunk_sums: Vec<Result<DMatrix<f64>>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut acc = DMatrix::zeros(d, d);
            for &i in chunk {
                let wi = w.get(i);
                if wi == 0.0 {
                    continue;
                }
                let hi = eq.eval_h(i, theta);
                if hi.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteEvaluation { what: "h", index: i });
                }
                acc += hi * wi;
            }
            Ok(acc)
        })
        .collect();
    let mut total = DMatrix::zeros(d, d);
    for s in chunk_sums {
        total += s?;
    }
    Ok(total / n as f64)
}

/// Checks that each `h_n` is the Jacobian of `g_n` by central differences.
///
/// Returns the maximum over data points and matrix entries of
/// `|fd − h| / (1 + |h|)`.
pub fn finite_diff_check<E: EstimatingEquation>(
    eq: &E,
    theta: &Parameter,
    step: f64,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::InvalidInput("step must be positive".into()));
    }
    check_dims(eq, theta)?;
    let d = eq.dim();
    let mut worst = 0.0f64;
    for n in 0..eq.n_points() {
        let h = eq.eval_h(n, theta);
        for j in 0..d {
            let mut up = theta.values().clone();
            let mut dn = theta.values().clone();
            up[j] += step;
            dn[j] -= step;
            let g_up = eq.eval_g(n, &Parameter::new(up)?);
            let g_dn = eq.eval_g(n, &Parameter::new(dn)?);
            let col = (g_up - g_dn) / (2.0 * step);
            for i in 0..d {
                let err = (col[i] - h[(i, j)]).abs() / (1.0 + h[(i, j)].abs());
                worst = worst.max(err);
            }
        }
    }
    Ok(worst)
}

/// How the first-stage parameter enters the second stage.
///
/// The second stage sees the first-stage parameter only through
/// `value(θ₁) ∈ R^C`; `jacobian` is `∂value/∂θ₁ᵀ ∈ R^{C×D₁}` and supplies the
/// cross-block of the stacked Jacobian.
pub trait CouplingMap: Sync {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    fn value(&self, theta1: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, theta1: &DVector<f64>) -> DMatrix<f64>;
}

/// A second estimation stage whose data depend on a coupling value computed
/// from the first-stage parameter.
pub trait CoupledStage: Sync {
    fn n_points(&self) -> usize;
    fn dim(&self) -> usize;
    fn coupling_dim(&self) -> usize;
    fn eval_g(&self, index: usize, theta2: &DVector<f64>, coupling: &DVector<f64>) -> DVector<f64>;
    /// `∂g/∂θ₂ᵀ`, a `D₂×D₂` block.
    fn eval_h_theta(
        &self,
        index: usize,
        theta2: &DVector<f64>,
        coupling: &DVector<f64>,
    ) -> DMatrix<f64>;
    /// `∂g/∂cᵀ`, a `D₂×C` block.
    fn eval_h_coupling(
        &self,
        index: usize,
        theta2: &DVector<f64>,
        coupling: &DVector<f64>,
    ) -> DMatrix<f64>;
}

/// Two estimation stages stacked into a single estimating equation over the
/// concatenated parameter `(θ₁, θ₂)`.
///
/// The combined per-datum Jacobian is the full block matrix
/// `[[h₁ₙ, 0], [∂g₂ₙ/∂c · ∂c/∂θ₁, h₂ₙ]]`, so a sequential two-stage fit is a
/// root of the stacked equation.
pub struct StackedEquation<F, S, C> {
    first: F,
    second: S,
    coupling: C,
}

/// Stack a first-stage equation with a coupled second stage.
pub fn stack_equations<F, S, C>(first: F, second: S, coupling: C) -> Result<StackedEquation<F, S, C>>
where
    F: EstimatingEquation,
    S: CoupledStage,
    C: CouplingMap,
{
    if first.n_points() != second.n_points() {
        return Err(Error::DimensionMismatch(format!(
            "stages cover different data: {} vs {} points",
            first.n_points(),
            second.n_points()
        )));
    }
    if coupling.dim_in() != first.dim() {
        return Err(Error::DimensionMismatch(format!(
            "coupling expects first-stage dimension {}, got {}",
            coupling.dim_in(),
            first.dim()
        )));
    }
    if coupling.dim_out() != second.coupling_dim() {
        return Err(Error::DimensionMismatch(format!(
            "coupling produces dimension {}, second stage expects {}",
            coupling.dim_out(),
            second.coupling_dim()
        )));
    }
    Ok(StackedEquation {
        first,
        second,
        coupling,
    })
}

impl<F, S, C> StackedEquation<F, S, C>
where
    F: EstimatingEquation,
    S: CoupledStage,
    C: CouplingMap,
{
    pub fn first_dim(&self) -> usize {
        self.first.dim()
    }

    pub fn second_dim(&self) -> usize {
        self.second.dim()
    }

    fn split<'a>(&self, theta: &'a Parameter) -> (DVector<f64>, DVector<f64>, &'a DVector<f64>) {
        let v = theta.values();
        let d1 = self.first.dim();
        let theta1 = DVector::from_iterator(d1, v.iter().take(d1).copied());
        let theta2 = DVector::from_iterator(
            self.second.dim(),
            v.iter().skip(d1).copied(),
        );
        (theta1, theta2, v)
    }
}

impl<F, S, C> EstimatingEquation for StackedEquation<F, S, C>
where
    F: EstimatingEquation,
    S: CoupledStage,
    C: CouplingMap,
{
    fn n_points(&self) -> usize {
        self.first.n_points()
    }

    fn dim(&self) -> usize {
        self.first.dim() + self.second.dim()
    }

    fn eval_g(&self, index: usize, theta: &Parameter) -> DVector<f64> {
        let (theta1, theta2, _) = self.split(theta);
        let p1 = Parameter(theta1.clone());
        let g1 = self.first.eval_g(index, &p1);
        let c = self.coupling.value(&theta1);
        let g2 = self.second.eval_g(index, &theta2, &c);
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, g1.len()).copy_from(&g1);
        out.rows_mut(g1.len(), g2.len()).copy_from(&g2);
        out
    }

    fn eval_h(&self, index: usize, theta: &Parameter) -> DMatrix<f64> {
        let (theta1, theta2, _) = self.split(theta);
        let d1 = self.first.dim();
        let d2 = self.second.dim();
        let p1 = Parameter(theta1.clone());
        let h1 = self.first.eval_h(index, &p1);
        let c = self.coupling.value(&theta1);
        let jc = self.coupling.jacobian(&theta1);
        let h2 = self.second.eval_h_theta(index, &theta2, &c);
        let h2c = self.second.eval_h_coupling(index, &theta2, &c);
        let cross = &h2c * &jc;
        let mut out = DMatrix::zeros(d1 + d2, d1 + d2);
        out.view_mut((0, 0), (d1, d1)).copy_from(&h1);
        out.view_mut((d1, 0), (d2, d1)).copy_from(&cross);
        out.view_mut((d1, d1), (d2, d2)).copy_from(&h2);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Dataset, GlmKind, GlmModel};
    use approx::assert_abs_diff_eq;

    fn mean_model(xs: &[f64]) -> GlmModel {
        GlmModel::mean(xs.to_vec()).unwrap()
    }

    #[test]
    fn eval_g_mean_model_at_mean_is_zero() {
        let eq = mean_model(&[1.0, 2.0, 3.0, 6.0]);
        let theta = Parameter::from_slice(&[3.0]).unwrap();
        let g = eval_g_weighted(&eq, &theta, &WeightVector::ones(4)).unwrap();
        assert_abs_diff_eq!(g[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn eval_g_mean_model_at_zero_is_minus_mean() {
        let eq = mean_model(&[1.0, 2.0, 3.0, 6.0]);
        let theta = Parameter::from_slice(&[0.0]).unwrap();
        let g = eval_g_weighted(&eq, &theta, &WeightVector::ones(4)).unwrap();
        assert_abs_diff_eq!(g[0], -3.0, epsilon = 1e-15);
    }

    #[test]
    fn eval_g_zero_weights_is_zero() {
        let eq = mean_model(&[1.0, 2.0, 3.0, 6.0]);
        let theta = Parameter::from_slice(&[123.0]).unwrap();
        let w = WeightVector::dense(DVector::zeros(4));
        let g = eval_g_weighted(&eq, &theta, &w).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn eval_h_mean_model_is_one() {
        let eq = mean_model(&[1.0, 2.0, 3.0, 6.0]);
        let theta = Parameter::from_slice(&[0.5]).unwrap();
        let h = eval_h_weighted(&eq, &theta, &WeightVector::ones(4)).unwrap();
        assert_eq!(h[(0, 0)], 1.0);
    }

    #[test]
    fn eval_h_mean_model_with_one_zero_weight() {
        let eq = mean_model(&[1.0, 2.0, 3.0, 6.0]);
        let theta = Parameter::from_slice(&[0.5]).unwrap();
        let w = WeightVector::leave_out(4, &[2]).unwrap();
        let h = eval_h_weighted(&eq, &theta, &w).unwrap();
        assert_abs_diff_eq!(h[(0, 0)], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn eval_h_linear_regression_is_normalized_gram() {
        let x = vec![vec![1.0, 2.0], vec![0.5, -1.0], vec![2.0, 0.0]];
        let y = vec![1.0, 2.0, 3.0];
        let ds = Dataset::new(x.clone(), y, false).unwrap();
        let eq = GlmModel::new(GlmKind::Linear, ds).unwrap();
        let theta = Parameter::from_slice(&[0.3, -0.7]).unwrap();
        let h = eval_h_weighted(&eq, &theta, &WeightVector::ones(3)).unwrap();
        // (1/N) XᵀX by direct product
        for i in 0..2 {
            for j in 0..2 {
                let expect: f64 =
                    x.iter().map(|row| row[i] * row[j]).sum::<f64>() / 3.0;
                assert_abs_diff_eq!(h[(i, j)], expect, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let eq = mean_model(&[1.0, 2.0]);
        let theta = Parameter::from_slice(&[0.0, 0.0]).unwrap();
        let err = eval_g_weighted(&eq, &theta, &WeightVector::ones(2)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
        let theta = Parameter::from_slice(&[0.0]).unwrap();
        let err = eval_g_weighted(&eq, &theta, &WeightVector::ones(5)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn non_finite_evaluation_names_the_datum() {
        struct Bad;
        impl EstimatingEquation for Bad {
            fn n_points(&self) -> usize {
                3
            }
            fn dim(&self) -> usize {
                1
            }
            fn eval_g(&self, index: usize, _theta: &Parameter) -> DVector<f64> {
                if index == 1 {
                    DVector::from_element(1, f64::NAN)
                } else {
                    DVector::zeros(1)
                }
            }
            fn eval_h(&self, _index: usize, _theta: &Parameter) -> DMatrix<f64> {
                DMatrix::identity(1, 1)
            }
        }
        let err =
            eval_g_weighted(&Bad, &Parameter::zeros(1), &WeightVector::ones(3)).unwrap_err();
        match err {
            Error::NonFiniteEvaluation { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn finite_diff_check_constant_hessian() {
        let eq = mean_model(&[1.0, 2.0, 3.0]);
        let theta = Parameter::from_slice(&[0.7]).unwrap();
        let err = finite_diff_check(&eq, &theta, 1e-5).unwrap();
        assert!(err <= 1e-10, "err = {err}");
    }

    #[test]
    fn sparse_and_dense_weights_agree() {
        let mut m = BTreeMap::new();
        m.insert(1usize, 0.0);
        m.insert(3usize, 2.5);
        let sparse = WeightVector::sparse(5, m).unwrap();
        let dense = WeightVector::dense(sparse.to_dense());
        for i in 0..5 {
            assert_eq!(sparse.get(i), dense.get(i));
        }
        assert_abs_diff_eq!(sparse.l2_norm(), dense.l2_norm(), epsilon = 1e-15);
        assert_eq!(sparse.delta(), dense.delta());
        assert_abs_diff_eq!(sparse.sum(), dense.sum(), epsilon = 1e-15);
    }

    #[test]
    fn sparse_index_out_of_range_rejected() {
        let mut m = BTreeMap::new();
        m.insert(7usize, 0.0);
        assert!(WeightVector::sparse(5, m).is_err());
    }
}
