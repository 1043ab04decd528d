//! Shared fixtures for the criterion benchmarks.

use ijack_core::{
    generate_synthetic, solve, FitResult, GlmKind, GlmModel, Parameter, SolverOptions,
    SyntheticSpec, WeightVector,
};

/// Logistic problem of the given size, solved at unit weights.
pub fn fitted_logistic(n: usize, p: usize, seed: u64) -> (GlmModel, FitResult) {
    use ijack_core::EstimatingEquation;
    let spec = SyntheticSpec::desk(GlmKind::Logistic, n, p, seed);
    let eq = GlmModel::new(GlmKind::Logistic, generate_synthetic(&spec).unwrap()).unwrap();
    let base = solve(
        &eq,
        &WeightVector::ones(n),
        &Parameter::zeros(eq.dim()),
        &SolverOptions::default(),
    )
    .unwrap();
    assert!(base.converged);
    (eq, base)
}
