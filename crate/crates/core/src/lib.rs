//! Weighted M-estimation with a linear-response (infinitesimal jackknife)
//! approximation to re-weighted refits, plus a finite-sample certificate for
//! its error.
//!
//! The workflow: build an [`EstimatingEquation`] (the GLM family in
//! [`models`], or your own), solve it once at the base weights with
//! [`solver::solve`], build the reusable Hessian handle with
//! [`ij::build_handle`], and then approximate whole weight families (cross
//! validation folds, bootstrap draws) at a back-solve apiece with
//! [`ij::ij_predict`]. [`bounds::certify`] reports whether the approximation
//! provably stays within a computed error bound for that family.

pub mod bounds;
pub mod error;
pub mod estimating;
pub mod ij;
pub mod models;
pub mod solver;
pub mod weights;

pub use bounds::{
    certify, check_holder, check_opnorm_continuity, compute_delta, convergence_rate_check,
    estimate_constants, CertificateMeta, ConstantEstimates, DomainSpec, IJCertificate,
};
pub use error::{Error, Result};
pub use estimating::{
    eval_g_weighted, eval_h_weighted, finite_diff_check, stack_equations, CoupledStage,
    CouplingMap, EstimatingEquation, FitResult, Parameter, StackedEquation, WeightVector,
};
pub use ij::{
    build_handle, dtheta_dw_action, ij_batch, ij_predict, integrated_hessian, GradientCache,
    HandleMode, HessianHandle,
};
pub use models::{
    generate_synthetic, Dataset, GlmKind, GlmModel, SyntheticSpec,
};
pub use solver::{solve, warm_start_batch, SolverOptions};
pub use weights::{adversarial, bootstrap, leave_k_out, FamilyKind, WeightFamily};
