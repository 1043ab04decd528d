//! Experiment orchestration: fits, IJ-vs-exact cross validation, timing runs,
//! and certificates, assembled into [`ExperimentReport`]s.

use std::time::Instant;

use anyhow::{bail, Context, Result};

use ijack_core::{
    build_handle, certify, ij_batch, solve, warm_start_batch, Dataset, DomainSpec, FamilyKind,
    FitResult, GlmKind, GlmModel, GradientCache, HandleMode, HessianHandle, Parameter,
    SyntheticSpec, WeightFamily, WeightVector,
};

use crate::config::{DataSource, ExperimentConfig, FamilyConfig};
use crate::report::{Aggregates, ExperimentReport, FitSummary, Timings, WeightRecord};

/// Which sides of the comparison to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvMode {
    IjOnly,
    ExactOnly,
    Both,
}

impl CvMode {
    fn wants_ij(self) -> bool {
        self != CvMode::ExactOnly
    }
    fn wants_exact(self) -> bool {
        self != CvMode::IjOnly
    }
}

/// Environment variable consulted when the configured thread count is 0.
pub const THREADS_ENV: &str = "IJACK_THREADS";

/// Install the global worker pool. A count of 0 defers to `IJACK_THREADS`,
/// then to the library default. Safe to call more than once; later calls with
/// a different count have no effect.
pub fn configure_threads(threads: usize) -> Result<()> {
    let count = if threads > 0 {
        threads
    } else {
        match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .parse::<usize>()
                .with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?,
            Err(_) => return Ok(()),
        }
    };
    if count == 0 {
        return Ok(());
    }
    // an already-installed pool is fine (tests, repeated calls)
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(count)
        .build_global();
    Ok(())
}

fn synthetic_spec(model: GlmKind, n: usize, p: usize, seed: u64) -> SyntheticSpec {
    let p = if model == GlmKind::Mean { 0 } else { p };
    SyntheticSpec::desk(model, n, p, seed)
}

/// Training data for one replication. Synthetic draws shift the seed per
/// replication; CSV data is fixed, so CSV experiments only support one rep.
pub fn load_training(cfg: &ExperimentConfig, rep: usize) -> Result<GlmModel> {
    let dataset = match &cfg.data {
        DataSource::Csv { path, bias } => {
            if rep > 0 {
                bail!("CSV data source supports only reps = 1");
            }
            let f = std::fs::File::open(path)
                .with_context(|| format!("opening data file {path}"))?;
            Dataset::read_csv(f, *bias)?
        }
        DataSource::Synthetic { n, p } => ijack_core::generate_synthetic(&synthetic_spec(
            cfg.model,
            *n,
            *p,
            cfg.seed.wrapping_add(rep as u64),
        ))?,
    };
    Ok(GlmModel::new(cfg.model, dataset)?)
}

fn load_test_split(cfg: &ExperimentConfig, rep: usize) -> Result<Option<GlmModel>> {
    if cfg.test_n == 0 {
        return Ok(None);
    }
    let DataSource::Synthetic { p, .. } = &cfg.data else {
        bail!("a test split requires a synthetic data source");
    };
    let spec = synthetic_spec(
        cfg.model,
        cfg.test_n,
        *p,
        cfg.seed.wrapping_add(1_000_000 + rep as u64),
    );
    let ds = ijack_core::generate_synthetic(&spec)?;
    Ok(Some(GlmModel::new(cfg.model, ds)?))
}

fn family_kind(cfg: &ExperimentConfig) -> FamilyKind {
    match &cfg.family {
        FamilyConfig::LeaveKOut { k, limit } => FamilyKind::LeaveKOut {
            k: *k,
            limit: *limit,
        },
        FamilyConfig::Bootstrap { b } => FamilyKind::Bootstrap { b: *b },
        FamilyConfig::Adversarial => FamilyKind::Adversarial,
    }
}

fn generate_family(
    cfg: &ExperimentConfig,
    n: usize,
    cache: Option<&GradientCache>,
) -> Result<Vec<WeightVector>> {
    let family = WeightFamily {
        kind: family_kind(cfg),
        n,
        seed: cfg.seed,
    };
    Ok(family.generate(cache)?)
}

fn weight_id(cfg: &ExperimentConfig, index: usize, w: &WeightVector) -> String {
    match &cfg.family {
        FamilyConfig::LeaveKOut { .. } => {
            let idx: Vec<String> = w
                .delta()
                .iter()
                .map(|(i, _)| i.to_string())
                .collect();
            format!("loo:{}", idx.join("+"))
        }
        FamilyConfig::Bootstrap { .. } => format!("boot:{index}"),
        FamilyConfig::Adversarial => {
            let dense = w.to_dense();
            let target = (0..dense.len()).max_by(|&a, &b| dense[a].total_cmp(&dense[b]));
            format!("adv:{}", target.unwrap_or(0))
        }
    }
}

/// Indices a leave-k-out vector holds out (weight exactly 0).
fn held_out_indices(w: &WeightVector) -> Vec<usize> {
    w.delta()
        .into_iter()
        .filter(|&(i, d)| w.get(i) == 0.0 && d == -1.0)
        .map(|(i, _)| i)
        .collect()
}

fn fit_summary(fit: &FitResult) -> FitSummary {
    FitSummary {
        theta: fit.theta.values().iter().copied().collect(),
        grad_norm: fit.grad_norm,
        iterations: fit.iterations,
        converged: fit.converged,
    }
}

fn train_loss(eq: &GlmModel, theta: &Parameter) -> Result<f64> {
    let all: Vec<usize> = (0..eq_n(eq)).collect();
    Ok(eq.held_out_loss(theta, &all)?)
}

fn eq_n(eq: &GlmModel) -> usize {
    use ijack_core::EstimatingEquation;
    eq.n_points()
}

fn eq_dim(eq: &GlmModel) -> usize {
    use ijack_core::EstimatingEquation;
    eq.dim()
}

fn mean_of(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

struct RepOutcome {
    base: FitResult,
    records: Vec<WeightRecord>,
    aggregates: Aggregates,
    max_gap: Option<f64>,
}

fn run_replication(cfg: &ExperimentConfig, rep: usize, mode: CvMode) -> Result<RepOutcome> {
    let eq = load_training(cfg, rep)?;
    let n = eq_n(&eq);
    let opts = cfg.solver_options();
    let base = solve(&eq, &WeightVector::ones(n), &Parameter::zeros(eq_dim(&eq)), &opts)?;
    if !base.converged {
        bail!(
            "base fit did not converge in replication {rep} (‖G‖ = {:.3e} after {} iterations)",
            base.grad_norm,
            base.iterations
        );
    }

    let needs_handle = mode.wants_ij() || matches!(cfg.family, FamilyConfig::Adversarial);
    let handle_cache: Option<(HessianHandle, GradientCache)> = if needs_handle {
        Some(build_handle(&eq, &base, HandleMode::Dense)?)
    } else {
        None
    };
    let weights = generate_family(cfg, n, handle_cache.as_ref().map(|(_, c)| c))?;

    let ij_thetas: Option<Vec<Parameter>> = if mode.wants_ij() {
        let (handle, cache) = handle_cache.as_ref().unwrap();
        Some(
            ij_batch(handle, cache, &weights)
                .into_iter()
                .collect::<ijack_core::Result<_>>()?,
        )
    } else {
        None
    };
    let exact_fits: Option<Vec<ijack_core::Result<FitResult>>> = if mode.wants_exact() {
        Some(warm_start_batch(&eq, &weights, &base, &opts)?)
    } else {
        None
    };

    let is_cv = matches!(cfg.family, FamilyConfig::LeaveKOut { .. });
    let mut records = Vec::with_capacity(weights.len());
    let mut ij_losses = Vec::new();
    let mut exact_losses = Vec::new();
    let mut max_gap: Option<f64> = None;
    for (i, w) in weights.iter().enumerate() {
        let mut rec = WeightRecord {
            weight_id: weight_id(cfg, i, w),
            theta_ij: None,
            theta_exact: None,
            gap_l2: None,
            loss_ij: None,
            loss_exact: None,
            refit_converged: None,
        };
        let held = is_cv.then(|| held_out_indices(w));
        if let Some(thetas) = &ij_thetas {
            let t = &thetas[i];
            rec.theta_ij = Some(t.values().iter().copied().collect());
            if let Some(held) = held.as_deref() {
                let loss = eq.held_out_loss(t, held)?;
                rec.loss_ij = Some(loss);
                ij_losses.push(loss);
            }
        }
        if let Some(fits) = &exact_fits {
            match &fits[i] {
                Ok(fit) => {
                    rec.theta_exact = Some(fit.theta.values().iter().copied().collect());
                    rec.refit_converged = Some(fit.converged);
                    if fit.converged {
                        if let Some(held) = held.as_deref() {
                            let loss = eq.held_out_loss(&fit.theta, held)?;
                            rec.loss_exact = Some(loss);
                            exact_losses.push(loss);
                        }
                        if let Some(thetas) = &ij_thetas {
                            let gap = (thetas[i].values() - fit.theta.values()).norm();
                            rec.gap_l2 = Some(gap);
                            max_gap = Some(max_gap.map_or(gap, |m: f64| m.max(gap)));
                        }
                    }
                }
                Err(e) => {
                    // recorded per fold, does not abort the experiment
                    rec.refit_converged = Some(false);
                    let _ = e;
                }
            }
        }
        records.push(rec);
    }

    let test_loss = match load_test_split(cfg, rep)? {
        Some(test_eq) => Some(train_loss(&test_eq, &base.theta)?),
        None => None,
    };
    let aggregates = Aggregates {
        train_loss: Some(train_loss(&eq, &base.theta)?),
        cv_ij: mean_of(&ij_losses),
        cv_exact: mean_of(&exact_losses),
        test_loss,
    };

    Ok(RepOutcome {
        base,
        records,
        aggregates,
        max_gap,
    })
}

fn mean_opt(values: Vec<Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.into_iter().flatten().collect();
    mean_of(&present)
}

fn data_shape(eq: &GlmModel) -> (usize, usize) {
    (eq_n(eq), eq.dataset().n_features())
}

/// Accuracy-style experiment: IJ and/or exact results for the configured
/// weight family, replicated `cfg.reps` times over fresh synthetic draws.
pub fn run_accuracy_experiment(
    cfg: &ExperimentConfig,
    mode: CvMode,
    with_certificate: bool,
) -> Result<ExperimentReport> {
    if cfg.reps == 0 {
        bail!("reps must be at least 1");
    }
    let mut replications = Vec::with_capacity(cfg.reps);
    let mut first: Option<RepOutcome> = None;
    let mut max_gap: Option<f64> = None;
    for rep in 0..cfg.reps {
        let outcome = run_replication(cfg, rep, mode)?;
        replications.push(outcome.aggregates.clone());
        if let Some(g) = outcome.max_gap {
            max_gap = Some(max_gap.map_or(g, |m: f64| m.max(g)));
        }
        if rep == 0 {
            first = Some(outcome);
        }
    }
    let first = first.expect("at least one replication");

    let certificate = if with_certificate {
        let eq = load_training(cfg, 0)?;
        Some(build_certificate(cfg, &eq, &first.base)?)
    } else {
        None
    };

    let eq0 = load_training(cfg, 0)?;
    let (n, p) = data_shape(&eq0);
    let aggregate = Aggregates {
        train_loss: mean_opt(replications.iter().map(|a| a.train_loss).collect()),
        cv_ij: mean_opt(replications.iter().map(|a| a.cv_ij).collect()),
        cv_exact: mean_opt(replications.iter().map(|a| a.cv_exact).collect()),
        test_loss: mean_opt(replications.iter().map(|a| a.test_loss).collect()),
    };
    Ok(ExperimentReport {
        model: cfg.model.to_string(),
        n,
        p,
        seed: cfg.seed,
        reps: cfg.reps,
        base: fit_summary(&first.base),
        records: first.records,
        aggregate,
        replications,
        timings: None,
        certificate,
        max_gap_l2: max_gap,
    })
}

/// Assemble the error certificate for the configured family and domain.
pub fn build_certificate(
    cfg: &ExperimentConfig,
    eq: &GlmModel,
    base: &FitResult,
) -> Result<ijack_core::IJCertificate> {
    let (handle, cache) = build_handle(eq, base, HandleMode::Dense)?;
    let weights = generate_family(cfg, eq_n(eq), Some(&cache))?;
    let domain = if cfg.domain_radius > 0.0 {
        DomainSpec::new(&base.theta, cfg.domain_radius, cfg.domain_samples, cfg.seed)?
    } else {
        DomainSpec::auto(&handle, &cache, &weights, cfg.domain_samples, cfg.seed)?
    };
    Ok(certify(eq, base, &domain, &weights)?)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Timing experiment: median wall-clock spans of the IJ path (handle build +
/// batch prediction) against exact warm-started refits over the same weights.
pub fn run_timing_experiment(cfg: &ExperimentConfig, bench_reps: usize) -> Result<ExperimentReport> {
    if bench_reps == 0 {
        bail!("bench repetitions must be at least 1");
    }
    let eq = load_training(cfg, 0)?;
    let n = eq_n(&eq);
    let opts = cfg.solver_options();

    let mut base_fit_t = Vec::with_capacity(bench_reps);
    let mut handle_t = Vec::with_capacity(bench_reps);
    let mut ij_t = Vec::with_capacity(bench_reps);
    let mut exact_t = Vec::with_capacity(bench_reps);
    let mut last: Option<(FitResult, Vec<WeightRecord>)> = None;

    for _ in 0..bench_reps {
        let t0 = Instant::now();
        let base = solve(&eq, &WeightVector::ones(n), &Parameter::zeros(eq_dim(&eq)), &opts)?;
        base_fit_t.push(t0.elapsed().as_secs_f64());
        if !base.converged {
            bail!("base fit did not converge");
        }

        let t1 = Instant::now();
        let (handle, cache) = build_handle(&eq, &base, HandleMode::Dense)?;
        handle_t.push(t1.elapsed().as_secs_f64());

        let weights = generate_family(cfg, n, Some(&cache))?;

        let t2 = Instant::now();
        let ij: Vec<Parameter> = ij_batch(&handle, &cache, &weights)
            .into_iter()
            .collect::<ijack_core::Result<_>>()?;
        ij_t.push(t2.elapsed().as_secs_f64());

        let t3 = Instant::now();
        let exact = warm_start_batch(&eq, &weights, &base, &opts)?;
        exact_t.push(t3.elapsed().as_secs_f64());

        let records: Vec<WeightRecord> = weights
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let gap = exact[i].as_ref().ok().map(|fit| {
                    (ij[i].values() - fit.theta.values()).norm()
                });
                WeightRecord {
                    weight_id: weight_id(cfg, i, w),
                    theta_ij: None,
                    theta_exact: None,
                    gap_l2: gap,
                    loss_ij: None,
                    loss_exact: None,
                    refit_converged: exact[i].as_ref().ok().map(|f| f.converged),
                }
            })
            .collect();
        last = Some((base, records));
    }

    let (base, records) = last.expect("at least one bench repetition");
    let handle_build_s = median(handle_t);
    let ij_batch_s = median(ij_t);
    let exact_batch_s = median(exact_t);
    let ij_total_s = handle_build_s + ij_batch_s;
    let timings = Timings {
        base_fit_s: median(base_fit_t),
        handle_build_s,
        ij_batch_s,
        exact_batch_s,
        ij_total_s,
        exact_total_s: exact_batch_s,
        speedup: exact_batch_s / ij_total_s.max(1e-12),
    };

    let max_gap = records
        .iter()
        .filter_map(|r| r.gap_l2)
        .fold(None, |m: Option<f64>, g| Some(m.map_or(g, |v| v.max(g))));
    let (n, p) = data_shape(&eq);
    Ok(ExperimentReport {
        model: cfg.model.to_string(),
        n,
        p,
        seed: cfg.seed,
        reps: bench_reps,
        base: fit_summary(&base),
        records,
        aggregate: Aggregates {
            train_loss: None,
            cv_ij: None,
            cv_exact: None,
            test_loss: None,
        },
        replications: vec![],
        timings: Some(timings),
        certificate: None,
        max_gap_l2: max_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataSource;
    use approx::assert_abs_diff_eq;
    use std::io::Write;

    fn mean_csv_config(dir: &std::path::Path) -> ExperimentConfig {
        let path = dir.join("mean.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        write!(f, "y\n1.0\n2.0\n3.0\n6.0\n").unwrap();
        ExperimentConfig {
            model: GlmKind::Mean,
            data: DataSource::Csv {
                path: path.to_string_lossy().into_owned(),
                bias: false,
            },
            family: FamilyConfig::LeaveKOut { k: 1, limit: None },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn mean_loo_report_contains_the_known_gap() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = mean_csv_config(dir.path());
        let report = run_accuracy_experiment(&cfg, CvMode::Both, false).unwrap();
        assert_eq!(report.records.len(), 4);
        let rec = report
            .records
            .iter()
            .find(|r| r.weight_id == "loo:3")
            .unwrap();
        assert_abs_diff_eq!(rec.gap_l2.unwrap(), 0.25, epsilon = 1e-10);
        assert_abs_diff_eq!(rec.theta_ij.as_ref().unwrap()[0], 2.25, epsilon = 1e-10);
        assert_abs_diff_eq!(rec.theta_exact.as_ref().unwrap()[0], 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(report.base.theta[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn exact_interpolation_linear_losses_are_zero() {
        // y = 2x fits exactly; every loss is 0
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lin.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        write!(f, "x1,y\n1.0,2.0\n2.0,4.0\n3.0,6.0\n-1.0,-2.0\n").unwrap();
        let cfg = ExperimentConfig {
            model: GlmKind::Linear,
            data: DataSource::Csv {
                path: path.to_string_lossy().into_owned(),
                bias: false,
            },
            family: FamilyConfig::LeaveKOut { k: 1, limit: None },
            ..ExperimentConfig::default()
        };
        let report = run_accuracy_experiment(&cfg, CvMode::Both, false).unwrap();
        assert!(report.aggregate.train_loss.unwrap() <= 1e-18);
        assert!(report.aggregate.cv_ij.unwrap() <= 1e-18);
        assert!(report.aggregate.cv_exact.unwrap() <= 1e-18);
        assert!(report.max_gap_l2.unwrap() <= 1e-9);
    }

    #[test]
    fn replication_count_matches_and_bootstrap_has_no_cv_losses() {
        let cfg = ExperimentConfig {
            model: GlmKind::Logistic,
            data: DataSource::Synthetic { n: 60, p: 2 },
            family: FamilyConfig::Bootstrap { b: 5 },
            reps: 3,
            ..ExperimentConfig::default()
        };
        let report = run_accuracy_experiment(&cfg, CvMode::IjOnly, false).unwrap();
        assert_eq!(report.replications.len(), 3);
        assert_eq!(report.records.len(), 5);
        assert!(report.aggregate.cv_ij.is_none());
        assert!(report.aggregate.train_loss.is_some());
    }

    #[test]
    fn certificate_attaches_when_requested() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = mean_csv_config(dir.path());
        let report = run_accuracy_experiment(&cfg, CvMode::Both, true).unwrap();
        let cert = report.certificate.unwrap();
        assert!(cert.meta.sampled_suprema);
        // location model: C_IJ = 1 exactly, so bound = 2δ²
        assert_abs_diff_eq!(cert.c_ij, 1.0, epsilon = 1e-12);
        assert!(cert.bound >= 0.0);
    }

    #[test]
    fn timing_report_has_nonnegative_disjoint_spans() {
        let cfg = ExperimentConfig {
            model: GlmKind::Linear,
            data: DataSource::Synthetic { n: 80, p: 3 },
            family: FamilyConfig::Bootstrap { b: 4 },
            ..ExperimentConfig::default()
        };
        let report = run_timing_experiment(&cfg, 3).unwrap();
        let t = report.timings.unwrap();
        for v in [t.base_fit_s, t.handle_build_s, t.ij_batch_s, t.exact_batch_s] {
            assert!(v >= 0.0);
        }
        assert_abs_diff_eq!(t.ij_total_s, t.handle_build_s + t.ij_batch_s, epsilon = 1e-12);
        assert_eq!(report.records.len(), 4);
    }
}
