//! `ijack`: fit weighted M-estimators, approximate re-weighted refits with a
//! single factorization, and certify the approximation error.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ijack_cli::config::{load_config_file, DataSource, ExperimentConfig, FamilyConfig};
use ijack_cli::experiment::{
    build_certificate, configure_threads, load_training, run_accuracy_experiment,
    run_timing_experiment, CvMode,
};
use ijack_cli::report::{emit_report, ReportFormat};
use ijack_core::{
    convergence_rate_check, generate_synthetic, solve, EstimatingEquation, GlmKind, GlmModel,
    Parameter, SyntheticSpec, WeightVector,
};

#[derive(Parser)]
#[command(name = "ijack", version, about = "Weighted M-estimation with certified linear-response refit approximations")]
struct Cli {
    /// Config file ([section] headers, key = value lines); flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (1 guarantees byte-identical reruns; also IJACK_THREADS)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Model kind: mean | linear | logistic | poisson
    #[arg(long)]
    model: Option<String>,
    /// CSV data file with header x1..xP,y
    #[arg(long)]
    data: Option<PathBuf>,
    /// Append a constant-1 bias feature to CSV rows
    #[arg(long)]
    bias: bool,
    /// Synthetic data size (used when --data is absent)
    #[arg(long)]
    n: Option<usize>,
    /// Synthetic feature dimension
    #[arg(long)]
    p: Option<usize>,
    /// Fresh synthetic test-split size (0 = none)
    #[arg(long)]
    test_n: Option<usize>,
}

#[derive(Args)]
struct OutArgs {
    #[arg(long)]
    out: PathBuf,
    /// json | csv
    #[arg(long, default_value = "json")]
    format: String,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model at unit weights and write the solution
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-k-out cross validation via the linear approximation
    IjCv {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        k: Option<usize>,
        /// Cap on sampled folds (0 = enumerate all)
        #[arg(long)]
        limit: Option<usize>,
        /// Also run exact warm-started refits and record gaps
        #[arg(long)]
        compare_exact: bool,
        #[arg(long)]
        reps: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Leave-k-out cross validation via exact refits only
    ExactCv {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Multinomial bootstrap weights through the linear approximation
    Bootstrap {
        #[command(flatten)]
        data: DataArgs,
        /// Number of bootstrap weight vectors
        #[arg(long, short = 'b')]
        b: Option<usize>,
        #[arg(long)]
        compare_exact: bool,
        #[arg(long)]
        reps: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Compute the approximation-error certificate for a weight family
    Certify {
        #[command(flatten)]
        data: DataArgs,
        /// leave_k_out | bootstrap | adversarial
        #[arg(long, default_value = "leave_k_out")]
        family: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, short = 'b')]
        b: Option<usize>,
        /// Domain ball radius (0 = automatic)
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Log-log slope of the worst leave-k-out error against dataset size
    RateCheck {
        /// mean | linear | logistic | poisson
        #[arg(long)]
        model: Option<String>,
        /// Comma-separated strictly increasing sizes, e.g. 128,256,512
        #[arg(long)]
        sizes: String,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Wall-clock comparison of the IJ path against exact refits
    Bench {
        #[command(flatten)]
        data: DataArgs,
        /// Number of bootstrap weight vectors
        #[arg(long)]
        bootstrap: Option<usize>,
        /// Timing repetitions (median is reported)
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded synthetic dataset as CSV
    GenData {
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct FitReport {
    model: String,
    n: usize,
    p: usize,
    seed: u64,
    theta: Vec<f64>,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
}

#[derive(Serialize)]
struct RateReport {
    model: String,
    p: usize,
    k: usize,
    seed: u64,
    sizes: Vec<usize>,
    slope: f64,
}

#[derive(Serialize)]
struct CertifyReport {
    model: String,
    n: usize,
    p: usize,
    seed: u64,
    certificate: ijack_core::IJCertificate,
}

fn build_config(cli: &Cli, data: Option<&DataArgs>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_map(&load_config_file(path)?)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Some(d) = data {
        if let Some(model) = &d.model {
            cfg.model = GlmKind::parse(model)?;
        }
        if let Some(path) = &d.data {
            cfg.data = DataSource::Csv {
                path: path.to_string_lossy().into_owned(),
                bias: d.bias,
            };
        } else if d.n.is_some() || d.p.is_some() {
            let (mut n, mut p) = match cfg.data {
                DataSource::Synthetic { n, p } => (n, p),
                _ => (500, 5),
            };
            if let Some(v) = d.n {
                n = v;
            }
            if let Some(v) = d.p {
                p = v;
            }
            cfg.data = DataSource::Synthetic { n, p };
        }
        if let Some(t) = d.test_n {
            cfg.test_n = t;
        }
    }
    Ok(cfg)
}

fn set_loo(cfg: &mut ExperimentConfig, k: Option<usize>, limit: Option<usize>) {
    let (mut cur_k, mut cur_limit) = match cfg.family {
        FamilyConfig::LeaveKOut { k, limit } => (k, limit),
        _ => (1, None),
    };
    if let Some(k) = k {
        cur_k = k;
    }
    if let Some(l) = limit {
        cur_limit = (l > 0).then_some(l);
    }
    cfg.family = FamilyConfig::LeaveKOut {
        k: cur_k,
        limit: cur_limit,
    };
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Fit { data, out } => {
            let cfg = build_config(&cli, Some(data))?;
            configure_threads(cfg.threads)?;
            let eq = load_training(&cfg, 0)?;
            let fit = solve(
                &eq,
                &WeightVector::ones(eq.n_points()),
                &Parameter::zeros(eq.dim()),
                &cfg.solver_options(),
            )?;
            write_json(
                &FitReport {
                    model: cfg.model.to_string(),
                    n: eq.n_points(),
                    p: eq.dataset().n_features(),
                    seed: cfg.seed,
                    theta: fit.theta.values().iter().copied().collect(),
                    grad_norm: fit.grad_norm,
                    iterations: fit.iterations,
                    converged: fit.converged,
                },
                out,
            )
        }
        Command::IjCv {
            data,
            k,
            limit,
            compare_exact,
            reps,
            out,
        } => {
            let mut cfg = build_config(&cli, Some(data))?;
            set_loo(&mut cfg, *k, *limit);
            if let Some(r) = reps {
                cfg.reps = *r;
            }
            configure_threads(cfg.threads)?;
            let mode = if *compare_exact {
                CvMode::Both
            } else {
                CvMode::IjOnly
            };
            let report = run_accuracy_experiment(&cfg, mode, false)?;
            emit_report(&report, ReportFormat::parse(&out.format)?, &out.out)
        }
        Command::ExactCv {
            data,
            k,
            limit,
            reps,
            out,
        } => {
            let mut cfg = build_config(&cli, Some(data))?;
            set_loo(&mut cfg, *k, *limit);
            if let Some(r) = reps {
                cfg.reps = *r;
            }
            configure_threads(cfg.threads)?;
            let report = run_accuracy_experiment(&cfg, CvMode::ExactOnly, false)?;
            emit_report(&report, ReportFormat::parse(&out.format)?, &out.out)
        }
        Command::Bootstrap {
            data,
            b,
            compare_exact,
            reps,
            out,
        } => {
            let mut cfg = build_config(&cli, Some(data))?;
            let cur = match cfg.family {
                FamilyConfig::Bootstrap { b } => b,
                _ => 100,
            };
            cfg.family = FamilyConfig::Bootstrap { b: b.unwrap_or(cur) };
            if let Some(r) = reps {
                cfg.reps = *r;
            }
            configure_threads(cfg.threads)?;
            let mode = if *compare_exact {
                CvMode::Both
            } else {
                CvMode::IjOnly
            };
            let report = run_accuracy_experiment(&cfg, mode, false)?;
            emit_report(&report, ReportFormat::parse(&out.format)?, &out.out)
        }
        Command::Certify {
            data,
            family,
            k,
            limit,
            b,
            radius,
            samples,
            out,
        } => {
            let mut cfg = build_config(&cli, Some(data))?;
            match family.as_str() {
                "leave_k_out" => set_loo(&mut cfg, *k, *limit),
                "bootstrap" => {
                    cfg.family = FamilyConfig::Bootstrap { b: b.unwrap_or(100) }
                }
                "adversarial" => cfg.family = FamilyConfig::Adversarial,
                other => anyhow::bail!("unknown family {other:?}"),
            }
            if let Some(r) = radius {
                cfg.domain_radius = *r;
            }
            if let Some(s) = samples {
                cfg.domain_samples = *s;
            }
            configure_threads(cfg.threads)?;
            let eq = load_training(&cfg, 0)?;
            let base = solve(
                &eq,
                &WeightVector::ones(eq.n_points()),
                &Parameter::zeros(eq.dim()),
                &cfg.solver_options(),
            )?;
            anyhow::ensure!(base.converged, "base fit did not converge");
            let certificate = build_certificate(&cfg, &eq, &base)?;
            write_json(
                &CertifyReport {
                    model: cfg.model.to_string(),
                    n: eq.n_points(),
                    p: eq.dataset().n_features(),
                    seed: cfg.seed,
                    certificate,
                },
                out,
            )
        }
        Command::RateCheck {
            model,
            sizes,
            k,
            p,
            limit,
            out,
        } => {
            let mut cfg = build_config(&cli, None)?;
            if let Some(m) = model {
                cfg.model = GlmKind::parse(m)?;
            }
            configure_threads(cfg.threads)?;
            let sizes: Vec<usize> = sizes
                .split(',')
                .map(|s| s.trim().parse().context("bad size list"))
                .collect::<Result<_>>()?;
            let p = p.unwrap_or(5);
            let kind = cfg.model;
            let factory = move |n: usize, seed: u64| -> ijack_core::Result<GlmModel> {
                let spec = SyntheticSpec::desk(kind, n, if kind == GlmKind::Mean { 0 } else { p }, seed);
                GlmModel::new(kind, generate_synthetic(&spec)?)
            };
            let slope = convergence_rate_check(factory, &sizes, *k, cfg.seed, *limit)?;
            write_json(
                &RateReport {
                    model: cfg.model.to_string(),
                    p,
                    k: *k,
                    seed: cfg.seed,
                    sizes,
                    slope,
                },
                out,
            )
        }
        Command::Bench {
            data,
            bootstrap,
            reps,
            out,
        } => {
            let mut cfg = build_config(&cli, Some(data))?;
            cfg.family = FamilyConfig::Bootstrap {
                b: bootstrap.unwrap_or(100),
            };
            configure_threads(cfg.threads)?;
            let report = run_timing_experiment(&cfg, *reps)?;
            emit_report(&report, ReportFormat::Json, out)
        }
        Command::GenData { model, n, p, out } => {
            let cfg = build_config(&cli, None)?;
            let kind = match model {
                Some(m) => GlmKind::parse(m)?,
                None => cfg.model,
            };
            let n = n.unwrap_or(500);
            let p = if kind == GlmKind::Mean { 0 } else { p.unwrap_or(5) };
            let ds = generate_synthetic(&SyntheticSpec::desk(kind, n, p, cfg.seed))?;
            let f = std::fs::File::create(out)
                .with_context(|| format!("creating {}", out.display()))?;
            ds.write_csv(f)?;
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
