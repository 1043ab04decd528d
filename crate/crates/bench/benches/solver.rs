//! Cost of one full fit from a cold start.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ijack_core::{
    generate_synthetic, solve, EstimatingEquation, GlmKind, GlmModel, Parameter, SolverOptions,
    SyntheticSpec, WeightVector,
};

fn bench_solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("cold_fit");
    group.sample_size(10);
    for &(n, p) in &[(500usize, 5usize), (2000, 20)] {
        let spec = SyntheticSpec::desk(GlmKind::Logistic, n, p, 3);
        let eq = GlmModel::new(GlmKind::Logistic, generate_synthetic(&spec).unwrap()).unwrap();
        group.bench_with_input(
            BenchmarkId::new("logistic", format!("n{n}_p{p}")),
            &n,
            |b, _| {
                b.iter(|| {
                    solve(
                        &eq,
                        &WeightVector::ones(n),
                        &Parameter::zeros(eq.dim()),
                        &SolverOptions::default(),
                    )
                    .unwrap()
                })
            },
        );
    }
    group.finish();
}

criterion_group!(benches, bench_solve);
criterion_main!(benches);
