use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use glyco_bench::{cohort, model, windows};
use glyco_core::cohort::{simulate_cohort, SimConfig};
use glyco_core::decision::{decide_joint, mc_expected_utility, UtilityConfig};
use glyco_core::diffnum::Tensor;
use glyco_core::rng;
use glyco_core::seqgen::{objective_gradients, sample_outcomes, LossBatch, Mode, ModelConfig, Objective, ParamGroup};

fn simulation(c: &mut Criterion) {
    let cfg = SimConfig::default();
    c.bench_function("simulate_cohort/10", |b| b.iter(|| simulate_cohort(black_box(10), &cfg, 1).unwrap()));
}

fn gradients(c: &mut Criterion) {
    let grids = cohort(16, 2);
    let mut group = c.benchmark_group("objective_gradients");
    for mode in [Mode::Parametric, Mode::Latent] {
        let cfg = ModelConfig { mode, ..ModelConfig::default() };
        let params = model(&cfg, &grids, 3);
        let batch = LossBatch::from_windows(&params, &windows(&grids, cfg.window)[..8]).unwrap();
        let objective = match mode {
            Mode::Latent => Objective::elbo(4),
            _ => Objective::L1,
        };
        group.bench_function(BenchmarkId::from_parameter(mode), |b| {
            b.iter(|| objective_gradients(&params, &batch, objective, &ParamGroup::ALL).unwrap())
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let grids = cohort(4, 5);
    let cfg = ModelConfig::default();
    let params = model(&cfg, &grids, 6);
    let w = &windows(&grids, cfg.window)[0];
    let utility = UtilityConfig::default();
    c.bench_function("sample_outcomes/S=200", |b| {
        b.iter(|| sample_outcomes(&params, &w.context, &w.future_treatments, 200, &mut rng::stream(7, "b", 0)).unwrap())
    });
    let draws = sample_outcomes(&params, &w.context, &w.future_treatments, 200, &mut rng::stream(7, "b", 0)).unwrap();
    c.bench_function("mc_expected_utility/S=200", |b| b.iter(|| mc_expected_utility(black_box(&draws), &utility).unwrap()));
    let mut group = c.benchmark_group("decide_joint");
    group.sample_size(10);
    group.bench_function("U=100,S=200", |b| {
        b.iter(|| decide_joint(&params, &w.context, &utility, 100, 200, &mut rng::stream(8, "b", 0)).unwrap())
    });
    group.finish();
}

fn matmul(c: &mut Criterion) {
    let a = Tensor::randn(&[64, 64], 1.0, &mut rng::stream(9, "a", 0));
    let b = Tensor::randn(&[64, 64], 1.0, &mut rng::stream(9, "b", 0));
    c.bench_function("graph_matmul_backward/64", |bench| {
        bench.iter(|| {
            let mut g = glyco_core::diffnum::Graph::new();
            let x = g.param(a.clone());
            let y = g.constant(b.clone());
            let z = g.matmul(x, y).unwrap();
            let s = g.sum(z).unwrap();
            g.backward(s).unwrap()
        })
    });
}

criterion_group!(benches, simulation, gradients, sampling, matmul);
criterion_main!(benches);
