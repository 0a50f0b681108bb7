//! Sequential vs parallel execution of the data-parallel stages.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use poisson_cpca::cpca::scpca;
use poisson_cpca::msfa::{fit_msfa_all, MsfaConfig};
use poisson_cpca::scores::project_scores;
use poisson_cpca::simulate::{build_truth, run_scenario, sample_counts, SimulationScenario};
use poisson_cpca::transform::TransformPair;
use poisson_cpca::variance::{apply_sdc, estimate_poisson_variance};
use poisson_cpca::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn scenario(replicates: usize, methods: &str) -> SimulationScenario {
    SimulationScenario::from_toml(&format!(
        "p = 50\nn = [200, 100]\nq_shared = 5\nreplicates = {replicates}\nseed = 3\nmethods = [{methods}]\n"
    ))
    .unwrap()
}

fn scores(c: &mut Criterion) {
    let sc = scenario(1, "\"poisson+scpca\"");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let truth = build_truth(&sc, &mut rng).unwrap();
    let (groups, _) = sample_counts(&truth, &sc, &mut rng).unwrap();
    let t = TransformPair::default();
    let est: Vec<_> = groups
        .iter()
        .map(|x| apply_sdc(&estimate_poisson_variance(x, &t).unwrap()).unwrap().repaired(1e-3).unwrap())
        .collect();
    let basis = scpca(&est, 5).unwrap();
    let mut g = c.benchmark_group("score_projection_200x50");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| project_scores(black_box(&groups[0]), &est[0], &basis, &t, exec).unwrap())
        });
    }
    g.finish();

    let mats: Vec<_> = est.iter().map(|e| e.sigma.clone()).collect();
    let ns: Vec<f64> = est.iter().map(|e| e.n as f64).collect();
    let mut g = c.benchmark_group("msfa_5_restarts");
    g.sample_size(10);
    for (name, exec) in MODES {
        let mut cfg = MsfaConfig::new(5, vec![1, 1]);
        cfg.exec = exec;
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| fit_msfa_all(black_box(&mats), &ns, &cfg).unwrap())
        });
    }
    g.finish();
}

fn replicates(c: &mut Criterion) {
    let sc = scenario(8, "\"poisson+scpca\", \"naive-count\"");
    let mut g = c.benchmark_group("simulation_8_replicates");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_scenario(black_box(&sc), exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, scores, replicates);
criterion_main!(benches);
