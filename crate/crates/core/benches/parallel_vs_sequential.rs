use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pdettc_core::euler::{
    generate_dataset, DatasetSpec, Family, GridSpec, ICSpec, Normalization, SolverConfig,
    SplitFractions,
};
use pdettc_core::par::{self, Exec};
use pdettc_core::rewards::arm_energy;
use pdettc_core::surrogate::{ModelConfig, SizePreset, Surrogate, TimeAxis};

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn model(n: usize) -> Surrogate {
    let cfg = ModelConfig {
        embed_dim: 32,
        depth: 2,
        height: n,
        width: n,
        ..ModelConfig::preset(SizePreset::Desk, 5)
    };
    Surrogate::new(cfg, Normalization::identity(), TimeAxis::default(), 1).unwrap()
}

fn candidate_sampling(c: &mut Criterion) {
    let m = model(32);
    let grid = GridSpec::square(32).unwrap();
    let u =
        pdettc_core::euler::make_initial_condition(&ICSpec::sample(Family::Rp, 3), &grid).unwrap();
    let mut g = c.benchmark_group("sample_16_candidates_32x32");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| m.sample_candidates(&u, 0.0, 16, 9, exec).unwrap())
        });
    }
    g.finish();
}

fn dataset_generation(c: &mut Criterion) {
    let spec = DatasetSpec {
        families: vec![Family::Rp, Family::Kh],
        n_per_family: 4,
        grid: GridSpec::square(24).unwrap(),
        seed: 5,
        splits: SplitFractions::default(),
        solver: SolverConfig::default(),
    };
    let mut g = c.benchmark_group("generate_8_trajectories_24x24");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_dataset(&spec, exec).unwrap())
        });
    }
    g.finish();
}

fn arm_scoring(c: &mut Criterion) {
    let m = model(32);
    let grid = GridSpec::square(32).unwrap();
    let u = pdettc_core::euler::make_initial_condition(&ICSpec::sample(Family::Gauss, 4), &grid)
        .unwrap();
    let cands = m.sample_candidates(&u, 0.0, 64, 2, Exec::Parallel).unwrap();
    let mut g = c.benchmark_group("arm_energy_64_candidates_32x32");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                par::map_slice(exec, &cands, |v| {
                    arm_energy(&u, v, 1.4).map(|s| s.value).ok()
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, candidate_sampling, dataset_generation, arm_scoring);
criterion_main!(benches);
