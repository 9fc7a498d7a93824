use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use vfm_core::metrics::{gaussian_rows, mmd_unbiased_with};
use vfm_core::nets::{MeanFlowNet, NoiseAdapter};
use vfm_core::par::Execution;
use vfm_core::problems::{checkerboard_families, checkerboard_sample};
use vfm_core::seeded_rng;
use vfm_core::training::{draw_for, step_with_draws, Objective, TrainConfig, TrainData, TrainState};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn vfm_step(c: &mut Criterion) {
    let data = TrainData::new(
        checkerboard_sample(10_000, &mut seeded_rng(0)),
        checkerboard_families(0.1).unwrap(),
    )
    .unwrap();
    let cfg = TrainConfig {
        batch: 256,
        chunks: 8,
        ..TrainConfig::default()
    };
    let theta = MeanFlowNet::new(2, &[128; 3], 1).unwrap();
    let phi = NoiseAdapter::new(1, 2, 2, 8, &[64; 2], 2).unwrap();
    let state = TrainState::new(theta, Some(phi), &cfg).unwrap();
    let draws = draw_for(Objective::Vfm, &state, &data, &cfg, &mut seeded_rng(3)).unwrap();
    let mut group = c.benchmark_group("vfm_step");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut s = state.clone();
                step_with_draws(Objective::Vfm, &mut s, &draws, &cfg, None, exec).unwrap()
            })
        });
    }
    group.finish();
}

fn mmd(c: &mut Criterion) {
    let mut rng = seeded_rng(4);
    let mut group = c.benchmark_group("mmd_unbiased");
    group.sample_size(10);
    for n in [500, 2000] {
        let x = gaussian_rows(n, 2, &mut rng);
        let y = gaussian_rows(n, 2, &mut rng);
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| mmd_unbiased_with(exec, &x, &y, 1.0).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, vfm_step, mmd);
criterion_main!(benches);
