use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mtmct_bench::core::config::PipelineConfig;
use mtmct_bench::core::eval::idf1;
use mtmct_bench::core::ingest::track_set_from_rows;
use mtmct_bench::core::mtmct::{hierarchical_cluster, DistanceMatrix, NodeKey};
use mtmct_bench::core::pipeline::{run, CameraInput};
use mtmct_bench::core::synth::{generate, ScenarioSpec};
use mtmct_bench::core::zones::mean_shift;

fn bench_mean_shift(c: &mut Criterion) {
    let mut group = c.benchmark_group("mean_shift");
    for n in [100usize, 400] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let centers = [(200.0, 300.0), (1700.0, 300.0), (900.0, 800.0)];
        let points: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let (cx, cy) = centers[i % centers.len()];
                (cx + rng.random_range(-80.0..80.0), cy + rng.random_range(-80.0..80.0))
            })
            .collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &points, |b, p| {
            b.iter(|| mean_shift(black_box(p), 250.0).unwrap())
        });
    }
    group.finish();
}

fn bench_hierarchical_cluster(c: &mut Criterion) {
    let mut group = c.benchmark_group("hierarchical_cluster");
    for n in [80usize, 320] {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let nodes = (0..n)
            .map(|i| NodeKey {
                camera_id: (i % 4) as u32,
                local_id: i as u64,
            })
            .collect();
        let mut m = DistanceMatrix::new(nodes);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_bool(0.3) {
                    m.set(i, j, Some(rng.random_range(0.0..1.5)));
                }
            }
        }
        group.bench_with_input(BenchmarkId::from_parameter(n), &m, |b, m| {
            b.iter(|| hierarchical_cluster(black_box(m), 0.6, 2))
        });
    }
    group.finish();
}

fn bench_idf1(c: &mut Criterion) {
    let sc = generate(&ScenarioSpec::chain(5)).unwrap();
    let inputs: Vec<CameraInput> = sc.cameras.iter().cloned().map(CameraInput::from).collect();
    let out = run(&inputs, None, &PipelineConfig::default(), None, 1).unwrap();
    let pred = track_set_from_rows(&out.tracks).unwrap();
    let gt = track_set_from_rows(&sc.ground_truth).unwrap();
    c.bench_function("idf1/chain", |b| b.iter(|| idf1(black_box(&pred), black_box(&gt), 0.5)));
}

fn bench_pipeline(c: &mut Criterion) {
    let sc = generate(&ScenarioSpec::chain(6)).unwrap();
    let inputs: Vec<CameraInput> = sc.cameras.iter().cloned().map(CameraInput::from).collect();
    let cfg = PipelineConfig::default();
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("chain_unconstrained", |b| {
        b.iter(|| run(black_box(&inputs), None, &cfg, None, 1).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_mean_shift,
    bench_hierarchical_cluster,
    bench_idf1,
    bench_pipeline
);
criterion_main!(benches);
