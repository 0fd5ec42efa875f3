//! Rayon pool vs a single-thread pool on the data-parallel hot paths.
//! Results are bit-identical either way; only wall time differs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use poisonlab::envlab::{evaluate_policy, generate_dataset, BehaviorQuality, Environment, MdpSpec};
use poisonlab::sensitivity::{score_dataset, Surface};
use poisonlab::victims::{train, AlgoTag, FeatureMap, TrainConfig};

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    vec![
        ("rayon", rayon::ThreadPoolBuilder::new().build().unwrap()),
        ("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
    ]
}

fn bench(c: &mut Criterion) {
    let env = Environment::new(MdpSpec::line_world(0)).unwrap();
    let data = generate_dataset(&env, 5000, BehaviorQuality::Medium, 0).unwrap();
    let fm = FeatureMap::default_for(&data.spec).unwrap();
    let cfg = TrainConfig::fqi_default();
    let model = train(AlgoTag::LinFQI, &data, fm.clone(), &cfg).unwrap();

    let mut group = c.benchmark_group("hot_paths");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_with_input(BenchmarkId::new("evaluate_policy", name), &pool, |b, p| {
            b.iter(|| p.install(|| evaluate_policy(&env, &model, 200, 1).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("score_dataset", name), &pool, |b, p| {
            b.iter(|| p.install(|| score_dataset(&model, &data, Surface::Both).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("fqi_train", name), &pool, |b, p| {
            b.iter(|| p.install(|| train(AlgoTag::LinFQI, &data, fm.clone(), &cfg).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
