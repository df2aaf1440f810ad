use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fedmerge_core::data::{gen_cluster_noniid, ClusterTruthSpec, FederationSpec, Split};
use fedmerge_core::model::{grad, local_sgd, Activation, LocalConfig, ModelSpec};
use fedmerge_core::param::{InitScheme, SeededRng};
use fedmerge_core::schedule::init_global_model;

fn bench_local(c: &mut Criterion) {
    let truth = ClusterTruthSpec::new(16, 10);
    let clients = gen_cluster_noniid(&FederationSpec::cluster(1, 1, 0), &truth).unwrap();
    let data = &clients[0];
    let cfg = LocalConfig {
        lr: 0.05,
        epochs: 2,
        batch_size: 32,
    };
    for (name, spec) in [
        ("logistic", ModelSpec::logistic(16, 10)),
        ("mlp64", ModelSpec::mlp(16, 64, 10, Activation::Relu)),
    ] {
        let theta = init_global_model(&spec, 0, 0, InitScheme::GlorotUniform);
        let batch = data.split_batch(Split::Train).unwrap();
        c.bench_function(&format!("full_batch_grad_{name}"), |b| {
            b.iter(|| grad(&spec, black_box(&theta), &batch).unwrap())
        });
        c.bench_function(&format!("local_sgd_2_epochs_{name}"), |b| {
            b.iter(|| local_sgd(&spec, black_box(&theta), data, &cfg, &mut SeededRng::new(0, 0)).unwrap())
        });
    }
}

criterion_group!(benches, bench_local);
criterion_main!(benches);
