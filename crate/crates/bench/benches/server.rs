use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedmerge_core::data::{gen_cluster_noniid, ClusterTruthSpec, FederationSpec};
use fedmerge_core::fedmerge::{
    merge, soup_update, update_weights_softmax, ClientUpdate, FedMergeServer, MergeWeights, ModelSoup, ServerConfig,
    WeightGradOptions, WeightMode,
};
use fedmerge_core::model::{Activation, LocalConfig, ModelSpec};
use fedmerge_core::param::InitScheme;

const M: usize = 50;

fn spec() -> ModelSpec {
    ModelSpec::mlp(16, 64, 10, Activation::Relu)
}

fn fixture(d: usize) -> (ModelSoup, MergeWeights, Vec<ClientUpdate>, Vec<usize>) {
    let spec = spec();
    let soup = ModelSoup::random(&spec, d, 1, InitScheme::GlorotUniform).unwrap();
    let weights = MergeWeights::uniform(M, d, WeightMode::Softmax);
    let noise = ModelSoup::random(&spec, M, 2, InitScheme::GlorotUniform).unwrap();
    let updates = (0..M)
        .map(|i| {
            let sent = merge(&soup, &weights, i).unwrap();
            let mut delta = noise.model(i).clone();
            delta.scale(1e-2);
            ClientUpdate { client: i, sent, delta }
        })
        .collect();
    (soup, weights, updates, vec![100; M])
}

fn bench_merge(c: &mut Criterion) {
    let mut group = c.benchmark_group("merge_all_clients");
    for d in [5, 10, 20] {
        let (soup, weights, _, _) = fixture(d);
        group.bench_with_input(BenchmarkId::from_parameter(d), &d, |b, _| {
            b.iter(|| (0..M).map(|i| merge(black_box(&soup), &weights, i).unwrap()).collect::<Vec<_>>())
        });
    }
    group.finish();
}

fn bench_server_update(c: &mut Criterion) {
    let mut group = c.benchmark_group("server_update");
    let opts = WeightGradOptions {
        head_only: true,
        normalize: false,
    };
    for d in [5, 10, 20] {
        let (soup, weights, updates, sizes) = fixture(d);
        group.bench_with_input(BenchmarkId::from_parameter(d), &d, |b, _| {
            b.iter(|| {
                let ds = soup_update(black_box(&soup), &weights, &updates, &sizes).unwrap();
                let da = update_weights_softmax(&soup, &weights, &updates, &sizes, opts).unwrap();
                (ds, da)
            })
        });
    }
    group.finish();
}

fn bench_round(c: &mut Criterion) {
    let truth = ClusterTruthSpec::new(16, 10);
    let spec_f = FederationSpec {
        samples_per_client: 40,
        ..FederationSpec::cluster(20, 4, 0)
    };
    let clients = gen_cluster_noniid(&spec_f, &truth).unwrap();
    let cfg = ServerConfig {
        local: LocalConfig {
            lr: 0.05,
            epochs: 1,
            batch_size: 16,
        },
        ..ServerConfig::new(8, usize::MAX)
    };
    let mut server = FedMergeServer::new(spec(), cfg, clients.len()).unwrap();
    c.bench_function("fedmerge_round_m20_d8", |b| b.iter(|| server.step(black_box(&clients)).unwrap()));
}

criterion_group!(benches, bench_merge, bench_server_update, bench_round);
criterion_main!(benches);
