mod common;

use std::fs;
use std::path::PathBuf;

use common::{cluster_federation, local, swap_federation};
use fedmerge_core::data::{
    gen_cluster_noniid, gen_dirichlet_noniid, load_csv_federation, ClientDataset, ClusterTruthSpec, ColumnSchema,
    FederationSpec, LabeledPool, Split,
};
use fedmerge_core::model::{forward, local_sgd, ModelSpec};
use fedmerge_core::param::{InitScheme, SeededRng};
use fedmerge_core::schedule::init_global_model;
use fedmerge_core::Error;

/// All rows of `split` from clients in task `task`, as one train-only dataset.
fn pooled(clients: &[ClientDataset], task: usize, split: Split) -> ClientDataset {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dim = 0;
    let mut classes = 0;
    for c in clients.iter().filter(|c| c.cluster_id == Some(task)) {
        for &i in c.split(split) {
            features.extend_from_slice(c.row(i));
            labels.push(c.labels[i]);
        }
        dim = c.input_dim;
        classes = c.num_classes;
    }
    let n = labels.len();
    ClientDataset::with_splits(features, labels, dim, classes, Some(task), (0..n).collect(), vec![], vec![]).unwrap()
}

fn accuracy(spec: &ModelSpec, theta: &fedmerge_core::ParamVector, data: &ClientDataset) -> f64 {
    let batch = data.split_batch(Split::Train).unwrap();
    let (_, logits) = forward(spec, theta, &batch).unwrap();
    fedmerge_core::model::score_logits(&logits, &batch.labels, spec.num_classes).1
}

/// Centralized model for task 0, then scored on task 0 and task 1 test data.
fn cross_cluster(clients: &[ClientDataset]) -> (f64, f64) {
    let c = clients[0].num_classes;
    let spec = ModelSpec::logistic(clients[0].input_dim, c);
    let train = pooled(clients, 0, Split::Train);
    let theta0 = init_global_model(&spec, 1, 0, InitScheme::GlorotUniform);
    let (theta, _) = local_sgd(&spec, &theta0, &train, &local(0.1, 30, 32), &mut SeededRng::new(3, 0)).unwrap();
    (
        accuracy(&spec, &theta, &pooled(clients, 0, Split::Test)),
        accuracy(&spec, &theta, &pooled(clients, 1, Split::Test)),
    )
}

#[test]
fn swapped_labels_invert_accuracy_across_clusters() {
    let clients = swap_federation(8, 5);
    let (own, other) = cross_cluster(&clients);
    assert!(own >= 0.9, "own-cluster accuracy {own}");
    assert!((other - (1.0 - own)).abs() <= 0.05, "own {own}, other {other}");
}

#[test]
fn cyclic_labels_defeat_a_single_model() {
    let clients = cluster_federation(8, 2, 5);
    let (own, other) = cross_cluster(&clients);
    assert!(own >= 0.9, "own-cluster accuracy {own}");
    assert!(other <= 0.25 + 0.10, "cross-cluster accuracy {other}");
}

#[test]
fn cluster_ids_follow_even_assignment() {
    let clients = cluster_federation(9, 3, 0);
    let ids: Vec<_> = clients.iter().map(|c| c.cluster_id.unwrap()).collect();
    assert_eq!(ids, vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
}

fn histogram(labels: &[usize], c: usize) -> Vec<f64> {
    let mut h = vec![0.0; c];
    for &y in labels {
        h[y] += 1.0;
    }
    h.iter().map(|v| v / labels.len() as f64).collect()
}

fn dirichlet(m: usize, n: usize, alpha: f64, classes: usize, seed: u64) -> (LabeledPool, Vec<ClientDataset>) {
    let spec = FederationSpec {
        samples_per_client: n,
        ..FederationSpec::dirichlet(m, alpha, seed)
    };
    let pool = LabeledPool::gaussian(2 * m * n, &ClusterTruthSpec::new(4, classes), seed).unwrap();
    let clients = gen_dirichlet_noniid(&spec, &pool).unwrap();
    (pool, clients)
}

#[test]
fn huge_alpha_reproduces_the_global_label_mix() {
    let (pool, clients) = dirichlet(10, 2000, 1e6, 4, 7);
    let global = histogram(&pool.labels, 4);
    for c in &clients {
        for (a, b) in histogram(&c.labels, 4).iter().zip(&global) {
            assert!((a - b).abs() <= 0.05, "{a} vs {b}");
        }
    }
}

#[test]
fn small_alpha_concentrates_labels() {
    let distinct = |alpha: f64| -> f64 {
        let mut total = 0.0;
        for seed in 0..20 {
            let (_, clients) = dirichlet(50, 50, alpha, 10, seed);
            for c in &clients {
                total += histogram(&c.labels, 10).iter().filter(|&&p| p > 0.0).count() as f64;
            }
        }
        total / (20.0 * 50.0)
    };
    let (low, high) = (distinct(0.1), distinct(10.0));
    assert!(low < high, "alpha 0.1: {low}, alpha 10: {high}");
    assert!(low < 5.0 && high > 8.0, "alpha 0.1: {low}, alpha 10: {high}");
}

#[test]
fn generators_are_deterministic_in_the_seed() {
    assert_eq!(dirichlet(6, 40, 0.5, 5, 11).1, dirichlet(6, 40, 0.5, 5, 11).1);
    assert_ne!(dirichlet(6, 40, 0.5, 5, 11).1, dirichlet(6, 40, 0.5, 5, 12).1);
    assert_eq!(cluster_federation(6, 3, 2), cluster_federation(6, 3, 2));
}

#[test]
fn dirichlet_rejects_a_short_pool() {
    let pool = LabeledPool::gaussian(50, &ClusterTruthSpec::new(2, 3), 0).unwrap();
    let spec = FederationSpec {
        samples_per_client: 20,
        ..FederationSpec::dirichlet(3, 1.0, 0)
    };
    assert!(matches!(gen_dirichlet_noniid(&spec, &pool), Err(Error::Infeasible(_))));
}

#[test]
fn single_cluster_is_accepted() {
    let truth = ClusterTruthSpec::new(3, 2);
    let clients = gen_cluster_noniid(&FederationSpec::cluster(4, 1, 0), &truth).unwrap();
    assert!(clients.iter().all(|c| c.cluster_id == Some(0)));
}

// ---- CSV loading ----

fn write_files(dir: &tempfile::TempDir, contents: &[&str]) -> Vec<PathBuf> {
    contents
        .iter()
        .enumerate()
        .map(|(i, text)| {
            let p = dir.path().join(format!("c{i}.csv"));
            fs::write(&p, text).unwrap();
            p
        })
        .collect()
}

fn column(c: &ClientDataset, idx: &[usize], k: usize) -> Vec<f64> {
    idx.iter().map(|&i| c.row(i)[k]).collect()
}

#[test]
fn csv_features_are_standardized_with_train_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let a = "x,y,label\n1,10,0\n2,20,1\n3,30,0\n4,40,1\n5,55,0\n6,60,1\n7,70,0\n8,80,1\n9,90,0\n10,500,1\n";
    let b = "x,y,label\n0.5,3,1\n1.5,6,0\n2.5,9,1\n";
    let paths = write_files(&dir, &[a, b]);
    let clients = load_csv_federation(&paths, &ColumnSchema::new(2)).unwrap();
    assert_eq!(clients.len(), 2);
    assert_eq!(clients[1].len(), 3);
    assert_eq!(clients[1].input_dim, 2);

    // Raw train rows (contiguous, first 70%) across both clients.
    let raw_a: Vec<[f64; 2]> = vec![[1., 10.], [2., 20.], [3., 30.], [4., 40.], [5., 55.], [6., 60.], [7., 70.]];
    let raw_b: Vec<[f64; 2]> = vec![[0.5, 3.], [1.5, 6.]];
    assert_eq!(clients[0].train, (0..7).collect::<Vec<_>>());
    assert_eq!(clients[1].train, vec![0, 1]);
    let train: Vec<[f64; 2]> = raw_a.iter().chain(&raw_b).copied().collect();
    let n = train.len() as f64;
    for k in 0..2 {
        let mean = train.iter().map(|r| r[k]).sum::<f64>() / n;
        let std = (train.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n).sqrt();

        let mut all_train = column(&clients[0], &clients[0].train, k);
        all_train.extend(column(&clients[1], &clients[1].train, k));
        let got_mean = all_train.iter().sum::<f64>() / n;
        assert!(got_mean.abs() < 1e-9, "train mean {got_mean}");

        // Held-out rows use the train statistics, not their own.
        let raw_last = [10.0, 500.0][k];
        let got = clients[0].row(9)[k];
        assert!((got - (raw_last - mean) / std).abs() < 1e-12);
        let raw_b_test = [2.5, 9.0][k];
        assert!((clients[1].row(2)[k] - (raw_b_test - mean) / std).abs() < 1e-12);
    }
}

#[test]
fn tiny_csv_loads() {
    let dir = tempfile::tempdir().unwrap();
    let paths = write_files(&dir, &["f0,f1,label\n1,2,0\n3,4,1\n5,6,2\n"]);
    let clients = load_csv_federation(&paths, &ColumnSchema::new(3)).unwrap();
    assert_eq!(clients[0].labels, vec![0, 1, 2]);
    assert_eq!(clients[0].features.len(), 6);
}

fn csv_error_row(text: &str) -> (usize, String) {
    let dir = tempfile::tempdir().unwrap();
    let paths = write_files(&dir, &[text]);
    match load_csv_federation(&paths, &ColumnSchema::new(3)) {
        Err(Error::Csv { row, message, .. }) => (row, message),
        other => panic!("expected a csv error, got {other:?}"),
    }
}

#[test]
fn ragged_row_is_reported_by_index() {
    let (row, msg) = csv_error_row("a,b,label\n1,2,0\n1,2\n");
    assert_eq!(row, 2);
    assert!(msg.contains("fields"), "{msg}");
}

#[test]
fn non_numeric_cell_is_reported_by_index() {
    let (row, msg) = csv_error_row("a,b,label\n1,2,0\n3,4,1\n5,oops,1\n");
    assert_eq!(row, 3);
    assert!(msg.contains("oops"), "{msg}");
}

#[test]
fn unknown_label_is_reported_by_index() {
    let (row, msg) = csv_error_row("a,b,label\n1,2,7\n");
    assert_eq!(row, 1);
    assert!(msg.contains("unknown label"), "{msg}");
}

#[test]
fn missing_label_column_is_an_error() {
    let (row, msg) = csv_error_row("a,b,c\n1,2,0\n");
    assert_eq!(row, 0);
    assert!(msg.contains("label"), "{msg}");
}
