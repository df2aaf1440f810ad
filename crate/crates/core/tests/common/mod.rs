#![allow(dead_code)]

use fedmerge_core::data::{gen_cluster_noniid, ClientDataset, ClusterTruthSpec, FederationSpec, LabelPermutation};
use fedmerge_core::model::LocalConfig;

/// K-task cyclic-permutation federation with 8 features and 4 classes.
pub fn cluster_federation(m: usize, k: usize, seed: u64) -> Vec<ClientDataset> {
    let truth = ClusterTruthSpec {
        class_sep: 2.0,
        ..ClusterTruthSpec::new(8, 4)
    };
    gen_cluster_noniid(&FederationSpec::cluster(m, k, seed), &truth).unwrap()
}

pub fn swap_federation(m: usize, seed: u64) -> Vec<ClientDataset> {
    let truth = ClusterTruthSpec {
        class_sep: 2.0,
        permutation: LabelPermutation::Swap01,
        ..ClusterTruthSpec::new(6, 2)
    };
    gen_cluster_noniid(&FederationSpec::cluster(m, 2, seed), &truth).unwrap()
}

pub fn local(lr: f64, epochs: usize, batch_size: usize) -> LocalConfig {
    LocalConfig { lr, epochs, batch_size }
}
