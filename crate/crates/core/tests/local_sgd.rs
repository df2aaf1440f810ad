mod common;

use common::{cluster_federation, local};
use fedmerge_core::data::Split;
use fedmerge_core::model::{grad, local_sgd, Activation, ModelSpec};
use fedmerge_core::param::{InitScheme, SeededRng};
use fedmerge_core::schedule::{init_global_model, local_rng};

#[test]
fn one_full_batch_step_is_a_gradient_step() {
    let clients = cluster_federation(2, 1, 3);
    let data = &clients[0];
    for spec in [ModelSpec::logistic(8, 4), ModelSpec::mlp(8, 5, 4, Activation::Tanh)] {
        let theta0 = init_global_model(&spec, 4, 0, InitScheme::GlorotUniform);
        let lr = 0.37;
        let cfg = local(lr, 1, data.n_train());
        let (theta, delta) = local_sgd(&spec, &theta0, data, &cfg, &mut SeededRng::new(0, 0)).unwrap();
        let g = grad(&spec, &theta0, &data.split_batch(Split::Train).unwrap()).unwrap();
        for ((d, g), (t, t0)) in delta
            .as_slice()
            .iter()
            .zip(g.as_slice())
            .zip(theta.as_slice().iter().zip(theta0.as_slice()))
        {
            assert!((d + lr * g).abs() <= 1e-14, "{d} vs {}", -lr * g);
            assert_eq!(*t, t0 + d);
        }
    }
}

#[test]
fn local_training_depends_only_on_the_rng_stream() {
    let clients = cluster_federation(3, 1, 8);
    let spec = ModelSpec::mlp(8, 6, 4, Activation::Relu);
    let theta0 = init_global_model(&spec, 1, 0, InitScheme::GlorotUniform);
    let cfg = local(0.05, 3, 16);
    let run = |round| local_sgd(&spec, &theta0, &clients[1], &cfg, &mut local_rng(5, round, 1)).unwrap();
    assert_eq!(run(2), run(2));
    assert_ne!(run(2).1, run(3).1);
}

#[test]
fn empty_train_split_is_an_error() {
    let spec = ModelSpec::logistic(2, 2);
    let data = fedmerge_core::data::ClientDataset::with_splits(
        vec![0.0, 1.0],
        vec![1],
        2,
        2,
        None,
        vec![],
        vec![0],
        vec![],
    )
    .unwrap();
    let theta0 = init_global_model(&spec, 0, 0, InitScheme::Zeros);
    assert!(local_sgd(&spec, &theta0, &data, &local(0.1, 1, 4), &mut SeededRng::new(0, 0)).is_err());
}
