mod common;

use common::cluster_federation;
use fedmerge_core::convergence::{descent_check, DescentConfig, MergeObjective, Objective};
use fedmerge_core::data::ClientDataset;
use fedmerge_core::fedmerge::{FedMergeServer, MergeWeights, ModelSoup, ServerConfig, WeightMode};
use fedmerge_core::model::ModelSpec;
use fedmerge_core::param::InitScheme;
use fedmerge_core::LocalConfig;

/// Zero features with perfectly balanced labels: zero-initialized models
/// sit at a stationary point of the joint objective.
fn stationary_federation() -> Vec<ClientDataset> {
    (0..3)
        .map(|_| {
            let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
            ClientDataset::with_splits(vec![0.0; 24], labels, 2, 3, None, (0..12).collect(), vec![], vec![]).unwrap()
        })
        .collect()
}

#[test]
fn stationary_point_stays_put() {
    let clients = stationary_federation();
    let cfg = DescentConfig {
        rounds: 20,
        init: InitScheme::Zeros,
        ..DescentConfig::new(2)
    };
    let report = descent_check(ModelSpec::logistic(2, 3), &clients, &cfg).unwrap();
    let f0 = report.rounds[0].f_before;
    assert!((f0 - 3f64.ln()).abs() < 1e-12);
    // 1/3 is not representable: gradient and F move at round-off level only.
    assert!(report.rounds.iter().all(|r| (r.f_after - f0).abs() <= 1e-15 && r.grad_sq <= 1e-30));
    assert_eq!(report.violation_fraction, 0.0);
    assert!(report.running_avg.iter().all(|&v| v <= 1e-30));
}

#[test]
fn one_server_round_is_a_gradient_step_on_the_joint_objective() {
    let clients = cluster_federation(6, 2, 4);
    let spec = ModelSpec::logistic(8, 4);
    let obj = MergeObjective::new(spec, &clients, 3).unwrap();
    let soup = ModelSoup::random(&spec, 3, 1, InitScheme::GlorotUniform).unwrap();
    let weights = MergeWeights::from_params(
        6,
        3,
        (0..18).map(|k| ((k * 7 % 5) as f64 - 2.0) * 0.3).collect(),
        WeightMode::Softmax,
    )
    .unwrap();
    let x = obj.pack(&soup, &weights);
    let (_, g) = obj.value_and_grad(&x).unwrap();
    let eta = 0.05;
    let cfg = ServerConfig {
        eta_w: 1.0,
        head_only_dot: false,
        local: LocalConfig {
            lr: eta,
            epochs: 1,
            batch_size: 10_000,
        },
        ..ServerConfig::new(3, 1)
    };
    let mut server = FedMergeServer::with_state(spec, cfg, soup, weights).unwrap();
    server.step(&clients).unwrap();
    let next = obj.pack(server.soup(), server.weights());
    for ((a, b), gk) in next.iter().zip(&x).zip(&g) {
        assert!((a - (b - eta * gk)).abs() <= 1e-13, "{a} vs {}", b - eta * gk);
    }
}

#[test]
fn small_steps_respect_the_descent_bound() {
    let clients = cluster_federation(9, 3, 2);
    let cfg = DescentConfig {
        rounds: 60,
        ..DescentConfig::new(3)
    };
    let report = descent_check(ModelSpec::logistic(8, 4), &clients, &cfg).unwrap();
    assert!(report.l_hat > 0.0);
    assert!(report.violation_fraction <= 0.05, "{}", report.violation_fraction);
    let last = report.rounds.last().unwrap();
    assert!(last.f_after < report.rounds[0].f_before);
}

#[test]
fn more_models_lower_the_gradient_plateau() {
    let clients = cluster_federation(12, 3, 0);
    let plateau = |d: usize| {
        let cfg = DescentConfig {
            rounds: 100,
            ..DescentConfig::new(d)
        };
        descent_check(ModelSpec::logistic(8, 4), &clients, &cfg).unwrap().fit.unwrap().plateau
    };
    let p: Vec<f64> = [2, 4, 8].into_iter().map(plateau).collect();
    assert!(p[0] > p[1] && p[1] > p[2], "plateaus {p:?}");
}

#[test]
fn invalid_descent_settings_are_rejected() {
    let clients = stationary_federation();
    let spec = ModelSpec::logistic(2, 3);
    for cfg in [
        DescentConfig { rounds: 0, ..DescentConfig::new(2) },
        DescentConfig { eta_ratio: -1.0, ..DescentConfig::new(2) },
    ] {
        assert!(descent_check(spec, &clients, &cfg).is_err());
    }
}
