use std::fs;
use std::path::Path;

use fedmerge_core::analysis::{available_snapshots, block_structure_score, read_weights_csv, weights_export};
use fedmerge_core::data::{FederationManifest, Split};
use fedmerge_core::experiment::{
    ablate_fixed, read_metrics, run_experiment, seed_dir, ExperimentConfig, Method, Stat, Summary,
};
use fedmerge_core::Error;

const SMALL: &str = r#"{
  "federation": {
    "clients": 6,
    "partition": { "type": "cluster", "clusters": 2 },
    "samples_per_client": 60
  },
  "data": { "source": "synthetic", "input_dim": 4, "num_classes": 3, "class_sep": 2.0 },
  "model": { "kind": "logistic", "input_dim": 4, "num_classes": 3 },
  "method": "fedmerge",
  "server": {
    "d": 3,
    "rounds": 6,
    "eta_w": 5.0,
    "clients_per_round": 4,
    "local": { "lr": 0.1, "epochs": 1, "batch_size": 16 }
  },
  "eval_every": 2,
  "snapshot_every": 3,
  "seeds": [1]
}"#;

fn config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json(SMALL).unwrap();
    cfg.output_dir = dir.to_path_buf();
    cfg
}

fn read_summary(dir: &Path) -> Summary {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    run_experiment(&cfg, None).unwrap();
    let run = seed_dir(tmp.path(), 1);
    for f in ["metrics.csv", "diagnostics.csv", "timing.csv", "federation.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(tmp.path().join("config.json").is_file());
    assert_eq!(ExperimentConfig::load(&tmp.path().join("config.json")).unwrap(), cfg);
    // Round 0, every third round, and the final round.
    assert_eq!(available_snapshots(&run).unwrap(), vec![0, 3, 6]);
    let rounds: Vec<usize> = read_metrics(&run.join("metrics.csv")).unwrap().iter().map(|r| r.round).collect();
    let mut distinct = rounds.clone();
    distinct.dedup();
    assert_eq!(distinct, vec![0, 2, 4, 6]);
}

#[test]
fn zero_rounds_summarizes_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.server.rounds = 0;
    let outcome = run_experiment(&cfg, None).unwrap();
    let s = &outcome.summary.seeds[0];
    assert_eq!((s.best_round, s.final_round), (0, 0));
    assert_eq!(available_snapshots(&seed_dir(tmp.path(), 1)).unwrap(), vec![0]);
    // Uniform initial weights carry no block structure.
    assert_eq!(s.block_structure_score, Some(0.0));
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(tree(&p));
        } else {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut ca = config(a.path());
    let mut cb = config(b.path());
    ca.seeds = vec![1, 2];
    cb.seeds = vec![1, 2];
    run_experiment(&ca, Some(1)).unwrap();
    run_experiment(&cb, Some(3)).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), tb.len());
    for ((na, ba), (nb, bb)) in ta.iter().zip(&tb) {
        assert_eq!(na, nb);
        // Wall time is the only non-reproducible output.
        if na != "config.json" && !na.ends_with("timing.csv") {
            assert_eq!(ba, bb, "{na}");
        }
    }
}

#[test]
fn seed_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.seeds = vec![3, 4, 5];
    let three = run_experiment(&cfg, None).unwrap().summary;
    let accs: Vec<f64> = three.seeds.iter().map(|s| s.test_acc).collect();
    assert_eq!(three.test_acc, Stat::of(&accs).unwrap());
    assert!(three.test_acc.std > 0.0);
    assert!(three.block_structure_score.is_some());

    cfg.seeds = vec![3];
    let one = run_experiment(&cfg, None).unwrap().summary;
    assert_eq!(one.test_acc.std, 0.0);
    assert_eq!(one.test_acc.mean, three.seeds[0].test_acc);
}

/// Weighted split averages straight from `metrics.csv`.
fn split_avg(rows: &[fedmerge_core::experiment::MetricRow], round: usize, split: Split) -> (f64, f64) {
    let mut n = 0.0;
    let (mut loss, mut acc) = (0.0, 0.0);
    for r in rows.iter().filter(|r| r.round == round && r.split == split) {
        loss += r.loss * r.n as f64;
        acc += r.acc * r.n as f64;
        n += r.n as f64;
    }
    (loss / n, acc / n)
}

#[test]
fn summary_is_recomputable_from_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.seeds = vec![7, 8];
    run_experiment(&cfg, None).unwrap();
    let summary = read_summary(tmp.path());
    for s in &summary.seeds {
        let rows = read_metrics(&seed_dir(tmp.path(), s.seed).join("metrics.csv")).unwrap();
        let mut rounds: Vec<usize> = rows.iter().map(|r| r.round).collect();
        rounds.dedup();
        // Earliest round with the lowest validation loss.
        let mut best = (rounds[0], f64::INFINITY);
        for &r in &rounds {
            let v = split_avg(&rows, r, Split::Val).0;
            if v < best.1 {
                best = (r, v);
            }
        }
        assert_eq!(s.best_round, best.0);
        assert!((s.best_val_loss.unwrap() - best.1).abs() <= 1e-12);
        assert!((s.test_acc - split_avg(&rows, best.0, Split::Test).1).abs() <= 1e-12);
        let last = *rounds.last().unwrap();
        assert!((s.final_test_acc - split_avg(&rows, last, Split::Test).1).abs() <= 1e-12);

        let run = seed_dir(tmp.path(), s.seed);
        let ids: Vec<usize> = FederationManifest::read(&run.join("federation.json"))
            .unwrap()
            .cluster_ids
            .into_iter()
            .map(Option::unwrap)
            .collect();
        let matrix = read_weights_csv(&run.join("weights_round_6.csv")).unwrap();
        assert_eq!(s.block_structure_score, block_structure_score(&matrix, &ids));
    }
    let accs: Vec<f64> = summary.seeds.iter().map(|s| s.test_acc).collect();
    assert_eq!(summary.test_acc, Stat::of(&accs).unwrap());
}

#[test]
fn invalid_configs_name_the_field() {
    let field_of = |cfg: &ExperimentConfig| match cfg.validate() {
        Err(Error::Config { field, .. }) => field,
        other => panic!("expected a config error, got {other:?}"),
    };
    let base = ExperimentConfig::from_json(SMALL).unwrap();

    let mut c = base.clone();
    c.server.d = 0;
    assert_eq!(field_of(&c), "server.d");

    let mut c = base.clone();
    c.server.clients_per_round = Some(99);
    assert_eq!(field_of(&c), "server.clients_per_round");

    let mut c = base.clone();
    c.model.input_dim = 5;
    assert_eq!(field_of(&c), "model.input_dim");

    let mut c = base.clone();
    c.method = Method::Ifca;
    c.server.d = 1;
    assert_eq!(field_of(&c), "server.d");

    let mut c = base.clone();
    c.seeds.clear();
    assert_eq!(field_of(&c), "seeds");

    let mut c = base;
    c.server.local.lr = -1.0;
    assert!(field_of(&c).ends_with("local.lr"));

    let bad_json = SMALL.replace("\"rounds\": 6", "\"rounds\": \"six\"");
    assert!(matches!(ExperimentConfig::from_json(&bad_json), Err(Error::Config { .. })));
}

#[test]
fn every_method_runs_through_the_harness() {
    for method in [Method::Local, Method::Fedavg, Method::FedavgFt, Method::Ifca, Method::Fedem] {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = config(tmp.path());
        cfg.method = method;
        cfg.server.rounds = 2;
        let outcome = run_experiment(&cfg, None).unwrap();
        assert_eq!(outcome.summary.method, method.label());
        // Only methods with merge weights write snapshots.
        assert!(available_snapshots(&seed_dir(tmp.path(), 1)).unwrap().is_empty());
        assert!(outcome.summary.block_structure_score.is_none());
    }
}

#[test]
fn single_model_full_subset_ablation_is_fedavg() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.server.d = 1;
    cfg.seeds = vec![2, 3];
    let table = ablate_fixed(&cfg, &[1.0], None).unwrap();
    let fixed = &table.rows[1];
    assert_eq!(fixed.variant, "fixed(1/1)");
    assert_eq!(fixed.max_weight_drift, 0.0);

    cfg.method = Method::Fedavg;
    let fedavg = run_experiment(&cfg, None).unwrap().summary;
    assert_eq!(fixed.test_acc, fedavg.test_acc);
}

#[test]
fn frozen_weights_never_drift() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    let table = ablate_fixed(&cfg, &[1.0 / 3.0, 1.0], None).unwrap();
    assert_eq!(table.rows.len(), 3);
    assert!(table.dynamic().is_some());
    assert!(table.rows.iter().all(|r| r.max_weight_drift == 0.0));
    assert!(ablate_fixed(&cfg, &[1.5], None).is_err());
}

#[test]
fn weights_export_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    run_experiment(&config(tmp.path()), None).unwrap();
    let run = seed_dir(tmp.path(), 1);
    let export = weights_export(&run, 3).unwrap();
    assert_eq!(export.matrix.len(), 6);
    assert!(export.matrix.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() <= 1e-12));
    assert!(export.score.is_some());
    match weights_export(&run, 4) {
        Err(Error::MissingSnapshot { available, .. }) => assert_eq!(available, vec![0, 3, 6]),
        other => panic!("expected a missing-snapshot error, got {other:?}"),
    }
}
