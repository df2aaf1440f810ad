//! Experiment configuration, runs over seeds and on-disk artifacts.
//!
//! A run directory holds `summary.json`, `config.json` and one `seed_<s>/`
//! directory per seed containing `metrics.csv`, `diagnostics.csv`,
//! `federation.json` and (for methods with merge weights)
//! `weights_round_<R>.csv` snapshots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{block_structure_score, weights_file_name, write_weights_csv};
use crate::baselines::{build_baseline, BaselineConfig, BaselineMethod};
use crate::convergence::{descent_check, DescentConfig, DescentReport, SmoothnessProbe};
use crate::data::{
    gen_cluster_noniid, gen_dirichlet_noniid, load_csv_federation, write_federation, ClientDataset,
    ClusterTruthSpec, ColumnSchema, FederationManifest, FederationSpec, LabeledPool, Partition, Split,
};
use crate::error::{Error, Result};
use crate::fedmerge::{FedMergeServer, MergeWeights, ModelSoup, ServerConfig, WeightMode};
use crate::model::ModelSpec;
use crate::report::{RoundReport, RoundStats};
use crate::schedule::subset_rng;
use crate::sim::{simulate, Algorithm, Trajectory};

/// Version written as the first line of `metrics.csv`.
pub const METRICS_SCHEMA: u32 = 1;

pub const ENV_OUTPUT_DIR: &str = "FEDMERGE_OUTPUT_DIR";
pub const ENV_THREADS: &str = "FEDMERGE_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedmerge,
    Local,
    Fedavg,
    FedavgFt,
    Ifca,
    Fedem,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Fedmerge => "fedmerge",
            Method::Local => "local",
            Method::Fedavg => "fedavg",
            Method::FedavgFt => "fedavg_ft",
            Method::Ifca => "ifca",
            Method::Fedem => "fedem-lite",
        }
    }

    fn baseline(self) -> Option<BaselineMethod> {
        match self {
            Method::Fedmerge => None,
            Method::Local => Some(BaselineMethod::Local),
            Method::Fedavg => Some(BaselineMethod::Fedavg),
            Method::FedavgFt => Some(BaselineMethod::FedavgFt),
            Method::Ifca => Some(BaselineMethod::Ifca),
            Method::Fedem => Some(BaselineMethod::Fedem),
        }
    }
}

/// Where client data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Gaussian-mixture tasks. Cluster and IID partitions draw per-client
    /// samples directly; Dirichlet partitions draw from a shared pool twice
    /// the federation's total size.
    Synthetic(ClusterTruthSpec),
    /// One CSV file per client.
    Csv {
        paths: Vec<PathBuf>,
        num_classes: usize,
        #[serde(default = "default_label_column")]
        label_column: String,
    },
}

fn default_label_column() -> String {
    "label".into()
}

/// Options only some baselines read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineOptions {
    #[serde(default)]
    pub finetune_epochs: usize,
    #[serde(default = "default_assignment_split")]
    pub assignment_split: Split,
}

fn default_assignment_split() -> Split {
    Split::Train
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self {
            finetune_epochs: 0,
            assignment_split: Split::Train,
        }
    }
}

/// Settings for the `descent` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentOptions {
    /// Soup size; defaults to `server.d`.
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default = "default_descent_rounds")]
    pub rounds: usize,
    #[serde(default = "default_eta_ratio")]
    pub eta_ratio: f64,
    #[serde(default)]
    pub probe: SmoothnessProbe,
}

fn default_descent_rounds() -> usize {
    100
}

fn default_eta_ratio() -> f64 {
    0.1
}

impl Default for DescentOptions {
    fn default() -> Self {
        Self {
            d: None,
            rounds: default_descent_rounds(),
            eta_ratio: default_eta_ratio(),
            probe: SmoothnessProbe::default(),
        }
    }
}

fn default_eval_every() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// One experiment: a federation, a model, a method and a list of seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub federation: FederationSpec,
    pub data: DataSource,
    pub model: ModelSpec,
    pub method: Method,
    /// Round budget, local training and soup settings. Baselines read the
    /// shared fields (`d`, `rounds`, `clients_per_round`, `local`, `init`).
    pub server: ServerConfig,
    #[serde(default)]
    pub baseline: BaselineOptions,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Weight snapshot interval; defaults to `eval_every`. Round 0 and the
    /// final round are always written.
    #[serde(default)]
    pub snapshot_every: Option<usize>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub descent: Option<DescentOptions>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg = Self::from_json(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies the output-directory environment override.
    pub fn apply_env(&mut self) {
        if let Ok(dir) = std::env::var(ENV_OUTPUT_DIR) {
            if !dir.is_empty() {
                self.output_dir = PathBuf::from(dir);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        self.model.validate()?;
        let m = self.federation.clients;
        match &self.data {
            DataSource::Synthetic(truth) => {
                truth.validate()?;
                if truth.input_dim != self.model.input_dim {
                    return Err(Error::config(
                        "model.input_dim",
                        format!("data has {} features", truth.input_dim),
                    ));
                }
                if truth.num_classes != self.model.num_classes {
                    return Err(Error::config(
                        "model.num_classes",
                        format!("data has {} classes", truth.num_classes),
                    ));
                }
            }
            DataSource::Csv { paths, num_classes, .. } => {
                if paths.len() != m {
                    return Err(Error::config(
                        "data.paths",
                        format!("{} files for {m} clients", paths.len()),
                    ));
                }
                if *num_classes != self.model.num_classes {
                    return Err(Error::config("model.num_classes", format!("data has {num_classes} classes")));
                }
            }
        }
        self.server.validate(m)?;
        if matches!(self.method, Method::Ifca | Method::Fedem) && self.server.d < 2 {
            return Err(Error::config("server.d", "ifca and fedem need d >= 2"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if self.snapshot_every == Some(0) {
            return Err(Error::config("snapshot_every", "must be at least 1"));
        }
        if let Some(d) = &self.descent {
            if d.rounds == 0 || d.eta_ratio.is_nan() || d.eta_ratio <= 0.0 {
                return Err(Error::config("descent", "rounds and eta_ratio must be positive"));
            }
        }
        Ok(())
    }

    fn baseline_config(&self, method: BaselineMethod, seed: u64) -> BaselineConfig {
        BaselineConfig {
            method,
            d: self.server.d,
            finetune_epochs: self.baseline.finetune_epochs,
            rounds: self.server.rounds,
            clients_per_round: self.server.clients_per_round,
            local: self.server.local,
            init: self.server.init,
            assignment_split: self.baseline.assignment_split,
            seed,
        }
    }

    fn server_config(&self, seed: u64) -> ServerConfig {
        ServerConfig {
            seed,
            ..self.server.clone()
        }
    }
}

/// Builds the federation for `seed`; `federation.seed` wins when set.
pub fn build_federation(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ClientDataset>> {
    let mut spec = cfg.federation.clone();
    let data_seed = spec.seed.unwrap_or(seed);
    spec.seed = Some(data_seed);
    match &cfg.data {
        DataSource::Synthetic(truth) => match spec.partition {
            Partition::Dirichlet { .. } => {
                let total: usize = spec.client_sizes().iter().sum();
                let pool = LabeledPool::gaussian(2 * total, truth, data_seed)?;
                gen_dirichlet_noniid(&spec, &pool)
            }
            _ => gen_cluster_noniid(&spec, truth),
        },
        DataSource::Csv {
            paths,
            num_classes,
            label_column,
        } => {
            let schema = ColumnSchema {
                label_column: label_column.clone(),
                split: spec.split,
                ..ColumnSchema::new(*num_classes)
            };
            load_csv_federation(paths, &schema)
        }
    }
}

/// Writes the federation for `seed` as CSV files plus `federation.json`.
pub fn generate_federation(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<Vec<PathBuf>> {
    let clients = build_federation(cfg, seed)?;
    write_federation(dir, &clients, Some(cfg.federation.seed.unwrap_or(seed)), cfg.federation.split)
}

/// The configured method, ready to run on `m` clients.
pub fn build_algorithm(cfg: &ExperimentConfig, m: usize, seed: u64) -> Result<Box<dyn Algorithm>> {
    match cfg.method.baseline() {
        None => Ok(Box::new(FedMergeServer::new(cfg.model, cfg.server_config(seed), m)?)),
        Some(b) => {
            let bc = cfg.baseline_config(b, seed);
            build_baseline(cfg.model, bc, m)
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// `metrics.csv` body for a trajectory.
pub fn metrics_csv(reports: &[RoundReport]) -> String {
    let mut out = format!("# schema={METRICS_SCHEMA}\nround,client,split,loss,acc,n_i\n");
    for r in reports {
        for c in &r.per_client {
            let _ = writeln!(out, "{},{},{},{},{},{}", r.round, c.client, c.split, c.loss, c.acc, c.n);
        }
    }
    out
}

/// `diagnostics.csv` body: one line per completed round. Deterministic;
/// wall time goes to [`timing_csv`].
pub fn diagnostics_csv(stats: &[RoundStats]) -> String {
    let mut out =
        String::from("round,selected,skipped,sum_delta_sq,max_model_norm,simplex_violation,zero_sum_violation\n");
    for s in stats {
        let d = &s.diagnostics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.round,
            s.selected.len(),
            s.skipped.len(),
            d.sum_delta_sq,
            d.max_model_norm,
            fmt_opt(d.simplex_violation),
            fmt_opt(d.zero_sum_violation),
        );
    }
    out
}

/// `timing.csv` body: server-side wall time per round.
pub fn timing_csv(stats: &[RoundStats]) -> String {
    let mut out = String::from("round,server_time_ns\n");
    for s in stats {
        let _ = writeln!(out, "{},{}", s.round, s.diagnostics.server_time.as_nanos());
    }
    out
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub round: usize,
    pub client: usize,
    pub split: Split,
    pub loss: f64,
    pub acc: f64,
    pub n: usize,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path)?;
    let bad = |row: usize, message: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l == format!("# schema={METRICS_SCHEMA}") => {}
        other => return Err(bad(0, format!("unsupported schema line {other:?}"))),
    }
    lines.next();
    lines
        .enumerate()
        .map(|(r, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(r + 1, format!("expected 6 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(r + 1, format!("{s:?}: {e}")));
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(r + 1, format!("{s:?}: {e}")));
            let split = Split::ALL
                .into_iter()
                .find(|s| s.as_str() == f[2])
                .ok_or_else(|| bad(r + 1, format!("unknown split {:?}", f[2])))?;
            Ok(MetricRow {
                round: int(f[0])?,
                client: int(f[1])?,
                split,
                loss: num(f[3])?,
                acc: num(f[4])?,
                n: int(f[5])?,
            })
        })
        .collect()
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

/// Per-seed outcome recorded in `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// Evaluated round with the lowest weighted validation loss (earliest on
    /// ties); the final round when there is no validation split.
    pub best_round: usize,
    pub best_val_loss: Option<f64>,
    pub test_acc: f64,
    pub final_round: usize,
    pub final_test_acc: f64,
    /// Block-structure score of the final weight matrix, when defined.
    pub block_structure_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub seeds: Vec<SeedSummary>,
    /// Test accuracy at the best validation checkpoint.
    pub test_acc: Stat,
    pub final_test_acc: Stat,
    pub block_structure_score: Option<Stat>,
}

fn split_value(r: &RoundReport, split: Split, f: impl Fn(&crate::report::SplitMetrics) -> f64) -> Option<f64> {
    r.split(split).map(f)
}

/// Best-validation checkpoint selection over a trajectory.
pub fn summarize_seed(seed: u64, reports: &[RoundReport], score: Option<f64>) -> Result<SeedSummary> {
    let last = reports.last().ok_or_else(|| Error::InvalidArgument("empty trajectory".into()))?;
    let mut best: Option<(&RoundReport, f64)> = None;
    for r in reports {
        if let Some(v) = split_value(r, Split::Val, |s| s.loss) {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((r, v));
            }
        }
    }
    let (best_report, best_val_loss) = match best {
        Some((r, v)) => (r, Some(v)),
        None => (last, None),
    };
    let test = |r: &RoundReport| split_value(r, Split::Test, |s| s.acc).unwrap_or(f64::NAN);
    Ok(SeedSummary {
        seed,
        best_round: best_report.round,
        best_val_loss,
        test_acc: test(best_report),
        final_round: last.round,
        final_test_acc: test(last),
        block_structure_score: score,
    })
}

pub fn summarize(method: &str, seeds: Vec<SeedSummary>) -> Result<Summary> {
    let stat = |f: &dyn Fn(&SeedSummary) -> f64| Stat::of(&seeds.iter().map(f).collect::<Vec<_>>());
    let scores: Vec<f64> = seeds.iter().filter_map(|s| s.block_structure_score).collect();
    Ok(Summary {
        method: method.to_string(),
        test_acc: stat(&|s| s.test_acc).ok_or_else(|| Error::InvalidArgument("no seeds".into()))?,
        final_test_acc: stat(&|s| s.final_test_acc).ok_or_else(|| Error::InvalidArgument("no seeds".into()))?,
        block_structure_score: if scores.len() == seeds.len() { Stat::of(&scores) } else { None },
        seeds,
    })
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub trajectory: Trajectory,
    /// `(round, matrix)` for every weight snapshot taken.
    pub snapshots: Vec<(usize, Vec<Vec<f64>>)>,
    pub summary: SeedSummary,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub runs: Vec<SeedRun>,
    pub summary: Summary,
}

/// Ground-truth ids when every client has one.
fn cluster_ids(clients: &[ClientDataset]) -> Option<Vec<usize>> {
    clients.iter().map(|c| c.cluster_id).collect()
}

/// Runs `alg` for `rounds` rounds and writes the per-seed artifacts into
/// `dir` (when given).
pub fn run_algorithm(
    alg: &mut dyn Algorithm,
    clients: &[ClientDataset],
    rounds: usize,
    eval_every: usize,
    snapshot_every: usize,
    seed: u64,
    dir: Option<&Path>,
) -> Result<SeedRun> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let snapshot_every = snapshot_every.max(1);
    let mut snapshots = Vec::new();
    let trajectory = simulate(alg, clients, rounds, eval_every, |round, a| {
        if round % snapshot_every == 0 || round == rounds {
            if let Some(matrix) = a.weight_matrix() {
                if let Some(dir) = dir {
                    write_weights_csv(&dir.join(weights_file_name(round)), &matrix)?;
                }
                snapshots.push((round, matrix));
            }
        }
        Ok(())
    })?;
    let score = match (snapshots.last(), cluster_ids(clients)) {
        (Some((_, matrix)), Some(ids)) => block_structure_score(matrix, &ids),
        _ => None,
    };
    let summary = summarize_seed(seed, &trajectory.reports, score)?;
    if let Some(dir) = dir {
        fs::write(dir.join("metrics.csv"), metrics_csv(&trajectory.reports))?;
        fs::write(dir.join("diagnostics.csv"), diagnostics_csv(&trajectory.stats))?;
        fs::write(dir.join("timing.csv"), timing_csv(&trajectory.stats))?;
    }
    Ok(SeedRun {
        seed,
        dir: dir.map(Path::to_path_buf).unwrap_or_default(),
        trajectory,
        snapshots,
        summary,
    })
}

pub fn seed_dir(output_dir: &Path, seed: u64) -> PathBuf {
    output_dir.join(format!("seed_{seed}"))
}

/// Runs `f` on a pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("cannot start {n} threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs every seed and writes all artifacts under `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    with_threads(threads, || {
        fs::create_dir_all(&cfg.output_dir)?;
        fs::write(cfg.output_dir.join("config.json"), cfg.to_json()?)?;
        let mut runs = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let clients = build_federation(cfg, seed)?;
            let dir = seed_dir(&cfg.output_dir, seed);
            fs::create_dir_all(&dir)?;
            FederationManifest::describe(&clients, Some(cfg.federation.seed.unwrap_or(seed)), cfg.federation.split)
                .write(&dir.join("federation.json"))?;
            let mut alg = build_algorithm(cfg, clients.len(), seed)?;
            log::info!("{} seed {seed}: {} rounds on {} clients", cfg.method.label(), cfg.server.rounds, clients.len());
            runs.push(run_algorithm(
                alg.as_mut(),
                &clients,
                cfg.server.rounds,
                cfg.eval_every,
                cfg.snapshot_every.unwrap_or(cfg.eval_every),
                seed,
                Some(&dir),
            )?);
        }
        let summary = summarize(cfg.method.label(), runs.iter().map(|r| r.summary.clone()).collect())?;
        fs::write(cfg.output_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        Ok(ExperimentOutcome { runs, summary })
    })?
}

/// One row of the fixed-weights ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `"dynamic"` or `"fixed(k/d)"`.
    pub variant: String,
    pub fraction: Option<f64>,
    pub models_per_client: Option<usize>,
    pub test_acc: Stat,
    /// Largest change of any frozen weight over training (zero by contract).
    pub max_weight_drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub d: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn dynamic(&self) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.fraction.is_none())
    }
}

/// Dynamic FedMerge versus frozen uniform weights over a random
/// `max(1, round(fraction * d))`-model subset per client, same seeds and
/// budgets. Nothing is written to disk.
pub fn ablate_fixed(cfg: &ExperimentConfig, fractions: &[f64], threads: Option<usize>) -> Result<AblationTable> {
    cfg.validate()?;
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::config("fractions", format!("{f} is outside (0, 1]")));
    }
    let d = cfg.server.d;
    with_threads(threads, || {
        let mut dynamic = Vec::new();
        let mut fixed = vec![(Vec::new(), 0.0f64); fractions.len()];
        for &seed in &cfg.seeds {
            let clients = build_federation(cfg, seed)?;
            let m = clients.len();
            let rounds = cfg.server.rounds;
            let mut alg = FedMergeServer::new(cfg.model, cfg.server_config(seed), m)?;
            let run = run_algorithm(&mut alg, &clients, rounds, cfg.eval_every, usize::MAX, seed, None)?;
            dynamic.push(run.summary.test_acc);
            for (v, &fraction) in fractions.iter().enumerate() {
                let server = ServerConfig {
                    weight_mode: WeightMode::Unconstrained,
                    freeze_weights: true,
                    ..cfg.server_config(seed)
                };
                let weights = MergeWeights::fixed_subsets(m, d, fraction, &mut subset_rng(seed, v as u64))?;
                let initial = weights.params().to_vec();
                let soup = ModelSoup::random(&cfg.model, d, seed, server.init)?;
                let mut alg = FedMergeServer::with_state(cfg.model, server, soup, weights)?;
                let run = run_algorithm(&mut alg, &clients, rounds, cfg.eval_every, usize::MAX, seed, None)?;
                let drift = alg
                    .weights()
                    .params()
                    .iter()
                    .zip(&initial)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                fixed[v].0.push(run.summary.test_acc);
                fixed[v].1 = fixed[v].1.max(drift);
            }
        }
        let mut rows = vec![AblationRow {
            variant: "dynamic".into(),
            fraction: None,
            models_per_client: None,
            test_acc: Stat::of(&dynamic).expect("seeds validated non-empty"),
            max_weight_drift: 0.0,
        }];
        for (&fraction, (accs, drift)) in fractions.iter().zip(fixed) {
            let k = models_per_client(fraction, d);
            rows.push(AblationRow {
                variant: format!("fixed({k}/{d})"),
                fraction: Some(fraction),
                models_per_client: Some(k),
                test_acc: Stat::of(&accs).expect("seeds validated non-empty"),
                max_weight_drift: drift,
            });
        }
        Ok(AblationTable { d, rows })
    })?
}

/// Subset size used by the fixed-weights ablation.
pub fn models_per_client(fraction: f64, d: usize) -> usize {
    ((fraction * d as f64).round() as usize).clamp(1, d)
}

/// Descent diagnostics on the configured federation and model.
pub fn run_descent(cfg: &ExperimentConfig, seed: u64, d: Option<usize>, eta_ratio: Option<f64>) -> Result<DescentReport> {
    cfg.validate()?;
    let opts = cfg.descent.clone().unwrap_or_default();
    let clients = build_federation(cfg, seed)?;
    let dc = DescentConfig {
        d: d.or(opts.d).unwrap_or(cfg.server.d),
        rounds: opts.rounds,
        eta_ratio: eta_ratio.unwrap_or(opts.eta_ratio),
        probe: opts.probe,
        init: cfg.server.init,
        seed,
    };
    descent_check(cfg.model, &clients, &dc)
}
