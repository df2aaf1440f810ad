//! Federated datasets: synthetic non-IID generators and CSV I/O.
//!
//! Two heterogeneity patterns are generated. *Cluster* federations assign
//! each client to one of `K` ground-truth tasks whose label rules conflict
//! (by default each task relabels classes with a cyclic shift, so no single
//! model can serve every task). *Dirichlet* federations draw each client's
//! label mix from `Dir(alpha * p)` over a shared pool.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::param::SeededRng;

const TAG_MEANS: u64 = 0xDA7A_0001;
const TAG_CLIENT: u64 = 0xDA7A_0002;
const TAG_POOL: u64 = 0xDA7A_0003;
const TAG_DIRICHLET: u64 = 0xDA7A_0004;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "federation.split",
                "fractions must lie in [0, 1] and sum to 1",
            ));
        }
        Ok(())
    }

    /// Contiguous `(train, val, test)` index lists for `n` samples.
    pub fn partition(&self, n: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let n_train = ((n as f64 * self.train).round() as usize).min(n);
        let n_val = ((n as f64 * self.val).round() as usize).min(n - n_train);
        (
            (0..n_train).collect(),
            (n_train..n_train + n_val).collect(),
            (n_train + n_val..n).collect(),
        )
    }
}

/// One client's local data with its train/val/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    /// Row-major `len × input_dim`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Ground-truth task, known only for synthetic cluster federations.
    pub cluster_id: Option<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientDataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        input_dim: usize,
        num_classes: usize,
        cluster_id: Option<usize>,
        split: &SplitFractions,
    ) -> Result<Self> {
        let (train, val, test) = split.partition(labels.len());
        Self::with_splits(features, labels, input_dim, num_classes, cluster_id, train, val, test)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_splits(
        features: Vec<f64>,
        labels: Vec<usize>,
        input_dim: usize,
        num_classes: usize,
        cluster_id: Option<usize>,
        train: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::EmptyDataset("client has no samples".into()));
        }
        if features.len() != n * input_dim {
            return Err(Error::InvalidArgument(format!(
                "{} feature values for {n} rows of width {input_dim}",
                features.len()
            )));
        }
        let mut seen = vec![false; n];
        for &i in train.iter().chain(&val).chain(&test) {
            if i >= n || seen[i] {
                return Err(Error::InvalidArgument(format!(
                    "split index {i} is out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("splits do not cover every sample".into()));
        }
        Ok(Self {
            features,
            labels,
            input_dim,
            num_classes,
            cluster_id,
            train,
            val,
            test,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Training sample count; the `n_i` used for aggregation weights.
    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(features, labels, self.input_dim)
    }

    /// The whole split as one batch, or `None` when it is empty.
    pub fn split_batch(&self, split: Split) -> Option<Batch> {
        let idx = self.split(split);
        if idx.is_empty() {
            None
        } else {
            self.batch(idx).ok()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Partition {
    Iid,
    Cluster {
        clusters: usize,
        /// Clients per cluster; balanced contiguous blocks when absent.
        #[serde(default)]
        assignment: Option<Vec<usize>>,
    },
    Dirichlet {
        alpha: f64,
    },
}

fn default_samples() -> usize {
    286
}

/// Shape of a federation: client count, heterogeneity pattern and sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationSpec {
    pub clients: usize,
    pub partition: Partition,
    /// Samples per client before splitting (286 gives 200 train samples
    /// under the default 0.7/0.15/0.15 split).
    #[serde(default = "default_samples")]
    pub samples_per_client: usize,
    /// Per-client sample counts; overrides `samples_per_client`.
    #[serde(default)]
    pub sizes: Option<Vec<usize>>,
    #[serde(default)]
    pub split: SplitFractions,
    /// Data seed. When absent, experiment runs substitute the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl FederationSpec {
    pub fn cluster(clients: usize, clusters: usize, seed: u64) -> Self {
        Self {
            clients,
            partition: Partition::Cluster {
                clusters,
                assignment: None,
            },
            samples_per_client: default_samples(),
            sizes: None,
            split: SplitFractions::default(),
            seed: Some(seed),
        }
    }

    pub fn dirichlet(clients: usize, alpha: f64, seed: u64) -> Self {
        Self {
            partition: Partition::Dirichlet { alpha },
            ..Self::cluster(clients, 1, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("federation.clients", "must be at least 1"));
        }
        match &self.partition {
            Partition::Iid => {}
            Partition::Cluster { clusters, assignment } => {
                if *clusters == 0 || *clusters > self.clients {
                    return Err(Error::config(
                        "federation.partition.clusters",
                        format!("must lie in 1..={} (got {clusters})", self.clients),
                    ));
                }
                if let Some(a) = assignment {
                    if a.len() != *clusters || a.iter().sum::<usize>() != self.clients {
                        return Err(Error::config(
                            "federation.partition.assignment",
                            format!("needs {clusters} counts summing to {}", self.clients),
                        ));
                    }
                }
            }
            Partition::Dirichlet { alpha } => {
                if !(*alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::config("federation.partition.alpha", "must be positive"));
                }
            }
        }
        if let Some(sizes) = &self.sizes {
            if sizes.len() != self.clients {
                return Err(Error::config(
                    "federation.sizes",
                    format!("expected {} entries, got {}", self.clients, sizes.len()),
                ));
            }
        }
        if self.client_sizes().contains(&0) {
            return Err(Error::config("federation.sizes", "every client needs at least one sample"));
        }
        self.split.validate()
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.sizes
            .clone()
            .unwrap_or_else(|| vec![self.samples_per_client; self.clients])
    }

    pub fn seed_value(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Ground-truth cluster of every client under a cluster partition.
    pub fn cluster_assignment(&self) -> Result<Vec<usize>> {
        let (k, counts) = match &self.partition {
            Partition::Iid => (1, None),
            Partition::Cluster { clusters, assignment } => (*clusters, assignment.clone()),
            Partition::Dirichlet { .. } => {
                return Err(Error::InvalidArgument(
                    "dirichlet federations have no cluster assignment".into(),
                ))
            }
        };
        let m = self.clients;
        Ok(match counts {
            Some(counts) => counts
                .iter()
                .enumerate()
                .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
                .collect(),
            None => (0..m).map(|i| i * k / m).collect(),
        })
    }
}

/// How each ground-truth task relabels the shared classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelPermutation {
    None,
    /// Task `k` maps class `c` to `(c + k) mod C`.
    #[default]
    Cyclic,
    /// Odd tasks swap labels 0 and 1.
    Swap01,
}

impl LabelPermutation {
    pub fn apply(self, class: usize, task: usize, num_classes: usize) -> usize {
        match self {
            LabelPermutation::None => class,
            LabelPermutation::Cyclic => (class + task) % num_classes,
            LabelPermutation::Swap01 if task % 2 == 1 && class < 2 => 1 - class,
            LabelPermutation::Swap01 => class,
        }
    }
}

fn one() -> f64 {
    1.0
}

/// Generating process of the synthetic Gaussian-mixture tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterTruthSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Scale of the class means, drawn as `class_sep * N(0, I)`.
    #[serde(default = "one")]
    pub class_sep: f64,
    /// Within-class standard deviation.
    #[serde(default = "one")]
    pub noise: f64,
    #[serde(default)]
    pub permutation: LabelPermutation,
    /// Scale of a per-task mean offset; zero keeps inputs identically
    /// distributed across tasks.
    #[serde(default)]
    pub cluster_shift: f64,
}

impl ClusterTruthSpec {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            num_classes,
            class_sep: 1.0,
            noise: 1.0,
            permutation: LabelPermutation::Cyclic,
            cluster_shift: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("data.input_dim", "must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("data.num_classes", "must be at least 2"));
        }
        if !(self.noise >= 0.0 && self.class_sep >= 0.0 && self.cluster_shift >= 0.0) {
            return Err(Error::config("data", "scales must be non-negative"));
        }
        Ok(())
    }
}

struct MixtureTruth {
    means: Vec<f64>,
    shifts: Vec<f64>,
    spec: ClusterTruthSpec,
}

impl MixtureTruth {
    fn draw(spec: ClusterTruthSpec, tasks: usize, seed: u64) -> Self {
        let mut rng = SeededRng::derived(seed, &[TAG_MEANS]);
        let d = spec.input_dim;
        let means = (0..spec.num_classes * d)
            .map(|_| spec.class_sep * rng.standard_normal())
            .collect();
        let shifts = (0..tasks * d)
            .map(|_| spec.cluster_shift * rng.standard_normal())
            .collect();
        Self { means, shifts, spec }
    }

    fn sample(&self, task: usize, rng: &mut SeededRng, features: &mut Vec<f64>) -> usize {
        let d = self.spec.input_dim;
        let class = rng.random_range(0..self.spec.num_classes);
        for j in 0..d {
            let x = self.means[class * d + j] + self.shifts[task * d + j] + self.spec.noise * rng.standard_normal();
            features.push(x);
        }
        self.spec.permutation.apply(class, task, self.spec.num_classes)
    }
}

/// Cluster non-IID federation: clients inherit their task's label rule.
///
/// `Partition::Iid` is accepted and treated as a single task.
pub fn gen_cluster_noniid(spec: &FederationSpec, truth: &ClusterTruthSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()
        .map_err(|e| Error::Infeasible(e.to_string()))?;
    truth.validate()?;
    let assignment = spec.cluster_assignment()?;
    let tasks = assignment.iter().copied().max().unwrap_or(0) + 1;
    let seed = spec.seed_value();
    let mixture = MixtureTruth::draw(*truth, tasks, seed);
    let sizes = spec.client_sizes();

    let mut clients = Vec::with_capacity(spec.clients);
    for (i, (&task, &n)) in assignment.iter().zip(&sizes).enumerate() {
        let mut rng = SeededRng::derived(seed, &[TAG_CLIENT, i as u64]);
        let mut features = Vec::with_capacity(n * truth.input_dim);
        let labels = (0..n).map(|_| mixture.sample(task, &mut rng, &mut features)).collect();
        clients.push(ClientDataset::new(
            features,
            labels,
            truth.input_dim,
            truth.num_classes,
            Some(task),
            &spec.split,
        )?);
    }
    Ok(clients)
}

/// A shared labelled sample pool for Dirichlet partitioning.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPool {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl LabeledPool {
    /// `n` samples from a single Gaussian-mixture task.
    pub fn gaussian(n: usize, truth: &ClusterTruthSpec, seed: u64) -> Result<Self> {
        truth.validate()?;
        let mixture = MixtureTruth::draw(*truth, 1, seed);
        let mut rng = SeededRng::derived(seed, &[TAG_POOL]);
        let mut features = Vec::with_capacity(n * truth.input_dim);
        let labels = (0..n).map(|_| mixture.sample(0, &mut rng, &mut features)).collect();
        Ok(Self {
            features,
            labels,
            input_dim: truth.input_dim,
            num_classes: truth.num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Dirichlet label-skew federation over `pool`.
///
/// Each client draws proportions `q ~ Dir(alpha * p)` where `p` is the pool's
/// label distribution, then takes samples without replacement. When a label
/// runs out, the client's remaining label mass is renormalized over labels
/// still in stock.
pub fn gen_dirichlet_noniid(spec: &FederationSpec, pool: &LabeledPool) -> Result<Vec<ClientDataset>> {
    spec.validate()
        .map_err(|e| Error::Infeasible(e.to_string()))?;
    let alpha = match spec.partition {
        Partition::Dirichlet { alpha } => alpha,
        _ => {
            return Err(Error::InvalidArgument(
                "gen_dirichlet_noniid requires a dirichlet partition".into(),
            ))
        }
    };
    let sizes = spec.client_sizes();
    let needed: usize = sizes.iter().sum();
    if needed > pool.len() {
        return Err(Error::Infeasible(format!(
            "clients need {needed} samples but the pool holds {}",
            pool.len()
        )));
    }

    let c = pool.num_classes;
    let seed = spec.seed_value();
    let mut rng = SeededRng::derived(seed, &[TAG_DIRICHLET]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in pool.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for list in &mut by_class {
        list.shuffle(&mut rng);
    }
    let prior: Vec<f64> = by_class
        .iter()
        .map(|l| l.len() as f64 / pool.len() as f64)
        .collect();

    let mut clients = Vec::with_capacity(spec.clients);
    for &n in &sizes {
        let mut q: Vec<f64> = prior
            .iter()
            .map(|&p| {
                if p == 0.0 {
                    0.0
                } else {
                    Gamma::new(alpha * p, 1.0)
                        .expect("positive shape")
                        .sample(&mut rng)
                }
            })
            .collect();
        let total: f64 = q.iter().sum();
        if total > 0.0 && total.is_finite() {
            q.iter_mut().for_each(|v| *v /= total);
        } else {
            q.clone_from(&prior);
        }

        let mut features = Vec::with_capacity(n * pool.input_dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let mut weights: Vec<f64> = (0..c)
                .map(|k| if by_class[k].is_empty() { 0.0 } else { q[k] })
                .collect();
            if weights.iter().sum::<f64>() <= 0.0 {
                weights = by_class.iter().map(|l| l.len() as f64).collect();
            }
            let class = sample_weighted(&weights, &mut rng);
            let idx = by_class[class].pop().expect("class has stock");
            features.extend_from_slice(&pool.features[idx * pool.input_dim..(idx + 1) * pool.input_dim]);
            labels.push(class);
        }
        clients.push(ClientDataset::new(
            features,
            labels,
            pool.input_dim,
            c,
            None,
            &spec.split,
        )?);
    }
    Ok(clients)
}

fn sample_weighted(weights: &[f64], rng: &mut SeededRng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut target = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = i;
        if target < w {
            return i;
        }
        target -= w;
    }
    last
}

fn default_label_column() -> String {
    "label".into()
}

/// Column layout of client CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub num_classes: usize,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    #[serde(default)]
    pub split: SplitFractions,
}

impl ColumnSchema {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            label_column: default_label_column(),
            split: SplitFractions::default(),
        }
    }
}

fn csv_err(path: &Path, row: usize, message: impl Into<String>) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

/// Loads one client per CSV file and standardizes features with mean and
/// standard deviation computed over the union of all train splits.
///
/// Rows are split contiguously (train first). Row numbers in errors count
/// data rows from 1, excluding the header.
pub fn load_csv_federation<P: AsRef<Path>>(paths: &[P], schema: &ColumnSchema) -> Result<Vec<ClientDataset>> {
    schema.split.validate()?;
    let mut raw = Vec::with_capacity(paths.len());
    let mut width = None;
    for path in paths {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(path)
            .map_err(|e| csv_err(path, 0, e.to_string()))?;
        let headers = reader.headers().map_err(|e| csv_err(path, 0, e.to_string()))?.clone();
        let label_col = headers
            .iter()
            .position(|h| h.trim() == schema.label_column)
            .ok_or_else(|| csv_err(path, 0, format!("missing `{}` column", schema.label_column)))?;
        let d = headers.len() - 1;
        if *width.get_or_insert(d) != d {
            return Err(csv_err(path, 0, format!("expected {} feature columns, found {d}", width.unwrap())));
        }

        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (r, record) in reader.records().enumerate() {
            let row = r + 1;
            let record = record.map_err(|e| csv_err(path, row, e.to_string()))?;
            if record.len() != headers.len() {
                return Err(csv_err(
                    path,
                    row,
                    format!("expected {} fields, found {}", headers.len(), record.len()),
                ));
            }
            for (c, cell) in record.iter().enumerate() {
                let cell = cell.trim();
                if c == label_col {
                    let label: usize = cell
                        .parse()
                        .map_err(|_| csv_err(path, row, format!("label `{cell}` is not a class index")))?;
                    if label >= schema.num_classes {
                        return Err(csv_err(
                            path,
                            row,
                            format!("unknown label {label} (expected < {})", schema.num_classes),
                        ));
                    }
                    labels.push(label);
                } else {
                    let v: f64 = cell
                        .parse()
                        .ok()
                        .filter(|v: &f64| v.is_finite())
                        .ok_or_else(|| csv_err(path, row, format!("column {c}: `{cell}` is not a number")))?;
                    features.push(v);
                }
            }
        }
        if labels.is_empty() {
            return Err(csv_err(path, 0, "file has no data rows"));
        }
        raw.push((features, labels));
    }

    let d = width.unwrap_or(0);
    let mut clients = raw
        .into_iter()
        .map(|(f, l)| ClientDataset::new(f, l, d, schema.num_classes, None, &schema.split))
        .collect::<Result<Vec<_>>>()?;
    standardize(&mut clients);
    Ok(clients)
}

fn standardize(clients: &mut [ClientDataset]) {
    let Some(d) = clients.first().map(|c| c.input_dim) else {
        return;
    };
    let mut sum = vec![0.0; d];
    let mut count = 0usize;
    for c in clients.iter() {
        for &i in &c.train {
            for (s, v) in sum.iter_mut().zip(c.row(i)) {
                *s += v;
            }
        }
        count += c.train.len();
    }
    if count == 0 {
        return;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut var = vec![0.0; d];
    for c in clients.iter() {
        for &i in &c.train {
            for ((v, x), m) in var.iter_mut().zip(c.row(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = (v / count as f64).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    for c in clients.iter_mut() {
        for row in c.features.chunks_mut(d) {
            for ((x, m), s) in row.iter_mut().zip(&mean).zip(&std) {
                *x = (*x - m) / s;
            }
        }
    }
}

/// Contents of `federation.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationManifest {
    pub m: usize,
    pub sizes: Vec<usize>,
    pub cluster_ids: Vec<Option<usize>>,
    pub seed: Option<u64>,
    pub input_dim: usize,
    pub num_classes: usize,
    pub split: SplitFractions,
    pub files: Vec<String>,
}

impl FederationManifest {
    pub fn describe(clients: &[ClientDataset], seed: Option<u64>, split: SplitFractions) -> Self {
        Self {
            m: clients.len(),
            sizes: clients.iter().map(ClientDataset::len).collect(),
            cluster_ids: clients.iter().map(|c| c.cluster_id).collect(),
            seed,
            input_dim: clients.first().map_or(0, |c| c.input_dim),
            num_classes: clients.first().map_or(0, |c| c.num_classes),
            split,
            files: (0..clients.len()).map(client_file_name).collect(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub fn client_file_name(i: usize) -> String {
    format!("client_{i:03}.csv")
}

/// Writes `client_NNN.csv` files plus `federation.json` into `dir`.
pub fn write_federation(
    dir: &Path,
    clients: &[ClientDataset],
    seed: Option<u64>,
    split: SplitFractions,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(clients.len());
    for (i, client) in clients.iter().enumerate() {
        let path = dir.join(client_file_name(i));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, 0, e.to_string()))?;
        let mut header: Vec<String> = (0..client.input_dim).map(|k| format!("f{k}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(|e| csv_err(&path, 0, e.to_string()))?;
        for r in 0..client.len() {
            let mut record: Vec<String> = client.row(r).iter().map(|v| v.to_string()).collect();
            record.push(client.labels[r].to_string());
            w.write_record(&record).map_err(|e| csv_err(&path, r + 1, e.to_string()))?;
        }
        w.flush()?;
        paths.push(path);
    }
    FederationManifest::describe(clients, seed, split).write(&dir.join("federation.json"))?;
    Ok(paths)
}
