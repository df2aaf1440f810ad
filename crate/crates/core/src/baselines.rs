//! Comparison methods built on the same models, data and schedule.
//!
//! * `Local`: every client trains its own model; no communication.
//! * `FedAvg`: one global model, sample-weighted averaging of updates.
//! * `FedAvgFt`: FedAvg whose global model is fine-tuned locally before
//!   evaluation.
//! * `Ifca`: `d` cluster models; each client joins the model with the
//!   lowest loss on its data (ties go to the lowest index).
//! * `FedEmLite`: `d` models trained by every client with loss-softmax
//!   responsibilities; predictions are responsibility-weighted logit
//!   ensembles. A simplified stand-in for full EM-based FedEM.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, Split};
use crate::error::{Error, Result};
use crate::fedmerge::softmax_row;
use crate::model::{forward, local_sgd, LocalConfig, ModelSpec};
use crate::param::{InitScheme, ParamVector};
use crate::report::{Diagnostics, Predictor, RoundReport, RoundStats};
use crate::schedule::{finetune_rng, init_global_model, local_model_rng, local_rng, sample_clients};
use crate::sim::{simulate, Algorithm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Local,
    Fedavg,
    FedavgFt,
    Ifca,
    Fedem,
}

impl BaselineMethod {
    pub fn label(self) -> &'static str {
        match self {
            BaselineMethod::Local => "local",
            BaselineMethod::Fedavg => "fedavg",
            BaselineMethod::FedavgFt => "fedavg_ft",
            BaselineMethod::Ifca => "ifca",
            BaselineMethod::Fedem => "fedem-lite",
        }
    }
}

fn default_d() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    /// Model count for `ifca` and `fedem`.
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default)]
    pub finetune_epochs: usize,
    pub rounds: usize,
    #[serde(default)]
    pub clients_per_round: Option<usize>,
    #[serde(default)]
    pub local: LocalConfig,
    #[serde(default)]
    pub init: InitScheme,
    /// Split used by IFCA to pick a cluster.
    #[serde(default = "default_assignment_split")]
    pub assignment_split: Split,
    #[serde(default)]
    pub seed: u64,
}

fn default_assignment_split() -> Split {
    Split::Train
}

impl BaselineConfig {
    pub fn new(method: BaselineMethod, rounds: usize) -> Self {
        Self {
            method,
            d: 1,
            finetune_epochs: 0,
            rounds,
            clients_per_round: None,
            local: LocalConfig::default(),
            init: InitScheme::default(),
            assignment_split: Split::Train,
            seed: 0,
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if matches!(self.method, BaselineMethod::Ifca | BaselineMethod::Fedem) && self.d < 2 {
            // d = 1 is allowed programmatically (it reduces to FedAvg) but a
            // configured multi-model baseline must actually have several models.
            return Err(Error::config("baseline.d", "ifca and fedem need d >= 2"));
        }
        if let Some(k) = self.clients_per_round {
            if k == 0 || k > m {
                return Err(Error::config(
                    "baseline.clients_per_round",
                    format!("must lie in 1..={m} (got {k})"),
                ));
            }
        }
        self.local.validate("baseline.local")
    }

    fn participants(&self, m: usize) -> usize {
        self.clients_per_round.unwrap_or(m).min(m)
    }
}

fn sizes(clients: &[ClientDataset]) -> Vec<usize> {
    clients.iter().map(ClientDataset::n_train).collect()
}

/// Per-client local updates in client order, and the skipped clients.
type Trained = (Vec<(usize, ParamVector)>, Vec<usize>);

/// Trains `model` locally for each selected client with a non-empty train
/// split, in parallel. Returns `(client, delta)` in client order plus the
/// skipped clients.
fn train_selected<F>(
    spec: &ModelSpec,
    clients: &[ClientDataset],
    selected: &[usize],
    local: &LocalConfig,
    seed: u64,
    round: usize,
    start_model: F,
) -> Result<Trained>
where
    F: Fn(usize) -> ParamVector + Sync,
{
    let results: Vec<Option<ParamVector>> = selected
        .par_iter()
        .map(|&i| {
            if clients[i].train.is_empty() {
                return Ok(None);
            }
            let mut rng = local_rng(seed, round, i);
            local_sgd(spec, &start_model(i), &clients[i], local, &mut rng).map(|(_, d)| Some(d))
        })
        .collect::<Result<_>>()?;
    let mut deltas = Vec::new();
    let mut skipped = Vec::new();
    for (&i, r) in selected.iter().zip(results) {
        match r {
            Some(d) => deltas.push((i, d)),
            None => skipped.push(i),
        }
    }
    Ok((deltas, skipped))
}

fn stats(round: usize, selected: Vec<usize>, skipped: Vec<usize>, diagnostics: Diagnostics) -> RoundStats {
    let warnings = skipped
        .iter()
        .map(|i| format!("client {i} has an empty train split; skipped"))
        .collect();
    RoundStats {
        round,
        selected,
        skipped,
        diagnostics,
        warnings,
    }
}

fn check_clients(expected: usize, clients: &[ClientDataset]) -> Result<()> {
    if clients.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "method was built for {expected} clients, got {}",
            clients.len()
        )));
    }
    Ok(())
}

/// Federated averaging with server step 1.
#[derive(Debug, Clone)]
pub struct FedAvg {
    spec: ModelSpec,
    cfg: BaselineConfig,
    m: usize,
    global: ParamVector,
    round: usize,
}

impl FedAvg {
    pub fn new(spec: ModelSpec, cfg: BaselineConfig, m: usize) -> Result<Self> {
        let global = init_global_model(&spec, cfg.seed, 0, cfg.init);
        Self::with_model(spec, cfg, m, global)
    }

    pub fn with_model(spec: ModelSpec, cfg: BaselineConfig, m: usize, global: ParamVector) -> Result<Self> {
        spec.validate()?;
        if global.len() != spec.param_count() {
            return Err(Error::LayoutMismatch("global model does not match the model spec".into()));
        }
        Ok(Self {
            spec,
            cfg,
            m,
            global,
            round: 0,
        })
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }
}

impl Algorithm for FedAvg {
    fn name(&self) -> &str {
        "fedavg"
    }

    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn step(&mut self, clients: &[ClientDataset]) -> Result<RoundStats> {
        check_clients(self.m, clients)?;
        let round = self.round;
        let selected = sample_clients(self.cfg.seed, round, self.m, self.cfg.participants(self.m));
        let global = &self.global;
        let (deltas, skipped) =
            train_selected(&self.spec, clients, &selected, &self.cfg.local, self.cfg.seed, round, |_| {
                global.clone()
            })?;
        let n = sizes(clients);
        let total: usize = deltas.iter().map(|(i, _)| n[*i]).sum();
        let mut aggregate = self.global.zeros_like();
        if total > 0 {
            for (i, delta) in &deltas {
                aggregate.add_scaled(n[*i] as f64 / total as f64, delta)?;
            }
        }
        self.global.add_scaled(1.0, &aggregate)?;
        self.round += 1;
        let diagnostics = Diagnostics {
            sum_delta_sq: deltas.iter().map(|(_, d)| d.norm_sq()).sum(),
            max_model_norm: self.global.norm(),
            ..Diagnostics::default()
        };
        Ok(stats(self.round, selected, skipped, diagnostics))
    }

    fn predictor(&self, _client: usize, _data: &ClientDataset) -> Result<Predictor> {
        Ok(Predictor::Single(self.global.clone()))
    }
}

/// FedAvg evaluated after `finetune_epochs` of local training.
#[derive(Debug, Clone)]
pub struct FedAvgFt {
    inner: FedAvg,
}

impl FedAvgFt {
    pub fn new(spec: ModelSpec, cfg: BaselineConfig, m: usize) -> Result<Self> {
        Ok(Self {
            inner: FedAvg::new(spec, cfg, m)?,
        })
    }
}

impl Algorithm for FedAvgFt {
    fn name(&self) -> &str {
        "fedavg_ft"
    }

    fn spec(&self) -> &ModelSpec {
        &self.inner.spec
    }

    fn step(&mut self, clients: &[ClientDataset]) -> Result<RoundStats> {
        self.inner.step(clients)
    }

    fn predictor(&self, client: usize, data: &ClientDataset) -> Result<Predictor> {
        let cfg = &self.inner.cfg;
        if cfg.finetune_epochs == 0 || data.train.is_empty() {
            return Ok(Predictor::Single(self.inner.global.clone()));
        }
        let local = LocalConfig {
            epochs: cfg.finetune_epochs,
            ..cfg.local
        };
        let mut rng = finetune_rng(cfg.seed, self.inner.round, client);
        let (tuned, _) = local_sgd(&self.inner.spec, &self.inner.global, data, &local, &mut rng)?;
        Ok(Predictor::Single(tuned))
    }
}

/// Independent per-client training.
#[derive(Debug, Clone)]
pub struct LocalOnly {
    spec: ModelSpec,
    cfg: BaselineConfig,
    models: Vec<ParamVector>,
    round: usize,
}

impl LocalOnly {
    pub fn new(spec: ModelSpec, cfg: BaselineConfig, m: usize) -> Result<Self> {
        spec.validate()?;
        let init = init_global_model(&spec, cfg.seed, 0, cfg.init);
        Ok(Self {
            spec,
            cfg,
            models: vec![init; m],
            round: 0,
        })
    }

    pub fn model(&self, client: usize) -> &ParamVector {
        &self.models[client]
    }
}

impl Algorithm for LocalOnly {
    fn name(&self) -> &str {
        "local"
    }

    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn step(&mut self, clients: &[ClientDataset]) -> Result<RoundStats> {
        let m = self.models.len();
        check_clients(m, clients)?;
        let round = self.round;
        let selected = sample_clients(self.cfg.seed, round, m, self.cfg.participants(m));
        let models = &self.models;
        let (deltas, skipped) =
            train_selected(&self.spec, clients, &selected, &self.cfg.local, self.cfg.seed, round, |i| {
                models[i].clone()
            })?;
        let sum_delta_sq = deltas.iter().map(|(_, d)| d.norm_sq()).sum();
        for (i, delta) in deltas {
            self.models[i].add_scaled(1.0, &delta)?;
        }
        self.round += 1;
        let diagnostics = Diagnostics {
            sum_delta_sq,
            max_model_norm: self.models.iter().map(ParamVector::norm).fold(0.0, f64::max),
            ..Diagnostics::default()
        };
        Ok(stats(self.round, selected, skipped, diagnostics))
    }

    fn predictor(&self, client: usize, _data: &ClientDataset) -> Result<Predictor> {
        Ok(Predictor::Single(self.models[client].clone()))
    }
}

fn split_loss(spec: &ModelSpec, theta: &ParamVector, data: &ClientDataset, split: Split) -> Result<f64> {
    match data.split_batch(split) {
        Some(batch) => Ok(forward(spec, theta, &batch)?.0),
        None => Ok(0.0),
    }
}

/// Iterative federated clustering.
#[derive(Debug, Clone)]
pub struct Ifca {
    spec: ModelSpec,
    cfg: BaselineConfig,
    m: usize,
    models: Vec<ParamVector>,
    round: usize,
    last_assignment: Vec<Option<usize>>,
}

impl Ifca {
    pub fn new(spec: ModelSpec, cfg: BaselineConfig, m: usize) -> Result<Self> {
        let models = (0..cfg.d.max(1))
            .map(|j| init_global_model(&spec, cfg.seed, j, cfg.init))
            .collect();
        Self::with_models(spec, cfg, m, models)
    }

    pub fn with_models(spec: ModelSpec, cfg: BaselineConfig, m: usize, models: Vec<ParamVector>) -> Result<Self> {
        spec.validate()?;
        if models.is_empty() || models.iter().any(|t| t.len() != spec.param_count()) {
            return Err(Error::InvalidArgument("ifca needs at least one model matching the model layout".into()));
        }
        Ok(Self {
            spec,
            cfg,
            m,
            models,
            round: 0,
            last_assignment: vec![None; m],
        })
    }

    pub fn models(&self) -> &[ParamVector] {
        &self.models
    }

    /// Model with the lowest loss on the client's assignment split; ties go
    /// to the lowest index.
    pub fn assign(&self, data: &ClientDataset) -> Result<usize> {
        let mut best = (0, f64::INFINITY);
        for (j, theta) in self.models.iter().enumerate() {
            let loss = split_loss(&self.spec, theta, data, self.cfg.assignment_split)?;
            if loss < best.1 {
                best = (j, loss);
            }
        }
        Ok(best.0)
    }

    /// Cluster chosen by each client the last time it participated.
    pub fn last_assignment(&self) -> &[Option<usize>] {
        &self.last_assignment
    }
}

impl Algorithm for Ifca {
    fn name(&self) -> &str {
        "ifca"
    }

    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn step(&mut self, clients: &[ClientDataset]) -> Result<RoundStats> {
        check_clients(self.m, clients)?;
        let round = self.round;
        let selected = sample_clients(self.cfg.seed, round, self.m, self.cfg.participants(self.m));
        let choices: Vec<usize> = selected
            .par_iter()
            .map(|&i| self.assign(&clients[i]))
            .collect::<Result<_>>()?;
        let models = &self.models;
        let choice_of = |i: usize| choices[selected.binary_search(&i).expect("selected client")];
        let (deltas, skipped) =
            train_selected(&self.spec, clients, &selected, &self.cfg.local, self.cfg.seed, round, |i| {
                models[choice_of(i)].clone()
            })?;
        for (&i, &j) in selected.iter().zip(&choices) {
            self.last_assignment[i] = Some(j);
        }

        let n = sizes(clients);
        for (j, model) in self.models.iter_mut().enumerate() {
            let members: Vec<&(usize, ParamVector)> =
                deltas.iter().filter(|(i, _)| choice_of(*i) == j).collect();
            let total: usize = members.iter().map(|(i, _)| n[*i]).sum();
            if total == 0 {
                continue;
            }
            let mut aggregate = model.zeros_like();
            for (i, delta) in members {
                aggregate.add_scaled(n[*i] as f64 / total as f64, delta)?;
            }
            model.add_scaled(1.0, &aggregate)?;
        }
        self.round += 1;
        let diagnostics = Diagnostics {
            sum_delta_sq: deltas.iter().map(|(_, d)| d.norm_sq()).sum(),
            max_model_norm: self.models.iter().map(ParamVector::norm).fold(0.0, f64::max),
            ..Diagnostics::default()
        };
        Ok(stats(self.round, selected, skipped, diagnostics))
    }

    fn predictor(&self, _client: usize, data: &ClientDataset) -> Result<Predictor> {
        Ok(Predictor::Single(self.models[self.assign(data)?].clone()))
    }
}

/// Mixture-of-models baseline with loss-softmax responsibilities.
#[derive(Debug, Clone)]
pub struct FedEmLite {
    spec: ModelSpec,
    cfg: BaselineConfig,
    m: usize,
    models: Vec<ParamVector>,
    round: usize,
}

impl FedEmLite {
    pub fn new(spec: ModelSpec, cfg: BaselineConfig, m: usize) -> Result<Self> {
        spec.validate()?;
        let models = (0..cfg.d.max(1))
            .map(|j| init_global_model(&spec, cfg.seed, j, cfg.init))
            .collect();
        Ok(Self {
            spec,
            cfg,
            m,
            models,
            round: 0,
        })
    }

    pub fn models(&self) -> &[ParamVector] {
        &self.models
    }

    /// `r_j ∝ exp(-loss_j)` on the client's train split.
    pub fn responsibilities(&self, data: &ClientDataset) -> Result<Vec<f64>> {
        let neg_losses = self
            .models
            .iter()
            .map(|theta| split_loss(&self.spec, theta, data, Split::Train).map(|l| -l))
            .collect::<Result<Vec<_>>>()?;
        Ok(softmax_row(&neg_losses))
    }
}

impl Algorithm for FedEmLite {
    fn name(&self) -> &str {
        "fedem-lite"
    }

    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn step(&mut self, clients: &[ClientDataset]) -> Result<RoundStats> {
        check_clients(self.m, clients)?;
        let round = self.round;
        let seed = self.cfg.seed;
        let selected = sample_clients(seed, round, self.m, self.cfg.participants(self.m));
        let d = self.models.len();

        // (client, responsibilities, per-model deltas)
        type ModelDeltas = (usize, Vec<f64>, Vec<ParamVector>);
        let trained: Vec<Option<ModelDeltas>> = selected
            .par_iter()
            .map(|&i| {
                let data = &clients[i];
                if data.train.is_empty() {
                    return Ok(None);
                }
                let r = self.responsibilities(data)?;
                let mut deltas = Vec::with_capacity(d);
                for (j, theta) in self.models.iter().enumerate() {
                    let lr = self.cfg.local.lr * r[j];
                    if lr > 0.0 {
                        let local = LocalConfig { lr, ..self.cfg.local };
                        let mut rng = local_model_rng(seed, round, i, j);
                        deltas.push(local_sgd(&self.spec, theta, data, &local, &mut rng)?.1);
                    } else {
                        deltas.push(theta.zeros_like());
                    }
                }
                Ok(Some((i, r, deltas)))
            })
            .collect::<Result<_>>()?;

        let n = sizes(clients);
        let mut skipped = Vec::new();
        let mut done = Vec::new();
        for (&i, t) in selected.iter().zip(trained) {
            match t {
                Some(t) => done.push(t),
                None => skipped.push(i),
            }
        }
        let mut sum_delta_sq = 0.0;
        for (j, model) in self.models.iter_mut().enumerate() {
            let total: f64 = done.iter().map(|(i, r, _)| n[*i] as f64 * r[j]).sum();
            if total <= 0.0 {
                continue;
            }
            let mut aggregate = model.zeros_like();
            for (i, r, deltas) in &done {
                aggregate.add_scaled(n[*i] as f64 * r[j] / total, &deltas[j])?;
                sum_delta_sq += deltas[j].norm_sq();
            }
            model.add_scaled(1.0, &aggregate)?;
        }
        self.round += 1;
        let diagnostics = Diagnostics {
            sum_delta_sq,
            max_model_norm: self.models.iter().map(ParamVector::norm).fold(0.0, f64::max),
            ..Diagnostics::default()
        };
        Ok(stats(self.round, selected, skipped, diagnostics))
    }

    fn predictor(&self, _client: usize, data: &ClientDataset) -> Result<Predictor> {
        let r = self.responsibilities(data)?;
        Ok(Predictor::Ensemble(r.into_iter().zip(self.models.iter().cloned()).collect()))
    }
}

/// Builds the configured baseline.
pub fn build_baseline(spec: ModelSpec, cfg: BaselineConfig, m: usize) -> Result<Box<dyn Algorithm>> {
    Ok(match cfg.method {
        BaselineMethod::Local => Box::new(LocalOnly::new(spec, cfg, m)?),
        BaselineMethod::Fedavg => Box::new(FedAvg::new(spec, cfg, m)?),
        BaselineMethod::FedavgFt => Box::new(FedAvgFt::new(spec, cfg, m)?),
        BaselineMethod::Ifca => Box::new(Ifca::new(spec, cfg, m)?),
        BaselineMethod::Fedem => Box::new(FedEmLite::new(spec, cfg, m)?),
    })
}

fn run_rounds<A: Algorithm>(mut alg: A, clients: &[ClientDataset], rounds: usize) -> Result<Vec<RoundReport>> {
    Ok(simulate(&mut alg, clients, rounds, 1, |_, _| Ok(()))?.reports)
}

/// FedAvg trajectory, evaluated every round.
pub fn run_fedavg(spec: ModelSpec, clients: &[ClientDataset], cfg: &BaselineConfig) -> Result<Vec<RoundReport>> {
    run_rounds(FedAvg::new(spec, cfg.clone(), clients.len())?, clients, cfg.rounds)
}

pub fn run_fedavg_ft(spec: ModelSpec, clients: &[ClientDataset], cfg: &BaselineConfig) -> Result<Vec<RoundReport>> {
    run_rounds(FedAvgFt::new(spec, cfg.clone(), clients.len())?, clients, cfg.rounds)
}

pub fn run_local(spec: ModelSpec, clients: &[ClientDataset], cfg: &BaselineConfig) -> Result<Vec<RoundReport>> {
    run_rounds(LocalOnly::new(spec, cfg.clone(), clients.len())?, clients, cfg.rounds)
}

pub fn run_ifca(spec: ModelSpec, clients: &[ClientDataset], cfg: &BaselineConfig) -> Result<Vec<RoundReport>> {
    if cfg.d < 2 {
        return Err(Error::config("baseline.d", "ifca needs d >= 2"));
    }
    run_rounds(Ifca::new(spec, cfg.clone(), clients.len())?, clients, cfg.rounds)
}

pub fn run_fedem(spec: ModelSpec, clients: &[ClientDataset], cfg: &BaselineConfig) -> Result<Vec<RoundReport>> {
    if cfg.d < 2 {
        return Err(Error::config("baseline.d", "fedem needs d >= 2"));
    }
    run_rounds(FedEmLite::new(spec, cfg.clone(), clients.len())?, clients, cfg.rounds)
}
