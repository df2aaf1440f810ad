//! Server-side model merging with jointly trained merge weights.
//!
//! The server keeps `d` global models (the soup) and an `m × d` matrix of
//! merge weights. Each participating client receives the personalized model
//! `theta_i = sum_j w_ij * Theta_j`, trains it locally and returns the update
//! `delta_i`. The server treats `delta_i` as a negative gradient with respect
//! to `theta_i` and pushes it through the merge by the chain rule:
//!
//! * soup:    `dTheta_j = sum_i (n_i / n_A) * w_ij * delta_i`
//! * weights (unconstrained): `dw_ij = (n_i / n_A) * <Theta_j, delta_i>`
//! * logits  (softmax rows):  `da_ij = (n_i / n_A) * w_ij * <delta_i, Theta_j - theta_i>`
//!
//! where `n_A` sums the training sizes of the participants. Inner products
//! may be restricted to the classification head.
//!
//! Merged models are summed with [`exact_sum`] so that relabelling the soup
//! (permuting models together with weight columns) is bit-for-bit neutral.

use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{local_sgd, LocalConfig, ModelSpec};
use crate::param::{dot_slices, exact_sum, exact_sum_with, InitScheme, ParamVector, SeededRng};
use crate::report::{Diagnostics, Predictor, RoundStats};
use crate::schedule::{init_global_model, local_rng, sample_clients};
use crate::sim::Algorithm;

/// The `d` global models.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSoup {
    models: Vec<ParamVector>,
}

impl ModelSoup {
    pub fn new(models: Vec<ParamVector>) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::InvalidArgument("model soup needs at least one model".into()))?;
        if let Some(bad) = models.iter().position(|m| !m.same_layout(first)) {
            return Err(Error::LayoutMismatch(format!("soup model {bad} has a different layout")));
        }
        Ok(Self { models })
    }

    /// `d` models initialized from the shared schedule.
    pub fn random(spec: &ModelSpec, d: usize, seed: u64, scheme: InitScheme) -> Result<Self> {
        Self::new((0..d).map(|j| init_global_model(spec, seed, j, scheme)).collect())
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn models(&self) -> &[ParamVector] {
        &self.models
    }

    pub fn model(&self, j: usize) -> &ParamVector {
        &self.models[j]
    }

    pub fn param_count(&self) -> usize {
        self.models[0].len()
    }

    pub fn norms(&self) -> Vec<f64> {
        self.models.iter().map(ParamVector::norm).collect()
    }

    pub fn max_norm(&self) -> f64 {
        self.norms().into_iter().fold(0.0, f64::max)
    }

    /// Reorders models so that new index `k` holds old model `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            models: perm.iter().map(|&j| self.models[j].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Rows are `softmax(a_i)`; the stored parameters are logits.
    #[default]
    Softmax,
    /// Stored parameters are the weights themselves.
    Unconstrained,
}

/// Per-client merge weights, stored row-major as `m × d` parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeWeights {
    m: usize,
    d: usize,
    params: Vec<f64>,
    mode: WeightMode,
}

impl MergeWeights {
    /// Uniform rows: zero logits, or `1/d` unconstrained weights.
    pub fn uniform(m: usize, d: usize, mode: WeightMode) -> Self {
        let fill = match mode {
            WeightMode::Softmax => 0.0,
            WeightMode::Unconstrained => 1.0 / d as f64,
        };
        Self {
            m,
            d,
            params: vec![fill; m * d],
            mode,
        }
    }

    pub fn from_params(m: usize, d: usize, params: Vec<f64>, mode: WeightMode) -> Result<Self> {
        if params.len() != m * d {
            return Err(Error::InvalidArgument(format!(
                "expected {} merge parameters, got {}",
                m * d,
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("merge parameters must be finite".into()));
        }
        Ok(Self { m, d, params, mode })
    }

    /// Frozen-style rows: every client spreads `1/k` uniformly over `k`
    /// randomly chosen models, `k = max(1, round(fraction * d))`.
    pub fn fixed_subsets(m: usize, d: usize, fraction: f64, rng: &mut SeededRng) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
        }
        let k = ((fraction * d as f64).round() as usize).clamp(1, d);
        let mut params = vec![0.0; m * d];
        for i in 0..m {
            for j in index::sample(rng, d, k) {
                params[i * d + j] = 1.0 / k as f64;
            }
        }
        Self::from_params(m, d, params, WeightMode::Unconstrained)
    }

    pub fn clients(&self) -> usize {
        self.m
    }

    pub fn models(&self) -> usize {
        self.d
    }

    pub fn mode(&self) -> WeightMode {
        self.mode
    }

    /// Raw parameters: logits in softmax mode, weights otherwise.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_row(&self, i: usize) -> &[f64] {
        &self.params[i * self.d..(i + 1) * self.d]
    }

    /// Effective merge weights of client `i`.
    pub fn row(&self, i: usize) -> Vec<f64> {
        let raw = self.params_row(i);
        match self.mode {
            WeightMode::Softmax => softmax_row(raw),
            WeightMode::Unconstrained => raw.to_vec(),
        }
    }

    pub fn matrix(&self) -> Vec<Vec<f64>> {
        (0..self.m).map(|i| self.row(i)).collect()
    }

    /// `params += step * update`, leaving rows whose update is zero intact.
    pub fn apply_update(&mut self, step: f64, update: &[f64]) -> Result<()> {
        if update.len() != self.params.len() {
            return Err(Error::InvalidArgument("merge update has the wrong shape".into()));
        }
        for (p, u) in self.params.iter_mut().zip(update) {
            *p += step * u;
        }
        if let Some(index) = self.params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(())
    }

    /// Reorders columns the same way as [`ModelSoup::permuted`].
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut params = Vec::with_capacity(self.params.len());
        for i in 0..self.m {
            let row = self.params_row(i);
            params.extend(perm.iter().map(|&j| row[j]));
        }
        Self { params, ..*self }
    }

    /// Largest deviation of any row from the probability simplex: the max of
    /// `|sum_j w_ij - 1|` and the most negative entry's magnitude.
    pub fn simplex_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.m {
            let row = self.row(i);
            worst = worst.max((exact_sum(row.iter().copied()) - 1.0).abs());
            for w in row {
                worst = worst.max(-w).max(w - 1.0);
            }
        }
        worst
    }
}

/// Numerically stable softmax with an order-independent normalizer.
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|a| (a - max).exp()).collect();
    let total = exact_sum(exps.iter().copied());
    exps.into_iter().map(|e| e / total).collect()
}

/// `theta_i = sum_j w_ij * Theta_j`.
pub fn merge(soup: &ModelSoup, weights: &MergeWeights, client: usize) -> Result<ParamVector> {
    if client >= weights.clients() {
        return Err(Error::InvalidArgument(format!(
            "client {client} out of range for {} clients",
            weights.clients()
        )));
    }
    if soup.len() != weights.models() {
        return Err(Error::InvalidArgument(format!(
            "soup has {} models but weights have {} columns",
            soup.len(),
            weights.models()
        )));
    }
    let w = weights.row(client);
    merge_with(soup, &w)
}

fn merge_with(soup: &ModelSoup, w: &[f64]) -> Result<ParamVector> {
    let p = soup.param_count();
    let mut out = Vec::with_capacity(p);
    let mut scratch = Vec::new();
    for k in 0..p {
        let terms = soup.models.iter().zip(w).map(|(m, wj)| wj * m.as_slice()[k]);
        out.push(exact_sum_with(&mut scratch, terms));
    }
    ParamVector::from_values(soup.models[0].layout().clone(), out)
}

/// What a participating client sent back, together with the model it
/// received.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub sent: ParamVector,
    pub delta: ParamVector,
}

/// Options shared by both weight-update rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightGradOptions {
    pub head_only: bool,
    /// Scale each participating client's row to unit L2 norm.
    pub normalize: bool,
}

fn participation_total(updates: &[ClientUpdate], sizes: &[usize]) -> Result<usize> {
    let mut total = 0;
    for u in updates {
        total += *sizes.get(u.client).ok_or_else(|| {
            Error::InvalidArgument(format!("no size recorded for client {}", u.client))
        })?;
    }
    Ok(total)
}

/// Soup update `dTheta_j = sum_i (n_i / n_A) * w_ij * delta_i`.
pub fn soup_update(
    soup: &ModelSoup,
    weights: &MergeWeights,
    updates: &[ClientUpdate],
    sizes: &[usize],
) -> Result<Vec<ParamVector>> {
    let n_total = participation_total(updates, sizes)?;
    let mut out: Vec<ParamVector> = soup.models.iter().map(ParamVector::zeros_like).collect();
    if n_total == 0 {
        return Ok(out);
    }
    let rows: Vec<Vec<f64>> = updates.iter().map(|u| weights.row(u.client)).collect();
    for (j, acc) in out.iter_mut().enumerate() {
        for (u, row) in updates.iter().zip(&rows) {
            let share = sizes[u.client] as f64 / n_total as f64;
            acc.add_scaled(share * row[j], &u.delta)?;
        }
    }
    Ok(out)
}

fn slice_range(soup: &ModelSoup, head_only: bool) -> std::ops::Range<usize> {
    if head_only {
        soup.models[0].layout().head_range()
    } else {
        0..soup.param_count()
    }
}

fn normalize_rows(update: &mut [f64], d: usize, updates: &[ClientUpdate]) {
    for u in updates {
        let row = &mut update[u.client * d..(u.client + 1) * d];
        let norm = exact_sum(row.iter().map(|v| v * v)).sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// Unconstrained weight update `dw_ij = (n_i / n_A) * <Theta_j, delta_i>`.
///
/// Returns an `m × d` row-major matrix; rows of non-participants are zero.
pub fn update_weights_unconstrained(
    soup: &ModelSoup,
    weights: &MergeWeights,
    updates: &[ClientUpdate],
    sizes: &[usize],
    opts: WeightGradOptions,
) -> Result<Vec<f64>> {
    let (m, d) = (weights.clients(), weights.models());
    let n_total = participation_total(updates, sizes)?;
    let mut out = vec![0.0; m * d];
    if n_total == 0 {
        return Ok(out);
    }
    let range = slice_range(soup, opts.head_only);
    for u in updates {
        let share = sizes[u.client] as f64 / n_total as f64;
        let delta = &u.delta.as_slice()[range.clone()];
        for j in 0..d {
            let theta_j = &soup.models[j].as_slice()[range.clone()];
            out[u.client * d + j] = share * dot_slices(theta_j, delta);
        }
    }
    if opts.normalize {
        normalize_rows(&mut out, d, updates);
    }
    Ok(out)
}

/// Softmax logit update `da_ij = (n_i / n_A) * w_ij * <delta_i, Theta_j - theta_i>`
/// with `theta_i` the merged model the client received.
pub fn update_weights_softmax(
    soup: &ModelSoup,
    weights: &MergeWeights,
    updates: &[ClientUpdate],
    sizes: &[usize],
    opts: WeightGradOptions,
) -> Result<Vec<f64>> {
    let (m, d) = (weights.clients(), weights.models());
    let n_total = participation_total(updates, sizes)?;
    let mut out = vec![0.0; m * d];
    if n_total == 0 {
        return Ok(out);
    }
    let range = slice_range(soup, opts.head_only);
    let mut diff = vec![0.0; range.len()];
    for u in updates {
        let share = sizes[u.client] as f64 / n_total as f64;
        let w = weights.row(u.client);
        let delta = &u.delta.as_slice()[range.clone()];
        let sent = &u.sent.as_slice()[range.clone()];
        for j in 0..d {
            let theta_j = &soup.models[j].as_slice()[range.clone()];
            for ((x, t), s) in diff.iter_mut().zip(theta_j).zip(sent) {
                *x = t - s;
            }
            out[u.client * d + j] = share * w[j] * dot_slices(delta, &diff);
        }
    }
    if opts.normalize {
        normalize_rows(&mut out, d, updates);
    }
    Ok(out)
}

fn default_eta_theta() -> f64 {
    1.0
}

fn default_eta_w() -> f64 {
    0.01
}

fn default_true() -> bool {
    true
}

/// Server hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    /// Number of global models in the soup.
    pub d: usize,
    #[serde(default = "default_eta_theta")]
    pub eta_theta: f64,
    #[serde(default = "default_eta_w")]
    pub eta_w: f64,
    #[serde(default)]
    pub weight_mode: WeightMode,
    #[serde(default = "default_true")]
    pub head_only_dot: bool,
    #[serde(default)]
    pub normalize_w_grad: bool,
    /// Participants per round; all clients when absent.
    #[serde(default)]
    pub clients_per_round: Option<usize>,
    pub rounds: usize,
    #[serde(default)]
    pub local: LocalConfig,
    #[serde(default)]
    pub init: InitScheme,
    /// Keep merge weights at their initial values.
    #[serde(default)]
    pub freeze_weights: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ServerConfig {
    pub fn new(d: usize, rounds: usize) -> Self {
        Self {
            d,
            eta_theta: default_eta_theta(),
            eta_w: default_eta_w(),
            weight_mode: WeightMode::Softmax,
            head_only_dot: true,
            normalize_w_grad: false,
            clients_per_round: None,
            rounds,
            local: LocalConfig::default(),
            init: InitScheme::default(),
            freeze_weights: false,
            seed: 0,
        }
    }

    pub fn participants(&self, m: usize) -> usize {
        self.clients_per_round.unwrap_or(m).min(m)
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("server.d", "must be at least 1"));
        }
        if let Some(k) = self.clients_per_round {
            if k == 0 || k > m {
                return Err(Error::config(
                    "server.clients_per_round",
                    format!("must lie in 1..={m} (got {k})"),
                ));
            }
        }
        if !self.eta_theta.is_finite() || self.eta_theta < 0.0 {
            return Err(Error::config("server.eta_theta", "must be finite and non-negative"));
        }
        if !self.eta_w.is_finite() || self.eta_w < 0.0 {
            return Err(Error::config("server.eta_w", "must be finite and non-negative"));
        }
        self.local.validate("server.local")
    }

    fn grad_options(&self) -> WeightGradOptions {
        WeightGradOptions {
            head_only: self.head_only_dot,
            normalize: self.normalize_w_grad,
        }
    }
}

/// The merging server: soup, weights and the round loop.
#[derive(Debug, Clone)]
pub struct FedMergeServer {
    spec: ModelSpec,
    cfg: ServerConfig,
    soup: ModelSoup,
    weights: MergeWeights,
    round: usize,
}

impl FedMergeServer {
    /// Random soup from the shared schedule and uniform weights.
    pub fn new(spec: ModelSpec, cfg: ServerConfig, m: usize) -> Result<Self> {
        let soup = ModelSoup::random(&spec, cfg.d, cfg.seed, cfg.init)?;
        let weights = MergeWeights::uniform(m, cfg.d, cfg.weight_mode);
        Self::with_state(spec, cfg, soup, weights)
    }

    pub fn with_state(spec: ModelSpec, mut cfg: ServerConfig, soup: ModelSoup, weights: MergeWeights) -> Result<Self> {
        spec.validate()?;
        cfg.validate(weights.clients())?;
        if soup.param_count() != spec.param_count() {
            return Err(Error::LayoutMismatch("soup does not match the model spec".into()));
        }
        if soup.len() != weights.models() {
            return Err(Error::InvalidArgument("soup size and weight columns differ".into()));
        }
        cfg.d = soup.len();
        cfg.weight_mode = weights.mode();
        Ok(Self {
            spec,
            cfg,
            soup,
            weights,
            round: 0,
        })
    }

    pub fn soup(&self) -> &ModelSoup {
        &self.soup
    }

    pub fn weights(&self) -> &MergeWeights {
        &self.weights
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn merged(&self, client: usize) -> Result<ParamVector> {
        merge(&self.soup, &self.weights, client)
    }

    /// One communication round over `clients`.
    pub fn step(&mut self, clients: &[ClientDataset]) -> Result<RoundStats> {
        let m = self.weights.clients();
        if clients.len() != m {
            return Err(Error::InvalidArgument(format!(
                "server was built for {m} clients, got {}",
                clients.len()
            )));
        }
        let round = self.round;
        let seed = self.cfg.seed;
        let selected = sample_clients(seed, round, m, self.cfg.participants(m));

        let start = Instant::now();
        let sent: Vec<ParamVector> = selected
            .iter()
            .map(|&i| self.merged(i))
            .collect::<Result<_>>()?;
        let mut server_time = start.elapsed();

        let spec = self.spec;
        let local = self.cfg.local;
        let trained: Vec<Option<ParamVector>> = selected
            .par_iter()
            .zip(&sent)
            .map(|(&i, theta)| {
                if clients[i].train.is_empty() {
                    return Ok(None);
                }
                let mut rng = local_rng(seed, round, i);
                local_sgd(&spec, theta, &clients[i], &local, &mut rng).map(|(_, delta)| Some(delta))
            })
            .collect::<Result<_>>()?;

        let mut skipped = Vec::new();
        let mut updates = Vec::with_capacity(selected.len());
        for ((&client, sent), delta) in selected.iter().zip(sent).zip(trained) {
            match delta {
                Some(delta) => updates.push(ClientUpdate { client, sent, delta }),
                None => skipped.push(client),
            }
        }
        let warnings = skipped
            .iter()
            .map(|i| format!("client {i} has an empty train split; skipped"))
            .collect();

        let start = Instant::now();
        let sizes: Vec<usize> = clients.iter().map(ClientDataset::n_train).collect();
        let soup_delta = soup_update(&self.soup, &self.weights, &updates, &sizes)?;
        // Row normalization runs after the zero-sum measurement: dividing a
        // nearly-zero row by its norm magnifies cancellation error.
        let opts = WeightGradOptions {
            normalize: false,
            ..self.cfg.grad_options()
        };
        let mut weight_delta = match self.weights.mode() {
            WeightMode::Softmax => update_weights_softmax(&self.soup, &self.weights, &updates, &sizes, opts)?,
            WeightMode::Unconstrained => {
                update_weights_unconstrained(&self.soup, &self.weights, &updates, &sizes, opts)?
            }
        };
        let d = self.weights.models();
        let zero_sum_violation = (self.weights.mode() == WeightMode::Softmax).then(|| {
            updates
                .iter()
                .map(|u| exact_sum(weight_delta[u.client * d..(u.client + 1) * d].iter().copied()).abs())
                .fold(0.0, f64::max)
        });
        if self.cfg.normalize_w_grad {
            normalize_rows(&mut weight_delta, d, &updates);
        }
        for (model, delta) in self.soup.models.iter_mut().zip(&soup_delta) {
            model.add_scaled(self.cfg.eta_theta, delta)?;
        }
        if !self.cfg.freeze_weights {
            self.weights.apply_update(self.cfg.eta_w, &weight_delta)?;
        }
        server_time += start.elapsed();

        self.round += 1;
        Ok(RoundStats {
            round: self.round,
            selected,
            skipped,
            diagnostics: Diagnostics {
                sum_delta_sq: updates.iter().map(|u| u.delta.norm_sq()).sum(),
                max_model_norm: self.soup.max_norm(),
                simplex_violation: (self.weights.mode() == WeightMode::Softmax).then(|| self.weights.simplex_violation()),
                zero_sum_violation,
                server_time,
            },
            warnings,
        })
    }
}

impl Algorithm for FedMergeServer {
    fn name(&self) -> &str {
        "fedmerge"
    }

    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn step(&mut self, clients: &[ClientDataset]) -> Result<RoundStats> {
        FedMergeServer::step(self, clients)
    }

    fn predictor(&self, client: usize, _data: &ClientDataset) -> Result<Predictor> {
        Ok(Predictor::Single(self.merged(client)?))
    }

    fn weight_matrix(&self) -> Option<Vec<Vec<f64>>> {
        Some(self.weights.matrix())
    }

    fn initial_diagnostics(&self) -> Diagnostics {
        Diagnostics {
            max_model_norm: self.soup.max_norm(),
            simplex_violation: (self.weights.mode() == WeightMode::Softmax).then(|| self.weights.simplex_violation()),
            ..Diagnostics::default()
        }
    }
}
