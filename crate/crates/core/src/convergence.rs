//! Smoothness estimation and per-round descent diagnostics for the joint
//! objective `F(Theta, a) = sum_i (n_i / n) * loss_i(sum_j softmax(a_i)_j Theta_j)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, Split};
use crate::error::{Error, Result};
use crate::fedmerge::{softmax_row, FedMergeServer, MergeWeights, ModelSoup, ServerConfig, WeightMode};
use crate::model::{loss_and_grad, Batch, LocalConfig, ModelSpec};
use crate::param::{InitScheme, ParamVector, SeededRng};
use crate::schedule::probe_rng;

/// A differentiable scalar function of a flat vector.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.value_and_grad(x)?.0)
    }
}

/// `(loss, g_i, theta_i, w_i)` for one client.
type ClientTerms = (f64, Vec<f64>, Vec<f64>, Vec<f64>);

/// The joint merge objective over the flat vector `[Theta_0, .., Theta_{d-1}, a]`
/// with `a` the row-major `m × d` logit matrix. Client losses use the full
/// train split.
pub struct MergeObjective {
    spec: ModelSpec,
    batches: Vec<Batch>,
    shares: Vec<f64>,
    d: usize,
    p: usize,
}

impl MergeObjective {
    pub fn new(spec: ModelSpec, clients: &[ClientDataset], d: usize) -> Result<Self> {
        spec.validate()?;
        if d == 0 {
            return Err(Error::config("d", "must be at least 1"));
        }
        let batches: Vec<Batch> = clients
            .iter()
            .map(|c| {
                c.split_batch(Split::Train)
                    .ok_or_else(|| Error::EmptyDataset("every client needs a train split".into()))
            })
            .collect::<Result<_>>()?;
        if batches.is_empty() {
            return Err(Error::EmptyDataset("no clients".into()));
        }
        let n: usize = batches.iter().map(Batch::len).sum();
        let shares = batches.iter().map(|b| b.len() as f64 / n as f64).collect();
        Ok(Self {
            p: spec.param_count(),
            spec,
            batches,
            shares,
            d,
        })
    }

    pub fn clients(&self) -> usize {
        self.batches.len()
    }

    pub fn models(&self) -> usize {
        self.d
    }

    pub fn pack(&self, soup: &ModelSoup, weights: &MergeWeights) -> Vec<f64> {
        let mut x: Vec<f64> = soup.models().iter().flat_map(|t| t.as_slice().iter().copied()).collect();
        x.extend_from_slice(weights.params());
        x
    }

    pub fn unpack(&self, x: &[f64]) -> Result<(ModelSoup, MergeWeights)> {
        if x.len() != self.dim() {
            return Err(Error::LayoutMismatch(format!("expected {} values, got {}", self.dim(), x.len())));
        }
        let layout = self.spec.layout();
        let models = x[..self.d * self.p]
            .chunks(self.p)
            .map(|c| ParamVector::from_values(layout.clone(), c.to_vec()))
            .collect::<Result<_>>()?;
        let weights = MergeWeights::from_params(
            self.clients(),
            self.d,
            x[self.d * self.p..].to_vec(),
            WeightMode::Softmax,
        )?;
        Ok((ModelSoup::new(models)?, weights))
    }

    /// Per-client loss, gradient `g_i` at the merged model, merged model and
    /// weight row.
    fn client_terms(&self, x: &[f64]) -> Result<Vec<ClientTerms>> {
        if x.len() != self.dim() {
            return Err(Error::LayoutMismatch(format!("expected {} values, got {}", self.dim(), x.len())));
        }
        let (d, p) = (self.d, self.p);
        let layout = self.spec.layout();
        self.batches
            .par_iter()
            .enumerate()
            .map(|(i, batch)| {
                let a = &x[d * p + i * d..d * p + (i + 1) * d];
                let w = softmax_row(a);
                let mut theta = vec![0.0; p];
                for (j, wj) in w.iter().enumerate() {
                    for (t, v) in theta.iter_mut().zip(&x[j * p..(j + 1) * p]) {
                        *t += wj * v;
                    }
                }
                let merged = ParamVector::from_values(layout.clone(), theta.clone())?;
                let (loss, g) = loss_and_grad(&self.spec, &merged, batch)?;
                Ok((loss, g.into_values(), theta, w))
            })
            .collect()
    }

    /// `sum_i ||g_i||^2` with `g_i` the gradient of client `i`'s loss at its
    /// merged model.
    pub fn client_grad_sq(&self, x: &[f64]) -> Result<f64> {
        Ok(self
            .client_terms(x)?
            .iter()
            .map(|(_, g, _, _)| g.iter().map(|v| v * v).sum::<f64>())
            .sum())
    }
}

impl Objective for MergeObjective {
    fn dim(&self) -> usize {
        self.d * self.p + self.clients() * self.d
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (d, p) = (self.d, self.p);
        let terms = self.client_terms(x)?;
        let mut value = 0.0;
        let mut grad = vec![0.0; self.dim()];
        for (i, (loss, g, theta, w)) in terms.iter().enumerate() {
            let s = self.shares[i];
            value += s * loss;
            for j in 0..d {
                let theta_j = &x[j * p..(j + 1) * p];
                for (out, gk) in grad[j * p..(j + 1) * p].iter_mut().zip(g) {
                    *out += s * w[j] * gk;
                }
                let inner: f64 = g.iter().zip(theta_j).zip(theta).map(|((gk, tj), ti)| gk * (tj - ti)).sum();
                grad[d * p + i * d + j] = s * w[j] * inner;
            }
        }
        Ok((value, grad))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||grad F(u) - grad F(v)|| / ||u - v||`; `None` when `u == v`.
pub fn pair_ratio<O: Objective + ?Sized>(obj: &O, u: &[f64], v: &[f64]) -> Result<Option<f64>> {
    let dist = norm(&u.iter().zip(v).map(|(a, b)| a - b).collect::<Vec<_>>());
    if dist == 0.0 {
        return Ok(None);
    }
    let gu = obj.value_and_grad(u)?.1;
    let gv = obj.value_and_grad(v)?.1;
    let diff: Vec<f64> = gu.iter().zip(&gv).map(|(a, b)| a - b).collect();
    Ok(Some(norm(&diff) / dist))
}

/// Probe schedule for [`estimate_smoothness`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessProbe {
    /// Probe centers; the first is the given point itself.
    pub probes: usize,
    /// Finite-difference power iterations per center.
    pub power_iters: usize,
    /// Distance of the remaining centers from the given point.
    pub radius: f64,
    /// Length of each probe pair.
    pub step: f64,
}

impl Default for SmoothnessProbe {
    fn default() -> Self {
        Self {
            probes: 6,
            power_iters: 12,
            radius: 0.5,
            step: 1e-4,
        }
    }
}

fn random_unit(rng: &mut SeededRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let n = norm(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn offset(u: &[f64], dir: &[f64], scale: f64) -> Vec<f64> {
    u.iter().zip(dir).map(|(a, b)| a + scale * b).collect()
}

/// Empirical smoothness constant: the largest gradient-difference ratio over
/// probe pairs near `center`. Each pair direction is refined by power
/// iteration on finite differences of the gradient, so the ratio approaches
/// the largest Hessian eigenvalue magnitude at the probe.
pub fn estimate_smoothness<O: Objective + ?Sized>(
    obj: &O,
    center: &[f64],
    probe: &SmoothnessProbe,
    rng: &mut SeededRng,
) -> Result<f64> {
    if probe.probes < 2 {
        return Err(Error::config("probes", "must be at least 2"));
    }
    if !(probe.step > 0.0 && probe.radius >= 0.0) {
        return Err(Error::config("step", "step must be positive and radius non-negative"));
    }
    let dim = obj.dim();
    if center.len() != dim {
        return Err(Error::LayoutMismatch(format!("expected {dim} values, got {}", center.len())));
    }
    let mut best: f64 = 0.0;
    for k in 0..probe.probes {
        let u = if k == 0 {
            center.to_vec()
        } else {
            offset(center, &random_unit(rng, dim), probe.radius)
        };
        let gu = obj.value_and_grad(&u)?.1;
        let mut dir = random_unit(rng, dim);
        for _ in 0..=probe.power_iters {
            let v = offset(&u, &dir, probe.step);
            let dist = norm(&v.iter().zip(&u).map(|(a, b)| a - b).collect::<Vec<_>>());
            if dist == 0.0 {
                dir = random_unit(rng, dim);
                continue;
            }
            let gv = obj.value_and_grad(&v)?.1;
            let diff: Vec<f64> = gv.iter().zip(&gu).map(|(a, b)| a - b).collect();
            let n = norm(&diff);
            best = best.max(n / dist);
            if n == 0.0 {
                break;
            }
            dir = diff.into_iter().map(|x| x / n).collect();
        }
    }
    Ok(best)
}

fn default_rounds() -> usize {
    100
}

fn default_eta_ratio() -> f64 {
    0.1
}

/// Settings for [`descent_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentConfig {
    pub d: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Step size as a multiple of `1 / L_hat`.
    #[serde(default = "default_eta_ratio")]
    pub eta_ratio: f64,
    #[serde(default)]
    pub probe: SmoothnessProbe,
    #[serde(default)]
    pub init: InitScheme,
    #[serde(default)]
    pub seed: u64,
}

impl DescentConfig {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            rounds: default_rounds(),
            eta_ratio: default_eta_ratio(),
            probe: SmoothnessProbe::default(),
            init: InitScheme::default(),
            seed: 0,
        }
    }
}

/// One server round of the descent check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentRound {
    pub round: usize,
    pub f_before: f64,
    pub f_after: f64,
    /// `||grad_Theta F||^2 + ||grad_a F||^2` before the step.
    pub grad_sq: f64,
    /// `sum_i ||g_i||^2` before the step.
    pub client_grad_sq: f64,
    pub max_model_norm: f64,
    /// `F - eta * max(0, 1 - eta L/2) * grad_sq`.
    pub bound: f64,
    /// `F - eta (1 - eta L/2) (m + d C^2) sum_i ||g_i||^2` with `C` the
    /// largest model norm.
    pub relaxed_bound: f64,
    pub violated: bool,
    pub relaxed_violated: bool,
}

/// Least-squares fit of `R_T ≈ c / (T d) + plateau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub c: f64,
    pub plateau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    pub d: usize,
    pub l_hat: f64,
    pub eta: f64,
    pub eta_ratio: f64,
    pub rounds: Vec<DescentRound>,
    /// Fraction of rounds where `F` rose above the smoothness bound.
    pub violation_fraction: f64,
    /// Same, against the bound relaxed through `(m + d C^2) sum_i ||g_i||^2`.
    pub relaxed_violation_fraction: f64,
    /// `R_T = (1/T) sum_{t<T} sum_i ||g_i^t||^2` for `T = 1..=rounds`.
    pub running_avg: Vec<f64>,
    pub fit: Option<RateFit>,
}

/// Fits `y_T = c * x_T + plateau` with `x_T = 1 / (T d)`, `T` 1-based.
pub fn fit_rate(running_avg: &[f64], d: usize) -> Option<RateFit> {
    if running_avg.len() < 2 || d == 0 {
        return None;
    }
    let xs: Vec<f64> = (1..=running_avg.len()).map(|t| 1.0 / (t * d) as f64).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = running_avg.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(running_avg).map(|(x, y)| (x - mx) * (y - my)).sum();
    let c = sxy / sxx;
    Some(RateFit { c, plateau: my - c * mx })
}

/// Tolerance for rounding in `F`.
fn slack(f: f64) -> f64 {
    1e-12 * (1.0 + f.abs())
}

/// Runs exact gradient descent on the joint objective through the FedMerge
/// server (one full-batch local step of size `eta`, full participation,
/// unit server steps, full-vector inner products) and checks every round
/// against the smoothness descent bound with the estimated `L_hat`.
pub fn descent_check(spec: ModelSpec, clients: &[ClientDataset], cfg: &DescentConfig) -> Result<DescentReport> {
    if cfg.rounds == 0 {
        return Err(Error::config("descent.rounds", "must be at least 1"));
    }
    if !(cfg.eta_ratio > 0.0 && cfg.eta_ratio.is_finite()) {
        return Err(Error::config("descent.eta_ratio", "must be positive"));
    }
    let m = clients.len();
    let obj = MergeObjective::new(spec, clients, cfg.d)?;
    let soup = ModelSoup::random(&spec, cfg.d, cfg.seed, cfg.init)?;
    let weights = MergeWeights::uniform(m, cfg.d, WeightMode::Softmax);
    let x0 = obj.pack(&soup, &weights);
    let l_hat = estimate_smoothness(&obj, &x0, &cfg.probe, &mut probe_rng(cfg.seed))?;
    if !(l_hat > 0.0 && l_hat.is_finite()) {
        return Err(Error::Infeasible(format!("smoothness estimate {l_hat} is not positive")));
    }
    let eta = cfg.eta_ratio / l_hat;

    let full_batch = clients.iter().map(ClientDataset::n_train).max().unwrap_or(1);
    let server_cfg = ServerConfig {
        eta_theta: 1.0,
        eta_w: 1.0,
        weight_mode: WeightMode::Softmax,
        head_only_dot: false,
        normalize_w_grad: false,
        clients_per_round: None,
        local: LocalConfig {
            lr: eta,
            epochs: 1,
            batch_size: full_batch,
        },
        init: cfg.init,
        freeze_weights: false,
        seed: cfg.seed,
        ..ServerConfig::new(cfg.d, cfg.rounds)
    };
    let mut server = FedMergeServer::with_state(spec, server_cfg, soup, weights)?;

    let coeff = eta * (1.0 - eta * l_hat / 2.0);
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut x = x0;
    let (mut f, mut grad) = obj.value_and_grad(&x)?;
    for t in 0..cfg.rounds {
        let grad_sq: f64 = grad.iter().map(|g| g * g).sum();
        let client_grad_sq = obj.client_grad_sq(&x)?;
        let c = server.soup().max_norm();
        server.step(clients)?;
        let x_next = obj.pack(server.soup(), server.weights());
        let (f_next, grad_next) = obj.value_and_grad(&x_next)?;
        let bound = f - coeff.max(0.0) * grad_sq;
        let relaxed_bound = f - coeff * (m as f64 + cfg.d as f64 * c * c) * client_grad_sq;
        rounds.push(DescentRound {
            round: t + 1,
            f_before: f,
            f_after: f_next,
            grad_sq,
            client_grad_sq,
            max_model_norm: c,
            bound,
            relaxed_bound,
            violated: f_next > bound + slack(f),
            relaxed_violated: f_next > relaxed_bound + slack(f),
        });
        x = x_next;
        f = f_next;
        grad = grad_next;
    }
    let total = rounds.len() as f64;
    let mut running_avg = Vec::with_capacity(rounds.len());
    let mut acc = 0.0;
    for (t, r) in rounds.iter().enumerate() {
        acc += r.client_grad_sq;
        running_avg.push(acc / (t + 1) as f64);
    }
    Ok(DescentReport {
        d: cfg.d,
        l_hat,
        eta,
        eta_ratio: cfg.eta_ratio,
        violation_fraction: rounds.iter().filter(|r| r.violated).count() as f64 / total,
        relaxed_violation_fraction: rounds.iter().filter(|r| r.relaxed_violated).count() as f64 / total,
        fit: fit_rate(&running_avg, cfg.d),
        running_avg,
        rounds,
    })
}
