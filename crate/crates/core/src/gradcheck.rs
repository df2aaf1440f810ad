//! Finite-difference verification of every analytic gradient and update
//! rule.
//!
//! Each formula is compared against central differences of a separate,
//! straight-line implementation of the loss (no code shared with
//! [`crate::model`] or [`crate::fedmerge`] beyond the parameter ordering).
//! The server update rules are exercised end to end: one full-batch local
//! step of size `lr` gives `delta_i = -lr * g_i`, so every update divided by
//! `-lr` must equal the gradient of the one-step objective
//! `L = sum_i (n_i / n) * loss_i(theta_i)`.

use std::fmt;

use rand::Rng;
use serde::Serialize;

use crate::data::ClientDataset;
use crate::error::Result;
use crate::fedmerge::{
    soup_update, update_weights_softmax, update_weights_unconstrained, ClientUpdate, MergeWeights, ModelSoup,
    WeightGradOptions, WeightMode,
};
use crate::model::{grad, local_sgd, Activation, Batch, LocalConfig, ModelKind, ModelSpec};
use crate::param::{random_init, InitScheme, ParamVector, SeededRng};

/// Relative error threshold for a passing formula.
pub const TOLERANCE: f64 = 1e-5;

const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Formula {
    ModelGradientLogistic,
    ModelGradientMlp,
    SoupGradientUnconstrained,
    WeightGradientUnconstrained,
    SoupGradientSoftmax,
    LogitGradientSoftmax,
}

impl Formula {
    pub const ALL: [Formula; 6] = [
        Formula::ModelGradientLogistic,
        Formula::ModelGradientMlp,
        Formula::SoupGradientUnconstrained,
        Formula::WeightGradientUnconstrained,
        Formula::SoupGradientSoftmax,
        Formula::LogitGradientSoftmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Formula::ModelGradientLogistic => "model_gradient_logistic",
            Formula::ModelGradientMlp => "model_gradient_mlp",
            Formula::SoupGradientUnconstrained => "soup_gradient_unconstrained",
            Formula::WeightGradientUnconstrained => "weight_gradient_unconstrained",
            Formula::SoupGradientSoftmax => "soup_gradient_softmax",
            Formula::LogitGradientSoftmax => "logit_gradient_softmax",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    /// Random instances per formula.
    pub instances: usize,
    /// Clients per instance, at most 3.
    pub m: usize,
    /// Soup size per instance, at most 3.
    pub d: usize,
    pub seed: u64,
    /// Negate the analytic value of this formula (fault-injection control).
    pub fault: Option<Formula>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 4,
            m: 3,
            d: 3,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FormulaResult {
    pub formula: Formula,
    pub worst_rel_err: f64,
    pub instances: usize,
    pub max_params: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub results: Vec<FormulaResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failed(&self) -> Vec<Formula> {
        self.results.iter().filter(|r| !r.passed).map(|r| r.formula).collect()
    }

    pub fn get(&self, formula: Formula) -> Option<&FormulaResult> {
        self.results.iter().find(|r| r.formula == formula)
    }
}

/// `||a - n|| / max(||a||, ||n||, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

fn central_difference<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + FD_STEP;
            let up = f(&probe);
            probe[k] = x[k] - FD_STEP;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Mean cross-entropy written out directly from the parameter ordering.
fn oracle_loss(spec: &ModelSpec, theta: &[f64], x: &[f64], y: &[usize]) -> f64 {
    let (d, h, c) = (spec.input_dim, spec.hidden_dim, spec.num_classes);
    let mut total = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let xi = &x[i * d..(i + 1) * d];
        let (features, w, b): (Vec<f64>, &[f64], &[f64]) = match spec.kind {
            ModelKind::Logistic => (xi.to_vec(), &theta[..c * d], &theta[c * d..]),
            ModelKind::Mlp => {
                let mut hidden = Vec::with_capacity(h);
                for r in 0..h {
                    let mut s = theta[h * d + r];
                    for k in 0..d {
                        s += theta[r * d + k] * xi[k];
                    }
                    hidden.push(match spec.activation {
                        Activation::Tanh => s.tanh(),
                        Activation::Relu => s.max(0.0),
                    });
                }
                let off = h * d + h;
                (hidden, &theta[off..off + c * h], &theta[off + c * h..])
            }
        };
        let width = features.len();
        let z: Vec<f64> = (0..c)
            .map(|k| b[k] + (0..width).map(|j| w[k * width + j] * features[j]).sum::<f64>())
            .collect();
        let log_norm = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        total += log_norm - z[yi];
    }
    total / y.len() as f64
}

fn inline_softmax(a: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = a.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

struct Instance {
    spec: ModelSpec,
    clients: Vec<ClientDataset>,
    soup: Vec<Vec<f64>>,
    /// Row-major `m × d` weights or logits.
    params: Vec<f64>,
}

impl Instance {
    fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(ClientDataset::n_train).collect()
    }

    /// `L(Theta, params) = sum_i (n_i / n) loss_i(sum_j w_ij Theta_j)`.
    fn objective(&self, soup: &[Vec<f64>], params: &[f64], mode: WeightMode) -> f64 {
        let d = soup.len();
        let p = soup[0].len();
        let sizes = self.sizes();
        let n: usize = sizes.iter().sum();
        let mut total = 0.0;
        for (i, client) in self.clients.iter().enumerate() {
            let row = &params[i * d..(i + 1) * d];
            let w = match mode {
                WeightMode::Softmax => inline_softmax(row),
                WeightMode::Unconstrained => row.to_vec(),
            };
            let theta: Vec<f64> = (0..p).map(|k| (0..d).map(|j| w[j] * soup[j][k]).sum()).collect();
            total += sizes[i] as f64 / n as f64 * oracle_loss(&self.spec, &theta, &client.features, &client.labels);
        }
        total
    }
}

fn small_spec(kind: ModelKind) -> ModelSpec {
    match kind {
        // 3 * 4 + 3 = 15 parameters.
        ModelKind::Logistic => ModelSpec::logistic(4, 3),
        // 4 * 3 + 4 + 3 * 4 + 3 = 31 parameters.
        ModelKind::Mlp => ModelSpec::mlp(3, 4, 3, Activation::Tanh),
    }
}

fn random_client(rng: &mut SeededRng, spec: &ModelSpec, n: usize) -> Result<ClientDataset> {
    let features = (0..n * spec.input_dim).map(|_| rng.standard_normal()).collect();
    let labels = (0..n).map(|_| rng.random_range(0..spec.num_classes)).collect();
    ClientDataset::with_splits(
        features,
        labels,
        spec.input_dim,
        spec.num_classes,
        None,
        (0..n).collect(),
        Vec::new(),
        Vec::new(),
    )
}

fn instance(opts: &GradcheckOptions, kind: ModelKind, mode: WeightMode, index: usize) -> Result<Instance> {
    let spec = small_spec(kind);
    let mut rng = SeededRng::derived(opts.seed, &[kind as u64, mode as u64, index as u64]);
    let clients = (0..opts.m)
        .map(|_| {
            let n = rng.random_range(3..9);
            random_client(&mut rng, &spec, n)
        })
        .collect::<Result<_>>()?;
    let layout = spec.layout();
    let soup = (0..opts.d)
        .map(|_| random_init(&layout, &mut rng, InitScheme::Normal { std: 0.7 }).into_values())
        .collect();
    let params = (0..opts.m * opts.d)
        .map(|_| match mode {
            WeightMode::Softmax => rng.standard_normal(),
            WeightMode::Unconstrained => rng.random_range(-0.5..1.0),
        })
        .collect();
    Ok(Instance {
        spec,
        clients,
        soup,
        params,
    })
}

fn maybe_flip(mut v: Vec<f64>, formula: Formula, opts: &GradcheckOptions) -> Vec<f64> {
    if opts.fault == Some(formula) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

fn check_model(opts: &GradcheckOptions, kind: ModelKind, formula: Formula) -> Result<FormulaResult> {
    let mut worst: f64 = 0.0;
    let mut max_params = 0;
    for k in 0..opts.instances {
        let inst = instance(opts, kind, WeightMode::Unconstrained, k)?;
        let layout = inst.spec.layout();
        let theta = inst.soup[0].clone();
        let data = &inst.clients[0];
        let batch = Batch::new(data.features.clone(), data.labels.clone(), data.input_dim)?;
        let analytic = grad(&inst.spec, &ParamVector::from_values(layout, theta.clone())?, &batch)?.into_values();
        let analytic = maybe_flip(analytic, formula, opts);
        let numeric = central_difference(|t| oracle_loss(&inst.spec, t, &data.features, &data.labels), &theta);
        worst = worst.max(relative_error(&analytic, &numeric));
        max_params = max_params.max(theta.len());
    }
    Ok(result(formula, worst, opts.instances, max_params))
}

fn result(formula: Formula, worst: f64, instances: usize, max_params: usize) -> FormulaResult {
    FormulaResult {
        formula,
        worst_rel_err: worst,
        instances,
        max_params,
        passed: worst <= TOLERANCE,
    }
}

/// Server updates from one full-batch local step, converted to gradients.
fn server_gradients(inst: &Instance, mode: WeightMode, lr: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (m, d) = (inst.clients.len(), inst.soup.len());
    let layout = inst.spec.layout();
    let soup = ModelSoup::new(
        inst.soup
            .iter()
            .map(|t| ParamVector::from_values(layout.clone(), t.clone()))
            .collect::<Result<_>>()?,
    )?;
    let weights = MergeWeights::from_params(m, d, inst.params.clone(), mode)?;
    let local = LocalConfig {
        lr,
        epochs: 1,
        batch_size: usize::MAX,
    };
    let mut updates = Vec::with_capacity(m);
    for (i, client) in inst.clients.iter().enumerate() {
        let sent = crate::fedmerge::merge(&soup, &weights, i)?;
        let (_, delta) = local_sgd(&inst.spec, &sent, client, &local, &mut SeededRng::new(0, i as u64))?;
        updates.push(ClientUpdate { client: i, sent, delta });
    }
    let sizes = inst.sizes();
    let opts = WeightGradOptions {
        head_only: false,
        normalize: false,
    };
    let soup_delta = soup_update(&soup, &weights, &updates, &sizes)?;
    let weight_delta = match mode {
        WeightMode::Softmax => update_weights_softmax(&soup, &weights, &updates, &sizes, opts)?,
        WeightMode::Unconstrained => update_weights_unconstrained(&soup, &weights, &updates, &sizes, opts)?,
    };
    let soup_grad = soup_delta
        .iter()
        .flat_map(|t| t.as_slice().iter().map(|v| -v / lr))
        .collect();
    let weight_grad = weight_delta.iter().map(|v| -v / lr).collect();
    Ok((soup_grad, weight_grad))
}

fn check_server(
    opts: &GradcheckOptions,
    mode: WeightMode,
    soup_formula: Formula,
    weight_formula: Formula,
) -> Result<[FormulaResult; 2]> {
    const LR: f64 = 0.1;
    let (mut worst_soup, mut worst_weight): (f64, f64) = (0.0, 0.0);
    let mut max_params = 0;
    for k in 0..opts.instances {
        // Alternate model families so both are covered.
        let kind = if k % 2 == 0 { ModelKind::Mlp } else { ModelKind::Logistic };
        let inst = instance(opts, kind, mode, k)?;
        let (soup_grad, weight_grad) = server_gradients(&inst, mode, LR)?;
        let soup_grad = maybe_flip(soup_grad, soup_formula, opts);
        let weight_grad = maybe_flip(weight_grad, weight_formula, opts);

        let p = inst.soup[0].len();
        let flat: Vec<f64> = inst.soup.iter().flatten().copied().collect();
        let numeric_soup = central_difference(
            |x| {
                let soup: Vec<Vec<f64>> = x.chunks(p).map(<[f64]>::to_vec).collect();
                inst.objective(&soup, &inst.params, mode)
            },
            &flat,
        );
        let numeric_weight = central_difference(|a| inst.objective(&inst.soup, a, mode), &inst.params);
        worst_soup = worst_soup.max(relative_error(&soup_grad, &numeric_soup));
        worst_weight = worst_weight.max(relative_error(&weight_grad, &numeric_weight));
        max_params = max_params.max(p);
    }
    Ok([
        result(soup_formula, worst_soup, opts.instances, max_params),
        result(weight_formula, worst_weight, opts.instances, max_params),
    ])
}

/// Runs every check and reports the worst relative error per formula.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.instances == 0 || !(1..=3).contains(&opts.m) || !(1..=3).contains(&opts.d) {
        return Err(crate::error::Error::config(
            "gradcheck",
            "need instances >= 1 and 1 <= m, d <= 3",
        ));
    }
    let mut results = vec![
        check_model(opts, ModelKind::Logistic, Formula::ModelGradientLogistic)?,
        check_model(opts, ModelKind::Mlp, Formula::ModelGradientMlp)?,
    ];
    results.extend(check_server(
        opts,
        WeightMode::Unconstrained,
        Formula::SoupGradientUnconstrained,
        Formula::WeightGradientUnconstrained,
    )?);
    results.extend(check_server(
        opts,
        WeightMode::Softmax,
        Formula::SoupGradientSoftmax,
        Formula::LogitGradientSoftmax,
    )?);
    Ok(GradcheckReport { results })
}
