//! Per-round statistics and evaluation records.

use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, Split};
use crate::error::Result;
use crate::model::{forward, score_logits, Batch, ModelSpec};
use crate::param::ParamVector;

/// Server-side monitors recorded after every round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `sum_i ||delta theta_i||^2` over participating clients.
    pub sum_delta_sq: f64,
    /// `max_j ||Theta_j||` after the update.
    pub max_model_norm: f64,
    /// Largest deviation of a merge-weight row from the probability simplex.
    pub simplex_violation: Option<f64>,
    /// Largest `|sum_j delta a_ij|` over participating clients, before row normalization.
    pub zero_sum_violation: Option<f64>,
    /// Wall time of the merge and update phases (excludes local training).
    pub server_time: Duration,
}

/// Outcome of one communication round.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundStats {
    /// 1-based index of the completed round.
    pub round: usize,
    pub selected: Vec<usize>,
    /// Selected clients skipped for having no training data.
    pub skipped: Vec<usize>,
    pub diagnostics: Diagnostics,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client: usize,
    pub split: Split,
    pub loss: f64,
    pub acc: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: Split,
    pub loss: f64,
    pub acc: f64,
    pub n: usize,
}

/// Evaluation snapshot at one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub per_client: Vec<ClientMetrics>,
    pub weighted_avg: Vec<SplitMetrics>,
    pub selected_clients: Vec<usize>,
    pub diagnostics: Diagnostics,
}

impl RoundReport {
    pub fn split(&self, split: Split) -> Option<&SplitMetrics> {
        self.weighted_avg.iter().find(|s| s.split == split)
    }
}

/// Sample-weighted averages per split.
pub fn weighted_averages(per_client: &[ClientMetrics]) -> Vec<SplitMetrics> {
    Split::ALL
        .iter()
        .filter_map(|&split| {
            let rows: Vec<_> = per_client.iter().filter(|c| c.split == split).collect();
            let n: usize = rows.iter().map(|c| c.n).sum();
            (n > 0).then(|| SplitMetrics {
                split,
                loss: rows.iter().map(|c| c.loss * c.n as f64).sum::<f64>() / n as f64,
                acc: rows.iter().map(|c| c.acc * c.n as f64).sum::<f64>() / n as f64,
                n,
            })
        })
        .collect()
}

/// How a method predicts for one client.
#[derive(Debug, Clone)]
pub enum Predictor {
    Single(ParamVector),
    /// Logit ensemble: `sum_j r_j * logits_j`.
    Ensemble(Vec<(f64, ParamVector)>),
}

impl Predictor {
    pub fn logits(&self, spec: &ModelSpec, batch: &Batch) -> Result<Vec<f64>> {
        match self {
            Predictor::Single(theta) => Ok(forward(spec, theta, batch)?.1),
            Predictor::Ensemble(members) => {
                let mut out = vec![0.0; batch.len() * spec.num_classes];
                for (r, theta) in members {
                    let z = forward(spec, theta, batch)?.1;
                    for (o, v) in out.iter_mut().zip(z) {
                        *o += r * v;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Loss and accuracy on every non-empty split.
    pub fn evaluate(&self, spec: &ModelSpec, client: usize, data: &ClientDataset) -> Result<Vec<ClientMetrics>> {
        let mut out = Vec::with_capacity(3);
        for split in Split::ALL {
            let Some(batch) = data.split_batch(split) else {
                continue;
            };
            let logits = self.logits(spec, &batch)?;
            let (loss, acc) = score_logits(&logits, &batch.labels, spec.num_classes);
            out.push(ClientMetrics {
                client,
                split,
                loss,
                acc,
                n: batch.len(),
            });
        }
        Ok(out)
    }
}

/// Evaluates `predictor(i)` for every client, in parallel, in client order.
pub fn evaluate_all<F>(spec: &ModelSpec, clients: &[ClientDataset], predictor: F) -> Result<Vec<ClientMetrics>>
where
    F: Fn(usize, &ClientDataset) -> Result<Predictor> + Sync,
{
    let per_client: Vec<Vec<ClientMetrics>> = clients
        .par_iter()
        .enumerate()
        .map(|(i, data)| predictor(i, data)?.evaluate(spec, i, data))
        .collect::<Result<_>>()?;
    Ok(per_client.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_average_uses_split_sizes() {
        let rows = vec![
            ClientMetrics { client: 0, split: Split::Test, loss: 1.0, acc: 0.5, n: 10 },
            ClientMetrics { client: 1, split: Split::Test, loss: 3.0, acc: 1.0, n: 30 },
            ClientMetrics { client: 0, split: Split::Train, loss: 2.0, acc: 0.25, n: 4 },
        ];
        let avg = weighted_averages(&rows);
        assert_eq!(avg.len(), 2);
        let test = avg.iter().find(|s| s.split == Split::Test).unwrap();
        assert_eq!(test.n, 40);
        assert!((test.loss - 2.5).abs() < 1e-15);
        assert!((test.acc - 0.875).abs() < 1e-15);
    }
}
