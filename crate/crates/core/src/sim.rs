//! Round loop shared by FedMerge and the baselines.

use crate::data::ClientDataset;
use crate::error::Result;
use crate::model::ModelSpec;
use crate::report::{evaluate_all, weighted_averages, Diagnostics, Predictor, RoundReport, RoundStats};

/// A federated training method driven round by round.
pub trait Algorithm: Send + Sync {
    fn name(&self) -> &str;

    fn spec(&self) -> &ModelSpec;

    fn step(&mut self, clients: &[ClientDataset]) -> Result<RoundStats>;

    /// The model (or ensemble) client `client` would use right now.
    fn predictor(&self, client: usize, data: &ClientDataset) -> Result<Predictor>;

    /// Current `m × d` merge weights, for methods that have them.
    fn weight_matrix(&self) -> Option<Vec<Vec<f64>>> {
        None
    }

    fn initial_diagnostics(&self) -> Diagnostics {
        Diagnostics::default()
    }
}

/// Evaluation reports (every `eval_every` rounds plus the first and last)
/// and per-round statistics.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub reports: Vec<RoundReport>,
    pub stats: Vec<RoundStats>,
}

impl Trajectory {
    pub fn final_report(&self) -> Option<&RoundReport> {
        self.reports.last()
    }
}

pub fn evaluate_round<A: Algorithm + ?Sized>(
    alg: &A,
    clients: &[ClientDataset],
    round: usize,
    selected: Vec<usize>,
    diagnostics: Diagnostics,
) -> Result<RoundReport> {
    let per_client = evaluate_all(alg.spec(), clients, |i, data| alg.predictor(i, data))?;
    Ok(RoundReport {
        round,
        weighted_avg: weighted_averages(&per_client),
        per_client,
        selected_clients: selected,
        diagnostics,
    })
}

/// Runs `rounds` rounds. `hook` sees the algorithm after initialization
/// (round 0) and after every round.
pub fn simulate<A, H>(
    alg: &mut A,
    clients: &[ClientDataset],
    rounds: usize,
    eval_every: usize,
    mut hook: H,
) -> Result<Trajectory>
where
    A: Algorithm + ?Sized,
    H: FnMut(usize, &A) -> Result<()>,
{
    let eval_every = eval_every.max(1);
    let mut out = Trajectory::default();
    hook(0, alg)?;
    out.reports
        .push(evaluate_round(&*alg, clients, 0, Vec::new(), alg.initial_diagnostics())?);
    for round in 1..=rounds {
        let stats = alg.step(clients)?;
        for w in &stats.warnings {
            log::warn!("round {round}: {w}");
        }
        hook(round, alg)?;
        if round % eval_every == 0 || round == rounds {
            out.reports.push(evaluate_round(
                &*alg,
                clients,
                round,
                stats.selected.clone(),
                stats.diagnostics.clone(),
            )?);
        }
        out.stats.push(stats);
    }
    Ok(out)
}
