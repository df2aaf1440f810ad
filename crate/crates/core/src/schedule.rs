//! Randomness schedule shared by every federated method.
//!
//! Client sampling, local shuffling and model initialization are keyed by
//! `(seed, round, client)` only, so two methods run with the same seed see
//! the same participants and minibatch orders. That is what makes
//! trajectory comparisons between methods meaningful.

use std::sync::Arc;

use rand::seq::index;

use crate::model::ModelSpec;
use crate::param::{random_init, InitScheme, LayerLayout, ParamVector, SeededRng};

const TAG_INIT: u64 = 0x1417_0001;
const TAG_SAMPLE: u64 = 0x1417_0002;
const TAG_LOCAL: u64 = 0x1417_0003;
const TAG_FINETUNE: u64 = 0x1417_0004;
const TAG_SUBSET: u64 = 0x1417_0005;
const TAG_PROBE: u64 = 0x1417_0006;

/// The `index`-th randomly initialized global model for `seed`.
pub fn init_global_model(spec: &ModelSpec, seed: u64, index: usize, scheme: InitScheme) -> ParamVector {
    init_with_layout(&spec.layout(), seed, index, scheme)
}

pub fn init_with_layout(layout: &Arc<LayerLayout>, seed: u64, index: usize, scheme: InitScheme) -> ParamVector {
    let mut rng = SeededRng::derived(seed, &[TAG_INIT, index as u64]);
    random_init(layout, &mut rng, scheme)
}

/// Sorted participant indices for `round`; everyone when `k >= m`.
pub fn sample_clients(seed: u64, round: usize, m: usize, k: usize) -> Vec<usize> {
    if k >= m {
        return (0..m).collect();
    }
    let mut rng = SeededRng::derived(seed, &[TAG_SAMPLE, round as u64]);
    let mut picked = index::sample(&mut rng, m, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Shuffling stream for one client's local training in `round`.
pub fn local_rng(seed: u64, round: usize, client: usize) -> SeededRng {
    SeededRng::derived(seed, &[TAG_LOCAL, round as u64, client as u64])
}

/// Stream for training the `model`-th local copy when a client trains
/// several models in one round.
pub fn local_model_rng(seed: u64, round: usize, client: usize, model: usize) -> SeededRng {
    SeededRng::derived(seed, &[TAG_LOCAL, round as u64, client as u64, model as u64])
}

pub fn finetune_rng(seed: u64, round: usize, client: usize) -> SeededRng {
    SeededRng::derived(seed, &[TAG_FINETUNE, round as u64, client as u64])
}

pub fn subset_rng(seed: u64, variant: u64) -> SeededRng {
    SeededRng::derived(seed, &[TAG_SUBSET, variant])
}

pub fn probe_rng(seed: u64) -> SeededRng {
    SeededRng::derived(seed, &[TAG_PROBE])
}
