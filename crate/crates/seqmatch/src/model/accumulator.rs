//! Matching accumulation: a GRU over the per-turn matching vectors in
//! utterance order, with gate activations kept for trace export.

use rand::Rng;

use super::ModelConfig;
use crate::layers::{gru_sequence, GruParams};
use crate::params::ParamSet;
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone)]
pub struct AccumulatorParams {
    pub gru: GruParams,
}

impl AccumulatorParams {
    pub fn init(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let gru = GruParams::init(params, "acc", cfg.match_width(), cfg.acc_hidden, cfg.gru_bias, rng);
        AccumulatorParams { gru }
    }
}

pub struct AccumOut {
    /// h_1..h_n, each `1 x q`.
    pub states: Vec<TensorId>,
    /// Update/reset gate activations per turn, for traces.
    pub update_gates: Vec<TensorId>,
    pub reset_gates: Vec<TensorId>,
}

/// Runs the accumulation recurrence from h_0 = 0 over n >= 1 matching
/// vectors (each `1 x width`).
pub fn accumulate_matching(
    tape: &mut Tape,
    pmap: &[TensorId],
    params: &AccumulatorParams,
    match_vectors: &[TensorId],
) -> AccumOut {
    assert!(!match_vectors.is_empty(), "accumulate_matching: need at least one matching vector");
    for &v in match_vectors {
        assert_eq!(
            tape.shape(v),
            &[1, params.gru.input_dim],
            "accumulate_matching: matching vector width {:?} does not match accumulator input {}",
            tape.shape(v),
            params.gru.input_dim
        );
    }
    let steps = gru_sequence(tape, pmap, &params.gru, match_vectors, None);
    AccumOut {
        states: steps.iter().map(|s| s.state).collect(),
        update_gates: steps.iter().map(|s| s.update_gate).collect(),
        reset_gates: steps.iter().map(|s| s.reset_gate).collect(),
    }
}
