//! Per-pair diagnostic traces: the similarity or attention grid of every
//! real turn plus the accumulator gate activations, trimmed to real token
//! lengths for export.

use super::accumulator::AccumOut;
use super::{MatcherKind, ModelConfig};
use crate::corpus::EncodedInstance;
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone)]
pub struct TurnTrace {
    /// M1 (utterance x response) for the convolutional matcher, A1
    /// (response x utterance) for the attention matcher.
    pub word: Option<Grid>,
    /// M2 or A2, same orientations.
    pub segment: Option<Grid>,
}

#[derive(Debug, Clone)]
pub struct MatchTrace {
    pub matcher: MatcherKind,
    pub turns: Vec<TurnTrace>,
    /// Mean update-gate activation of the accumulator, one value per turn.
    pub update_gates: Vec<f64>,
    pub reset_gates: Vec<f64>,
}

fn top_left(tape: &Tape, id: TensorId, rows: usize, cols: usize) -> Grid {
    let shape = tape.shape(id);
    let (full_rows, full_cols) = (shape[0], shape[1]);
    assert!(rows <= full_rows && cols <= full_cols);
    let src = tape.data(id);
    let mut values = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        values.extend_from_slice(&src[i * full_cols..i * full_cols + cols]);
    }
    Grid { rows, cols, values }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub(crate) fn harvest(
    tape: &Tape,
    cfg: &ModelConfig,
    inst: &EncodedInstance,
    real_turns: &[usize],
    turn_ids: Vec<(Option<TensorId>, Option<TensorId>)>,
    acc: &AccumOut,
) -> MatchTrace {
    let n_r = inst.response_len;
    let turns = turn_ids
        .into_iter()
        .enumerate()
        .map(|(i, (word, segment))| {
            let n_u = inst.turn_lens[real_turns[i]];
            // The convolutional matcher produces utterance x response grids
            // over the padded window; the attention matcher produces
            // response x utterance grids over real response rows.
            let (rows, cols) = match cfg.matcher {
                MatcherKind::Scn => (n_u, n_r),
                MatcherKind::San => (n_r, n_u),
            };
            TurnTrace {
                word: word.map(|id| top_left(tape, id, rows, cols)),
                segment: segment.map(|id| top_left(tape, id, rows, cols)),
            }
        })
        .collect();
    MatchTrace {
        matcher: cfg.matcher,
        turns,
        update_gates: acc.update_gates.iter().map(|&g| mean(tape.data(g))).collect(),
        reset_gates: acc.reset_gates.iter().map(|&g| mean(tape.data(g))).collect(),
    }
}
