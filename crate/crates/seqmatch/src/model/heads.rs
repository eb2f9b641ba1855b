//! Prediction heads: last state, static average with learned per-position
//! weights, and dynamic (attention-weighted) average over the accumulator
//! states. Every head emits a 2-class softmax; the class-1 component is the
//! matching degree g.

use rand::Rng;

use super::{at, ModelConfig};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Last,
    Static,
    Dynamic,
}

#[derive(Debug, Clone)]
pub enum HeadParams {
    Last {
        w: ParamId,
        b: ParamId,
    },
    /// `positions` holds one input-independent weight per context position,
    /// indexed by right-aligned position (the current message is always the
    /// final one).
    Static {
        positions: ParamId,
        w: ParamId,
        b: ParamId,
    },
    Dynamic {
        /// Virtual context vector t_s, stored `q x 1`.
        profile: ParamId,
        /// Maps the last utterance's final encoder state (m) to q.
        w_utt: ParamId,
        /// Maps an accumulator state (q) to q.
        w_acc: ParamId,
        b_att: ParamId,
        w: ParamId,
        b: ParamId,
    },
}

impl HeadParams {
    pub fn init(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let q = cfg.acc_hidden;
        match cfg.head {
            HeadKind::Last => HeadParams::Last {
                w: params.add_uniform("head.w", vec![q, 2], rng),
                b: params.add_zeros("head.b", vec![2]),
            },
            HeadKind::Static => HeadParams::Static {
                positions: params.add_uniform("head.positions", vec![cfg.max_turns], rng),
                w: params.add_uniform("head.w", vec![q, 2], rng),
                b: params.add_zeros("head.b", vec![2]),
            },
            HeadKind::Dynamic => HeadParams::Dynamic {
                profile: params.add_uniform("head.ts", vec![q, 1], rng),
                w_utt: params.add_uniform("head.w_utt", vec![cfg.hidden, q], rng),
                w_acc: params.add_uniform("head.w_acc", vec![q, q], rng),
                b_att: params.add_zeros("head.b_att", vec![q]),
                w: params.add_uniform("head.w", vec![q, 2], rng),
                b: params.add_zeros("head.b", vec![2]),
            },
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            HeadParams::Last { .. } => HeadKind::Last,
            HeadParams::Static { .. } => HeadKind::Static,
            HeadParams::Dynamic { .. } => HeadKind::Dynamic,
        }
    }
}

fn class_probs(tape: &mut Tape, h: TensorId, w: ParamId, b: ParamId, pmap: &[TensorId]) -> TensorId {
    let logits = tape.matmul(h, at(pmap, w));
    let logits = tape.add_row(logits, at(pmap, b));
    tape.softmax_row(logits)
}

/// Maps accumulator states h_1..h_n (each `1 x q`) to a `1 x 2` probability
/// row. `last_utt_state` is the final word-GRU state of the current message
/// (`1 x m`), required by the dynamic head. `max_turns` anchors static
/// position weights: the j-th of n states uses weight `max_turns - n + j`.
pub fn predict(
    tape: &mut Tape,
    pmap: &[TensorId],
    head: &HeadParams,
    states: &[TensorId],
    last_utt_state: Option<TensorId>,
    max_turns: usize,
) -> TensorId {
    assert!(!states.is_empty(), "predict: need at least one accumulator state");
    match head {
        HeadParams::Last { w, b } => {
            class_probs(tape, *states.last().unwrap(), *w, *b, pmap)
        }
        HeadParams::Static { positions, w, b } => {
            let n = states.len();
            assert!(n <= max_turns, "predict: {n} states exceed {max_turns} positions");
            let mut combined: Option<TensorId> = None;
            for (j, &h) in states.iter().enumerate() {
                let wj = tape.element(at(pmap, *positions), max_turns - n + j);
                let term = tape.mul_scalar(h, wj);
                combined = Some(match combined {
                    Some(acc) => tape.add(acc, term),
                    None => term,
                });
            }
            class_probs(tape, combined.unwrap(), *w, *b, pmap)
        }
        HeadParams::Dynamic { profile, w_utt, w_acc, b_att, w, b } => {
            let hu = last_utt_state
                .expect("dynamic head requires the final encoder state of the current message");
            let base = tape.matmul(hu, at(pmap, *w_utt));
            let scores: Vec<TensorId> = states
                .iter()
                .map(|&h| {
                    let hw = tape.matmul(h, at(pmap, *w_acc));
                    let pre = tape.add(base, hw);
                    let pre = tape.add_row(pre, at(pmap, *b_att));
                    let e = tape.tanh(pre);
                    tape.matmul(e, at(pmap, *profile))
                })
                .collect();
            let score_row = tape.concat_cols(&scores);
            let alpha = tape.softmax_row(score_row);
            let mut combined: Option<TensorId> = None;
            for (j, &h) in states.iter().enumerate() {
                let aj = tape.element(alpha, j);
                let term = tape.mul_scalar(h, aj);
                combined = Some(match combined {
                    Some(acc) => tape.add(acc, term),
                    None => term,
                });
            }
            class_probs(tape, combined.unwrap(), *w, *b, pmap)
        }
    }
}
