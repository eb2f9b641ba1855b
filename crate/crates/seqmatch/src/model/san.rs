//! Attention matcher: every response position weights the utterance
//! positions (word level over embeddings, segment level over GRU states),
//! the weighted utterance mix interacts with the response position by
//! Hadamard product, and an aggregation GRU over the interaction rows yields
//! the matching vector.

use rand::Rng;

use super::{at, Channels, EncoderOut, ModelConfig};
use crate::corpus::EncodedInstance;
use crate::layers::{gru_sequence, GruParams};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone)]
pub struct SanParams {
    pub word_w: ParamId,
    pub word_v: ParamId,
    pub word_b: ParamId,
    pub seg_w: ParamId,
    pub seg_v: ParamId,
    pub seg_b: ParamId,
    pub agg_gru: GruParams,
}

impl SanParams {
    pub fn init(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.embed_dim;
        let m = cfg.hidden;
        let word_w = params.add_uniform("san.att1.w", vec![d, d], rng);
        let word_v = params.add_uniform("san.att1.v", vec![d], rng);
        let word_b = params.add_zeros("san.att1.b", vec![d]);
        let seg_w = params.add_uniform("san.att2.w", vec![m, m], rng);
        let seg_v = params.add_uniform("san.att2.v", vec![m], rng);
        let seg_b = params.add_zeros("san.att2.b", vec![m]);
        let agg_gru = GruParams::init(
            params,
            "san.agg",
            cfg.san_interaction_width(),
            cfg.agg_hidden,
            cfg.gru_bias,
            rng,
        );
        SanParams { word_w, word_v, word_b, seg_w, seg_v, seg_b, agg_gru }
    }
}

/// Shared attention shape: raw pair scores through the bias-inside-tanh
/// profile, row softmax over unmasked utterance positions, weighted
/// utterance mix, Hadamard interaction with the response rows.
fn attend(
    tape: &mut Tape,
    resp_side: TensorId,  // n_r x w
    utt_side: TensorId,   // n_u x w
    map: TensorId,        // w x w
    profile: TensorId,    // w
    bias: TensorId,       // w
    utt_mask: &[bool],    // n_u, true = real token
) -> (TensorId, TensorId) {
    let rw = tape.matmul(resp_side, map);
    let ut = tape.transpose(utt_side);
    let raw = tape.matmul(rw, ut); // n_r x n_u
    let omega = tape.attention_scores(raw, profile, bias);
    let rows = tape.shape(omega)[0];
    let mask: Vec<bool> = (0..rows).flat_map(|_| utt_mask.iter().copied()).collect();
    let alpha = tape.masked_softmax(omega, &mask);
    let mix = tape.matmul(alpha, utt_side);
    let interaction = tape.hadamard(mix, resp_side);
    (interaction, alpha)
}

/// Word-level interaction T1 (`n_r x d`) and attention weights A1
/// (`n_r x n_u`). Pad positions of the utterance are masked in the softmax.
pub fn san_word_interaction(
    tape: &mut Tape,
    u_emb: TensorId,
    r_emb: TensorId,
    map: TensorId,
    profile: TensorId,
    bias: TensorId,
    utt_mask: &[bool],
) -> (TensorId, TensorId) {
    attend(tape, r_emb, u_emb, map, profile, bias, utt_mask)
}

/// Segment-level interaction T2 (`n_r x m`) and attention weights A2 over
/// GRU state sequences.
pub fn san_segment_interaction(
    tape: &mut Tape,
    h_u: TensorId,
    h_r: TensorId,
    map: TensorId,
    profile: TensorId,
    bias: TensorId,
    utt_mask: &[bool],
) -> (TensorId, TensorId) {
    attend(tape, h_r, h_u, map, profile, bias, utt_mask)
}

pub(crate) fn match_vectors(
    tape: &mut Tape,
    pmap: &[TensorId],
    cfg: &ModelConfig,
    params: &SanParams,
    inst: &EncodedInstance,
    enc: &EncoderOut,
    want_trace: bool,
) -> super::MatcherOutputs {
    let turns = enc.real_turns.len();
    let n_r = inst.response_len;
    if n_r == 0 {
        // Empty response: no interaction rows, the aggregation GRU never
        // leaves its zero start state.
        let zero = tape.zeros(vec![1, cfg.agg_hidden]);
        let traces = if want_trace { vec![(None, None); turns] } else { Vec::new() };
        return (vec![zero; turns], traces);
    }
    let need_words = cfg.channels != Channels::SegmentsOnly;
    let need_segments = cfg.channels != Channels::WordsOnly;

    // Real-prefix views of the response (rows beyond n_r never influence the
    // matching vector because the aggregation GRU is read at the last real
    // position, so they are not computed at all).
    let resp_rows = |tape: &mut Tape, full: TensorId| {
        let rows: Vec<TensorId> = (0..n_r).map(|t| tape.row(full, t)).collect();
        tape.concat_rows(&rows)
    };
    let r_emb = enc.resp_embed.map(|full| resp_rows(tape, full));
    let h_r = enc.resp_states.map(|full| resp_rows(tape, full));

    let mut interactions = Vec::with_capacity(turns);
    let mut traces = Vec::new();
    for turn in 0..turns {
        let turn_len = inst.turn_lens[enc.real_turns[turn]];
        let utt_mask: Vec<bool> = (0..cfg.max_len).map(|j| j < turn_len).collect();
        let word = need_words.then(|| {
            san_word_interaction(
                tape,
                enc.turn_embeds[turn],
                r_emb.expect("words channel embeds the response"),
                at(pmap, params.word_w),
                at(pmap, params.word_v),
                at(pmap, params.word_b),
                &utt_mask,
            )
        });
        let segment = need_segments.then(|| {
            san_segment_interaction(
                tape,
                enc.turn_states[turn],
                h_r.expect("segments channel encodes the response"),
                at(pmap, params.seg_w),
                at(pmap, params.seg_v),
                at(pmap, params.seg_b),
                &utt_mask,
            )
        });
        let parts: Vec<TensorId> =
            [word.map(|w| w.0), segment.map(|s| s.0)].into_iter().flatten().collect();
        let t = if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts) };
        interactions.push(t);
        if want_trace {
            traces.push((word.map(|w| w.1), segment.map(|s| s.1)));
        }
    }

    // Aggregation GRU batched across turns: step t stacks row t of every
    // turn's interaction matrix.
    let steps: Vec<TensorId> = (0..n_r)
        .map(|t| {
            let rows: Vec<TensorId> =
                interactions.iter().map(|&m| tape.row(m, t)).collect();
            tape.concat_rows(&rows)
        })
        .collect();
    let gru_steps = gru_sequence(tape, pmap, &params.agg_gru, &steps, None);
    let last = gru_steps.last().expect("n_r >= 1").state;
    let vectors: Vec<TensorId> = (0..turns).map(|i| tape.row(last, i)).collect();
    (vectors, traces)
}
