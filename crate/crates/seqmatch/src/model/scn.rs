//! Convolutional matcher: a word-level dot-product similarity matrix and a
//! segment-level bilinear similarity matrix stacked as channels, passed
//! through conv+pool blocks and projected to the matching vector.

use rand::Rng;

use super::{at, Channels, EncoderOut, ModelConfig};
use crate::corpus::EncodedInstance;
use crate::params::{ParamId, ParamSet};
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernels: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct ScnParams {
    /// Bilinear map A of the segment similarity matrix.
    pub bilinear: ParamId,
    pub conv: Vec<ConvLayer>,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

impl ScnParams {
    pub fn init(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let bilinear = params.add_uniform("scn.a", vec![cfg.hidden, cfg.hidden], rng);
        let (kh, kw) = cfg.conv_window;
        let mut in_channels = cfg.scn_in_channels();
        let mut conv = Vec::with_capacity(cfg.conv_depth);
        for layer in 0..cfg.conv_depth {
            let kernels = params.add_uniform(
                &format!("scn.conv{layer}.w"),
                vec![cfg.conv_kernels, in_channels, kh, kw],
                rng,
            );
            let bias = params.add_zeros(&format!("scn.conv{layer}.b"), vec![cfg.conv_kernels]);
            conv.push(ConvLayer { kernels, bias });
            in_channels = cfg.conv_kernels;
        }
        let flat = cfg.scn_flat_dim().expect("validated configuration");
        let proj_w = params.add_uniform("scn.proj.w", vec![flat, cfg.match_dim], rng);
        let proj_b = params.add_zeros("scn.proj.b", vec![cfg.match_dim]);
        ScnParams { bilinear, conv, proj_w, proj_b }
    }
}

/// M1[i][j] = e_u_i . e_r_j over embedded sequences (`n_u x d`, `n_r x d`).
pub fn word_similarity_matrix(tape: &mut Tape, u_emb: TensorId, r_emb: TensorId) -> TensorId {
    let rt = tape.transpose(r_emb);
    tape.matmul(u_emb, rt)
}

/// M2[i][j] = h_u_i^T A h_r_j over GRU state sequences.
pub fn segment_similarity_matrix(
    tape: &mut Tape,
    h_u: TensorId,
    h_r: TensorId,
    bilinear: TensorId,
) -> TensorId {
    let ha = tape.matmul(h_u, bilinear);
    let hrt = tape.transpose(h_r);
    tape.matmul(ha, hrt)
}

pub(crate) fn match_vectors(
    tape: &mut Tape,
    pmap: &[TensorId],
    cfg: &ModelConfig,
    params: &ScnParams,
    _inst: &EncodedInstance,
    enc: &EncoderOut,
    want_trace: bool,
) -> super::MatcherOutputs {
    let l = cfg.max_len;
    let need_words = cfg.channels != Channels::SegmentsOnly;
    let need_segments = cfg.channels != Channels::WordsOnly;

    let resp_embed_t = enc.resp_embed.map(|r| tape.transpose(r));
    let resp_states_t = enc.resp_states.map(|r| tape.transpose(r));
    let bilinear = at(pmap, params.bilinear);

    let mut vectors = Vec::with_capacity(enc.real_turns.len());
    let mut traces = Vec::new();
    for turn in 0..enc.real_turns.len() {
        let m1 = need_words.then(|| {
            let rt = resp_embed_t.expect("words channel embeds the response");
            tape.matmul(enc.turn_embeds[turn], rt)
        });
        let m2 = need_segments.then(|| {
            let ha = tape.matmul(enc.turn_states[turn], bilinear);
            let rt = resp_states_t.expect("segments channel encodes the response");
            tape.matmul(ha, rt)
        });
        let channels: Vec<TensorId> = [m1, m2].into_iter().flatten().collect();
        let stacked = tape.concat_rows(&channels);
        let mut x = tape.reshape(stacked, vec![channels.len(), l, l]);
        for layer in &params.conv {
            x = tape.conv2d_relu(x, at(pmap, layer.kernels), at(pmap, layer.bias));
            x = tape.maxpool2d(x, cfg.pool_window);
        }
        let flat_dim: usize = tape.shape(x).iter().product();
        let flat = tape.reshape(x, vec![1, flat_dim]);
        let proj = tape.matmul(flat, at(pmap, params.proj_w));
        let v = tape.add_row(proj, at(pmap, params.proj_b));
        vectors.push(v);
        if want_trace {
            traces.push((m1, m2));
        }
    }
    (vectors, traces)
}
