//! The sequential matching models: per-turn utterance-response matchers
//! (convolutional and attention variants), the matching-accumulation GRU,
//! and the prediction heads, composed into [`MatchModel::score`].
//!
//! Pad policy: contexts are right-aligned when encoded, and the model runs
//! matcher and accumulator over real turns only, so a score is exactly
//! invariant to pad turns. The static head indexes its position weights by a
//! turn's right-aligned position, which keeps that invariance while matching
//! per-position weights on fully-padded encodings.

mod accumulator;
mod heads;
mod san;
mod scn;
mod trace;

pub use accumulator::{accumulate_matching, AccumOut, AccumulatorParams};
pub use heads::{predict, HeadKind, HeadParams};
pub use san::{san_segment_interaction, san_word_interaction, SanParams};
pub use scn::{segment_similarity_matrix, word_similarity_matrix, ConvLayer, ScnParams};
pub use trace::{Grid, MatchTrace, TurnTrace};

use rand::Rng;

use crate::corpus::EncodedInstance;
use crate::error::{Error, Result};
use crate::layers::{gru_sequence, EmbeddingTable, GruParams, GruStep};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatcherKind {
    Scn,
    San,
}

/// Word-level / segment-level channel ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channels {
    Both,
    WordsOnly,
    SegmentsOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub matcher: MatcherKind,
    pub head: HeadKind,
    pub channels: Channels,
    /// Word embedding size d.
    pub embed_dim: usize,
    /// Word-sequence GRU hidden size m.
    pub hidden: usize,
    /// Matching-vector size of the convolutional matcher (projection output).
    pub match_dim: usize,
    /// Accumulation GRU hidden size q.
    pub acc_hidden: usize,
    /// Aggregation GRU hidden size of the attention matcher.
    pub agg_hidden: usize,
    pub conv_kernels: usize,
    pub conv_window: (usize, usize),
    pub pool_window: (usize, usize),
    pub conv_depth: usize,
    pub max_turns: usize,
    pub max_len: usize,
    pub gru_bias: bool,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// The published hyperparameter setting: d = m = 200, one 8-kernel 3x3
    /// conv + 3x3 pool block, 50-wide matching vectors and accumulator,
    /// 400-wide attention aggregation, last 10 turns of 50 tokens.
    pub fn defaults(matcher: MatcherKind, vocab_size: usize) -> Self {
        ModelConfig {
            matcher,
            head: HeadKind::Last,
            channels: Channels::Both,
            embed_dim: 200,
            hidden: 200,
            match_dim: 50,
            acc_hidden: 50,
            agg_hidden: 400,
            conv_kernels: 8,
            conv_window: (3, 3),
            pool_window: (3, 3),
            conv_depth: 1,
            max_turns: 10,
            max_len: 50,
            gru_bias: false,
            vocab_size,
        }
    }

    /// Width of the per-turn matching vector fed to the accumulator.
    pub fn match_width(&self) -> usize {
        match self.matcher {
            MatcherKind::Scn => self.match_dim,
            MatcherKind::San => self.agg_hidden,
        }
    }

    /// Row width of an attention-matcher interaction: word and segment parts
    /// concatenated, or one of them under ablation.
    pub fn san_interaction_width(&self) -> usize {
        match self.channels {
            Channels::Both => self.embed_dim + self.hidden,
            Channels::WordsOnly => self.embed_dim,
            Channels::SegmentsOnly => self.hidden,
        }
    }

    pub fn scn_in_channels(&self) -> usize {
        if self.channels == Channels::Both {
            2
        } else {
            1
        }
    }

    /// Spatial dimensions after each conv+pool block, and the flattened size
    /// fed to the matching-vector projection.
    pub fn scn_flat_dim(&self) -> Result<usize> {
        let (mut h, mut w) = (self.max_len, self.max_len);
        let (kh, kw) = self.conv_window;
        let (ph, pw) = self.pool_window;
        for layer in 0..self.conv_depth {
            if kh > h || kw > w {
                return Err(Error::Config(format!(
                    "conv layer {layer}: window {kh}x{kw} larger than input {h}x{w}"
                )));
            }
            h = (h - kh + 1).div_ceil(ph);
            w = (w - kw + 1).div_ceil(pw);
        }
        Ok(self.conv_kernels * h * w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("match_dim", self.match_dim),
            ("acc_hidden", self.acc_hidden),
            ("agg_hidden", self.agg_hidden),
            ("conv_kernels", self.conv_kernels),
            ("conv_depth", self.conv_depth),
            ("max_turns", self.max_turns),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocabulary must at least hold pad and unk".into()));
        }
        self.scn_flat_dim()?;
        Ok(())
    }
}

pub enum MatcherParams {
    Scn(ScnParams),
    San(SanParams),
}

/// A complete matcher + accumulator + head with its parameter store.
pub struct MatchModel {
    pub config: ModelConfig,
    pub embedding: EmbeddingTable,
    pub word_gru: GruParams,
    pub matcher: MatcherParams,
    pub accumulator: AccumulatorParams,
    pub head: HeadParams,
    pub params: ParamSet,
}

impl MatchModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Self {
        Self::with_embedding(config, None, rng)
    }

    /// `embedding_init`, when given, is a prebuilt `vocab_size x embed_dim`
    /// matrix (pretrained vectors merged with random rows).
    pub fn with_embedding(
        config: ModelConfig,
        embedding_init: Option<Vec<f64>>,
        rng: &mut impl Rng,
    ) -> Self {
        config.validate().expect("invalid model configuration");
        let mut params = ParamSet::new();
        let embedding = match embedding_init {
            Some(data) => EmbeddingTable::from_matrix(
                &mut params,
                "embedding",
                config.vocab_size,
                config.embed_dim,
                crate::corpus::PAD_ID,
                data,
            ),
            None => EmbeddingTable::init(
                &mut params,
                "embedding",
                config.vocab_size,
                config.embed_dim,
                crate::corpus::PAD_ID,
                rng,
            ),
        };
        let word_gru = GruParams::init(
            &mut params,
            "word_gru",
            config.embed_dim,
            config.hidden,
            config.gru_bias,
            rng,
        );
        let matcher = match config.matcher {
            MatcherKind::Scn => MatcherParams::Scn(ScnParams::init(&mut params, &config, rng)),
            MatcherKind::San => MatcherParams::San(SanParams::init(&mut params, &config, rng)),
        };
        let accumulator = AccumulatorParams::init(&mut params, &config, rng);
        let head = HeadParams::init(&mut params, &config, rng);
        MatchModel { config, embedding, word_gru, matcher, accumulator, head, params }
    }

    /// Pushes all parameters onto a tape. `trainable` enables gradients;
    /// `freeze_embeddings` keeps the table out of the gradient set.
    pub fn insert_params(
        &self,
        tape: &mut Tape,
        trainable: bool,
        freeze_embeddings: bool,
    ) -> Vec<TensorId> {
        let table = self.embedding.weights;
        self.params
            .insert_into(tape, |id| trainable && !(freeze_embeddings && id == table))
    }

    /// Builds the full scoring graph for one instance and returns the
    /// matching probability node (a `[1]` tensor holding g in (0,1)).
    pub fn forward(
        &self,
        tape: &mut Tape,
        pmap: &[TensorId],
        inst: &EncodedInstance,
        want_trace: bool,
    ) -> ForwardPass {
        assert_eq!(
            inst.max_len, self.config.max_len,
            "instance encoded with max_len {} but model expects {}",
            inst.max_len, self.config.max_len
        );
        let enc = self.encode(tape, pmap, inst);
        let (match_vectors, trace_turns) = match &self.matcher {
            MatcherParams::Scn(p) => {
                scn::match_vectors(tape, pmap, &self.config, p, inst, &enc, want_trace)
            }
            MatcherParams::San(p) => {
                san::match_vectors(tape, pmap, &self.config, p, inst, &enc, want_trace)
            }
        };
        let acc = accumulate_matching(tape, pmap, &self.accumulator, &match_vectors);
        let probs = predict(
            tape,
            pmap,
            &self.head,
            &acc.states,
            Some(enc.last_turn_final_state),
            self.config.max_turns,
        );
        let prob = tape.element(probs, 1);
        let trace = want_trace.then(|| {
            trace::harvest(tape, &self.config, inst, &enc.real_turns, trace_turns, &acc)
        });
        ForwardPass { prob, probs, trace }
    }

    /// Deterministic matching degree g(context, response) in (0,1).
    pub fn score(&self, inst: &EncodedInstance) -> f64 {
        let mut tape = Tape::new();
        let pmap = self.insert_params(&mut tape, false, true);
        let pass = self.forward(&mut tape, &pmap, inst, false);
        tape.scalar(pass.prob)
    }

    /// Score plus the similarity/attention grids and accumulator gate means.
    pub fn score_traced(&self, inst: &EncodedInstance) -> (f64, MatchTrace) {
        let mut tape = Tape::new();
        let pmap = self.insert_params(&mut tape, false, true);
        let pass = self.forward(&mut tape, &pmap, inst, true);
        (tape.scalar(pass.prob), pass.trace.expect("trace requested"))
    }

    /// Matching vector of a single utterance-response pair (test surface for
    /// the per-pair matcher).
    pub fn pair_match_vector(&self, utterance: &[u32], response: &[u32]) -> Vec<f64> {
        let l = self.config.max_len;
        let pad = |ids: &[u32]| {
            let mut v = ids[..ids.len().min(l)].to_vec();
            v.resize(l, crate::corpus::PAD_ID);
            v
        };
        let turns = pad(utterance);
        let resp = pad(response);
        let inst = EncodedInstance {
            max_turns: 1,
            max_len: l,
            turns: &turns,
            turn_lens: &[utterance.len().min(l)],
            response: &resp,
            response_len: response.len().min(l),
            label: 0,
            turn_count: 1,
        };
        let mut tape = Tape::new();
        let pmap = self.insert_params(&mut tape, false, true);
        let enc = self.encode(&mut tape, &pmap, &inst);
        let (vs, _) = match &self.matcher {
            MatcherParams::Scn(p) => {
                scn::match_vectors(&mut tape, &pmap, &self.config, p, &inst, &enc, false)
            }
            MatcherParams::San(p) => {
                san::match_vectors(&mut tape, &pmap, &self.config, p, &inst, &enc, false)
            }
        };
        tape.data(vs[0]).to_vec()
    }

    /// Shared encoder: embeds the real turns and the response, and runs the
    /// word-sequence GRU over all of them as one batch (one row per
    /// sequence, response last).
    fn encode(&self, tape: &mut Tape, pmap: &[TensorId], inst: &EncodedInstance) -> EncoderOut {
        let cfg = &self.config;
        let real_turns = inst.real_turns();
        assert!(
            real_turns.len() <= cfg.max_turns,
            "instance has {} real turns but model expects at most {}",
            real_turns.len(),
            cfg.max_turns
        );
        let need_words = cfg.channels != Channels::SegmentsOnly;
        let need_segments = cfg.channels != Channels::WordsOnly;
        let need_gru = need_segments || cfg.head == HeadKind::Dynamic;
        let table = pmap[self.embedding.weights.index()];
        let l = cfg.max_len;

        let turn_embeds: Vec<TensorId> = if need_words {
            real_turns.iter().map(|&t| tape.embed(table, inst.turn(t))).collect()
        } else {
            Vec::new()
        };
        let resp_embed = need_words.then(|| tape.embed(table, inst.response));

        let mut turn_states = Vec::new();
        let mut resp_states = None;
        let mut last_turn_final_state = None;
        if need_gru {
            let seqs: Vec<&[u32]> =
                real_turns.iter().map(|&t| inst.turn(t)).chain([inst.response]).collect();
            let steps: Vec<TensorId> = (0..l)
                .map(|t| {
                    let ids: Vec<u32> = seqs.iter().map(|s| s[t]).collect();
                    tape.embed(table, &ids)
                })
                .collect();
            let gru_steps: Vec<GruStep> =
                gru_sequence(tape, pmap, &self.word_gru, &steps, None);
            let states_of = |tape: &mut Tape, seq: usize, len: usize| {
                let rows: Vec<TensorId> =
                    (0..len).map(|t| tape.row(gru_steps[t].state, seq)).collect();
                tape.concat_rows(&rows)
            };
            if need_segments {
                turn_states =
                    (0..real_turns.len()).map(|s| states_of(tape, s, l)).collect();
                resp_states = Some(states_of(tape, real_turns.len(), l));
            }
            if cfg.head == HeadKind::Dynamic {
                let last_seq = real_turns.len() - 1;
                let last_len = inst.turn_lens[*real_turns.last().unwrap()];
                last_turn_final_state = Some(if last_len > 0 {
                    tape.row(gru_steps[last_len - 1].state, last_seq)
                } else {
                    tape.zeros(vec![1, cfg.hidden])
                });
            }
        }
        let last_turn_final_state =
            last_turn_final_state.unwrap_or_else(|| tape.zeros(vec![1, cfg.hidden]));

        EncoderOut {
            real_turns,
            turn_embeds,
            turn_states,
            resp_embed,
            resp_states,
            last_turn_final_state,
        }
    }
}

pub struct ForwardPass {
    /// `[1]` tensor: probability of label 1.
    pub prob: TensorId,
    /// `1 x 2` class probabilities.
    pub probs: TensorId,
    pub trace: Option<MatchTrace>,
}

pub(crate) struct EncoderOut {
    pub real_turns: Vec<usize>,
    /// Per real turn, `max_len x d` embeddings (words channel only).
    pub turn_embeds: Vec<TensorId>,
    /// Per real turn, `max_len x m` GRU states (segments channel only).
    pub turn_states: Vec<TensorId>,
    pub resp_embed: Option<TensorId>,
    pub resp_states: Option<TensorId>,
    /// Final word-GRU state of the last real turn (`1 x m`), zeros when that
    /// turn is empty or the GRU is not run.
    pub last_turn_final_state: TensorId,
}

pub(crate) fn at(pmap: &[TensorId], id: ParamId) -> TensorId {
    pmap[id.index()]
}

/// Per-turn matching vectors plus, when tracing, the word/segment grid ids.
pub(crate) type MatcherOutputs = (Vec<TensorId>, Vec<(Option<TensorId>, Option<TensorId>)>);
