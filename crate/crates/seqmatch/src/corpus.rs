//! Dataset parsing, vocabulary construction, pretrained-embedding loading,
//! and fixed-shape instance encoding.
//!
//! Dataset format: UTF-8 lines of tab-separated fields
//! `label \t utterance_1 \t ... \t utterance_k \t response` with
//! whitespace-separated tokens inside each field. Consecutive lines sharing
//! the same context form one ranking group on evaluation sets.
//!
//! Encoding keeps the last `max_turns` utterances of a context (leading pad
//! turns when there are fewer, so the current message always sits at the
//! final position) and the last `max_len` tokens of each utterance and
//! response (tail truncation: recency matters in dialogue).

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Whitespace tokenization with lowercasing; no stemming.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// One labeled (context, response) pair as parsed, before any vocabulary
/// mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInstance {
    pub label: u8,
    pub utterances: Vec<Vec<String>>,
    pub response: Vec<String>,
}

pub fn parse_line(line: &str, line_no: usize) -> Result<RawInstance> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < 3 {
        return Err(Error::Parse {
            line: line_no,
            msg: format!(
                "expected label, >=1 utterance, and response ({} tab-separated fields found)",
                fields.len()
            ),
        });
    }
    let label = match fields[0].trim() {
        "0" => 0,
        "1" => 1,
        other => {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("label must be 0 or 1, got {other:?}"),
            })
        }
    };
    let utterances = fields[1..fields.len() - 1].iter().map(|f| tokenize(f)).collect();
    let response = tokenize(fields[fields.len() - 1]);
    Ok(RawInstance { label, utterances, response })
}

pub fn parse_dataset(path: impl AsRef<Path>) -> Result<Vec<RawInstance>> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| {
        Error::Data(format!("dataset not found: {}: {e}", path.as_ref().display()))
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1)?);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("empty dataset: {}", path.as_ref().display())));
    }
    Ok(out)
}

/// Consecutive instances with identical contexts form one ranking group.
pub fn ranking_groups(instances: &[RawInstance]) -> Vec<std::ops::Range<usize>> {
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=instances.len() {
        if i == instances.len() || instances[i].utterances != instances[start].utterances {
            groups.push(start..i);
            start = i;
        }
    }
    groups
}

/// Token to dense-id map with reserved pad (0) and unk (1) entries.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    pub min_count: usize,
}

impl Vocabulary {
    /// Builds from the training split only: tokens seen at least `min_count`
    /// times, ids assigned in first-occurrence order.
    pub fn build(instances: &[RawInstance], min_count: usize) -> Vocabulary {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut order: Vec<&str> = Vec::new();
        for inst in instances {
            for tok in inst.utterances.iter().flatten().chain(&inst.response) {
                let entry = counts.entry(tok).or_insert(0);
                if *entry == 0 {
                    order.push(tok);
                }
                *entry += 1;
            }
        }
        let mut vocab = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            min_count,
        };
        vocab.token_to_id.insert(PAD_TOKEN.to_string(), PAD_ID);
        vocab.token_to_id.insert(UNK_TOKEN.to_string(), UNK_ID);
        for tok in order {
            if counts[tok] >= min_count && !vocab.token_to_id.contains_key(tok) {
                let id = vocab.id_to_token.len() as u32;
                vocab.token_to_id.insert(tok.to_string(), id);
                vocab.id_to_token.push(tok.to_string());
            }
        }
        vocab
    }

    /// Rebuilds from a token list in id order (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::Checkpoint(
                "vocabulary must start with the pad and unk tokens".into(),
            ));
        }
        let token_to_id =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Ok(Vocabulary { token_to_id, id_to_token: tokens, min_count: 1 })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // pad and unk are always present
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.id_to_token.iter().map(String::as_str)
    }
}

/// One instance mapped to token ids, still variable-length.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub label: u8,
    pub utterances: Vec<Vec<u32>>,
    pub response: Vec<u32>,
}

pub fn encode_instance(vocab: &Vocabulary, raw: &RawInstance) -> Instance {
    Instance {
        label: raw.label,
        utterances: raw.utterances.iter().map(|u| vocab.encode(u)).collect(),
        response: vocab.encode(&raw.response),
    }
}

/// Fixed-shape encoded instances: contexts right-aligned to the last
/// `max_turns` utterances, sequences tail-truncated and zero-padded to
/// `max_len`, with real lengths kept alongside.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub max_turns: usize,
    pub max_len: usize,
    /// `len * max_turns * max_len` token ids, pad = 0.
    pub context_ids: Vec<u32>,
    /// `len * max_len` token ids.
    pub response_ids: Vec<u32>,
    /// `len * max_turns` real token counts (0 marks a pad turn).
    pub turn_lens: Vec<usize>,
    pub response_lens: Vec<usize>,
    /// Raw (pre-truncation) context lengths, for context-length bucketing.
    pub turn_counts: Vec<usize>,
    pub labels: Vec<u8>,
}

/// Borrowed view of one encoded instance.
#[derive(Debug, Clone, Copy)]
pub struct EncodedInstance<'a> {
    pub max_turns: usize,
    pub max_len: usize,
    pub turns: &'a [u32],
    pub turn_lens: &'a [usize],
    pub response: &'a [u32],
    pub response_len: usize,
    pub label: u8,
    pub turn_count: usize,
}

impl<'a> EncodedInstance<'a> {
    pub fn turn(&self, t: usize) -> &'a [u32] {
        &self.turns[t * self.max_len..(t + 1) * self.max_len]
    }

    /// Indices of turns with at least one real token. A context whose every
    /// turn is empty still exposes its final turn so downstream recurrences
    /// have at least one step.
    pub fn real_turns(&self) -> Vec<usize> {
        let real: Vec<usize> = (0..self.max_turns).filter(|&t| self.turn_lens[t] > 0).collect();
        if real.is_empty() {
            vec![self.max_turns - 1]
        } else {
            real
        }
    }
}

impl EncodedBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn instance(&self, i: usize) -> EncodedInstance<'_> {
        let (t, l) = (self.max_turns, self.max_len);
        EncodedInstance {
            max_turns: t,
            max_len: l,
            turns: &self.context_ids[i * t * l..(i + 1) * t * l],
            turn_lens: &self.turn_lens[i * t..(i + 1) * t],
            response: &self.response_ids[i * l..(i + 1) * l],
            response_len: self.response_lens[i],
            label: self.labels[i],
            turn_count: self.turn_counts[i],
        }
    }
}

fn encode_sequence(ids: &[u32], max_len: usize, out: &mut Vec<u32>) -> usize {
    let kept = if ids.len() > max_len { &ids[ids.len() - max_len..] } else { ids };
    out.extend_from_slice(kept);
    out.extend(std::iter::repeat_n(PAD_ID, max_len - kept.len()));
    kept.len()
}

/// Encodes instances to fixed shapes. With `single_turn` the whole context
/// is concatenated into one utterance first (the single-turn matcher
/// variants).
pub fn encode_batch(
    instances: &[RawInstance],
    vocab: &Vocabulary,
    max_turns: usize,
    max_len: usize,
    single_turn: bool,
) -> Result<EncodedBatch> {
    assert!(max_turns >= 1 && max_len >= 1, "encode_batch: degenerate dimensions");
    let turns = if single_turn { 1 } else { max_turns };
    let mut batch = EncodedBatch {
        max_turns: turns,
        max_len,
        context_ids: Vec::with_capacity(instances.len() * turns * max_len),
        response_ids: Vec::with_capacity(instances.len() * max_len),
        turn_lens: Vec::with_capacity(instances.len() * turns),
        response_lens: Vec::with_capacity(instances.len()),
        turn_counts: Vec::with_capacity(instances.len()),
        labels: Vec::with_capacity(instances.len()),
    };
    for raw in instances {
        if raw.utterances.is_empty() {
            return Err(Error::Data("instance with zero utterances".into()));
        }
        let inst = encode_instance(vocab, raw);
        let context: Vec<Vec<u32>> = if single_turn {
            vec![inst.utterances.into_iter().flatten().collect()]
        } else {
            inst.utterances
        };
        let kept: &[Vec<u32>] =
            if context.len() > turns { &context[context.len() - turns..] } else { &context };
        for _ in 0..turns - kept.len() {
            batch.context_ids.extend(std::iter::repeat_n(PAD_ID, max_len));
            batch.turn_lens.push(0);
        }
        for utt in kept {
            let len = encode_sequence(utt, max_len, &mut batch.context_ids);
            batch.turn_lens.push(len);
        }
        let rlen = encode_sequence(&inst.response, max_len, &mut batch.response_ids);
        batch.response_lens.push(rlen);
        batch.turn_counts.push(raw.utterances.len());
        batch.labels.push(raw.label);
    }
    Ok(batch)
}

/// Loads word vectors in the textual exchange format: a `count dim` header
/// line, then one `token v_1 .. v_dim` line per word. Returns a full
/// `vocab.len() x dim` matrix: covered rows copied from the file, uncovered
/// rows drawn uniform in [-0.1, 0.1], pad row zero.
pub fn load_pretrained_embeddings(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| {
        Error::Data(format!("embeddings not found: {}: {e}", path.as_ref().display()))
    })?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "missing embedding header".into() })?;
    let header = header?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 2 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected 'count dim' header, got {header:?}"),
        });
    }
    let file_dim: usize = parts[1]
        .parse()
        .map_err(|_| Error::Parse { line: 1, msg: format!("bad dimension {:?}", parts[1]) })?;
    if file_dim != dim {
        return Err(Error::Config(format!(
            "embedding dimension mismatch: file has {file_dim}, configuration wants {dim}"
        )));
    }

    let mut covered: HashMap<u32, Vec<f64>> = HashMap::new();
    for (i, line) in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts
            .next()
            .ok_or_else(|| Error::Parse { line: i + 1, msg: "empty embedding line".into() })?;
        let values: Vec<f64> = parts
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Parse { line: i + 1, msg: format!("bad float {v:?}") })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {dim} values, found {}", values.len()),
            });
        }
        let token = token.to_lowercase();
        if vocab.contains(&token) {
            covered.insert(vocab.id(&token), values);
        }
    }

    let mut data = Vec::with_capacity(vocab.len() * dim);
    for id in 0..vocab.len() as u32 {
        if id == PAD_ID {
            data.extend(std::iter::repeat_n(0.0, dim));
        } else if let Some(v) = covered.get(&id) {
            data.extend_from_slice(v);
        } else {
            data.extend((0..dim).map(|_| rng.gen_range(-0.1..0.1)));
        }
    }
    Ok(data)
}
