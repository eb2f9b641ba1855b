//! Versioned binary checkpoint container: the run configuration, the
//! vocabulary, and either the full named parameter tensors of a neural model
//! or the document-frequency table of the tf-idf baseline. Writes are
//! byte-deterministic and atomic (write-then-rename).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binfmt::{atomic_write, w_f64, w_str, w_u32, w_u64, w_u8, Reader};
use crate::config::RunConfig;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::MatchModel;
use crate::retrieval::DfStats;

const MAGIC: &[u8] = b"SMCK";
const VERSION: u32 = 1;

pub enum Payload {
    Neural(Vec<(String, Vec<usize>, Vec<f64>)>),
    TfIdf(DfStats),
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub payload: Payload,
}

pub fn save_neural(
    path: &Path,
    config: &RunConfig,
    vocab: &Vocabulary,
    model: &MatchModel,
) -> Result<()> {
    let mut out = header(config, vocab, 0);
    w_u32(&mut out, model.params.len() as u32);
    for p in model.params.iter() {
        w_str(&mut out, &p.name);
        w_u8(&mut out, p.shape.len() as u8);
        for &d in &p.shape {
            w_u32(&mut out, d as u32);
        }
        for &v in &p.data {
            w_f64(&mut out, v);
        }
    }
    atomic_write(path, &out)
}

pub fn save_tfidf(path: &Path, config: &RunConfig, vocab: &Vocabulary, stats: &DfStats) -> Result<()> {
    let mut out = header(config, vocab, 1);
    w_u64(&mut out, stats.n_docs);
    w_u32(&mut out, stats.df.len() as u32);
    for (term, &df) in &stats.df {
        w_str(&mut out, term);
        w_u32(&mut out, df);
    }
    atomic_write(path, &out)
}

fn header(config: &RunConfig, vocab: &Vocabulary, kind: u8) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    w_u32(&mut out, VERSION);
    w_u8(&mut out, kind);
    w_str(&mut out, &config.to_kv());
    w_u32(&mut out, vocab.len() as u32);
    for t in vocab.tokens() {
        w_str(&mut out, t);
    }
    out
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("checkpoint not found: {}: {e}", path.display())))?;
    let mut r = Reader::new(&bytes, "checkpoint");
    r.expect_magic(MAGIC).map_err(|_| Error::Checkpoint("bad magic".into()))?;
    let version = r.r_u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let kind = r.r_u8()?;
    let config = RunConfig::from_kv(&r.r_str()?)?;
    let n_tokens = r.r_u32()? as usize;
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        tokens.push(r.r_str()?);
    }
    let vocab = Vocabulary::from_tokens(tokens)?;
    let payload = match kind {
        0 => {
            let n = r.r_u32()? as usize;
            let mut params = Vec::with_capacity(n);
            for _ in 0..n {
                let name = r.r_str()?;
                let ndim = r.r_u8()? as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(r.r_u32()? as usize);
                }
                let numel: usize = shape.iter().product();
                let mut data = Vec::with_capacity(numel);
                for _ in 0..numel {
                    data.push(r.r_f64()?);
                }
                params.push((name, shape, data));
            }
            Payload::Neural(params)
        }
        1 => {
            let n_docs = r.r_u64()?;
            let n_terms = r.r_u32()? as usize;
            let mut stats = DfStats { df: Default::default(), n_docs };
            for _ in 0..n_terms {
                let term = r.r_str()?;
                let df = r.r_u32()?;
                stats.df.insert(term, df);
            }
            Payload::TfIdf(stats)
        }
        other => return Err(Error::Checkpoint(format!("unknown checkpoint kind {other}"))),
    };
    Ok(Checkpoint { config, vocab, payload })
}

impl Checkpoint {
    /// Rebuilds the neural model at the stored configuration.
    pub fn build_model(&self) -> Result<MatchModel> {
        self.build_model_as(&self.config)
    }

    /// Rebuilds under an effective configuration (stored values plus runtime
    /// overrides), then overwrites every parameter from the stored tensors.
    /// Name or shape mismatches are checkpoint errors.
    pub fn build_model_as(&self, config: &RunConfig) -> Result<MatchModel> {
        let Payload::Neural(stored) = &self.payload else {
            return Err(Error::Checkpoint("not a neural checkpoint".into()));
        };
        let model_cfg = config.model_config(self.vocab.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = MatchModel::new(model_cfg, &mut rng);
        if stored.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, configuration expects {}",
                stored.len(),
                model.params.len()
            )));
        }
        for (name, shape, data) in stored {
            let id = model.params.id_of(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint parameter {name} not in configuration"))
            })?;
            if model.params.shape(id) != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: checkpoint {:?}, configuration {:?}",
                    shape,
                    model.params.shape(id)
                )));
            }
            model.params.data_mut(id).copy_from_slice(data);
        }
        Ok(model)
    }
}
