//! Run configuration: every hyperparameter with its published default, plus
//! paths and training knobs, serialized as flat `key = value` lines.
//! Command-line flags override file values; a config written by the tool
//! parses back to an equal config.

use crate::error::{Error, Result};
use crate::model::{Channels, HeadKind, MatcherKind, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Scn,
    San,
    ScnSingle,
    SanSingle,
    TfIdf,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Scn => "scn",
            ModelKind::San => "san",
            ModelKind::ScnSingle => "scn_single",
            ModelKind::SanSingle => "san_single",
            ModelKind::TfIdf => "tfidf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scn" => Ok(ModelKind::Scn),
            "san" => Ok(ModelKind::San),
            "scn_single" => Ok(ModelKind::ScnSingle),
            "san_single" => Ok(ModelKind::SanSingle),
            "tfidf" => Ok(ModelKind::TfIdf),
            other => Err(Error::Config(format!(
                "unknown model {other:?}: expected scn, san, scn_single, san_single or tfidf"
            ))),
        }
    }

    pub fn single_turn(self) -> bool {
        matches!(self, ModelKind::ScnSingle | ModelKind::SanSingle)
    }

    pub fn matcher(self) -> Option<MatcherKind> {
        match self {
            ModelKind::Scn | ModelKind::ScnSingle => Some(MatcherKind::Scn),
            ModelKind::San | ModelKind::SanSingle => Some(MatcherKind::San),
            ModelKind::TfIdf => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Ubuntu,
    Douban,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Ubuntu => "ubuntu",
            EvalMode::Douban => "douban",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ubuntu" => Ok(EvalMode::Ubuntu),
            "douban" => Ok(EvalMode::Douban),
            other => Err(Error::Config(format!("unknown mode {other:?}: expected ubuntu or douban"))),
        }
    }

    pub fn protocol(self) -> crate::metrics::Protocol {
        match self {
            EvalMode::Ubuntu => crate::metrics::Protocol::Ubuntu,
            EvalMode::Douban => crate::metrics::Protocol::Douban,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub head: HeadKind,
    pub channels: Channels,
    pub embed_dim: usize,
    pub hidden: usize,
    pub match_dim: usize,
    pub acc_hidden: usize,
    pub agg_hidden: usize,
    pub conv_kernels: usize,
    pub conv_window: (usize, usize),
    pub pool_window: (usize, usize),
    pub conv_depth: usize,
    pub max_turns: usize,
    pub max_len: usize,
    pub gru_bias: bool,
    pub min_count: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub workers: usize,
    pub clip_norm: Option<f64>,
    pub freeze_embeddings: bool,
    pub mode: EvalMode,
    pub topk: usize,
    pub bench_batches: usize,
    pub bench_batch_size: usize,
    pub train_path: Option<String>,
    pub valid_path: Option<String>,
    pub test_path: Option<String>,
    pub embeddings_path: Option<String>,
    pub checkpoint_path: Option<String>,
    pub index_path: Option<String>,
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    /// The published setting: d = 200, hidden 200, 50-token utterances, last
    /// 10 turns, 8 feature maps with (3,3) conv and pool windows, matching
    /// vector and accumulator width 50, attention aggregation width 400,
    /// Adam at 0.001 with batches of 200.
    fn default() -> Self {
        RunConfig {
            model: ModelKind::Scn,
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
            min_count: 1,
            lr: 0.001,
            batch_size: 200,
            max_epochs: 20,
            patience: 3,
            seed: 17,
            workers: 1,
            clip_norm: None,
            freeze_embeddings: false,
            mode: EvalMode::Ubuntu,
            topk: 10,
            bench_batches: 100,
            bench_batch_size: 200,
            train_path: None,
            valid_path: None,
            test_path: None,
            embeddings_path: None,
            checkpoint_path: None,
            index_path: None,
            out_dir: None,
        }
    }
}

fn head_str(h: HeadKind) -> &'static str {
    match h {
        HeadKind::Last => "last",
        HeadKind::Static => "static",
        HeadKind::Dynamic => "dynamic",
    }
}

pub fn parse_head(s: &str) -> Result<HeadKind> {
    match s {
        "last" => Ok(HeadKind::Last),
        "static" => Ok(HeadKind::Static),
        "dynamic" => Ok(HeadKind::Dynamic),
        other => Err(Error::Config(format!(
            "unknown head {other:?}: expected last, static or dynamic"
        ))),
    }
}

fn channels_str(c: Channels) -> &'static str {
    match c {
        Channels::Both => "both",
        Channels::WordsOnly => "words",
        Channels::SegmentsOnly => "segments",
    }
}

pub fn parse_channels(s: &str) -> Result<Channels> {
    match s {
        "both" => Ok(Channels::Both),
        "words" => Ok(Channels::WordsOnly),
        "segments" => Ok(Channels::SegmentsOnly),
        other => Err(Error::Config(format!(
            "unknown channels {other:?}: expected both, words or segments"
        ))),
    }
}

impl RunConfig {
    /// Flat `key = value` lines; `#` starts a comment.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("model", self.model.as_str().into());
        kv("head", head_str(self.head).into());
        kv("channels", channels_str(self.channels).into());
        kv("embed_dim", self.embed_dim.to_string());
        kv("hidden", self.hidden.to_string());
        kv("match_dim", self.match_dim.to_string());
        kv("acc_hidden", self.acc_hidden.to_string());
        kv("agg_hidden", self.agg_hidden.to_string());
        kv("conv_kernels", self.conv_kernels.to_string());
        kv("conv_window_w", self.conv_window.0.to_string());
        kv("conv_window_h", self.conv_window.1.to_string());
        kv("pool_window_w", self.pool_window.0.to_string());
        kv("pool_window_h", self.pool_window.1.to_string());
        kv("conv_depth", self.conv_depth.to_string());
        kv("max_turns", self.max_turns.to_string());
        kv("max_len", self.max_len.to_string());
        kv("gru_bias", self.gru_bias.to_string());
        kv("min_count", self.min_count.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("batch_size", self.batch_size.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("seed", self.seed.to_string());
        kv("workers", self.workers.to_string());
        if let Some(c) = self.clip_norm {
            kv("clip_norm", format!("{c:?}"));
        }
        kv("freeze_embeddings", self.freeze_embeddings.to_string());
        kv("mode", self.mode.as_str().into());
        kv("topk", self.topk.to_string());
        kv("bench_batches", self.bench_batches.to_string());
        kv("bench_batch_size", self.bench_batch_size.to_string());
        for (k, v) in [
            ("train", &self.train_path),
            ("valid", &self.valid_path),
            ("test", &self.test_path),
            ("embeddings", &self.embeddings_path),
            ("checkpoint", &self.checkpoint_path),
            ("index", &self.index_path),
            ("out", &self.out_dir),
        ] {
            if let Some(v) = v {
                kv(k, v.clone());
            }
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "config line {}: expected 'key = value', got {raw:?}",
                    i + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config not found: {}: {e}", path.display())))?;
        Self::from_kv(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
        }
        match key {
            "model" => self.model = ModelKind::parse(value)?,
            "head" => self.head = parse_head(value)?,
            "channels" => self.channels = parse_channels(value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "match_dim" => self.match_dim = num(key, value)?,
            "acc_hidden" => self.acc_hidden = num(key, value)?,
            "agg_hidden" => self.agg_hidden = num(key, value)?,
            "conv_kernels" => self.conv_kernels = num(key, value)?,
            "conv_window_w" => self.conv_window.0 = num(key, value)?,
            "conv_window_h" => self.conv_window.1 = num(key, value)?,
            "pool_window_w" => self.pool_window.0 = num(key, value)?,
            "pool_window_h" => self.pool_window.1 = num(key, value)?,
            "conv_depth" => self.conv_depth = num(key, value)?,
            "max_turns" => self.max_turns = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "gru_bias" => self.gru_bias = num(key, value)?,
            "min_count" => self.min_count = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "workers" => self.workers = num(key, value)?,
            "clip_norm" => self.clip_norm = Some(num(key, value)?),
            "freeze_embeddings" => self.freeze_embeddings = num(key, value)?,
            "mode" => self.mode = EvalMode::parse(value)?,
            "topk" => self.topk = num(key, value)?,
            "bench_batches" => self.bench_batches = num(key, value)?,
            "bench_batch_size" => self.bench_batch_size = num(key, value)?,
            "train" => self.train_path = Some(value.into()),
            "valid" => self.valid_path = Some(value.into()),
            "test" => self.test_path = Some(value.into()),
            "embeddings" => self.embeddings_path = Some(value.into()),
            "checkpoint" => self.checkpoint_path = Some(value.into()),
            "index" => self.index_path = Some(value.into()),
            "out" => self.out_dir = Some(value.into()),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// A copy without any run-local paths: what a checkpoint embeds, so
    /// identical runs into different directories stay byte-identical.
    pub fn without_paths(&self) -> RunConfig {
        RunConfig {
            train_path: None,
            valid_path: None,
            test_path: None,
            embeddings_path: None,
            checkpoint_path: None,
            index_path: None,
            out_dir: None,
            ..self.clone()
        }
    }

    /// The shape-bearing model configuration this run describes. Single-turn
    /// variants collapse the context, so they carry one turn slot.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let Some(matcher) = self.model.matcher() else {
            return Err(Error::Config("the tfidf baseline has no neural configuration".into()));
        };
        let cfg = ModelConfig {
            matcher,
            head: self.head,
            channels: self.channels,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            match_dim: self.match_dim,
            acc_hidden: self.acc_hidden,
            agg_hidden: self.agg_hidden,
            conv_kernels: self.conv_kernels,
            conv_window: self.conv_window,
            pool_window: self.pool_window,
            conv_depth: self.conv_depth,
            max_turns: if self.model.single_turn() { 1 } else { self.max_turns },
            max_len: self.max_len,
            gru_bias: self.gru_bias,
            vocab_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> crate::train::TrainConfig {
        crate::train::TrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            lr: self.lr,
            seed: self.seed,
            workers: self.workers,
            clip_norm: self.clip_norm,
            freeze_embeddings: self.freeze_embeddings,
        }
    }
}
