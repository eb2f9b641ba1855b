//! Wall-clock comparison of the two matchers at identical dimensions:
//! training passes (forward + backward) and inference passes over synthetic
//! full-length batches. The convolutional matcher's claim to speed is
//! reported, never asserted; it is hardware-dependent.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::corpus::EncodedBatch;
use crate::error::{Error, Result};
use crate::model::{MatcherKind, MatchModel};
use crate::train::{batch_gradients, score_all};

const BENCH_VOCAB: usize = 1000;

#[derive(Debug, Clone)]
pub struct ModelTiming {
    pub train_ms: Vec<f64>,
    pub infer_ms: Vec<f64>,
}

pub fn median(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl ModelTiming {
    pub fn median_train(&self) -> f64 {
        median(&self.train_ms)
    }

    pub fn median_infer(&self) -> f64 {
        median(&self.infer_ms)
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub batches: usize,
    pub batch_size: usize,
    pub workers: usize,
    pub scn: ModelTiming,
    pub san: ModelTiming,
}

impl BenchReport {
    pub fn train_ratio(&self) -> f64 {
        self.scn.median_train() / self.san.median_train()
    }

    pub fn infer_ratio(&self) -> f64 {
        self.scn.median_infer() / self.san.median_infer()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "timing over {} batch(es) of {} instances, {} worker(s); median ms per batch\n",
            self.batches, self.batch_size, self.workers
        ));
        out.push_str(&format!(
            "{:<6} {:>16} {:>16}\n",
            "model", "train(fwd+bwd)", "inference(fwd)"
        ));
        out.push_str(&format!(
            "{:<6} {:>16.1} {:>16.1}\n",
            "scn",
            self.scn.median_train(),
            self.scn.median_infer()
        ));
        out.push_str(&format!(
            "{:<6} {:>16.1} {:>16.1}\n",
            "san",
            self.san.median_train(),
            self.san.median_infer()
        ));
        out.push_str(&format!(
            "scn:san time ratio  train {:.3}  inference {:.3}\n",
            self.train_ratio(),
            self.infer_ratio()
        ));
        out
    }
}

/// Synthetic full-length batch: every turn and response occupies the whole
/// token window, the worst case both matchers are sized for.
pub fn synthetic_batch(
    batch_size: usize,
    max_turns: usize,
    max_len: usize,
    seed: u64,
) -> EncodedBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = EncodedBatch {
        max_turns,
        max_len,
        context_ids: Vec::with_capacity(batch_size * max_turns * max_len),
        response_ids: Vec::with_capacity(batch_size * max_len),
        turn_lens: Vec::with_capacity(batch_size * max_turns),
        response_lens: Vec::with_capacity(batch_size),
        turn_counts: Vec::with_capacity(batch_size),
        labels: Vec::with_capacity(batch_size),
    };
    for i in 0..batch_size {
        for _ in 0..max_turns {
            batch
                .context_ids
                .extend((0..max_len).map(|_| rng.gen_range(2..BENCH_VOCAB as u32)));
            batch.turn_lens.push(max_len);
        }
        batch.response_ids.extend((0..max_len).map(|_| rng.gen_range(2..BENCH_VOCAB as u32)));
        batch.response_lens.push(max_len);
        batch.turn_counts.push(max_turns);
        batch.labels.push((i % 2) as u8);
    }
    batch
}

fn time_model(model: &MatchModel, data: &EncodedBatch, batches: usize, workers: usize) -> ModelTiming {
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut train_ms = Vec::with_capacity(batches);
    let mut infer_ms = Vec::with_capacity(batches);
    for _ in 0..batches {
        let t0 = Instant::now();
        let _ = batch_gradients(model, data, &indices, workers, false);
        train_ms.push(t0.elapsed().as_secs_f64() * 1e3);

        let t0 = Instant::now();
        let _ = score_all(model, data, workers);
        infer_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    ModelTiming { train_ms, infer_ms }
}

/// Builds both matchers at the configured dimensions and times them on the
/// same synthetic batch.
pub fn run_bench(cfg: &RunConfig) -> Result<BenchReport> {
    if cfg.bench_batches == 0 {
        return Err(Error::Usage("bench: need at least one batch".into()));
    }
    if cfg.bench_batch_size == 0 {
        return Err(Error::Usage("bench: batch size must be at least 1".into()));
    }
    let data = synthetic_batch(cfg.bench_batch_size, cfg.max_turns, cfg.max_len, cfg.seed);

    let model_of = |matcher: MatcherKind| -> Result<MatchModel> {
        let mut run = cfg.clone();
        run.model = match matcher {
            MatcherKind::Scn => crate::config::ModelKind::Scn,
            MatcherKind::San => crate::config::ModelKind::San,
        };
        let mcfg = run.model_config(BENCH_VOCAB)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(MatchModel::new(mcfg, &mut rng))
    };

    let scn = model_of(MatcherKind::Scn)?;
    let san = model_of(MatcherKind::San)?;
    Ok(BenchReport {
        batches: cfg.bench_batches,
        batch_size: cfg.bench_batch_size,
        workers: cfg.workers,
        scn: time_model(&scn, &data, cfg.bench_batches, cfg.workers),
        san: time_model(&san, &data, cfg.bench_batches, cfg.workers),
    })
}
