//! Loss, Adam, and the mini-batch training loop with early stopping on
//! validation R_2@1.
//!
//! The batch objective is the sum of per-instance cross entropies. Gradients
//! are computed per instance on worker-local tapes and summed in a fixed
//! order, so a (seed, config, data) triple always produces byte-identical
//! parameters; worker count only changes the grouping of an associative sum.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::EncodedBatch;
use crate::error::{Error, Result};
use crate::model::MatchModel;
use crate::params::ParamSet;
use crate::tensor::{Tape, TensorId};

/// -[y ln g + (1-y) ln(1-g)] with g clamped to [1e-12, 1-1e-12].
pub fn cross_entropy(tape: &mut Tape, prob: TensorId, label: u8) -> Result<TensorId> {
    if label > 1 {
        return Err(Error::Label(format!("label must be 0 or 1, got {label}")));
    }
    Ok(tape.bce_loss(prob, label == 1))
}

/// Per-parameter gradient accumulator, indexed like the model's parameter
/// set.
pub struct GradBuffer {
    pub by_param: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn new(params: &ParamSet) -> Self {
        GradBuffer {
            by_param: params.ids().map(|id| vec![0.0; params.data(id).len()]).collect(),
        }
    }

    /// Adds the tape's gradients (post-backward) for every parameter.
    pub fn accumulate(&mut self, tape: &Tape, pmap: &[TensorId]) {
        for (buf, &tid) in self.by_param.iter_mut().zip(pmap) {
            if let Some(g) = tape.grad(tid) {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
        }
    }

    pub fn merge(&mut self, other: &GradBuffer) {
        for (a, b) in self.by_param.iter_mut().zip(&other.by_param) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn zero_row(&mut self, param: crate::params::ParamId, row: usize, width: usize) {
        self.by_param[param.index()][row * width..(row + 1) * width].fill(0.0);
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .iter()
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for b in &mut self.by_param {
            for v in b.iter_mut() {
                *v *= c;
            }
        }
    }
}

/// Adam with bias correction: lr 0.001, beta1 0.9, beta2 0.999, eps 1e-8.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> =
            params.ids().map(|id| vec![0.0; params.data(id).len()]).collect();
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    /// theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
    pub fn update(&mut self, params: &mut ParamSet, grads: &GradBuffer) {
        assert_eq!(
            grads.by_param.len(),
            self.m.len(),
            "adam: gradient buffer does not match parameter set"
        );
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, id) in params.ids().enumerate() {
            let g = &grads.by_param[idx];
            assert_eq!(g.len(), params.data(id).len(), "adam: missing or misshapen gradient");
            let data = params.data_mut(id);
            for i in 0..g.len() {
                self.m[idx][i] = self.beta1 * self.m[idx][i] + (1.0 - self.beta1) * g[i];
                self.v[idx][i] = self.beta2 * self.v[idx][i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = self.m[idx][i] / bc1;
                let v_hat = self.v[idx][i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub lr: f64,
    pub seed: u64,
    pub workers: usize,
    /// Optional global max-norm gradient clipping.
    pub clip_norm: Option<f64>,
    pub freeze_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 200,
            max_epochs: 20,
            patience: 3,
            lr: 0.001,
            seed: 17,
            workers: 1,
            clip_norm: None,
            freeze_embeddings: false,
        }
    }
}

/// Strict-improvement early stopping.
pub struct EarlyStopper {
    patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        assert!(patience >= 1, "patience must be at least 1");
        EarlyStopper { patience, best: None, best_epoch: 0, stale: 0 }
    }

    /// Returns (improved, stop_now).
    pub fn observe(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|b| metric > b);
        if improved {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        (improved, self.stale >= self.patience)
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sum of per-instance cross entropies over the epoch.
    pub loss: f64,
    pub valid_r2_at_1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Forward+backward over the indexed instances, split contiguously across
/// workers; gradients and losses merge in worker order.
pub fn batch_gradients(
    model: &MatchModel,
    data: &EncodedBatch,
    indices: &[usize],
    workers: usize,
    freeze_embeddings: bool,
) -> (GradBuffer, f64) {
    let workers = workers.max(1).min(indices.len().max(1));
    let chunk = indices.len().div_ceil(workers);
    let results: Vec<(GradBuffer, f64)> = std::thread::scope(|scope| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    let mut grads = GradBuffer::new(&model.params);
                    let mut loss_sum = 0.0;
                    for &i in part {
                        let inst = data.instance(i);
                        let mut tape = Tape::new();
                        let pmap = model.insert_params(&mut tape, true, freeze_embeddings);
                        let pass = model.forward(&mut tape, &pmap, &inst, false);
                        let loss = tape.bce_loss(pass.prob, inst.label == 1);
                        loss_sum += tape.scalar(loss);
                        tape.backward(loss);
                        grads.accumulate(&tape, &pmap);
                    }
                    (grads, loss_sum)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut merged = GradBuffer::new(&model.params);
    let mut loss = 0.0;
    for (g, l) in &results {
        merged.merge(g);
        loss += l;
    }
    (merged, loss)
}

/// Validation R_2@1: per group, the first positive must outscore the first
/// negative. On 2-candidate groups this is the literal metric; larger groups
/// contribute their deterministic (first positive, first negative) pair.
pub fn validate_r2_at_1(
    model: &MatchModel,
    data: &EncodedBatch,
    groups: &[std::ops::Range<usize>],
    workers: usize,
) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Data("validation set has no ranking groups".into()));
    }
    let scores = score_all(model, data, workers);
    let mut sum = 0.0;
    for range in groups {
        let pos = range.clone().find(|&i| data.labels[i] == 1);
        let neg = range.clone().find(|&i| data.labels[i] == 0);
        let (Some(pos), Some(neg)) = (pos, neg) else {
            return Err(Error::Protocol(format!(
                "validation group {}..{} needs a positive and a negative candidate",
                range.start, range.end
            )));
        };
        if scores[pos] > scores[neg] {
            sum += 1.0;
        }
    }
    Ok(sum / groups.len() as f64)
}

/// Scores every instance, in parallel chunks, preserving order.
pub fn score_all(model: &MatchModel, data: &EncodedBatch, workers: usize) -> Vec<f64> {
    let n = data.len();
    let workers = workers.max(1).min(n.max(1));
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .collect::<Vec<usize>>()
            .chunks(chunk)
            .map(|part| {
                let part = part.to_vec();
                scope.spawn(move || {
                    part.into_iter().map(|i| model.score(&data.instance(i))).collect::<Vec<f64>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Shuffled mini-batch training with early stopping; the model ends at the
/// best-validation parameters.
pub fn train(
    model: &mut MatchModel,
    train_set: &EncodedBatch,
    valid_set: &EncodedBatch,
    valid_groups: &[std::ops::Range<usize>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.params, cfg.lr);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = Vec::new();
    let mut best_snapshot = model.params.snapshot();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (mut grads, loss) =
                batch_gradients(model, train_set, batch, cfg.workers, cfg.freeze_embeddings);
            epoch_loss += loss;
            // the pad embedding row never trains
            grads.zero_row(
                model.embedding.weights,
                crate::corpus::PAD_ID as usize,
                model.embedding.dim,
            );
            if let Some(max_norm) = cfg.clip_norm {
                let norm = grads.global_norm();
                if norm > max_norm {
                    grads.scale(max_norm / norm);
                }
            }
            adam.update(&mut model.params, &grads);
        }
        let valid_r2 = validate_r2_at_1(model, valid_set, valid_groups, cfg.workers)?;
        history.push(EpochRecord { epoch, loss: epoch_loss, valid_r2_at_1: valid_r2 });
        let (improved, stop) = stopper.observe(epoch, valid_r2);
        if improved {
            best_snapshot = model.params.snapshot();
        }
        if stop {
            break;
        }
    }
    model.params.restore(&best_snapshot);
    Ok(TrainOutcome {
        history,
        best_epoch: stopper.best_epoch,
        best_metric: stopper.best.unwrap_or(0.0),
    })
}
