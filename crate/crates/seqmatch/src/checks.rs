//! The gradient-check suite behind the `gradcheck` command: every
//! differentiable op at 100 random points, plus complete micro matcher
//! models (both kinds, all three heads) checked parameter by parameter.
//!
//! Micro-model parameters are re-drawn at a healthier scale than the
//! training init: with tiny 0.1-scale weights a four-layer composition
//! pushes early-layer gradients below the finite-difference noise floor,
//! which would measure the checker's conditioning, not the backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::EncodedBatch;
use crate::error::Result;
use crate::model::{Channels, HeadKind, MatcherKind, ModelConfig, MatchModel};
use crate::tensor::{grad_check, Tape, Tensor, TensorId};

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub worst_error: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst_error < self.tolerance
    }
}

const POINTS_PER_OP: usize = 100;
const EPSILON: f64 = 1e-5;
/// Central differences through a few thousand composed ops lose the 1e-5
/// step in rounding noise; the model-level checks use the step that keeps
/// the difference quotient well above it.
const MODEL_EPSILON: f64 = 3e-4;
const TOLERANCE: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor::new((0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape)
}

type BuildFn = dyn Fn(&mut Tape, &[TensorId], &mut ChaCha8Rng) -> TensorId;

/// One gradient check of `build` at a fresh random point.
fn check_op(
    name: &str,
    fault: Option<&str>,
    shapes: &[Vec<usize>],
    build: &BuildFn,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ name.len() as u64);
    let faulted = fault == Some(name);
    let mut worst = 0.0f64;
    for _ in 0..POINTS_PER_OP {
        let points: Vec<Tensor> =
            shapes.iter().map(|s| rand_tensor(&mut rng, s.clone())).collect();
        // the builder may draw op payloads (masks, ids); clone the rng state
        // so the analytic and finite-difference passes see identical payloads
        let payload_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let err = grad_check(
            |tape, ids| {
                if faulted {
                    tape.inject_fault(name);
                }
                let mut r = payload_rng.clone();
                build(tape, ids, &mut r)
            },
            &points,
            EPSILON,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckReport { name: name.to_string(), worst_error: worst, tolerance: TOLERANCE })
}

fn op_checks(fault: Option<&str>) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    let mut push = |r: Result<CheckReport>| -> Result<()> {
        out.push(r?);
        Ok(())
    };

    push(check_op("matmul", fault, &[vec![3, 4], vec![4, 2]], &|t, ids, _| {
        let c = t.matmul(ids[0], ids[1]);
        t.sum_all(c)
    }))?;
    push(check_op("transpose", fault, &[vec![3, 4]], &|t, ids, _| {
        let c = t.transpose(ids[0]);
        let d = t.hadamard(c, c);
        t.sum_all(d)
    }))?;
    push(check_op("add", fault, &[vec![2, 3], vec![2, 3]], &|t, ids, _| {
        let c = t.add(ids[0], ids[1]);
        let d = t.hadamard(c, c);
        t.sum_all(d)
    }))?;
    push(check_op("sub", fault, &[vec![2, 3], vec![2, 3]], &|t, ids, _| {
        let c = t.sub(ids[0], ids[1]);
        let d = t.hadamard(c, c);
        t.sum_all(d)
    }))?;
    push(check_op("hadamard", fault, &[vec![2, 3], vec![2, 3]], &|t, ids, _| {
        let c = t.hadamard(ids[0], ids[1]);
        t.sum_all(c)
    }))?;
    push(check_op("add_row", fault, &[vec![3, 4], vec![4]], &|t, ids, _| {
        let c = t.add_row(ids[0], ids[1]);
        let d = t.hadamard(c, c);
        t.sum_all(d)
    }))?;
    push(check_op("mul_scalar", fault, &[vec![2, 3], vec![1]], &|t, ids, _| {
        let c = t.mul_scalar(ids[0], ids[1]);
        let d = t.hadamard(c, c);
        t.sum_all(d)
    }))?;
    push(check_op("one_minus", fault, &[vec![2, 3]], &|t, ids, _| {
        let c = t.one_minus(ids[0]);
        let d = t.hadamard(c, c);
        t.sum_all(d)
    }))?;
    push(check_op("sigmoid", fault, &[vec![2, 3]], &|t, ids, _| {
        let c = t.sigmoid(ids[0]);
        t.sum_all(c)
    }))?;
    push(check_op("tanh", fault, &[vec![2, 3]], &|t, ids, _| {
        let c = t.tanh(ids[0]);
        t.sum_all(c)
    }))?;
    push(check_op("relu", fault, &[vec![2, 3]], &|t, ids, _| {
        let c = t.relu(ids[0]);
        t.sum_all(c)
    }))?;
    push(check_op("masked_softmax", fault, &[vec![3, 4]], &|t, ids, rng| {
        let mut mask = [true; 12];
        // one partially masked row, one fully masked row
        mask[rng.gen_range(0..4)] = false;
        for m in mask.iter_mut().take(8).skip(4) {
            *m = false;
        }
        let c = t.masked_softmax(ids[0], &mask);
        let d = t.hadamard(c, c);
        t.sum_all(d)
    }))?;
    push(check_op(
        "conv2d",
        fault,
        &[vec![2, 4, 4], vec![2, 2, 2, 2], vec![2]],
        &|t, ids, _| {
            let c = t.conv2d_relu(ids[0], ids[1], ids[2]);
            t.sum_all(c)
        },
    ))?;
    push(check_op("maxpool2d", fault, &[vec![2, 4, 5]], &|t, ids, _| {
        let c = t.maxpool2d(ids[0], (2, 2));
        let d = t.hadamard(c, c);
        t.sum_all(d)
    }))?;
    push(check_op("embed", fault, &[vec![5, 3]], &|t, ids, rng| {
        let tokens: Vec<u32> = (0..6).map(|_| rng.gen_range(0..5)).collect();
        let e = t.embed(ids[0], &tokens);
        let d = t.hadamard(e, e);
        t.sum_all(d)
    }))?;
    push(check_op("concat_rows", fault, &[vec![2, 3], vec![1, 3]], &|t, ids, _| {
        let c = t.concat_rows(&[ids[0], ids[1]]);
        let d = t.hadamard(c, c);
        t.sum_all(d)
    }))?;
    push(check_op("concat_cols", fault, &[vec![2, 3], vec![2, 2]], &|t, ids, _| {
        let c = t.concat_cols(&[ids[0], ids[1]]);
        let d = t.hadamard(c, c);
        t.sum_all(d)
    }))?;
    push(check_op("row", fault, &[vec![3, 4]], &|t, ids, rng| {
        let r = t.row(ids[0], rng.gen_range(0..3));
        let d = t.hadamard(r, r);
        t.sum_all(d)
    }))?;
    push(check_op("element", fault, &[vec![2, 3]], &|t, ids, rng| {
        let e = t.element(ids[0], rng.gen_range(0..6));
        t.hadamard(e, e)
    }))?;
    push(check_op("reshape", fault, &[vec![2, 6]], &|t, ids, _| {
        let c = t.reshape(ids[0], vec![3, 4]);
        let d = t.hadamard(c, c);
        t.sum_all(d)
    }))?;
    push(check_op("sum_all", fault, &[vec![2, 3]], &|t, ids, _| {
        let s = t.sum_all(ids[0]);
        t.hadamard(s, s)
    }))?;
    push(check_op(
        "attention_scores",
        fault,
        &[vec![3, 4], vec![5], vec![5]],
        &|t, ids, _| {
            let c = t.attention_scores(ids[0], ids[1], ids[2]);
            t.sum_all(c)
        },
    ))?;
    push(check_op("bce_loss", fault, &[vec![1]], &|t, ids, rng| {
        // squash into (0,1), away from the clamp region
        let s = t.sigmoid(ids[0]);
        t.bce_loss(s, rng.gen_bool(0.5))
    }))?;
    Ok(out)
}

/// Re-draws every parameter uniform in [-scale, scale] (pad embedding row
/// kept zero). Used to put micro models in a well-conditioned regime for
/// finite differences.
pub fn randomize_params(model: &mut MatchModel, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in model.params.ids() {
        for v in model.params.data_mut(id) {
            *v = rng.gen_range(-scale..scale);
        }
    }
    let dim = model.config.embed_dim;
    let w = model.embedding.weights;
    model.params.data_mut(w)[..dim].fill(0.0);
}

/// The micro configuration used by the end-to-end checks: d = m = 4,
/// context of 2 turns, utterance length 5, two 2x2 conv kernels.
pub fn micro_model(matcher: MatcherKind, head: HeadKind, seed: u64) -> MatchModel {
    let cfg = ModelConfig {
        matcher,
        head,
        channels: Channels::Both,
        embed_dim: 4,
        hidden: 4,
        match_dim: 3,
        acc_hidden: 3,
        agg_hidden: 5,
        conv_kernels: 2,
        conv_window: (2, 2),
        pool_window: (2, 2),
        conv_depth: 1,
        max_turns: 2,
        max_len: 5,
        gru_bias: false,
        vocab_size: 9,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MatchModel::new(cfg, &mut rng);
    randomize_params(&mut model, 0.7, seed ^ 0xa5a5);
    model
}

fn micro_batch() -> EncodedBatch {
    EncodedBatch {
        max_turns: 2,
        max_len: 5,
        context_ids: vec![2, 3, 4, 5, 0, 6, 7, 8, 0, 0],
        response_ids: vec![3, 8, 2, 0, 0],
        turn_lens: vec![4, 3],
        response_lens: vec![3],
        turn_counts: vec![2],
        labels: vec![1],
    }
}

fn model_check(
    name: &str,
    fault: Option<&str>,
    matcher: MatcherKind,
    head: HeadKind,
) -> Result<CheckReport> {
    let model = micro_model(matcher, head, 0xbeef);
    let batch = micro_batch();
    let points: Vec<Tensor> =
        model.params.iter().map(|p| Tensor::new(p.data.clone(), p.shape.clone())).collect();
    let faulted = fault == Some(name);
    let worst = grad_check(
        |tape, ids| {
            if faulted {
                tape.inject_fault("matmul");
            }
            let inst = batch.instance(0);
            let pass = model.forward(tape, ids, &inst, false);
            tape.bce_loss(pass.prob, true)
        },
        &points,
        MODEL_EPSILON,
    )?;
    Ok(CheckReport { name: name.to_string(), worst_error: worst, tolerance: TOLERANCE })
}

/// Runs the whole suite. `fault`, when set to an op or model check name,
/// corrupts that check's backward pass so callers can verify the suite
/// really fails on broken gradients.
pub fn run_all(fault: Option<&str>) -> Result<Vec<CheckReport>> {
    let mut reports = op_checks(fault)?;
    for (name, matcher, head) in [
        ("scn_last", MatcherKind::Scn, HeadKind::Last),
        ("scn_static", MatcherKind::Scn, HeadKind::Static),
        ("scn_dynamic", MatcherKind::Scn, HeadKind::Dynamic),
        ("san_last", MatcherKind::San, HeadKind::Last),
        ("san_static", MatcherKind::San, HeadKind::Static),
        ("san_dynamic", MatcherKind::San, HeadKind::Dynamic),
    ] {
        reports.push(model_check(name, fault, matcher, head)?);
    }
    Ok(reports)
}
