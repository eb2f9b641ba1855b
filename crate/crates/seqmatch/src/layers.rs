//! Reusable parameterized layers: embedding lookup and the gated recurrent
//! unit, in the exact no-bias parameterization the matchers are built from.

use rand::Rng;

use crate::params::{ParamId, ParamSet};
use crate::tensor::{Tape, TensorId};

/// Word embedding table. Row `pad_id` is all-zeros and is never updated by
/// training (the trainer zeroes its gradient before each optimizer step).
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub vocab_size: usize,
    pub dim: usize,
    pub weights: ParamId,
    pub pad_id: u32,
}

impl EmbeddingTable {
    /// Rows uniform in [-0.1, 0.1]; the pad row is zeroed.
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        vocab_size: usize,
        dim: usize,
        pad_id: u32,
        rng: &mut impl Rng,
    ) -> Self {
        let mut data: Vec<f64> = (0..vocab_size * dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let p = pad_id as usize;
        data[p * dim..(p + 1) * dim].fill(0.0);
        let weights = params.add(name, vec![vocab_size, dim], data);
        EmbeddingTable { vocab_size, dim, weights, pad_id }
    }

    /// Initializes from a prebuilt `vocab_size x dim` matrix (pretrained
    /// vectors merged with random rows). The pad row is forced to zero.
    pub fn from_matrix(
        params: &mut ParamSet,
        name: &str,
        vocab_size: usize,
        dim: usize,
        pad_id: u32,
        mut data: Vec<f64>,
    ) -> Self {
        assert_eq!(data.len(), vocab_size * dim, "embedding matrix shape mismatch");
        let p = pad_id as usize;
        data[p * dim..(p + 1) * dim].fill(0.0);
        let weights = params.add(name, vec![vocab_size, dim], data);
        EmbeddingTable { vocab_size, dim, weights, pad_id }
    }
}

/// Looks up embedding rows for a token sequence; pad ids map to zero rows.
pub fn embed(tape: &mut Tape, table: TensorId, token_ids: &[u32]) -> TensorId {
    tape.embed(table, token_ids)
}

/// The six GRU maps. No bias terms by default; `biases` can be populated via
/// a config flag but defaults off.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub w_update: ParamId,
    pub u_update: ParamId,
    pub w_reset: ParamId,
    pub u_reset: ParamId,
    pub w_cand: ParamId,
    pub u_cand: ParamId,
    pub biases: Option<GruBiases>,
    pub input_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct GruBiases {
    pub update: ParamId,
    pub reset: ParamId,
    pub cand: ParamId,
}

impl GruParams {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w_update = params.add_uniform(&format!("{prefix}.wz"), vec![input_dim, hidden], rng);
        let u_update = params.add_uniform(&format!("{prefix}.uz"), vec![hidden, hidden], rng);
        let w_reset = params.add_uniform(&format!("{prefix}.wr"), vec![input_dim, hidden], rng);
        let u_reset = params.add_uniform(&format!("{prefix}.ur"), vec![hidden, hidden], rng);
        let w_cand = params.add_uniform(&format!("{prefix}.wh"), vec![input_dim, hidden], rng);
        let u_cand = params.add_uniform(&format!("{prefix}.uh"), vec![hidden, hidden], rng);
        let biases = with_bias.then(|| GruBiases {
            update: params.add_zeros(&format!("{prefix}.bz"), vec![hidden]),
            reset: params.add_zeros(&format!("{prefix}.br"), vec![hidden]),
            cand: params.add_zeros(&format!("{prefix}.bh"), vec![hidden]),
        });
        GruParams {
            w_update,
            u_update,
            w_reset,
            u_reset,
            w_cand,
            u_cand,
            biases,
            input_dim,
            hidden,
        }
    }
}

/// One GRU step over a batch of rows, keeping the gate activations around
/// for trace extraction.
pub struct GruStep {
    pub state: TensorId,
    pub update_gate: TensorId,
    pub reset_gate: TensorId,
}

fn at(pmap: &[TensorId], id: ParamId) -> TensorId {
    pmap[id.index()]
}

/// z = sigma(x Wz + h Uz); r = sigma(x Wr + h Ur);
/// cand = tanh(x Wh + (r . h) Uh); h' = z . cand + (1 - z) . h
pub fn gru_step(
    tape: &mut Tape,
    pmap: &[TensorId],
    p: &GruParams,
    x: TensorId,
    h_prev: TensorId,
) -> GruStep {
    let gate = |tape: &mut Tape, w: ParamId, u: ParamId, b: Option<ParamId>| {
        let xw = tape.matmul(x, at(pmap, w));
        let hu = tape.matmul(h_prev, at(pmap, u));
        let mut pre = tape.add(xw, hu);
        if let Some(b) = b {
            pre = tape.add_row(pre, at(pmap, b));
        }
        pre
    };
    let bz = p.biases.as_ref().map(|b| b.update);
    let br = p.biases.as_ref().map(|b| b.reset);
    let bh = p.biases.as_ref().map(|b| b.cand);

    let pre_z = gate(tape, p.w_update, p.u_update, bz);
    let z = tape.sigmoid(pre_z);
    let pre_r = gate(tape, p.w_reset, p.u_reset, br);
    let r = tape.sigmoid(pre_r);

    let xw = tape.matmul(x, at(pmap, p.w_cand));
    let rh = tape.hadamard(r, h_prev);
    let rhu = tape.matmul(rh, at(pmap, p.u_cand));
    let mut pre_c = tape.add(xw, rhu);
    if let Some(b) = bh {
        pre_c = tape.add_row(pre_c, at(pmap, b));
    }
    let cand = tape.tanh(pre_c);

    let zc = tape.hadamard(z, cand);
    let zc1 = tape.one_minus(z);
    let keep = tape.hadamard(zc1, h_prev);
    let state = tape.add(zc, keep);

    GruStep { state, update_gate: z, reset_gate: r }
}

/// Runs the recurrence over per-step inputs (each `rows x input_dim`),
/// starting from zeros when `h0` is not given.
pub fn gru_sequence(
    tape: &mut Tape,
    pmap: &[TensorId],
    p: &GruParams,
    steps: &[TensorId],
    h0: Option<TensorId>,
) -> Vec<GruStep> {
    if steps.is_empty() {
        return Vec::new();
    }
    let rows = tape.shape(steps[0])[0];
    let mut h = h0.unwrap_or_else(|| tape.zeros(vec![rows, p.hidden]));
    let mut out = Vec::with_capacity(steps.len());
    for &x in steps {
        let step = gru_step(tape, pmap, p, x, h);
        h = step.state;
        out.push(step);
    }
    out
}

/// Single-sequence forward: `inputs` is `seq_len x input_dim`; returns the
/// full `seq_len x hidden` state matrix.
pub fn gru_forward(
    tape: &mut Tape,
    pmap: &[TensorId],
    p: &GruParams,
    inputs: TensorId,
    h0: Option<TensorId>,
) -> TensorId {
    let shape = tape.shape(inputs).to_vec();
    assert_eq!(shape.len(), 2, "gru_forward: inputs must be 2-d, got {:?}", shape);
    assert_eq!(
        shape[1], p.input_dim,
        "gru_forward: input width {} does not match params ({})",
        shape[1], p.input_dim
    );
    let len = shape[0];
    if len == 0 {
        return tape.zeros(vec![0, p.hidden]);
    }
    let steps: Vec<TensorId> = (0..len).map(|t| tape.row(inputs, t)).collect();
    let states = gru_sequence(tape, pmap, p, &steps, h0);
    let ids: Vec<TensorId> = states.iter().map(|s| s.state).collect();
    tape.concat_rows(&ids)
}
