//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is a define-by-run arena: every operation appends a node
//! holding its output tensor and a record of how it was produced, so node
//! indices are already a topological order and [`Tape::backward`] is a single
//! reverse sweep. Shape violations panic with messages naming the offending
//! shapes; numeric checks that can fail on user input return errors from the
//! callers that own them.
//!
//! Tensors are plain row-major `Vec<f64>` buffers. A tape and its tensors
//! belong to one worker; data parallelism runs independent tapes and sums the
//! harvested gradients at a single synchronization point.

mod gradcheck;

pub use gradcheck::grad_check;

/// Dense multi-dimensional value, optionally carrying a gradient buffer.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![0.0; numel], shape)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected 2-d tensor, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Hadamard { a: TensorId, b: TensorId },
    AddRow { a: TensorId, row: TensorId },
    MulScalar { a: TensorId, s: TensorId },
    OneMinus { a: TensorId },
    Sigmoid { a: TensorId },
    Tanh { a: TensorId },
    Relu { a: TensorId },
    MaskedSoftmax { a: TensorId, mask: Vec<bool> },
    Conv2dRelu { input: TensorId, kernels: TensorId, bias: TensorId },
    MaxPool2d { input: TensorId, argmax: Vec<usize> },
    Embed { table: TensorId, ids: Vec<u32> },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    Row { a: TensorId, index: usize },
    Element { a: TensorId, index: usize },
    Reshape { a: TensorId },
    SumAll { a: TensorId },
    AttentionScores { scores: TensorId, v: TensorId, bias: TensorId },
    BceLoss { prob: TensorId, target: bool },
}

struct Node {
    tensor: Tensor,
    op: Op,
    /// True when this node or any ancestor requires a gradient.
    needs_grad: bool,
}

/// Ordered record of executed operations; inputs always precede their users.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<String>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        let mut t = Tensor::new(data, shape);
        t.requires_grad = requires_grad;
        self.leaf_tensor(t)
    }

    pub fn leaf_tensor(&mut self, tensor: Tensor) -> TensorId {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> TensorId {
        self.leaf_tensor(Tensor::zeros(shape))
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn scalar(&self, id: TensorId) -> f64 {
        let t = self.tensor(id);
        assert_eq!(t.numel(), 1, "scalar: tensor has shape {:?}", t.shape);
        t.data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    /// Test hook: corrupts the backward rule of the named op (its upstream
    /// gradient is scaled by 1.5), so gradient checkers can prove they catch
    /// broken gradients.
    pub fn inject_fault(&mut self, op_name: &str) {
        self.fault = Some(op_name.to_string());
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, op, needs_grad });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ---- forward operations --------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, ka) = self.tensor(a).dims2();
        let (kb, n) = self.tensor(b).dims2();
        assert_eq!(
            ka, kb,
            "matmul: inner dimensions disagree: {:?} x {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data = matmul_raw(self.data(a), self.data(b), m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(data, vec![m, n]), Op::Matmul { a, b }, needs)
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.tensor(a).dims2();
        let data = transpose_raw(self.data(a), r, c);
        let needs = self.needs(a);
        self.push(Tensor::new(data, vec![c, r]), Op::Transpose { a }, needs)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.zip(a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.zip(a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.zip(a, b, |x, y| x * y, |a, b| Op::Hadamard { a, b })
    }

    fn zip(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(TensorId, TensorId) -> Op,
    ) -> TensorId {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "elementwise: shapes disagree: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(data, shape), op(a, b), needs)
    }

    /// Adds a length-`c` vector to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> TensorId {
        let (r, c) = self.tensor(a).dims2();
        assert_eq!(
            self.tensor(row).numel(),
            c,
            "add_row: row length {:?} does not match matrix {:?}",
            self.shape(row),
            self.shape(a)
        );
        let rowd = self.data(row).to_vec();
        let mut data = self.data(a).to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += rowd[j];
            }
        }
        let needs = self.needs(a) || self.needs(row);
        self.push(Tensor::new(data, vec![r, c]), Op::AddRow { a, row }, needs)
    }

    /// Multiplies a tensor by a single-element tensor.
    pub fn mul_scalar(&mut self, a: TensorId, s: TensorId) -> TensorId {
        assert_eq!(
            self.tensor(s).numel(),
            1,
            "mul_scalar: scale must be a single element, got {:?}",
            self.shape(s)
        );
        let sv = self.data(s)[0];
        let data: Vec<f64> = self.data(a).iter().map(|&x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(s);
        self.push(Tensor::new(data, shape), Op::MulScalar { a, s }, needs)
    }

    pub fn one_minus(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| 1.0 - x).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(data, shape), Op::OneMinus { a }, needs)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), |a| Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::tanh, |a| Op::Tanh { a })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.max(0.0), |a| Op::Relu { a })
    }

    fn unary(
        &mut self,
        a: TensorId,
        f: impl Fn(f64) -> f64,
        op: impl Fn(TensorId) -> Op,
    ) -> TensorId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(data, shape), op(a), needs)
    }

    /// Row-wise softmax over the unmasked entries of a 2-d tensor.
    ///
    /// Masked entries are exactly zero in the output. A row with no unmasked
    /// entry yields an all-zero row rather than NaN, signalling "no content"
    /// to downstream ops.
    pub fn masked_softmax(&mut self, a: TensorId, mask: &[bool]) -> TensorId {
        let (r, c) = self.tensor(a).dims2();
        assert_eq!(
            mask.len(),
            r * c,
            "masked_softmax: mask length {} does not match shape {:?}",
            mask.len(),
            self.shape(a)
        );
        let src = self.data(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let rmask = &mask[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if rmask[j] && row[j] > max {
                    max = row[j];
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut sum = 0.0;
            for j in 0..c {
                if rmask[j] {
                    let e = (row[j] - max).exp();
                    data[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::new(data, vec![r, c]), Op::MaskedSoftmax { a, mask: mask.to_vec() }, needs)
    }

    pub fn softmax_row(&mut self, a: TensorId) -> TensorId {
        let mask = vec![true; self.tensor(a).numel()];
        self.masked_softmax(a, &mask)
    }

    /// Valid (unpadded) multi-channel 2-d convolution with per-map scalar
    /// bias and ReLU. `input` is `[C, H, W]`, `kernels` is `[F, C, kh, kw]`,
    /// `bias` is `[F]`; output is `[F, H-kh+1, W-kw+1]`.
    pub fn conv2d_relu(&mut self, input: TensorId, kernels: TensorId, bias: TensorId) -> TensorId {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernels).to_vec();
        assert_eq!(ishape.len(), 3, "conv2d: input must be [C,H,W], got {:?}", ishape);
        assert_eq!(kshape.len(), 4, "conv2d: kernels must be [F,C,kh,kw], got {:?}", kshape);
        let (ci, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (f, ck, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        assert_eq!(ci, ck, "conv2d: channel count disagrees: input {:?} vs kernels {:?}", ishape, kshape);
        assert_eq!(self.tensor(bias).numel(), f, "conv2d: bias {:?} does not match {} kernels", self.shape(bias), f);
        assert!(
            kh <= h && kw <= w,
            "conv2d: window ({kh}x{kw}) larger than input ({h}x{w})"
        );
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let src = self.data(input);
        let ker = self.data(kernels);
        let b = self.data(bias);
        let mut data = vec![0.0; f * oh * ow];
        for fi in 0..f {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[fi];
                    for c in 0..ci {
                        for s in 0..kh {
                            let krow = &ker[((fi * ci + c) * kh + s) * kw..];
                            let irow = &src[(c * h + i + s) * w + j..];
                            for t in 0..kw {
                                acc += krow[t] * irow[t];
                            }
                        }
                    }
                    data[(fi * oh + i) * ow + j] = acc.max(0.0);
                }
            }
        }
        let needs = self.needs(input) || self.needs(kernels) || self.needs(bias);
        self.push(
            Tensor::new(data, vec![f, oh, ow]),
            Op::Conv2dRelu { input, kernels, bias },
            needs,
        )
    }

    /// Non-overlapping max pooling (stride = window) over `[C, H, W]`.
    /// Trailing partial windows are pooled over the cells that exist.
    pub fn maxpool2d(&mut self, input: TensorId, win: (usize, usize)) -> TensorId {
        let ishape = self.shape(input).to_vec();
        assert_eq!(ishape.len(), 3, "maxpool2d: input must be [C,H,W], got {:?}", ishape);
        let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (ph, pw) = win;
        assert!(
            h >= 1 && w >= 1 && ph >= 1 && pw >= 1,
            "maxpool2d: empty input or window: input {h}x{w}, window {ph}x{pw}"
        );
        let oh = h.div_ceil(ph);
        let ow = w.div_ceil(pw);
        let src = self.data(input);
        let mut data = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for s in i * ph..((i + 1) * ph).min(h) {
                        for t in j * pw..((j + 1) * pw).min(w) {
                            let at = (ch * h + s) * w + t;
                            if src[at] > best {
                                best = src[at];
                                best_at = at;
                            }
                        }
                    }
                    data[(ch * oh + i) * ow + j] = best;
                    argmax[(ch * oh + i) * ow + j] = best_at;
                }
            }
        }
        let needs = self.needs(input);
        self.push(Tensor::new(data, vec![c, oh, ow]), Op::MaxPool2d { input, argmax }, needs)
    }

    /// Looks up rows of a `[vocab, dim]` table; gradients scatter-accumulate
    /// back into the table rows.
    pub fn embed(&mut self, table: TensorId, ids: &[u32]) -> TensorId {
        let (vocab, dim) = self.tensor(table).dims2();
        assert!(!ids.is_empty(), "embed: empty id sequence");
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            let id = id as usize;
            assert!(id < vocab, "embed: token id {id} out of range for vocabulary of {vocab}");
            data.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let needs = self.needs(table);
        self.push(
            Tensor::new(data, vec![ids.len(), dim]),
            Op::Embed { table, ids: ids.to_vec() },
            needs,
        )
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let (_, c) = self.tensor(parts[0]).dims2();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.tensor(p).dims2();
            assert_eq!(pc, c, "concat_rows: column counts disagree: {c} vs {pc}");
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(data, vec![rows, c]), Op::ConcatRows { parts: parts.to_vec() }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let (r, _) = self.tensor(parts[0]).dims2();
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.tensor(p).dims2();
            assert_eq!(pr, r, "concat_cols: row counts disagree: {r} vs {pr}");
            cols += pc;
        }
        let mut data = vec![0.0; r * cols];
        let mut at = 0;
        for &p in parts {
            let (_, pc) = self.tensor(p).dims2();
            let src = self.data(p);
            for i in 0..r {
                data[i * cols + at..i * cols + at + pc].copy_from_slice(&src[i * pc..(i + 1) * pc]);
            }
            at += pc;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(data, vec![r, cols]), Op::ConcatCols { parts: parts.to_vec() }, needs)
    }

    /// Selects row `index` of a 2-d tensor as a `1 x c` tensor.
    pub fn row(&mut self, a: TensorId, index: usize) -> TensorId {
        let (r, c) = self.tensor(a).dims2();
        assert!(index < r, "row: index {index} out of range for {r} rows");
        let data = self.data(a)[index * c..(index + 1) * c].to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(data, vec![1, c]), Op::Row { a, index }, needs)
    }

    /// Selects one element as a `[1]` tensor.
    pub fn element(&mut self, a: TensorId, index: usize) -> TensorId {
        assert!(index < self.tensor(a).numel(), "element: index {index} out of range");
        let data = vec![self.data(a)[index]];
        let needs = self.needs(a);
        self.push(Tensor::new(data, vec![1]), Op::Element { a, index }, needs)
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> TensorId {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.tensor(a).numel(),
            "reshape: cannot view {:?} as {:?}",
            self.shape(a),
            shape
        );
        let data = self.data(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(data, shape), Op::Reshape { a }, needs)
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::new(vec![s], vec![1]), Op::SumAll { a }, needs)
    }

    /// Bias-inside-tanh attention scoring: given raw pair scores `S` (r x c),
    /// a profile vector `v` and bias `b` (both length d), produces
    /// `out[i][j] = sum_k v[k] * tanh(S[i][j] + b[k])`.
    pub fn attention_scores(&mut self, scores: TensorId, v: TensorId, bias: TensorId) -> TensorId {
        let (r, c) = self.tensor(scores).dims2();
        let d = self.tensor(v).numel();
        assert_eq!(
            self.tensor(bias).numel(),
            d,
            "attention_scores: profile {:?} and bias {:?} lengths disagree",
            self.shape(v),
            self.shape(bias)
        );
        let s = self.data(scores);
        let vd = self.data(v);
        let bd = self.data(bias);
        let mut data = vec![0.0; r * c];
        for (out, &sij) in data.iter_mut().zip(s) {
            let mut acc = 0.0;
            for k in 0..d {
                acc += vd[k] * (sij + bd[k]).tanh();
            }
            *out = acc;
        }
        let needs = self.needs(scores) || self.needs(v) || self.needs(bias);
        self.push(Tensor::new(data, vec![r, c]), Op::AttentionScores { scores, v, bias }, needs)
    }

    /// Binary cross entropy of a single probability against a 0/1 target,
    /// clamping the probability to [1e-12, 1-1e-12] before the logs.
    pub fn bce_loss(&mut self, prob: TensorId, target: bool) -> TensorId {
        assert_eq!(
            self.tensor(prob).numel(),
            1,
            "bce_loss: probability must be a single element, got {:?}",
            self.shape(prob)
        );
        let g = clamp_prob(self.data(prob)[0]);
        let loss = if target { -g.ln() } else { -(1.0 - g).ln() };
        let needs = self.needs(prob);
        self.push(Tensor::new(vec![loss], vec![1]), Op::BceLoss { prob, target }, needs)
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates `d loss / d tensor` into the grad of every
    /// `requires_grad` tensor the loss depends on. Each call contributes
    /// exactly one pass; repeated calls without [`Tape::zero_grads`] keep
    /// accumulating.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(
            self.tensor(loss).numel(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            self.shape(loss)
        );
        // Every requires_grad tensor ends the pass with an allocated grad,
        // zeros when the loss does not depend on it.
        for node in &mut self.nodes {
            if node.tensor.requires_grad && node.tensor.grad.is_none() {
                node.tensor.grad = Some(vec![0.0; node.tensor.data.len()]);
            }
        }
        if !self.nodes[loss.0].needs_grad {
            return;
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        local[loss.0] = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            let Some(grad) = local[i].take() else { continue };
            let node = &mut self.nodes[i];
            if node.tensor.requires_grad {
                let store = node
                    .tensor
                    .grad
                    .get_or_insert_with(|| vec![0.0; node.tensor.data.len()]);
                for (s, g) in store.iter_mut().zip(&grad) {
                    *s += g;
                }
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let grad = match &self.fault {
                Some(name) if name == op_name(&self.nodes[i].op) => {
                    grad.iter().map(|g| g * 1.5).collect()
                }
                _ => grad,
            };
            let (before, rest) = self.nodes.split_at(i);
            let node = &rest[0];
            backward_op(before, &mut local, &node.op, &node.tensor, &grad);
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Hadamard { .. } => "hadamard",
        Op::AddRow { .. } => "add_row",
        Op::MulScalar { .. } => "mul_scalar",
        Op::OneMinus { .. } => "one_minus",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Tanh { .. } => "tanh",
        Op::Relu { .. } => "relu",
        Op::MaskedSoftmax { .. } => "masked_softmax",
        Op::Conv2dRelu { .. } => "conv2d",
        Op::MaxPool2d { .. } => "maxpool2d",
        Op::Embed { .. } => "embed",
        Op::ConcatRows { .. } => "concat_rows",
        Op::ConcatCols { .. } => "concat_cols",
        Op::Row { .. } => "row",
        Op::Element { .. } => "element",
        Op::Reshape { .. } => "reshape",
        Op::SumAll { .. } => "sum_all",
        Op::AttentionScores { .. } => "attention_scores",
        Op::BceLoss { .. } => "bce_loss",
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(1e-12, 1.0 - 1e-12)
}

type LocalGrads = [Option<Vec<f64>>];

fn add_into(nodes: &[Node], local: &mut LocalGrads, id: TensorId, delta: Vec<f64>) {
    if !nodes[id.0].needs_grad {
        return;
    }
    match &mut local[id.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&delta) {
                *a += b;
            }
        }
        slot => *slot = Some(delta),
    }
}

#[allow(clippy::needless_range_loop)]
fn backward_op(nodes: &[Node], local: &mut LocalGrads, op: &Op, out: &Tensor, grad: &[f64]) {
    match op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = nodes[a.0].tensor.dims2();
            let n = nodes[b.0].tensor.shape[1];
            if nodes[a.0].needs_grad {
                let bt = transpose_raw(&nodes[b.0].tensor.data, k, n);
                let da = matmul_raw(grad, &bt, m, n, k);
                add_into(nodes, local, *a, da);
            }
            if nodes[b.0].needs_grad {
                let at = transpose_raw(&nodes[a.0].tensor.data, m, k);
                let db = matmul_raw(&at, grad, k, m, n);
                add_into(nodes, local, *b, db);
            }
        }
        Op::Transpose { a } => {
            let (c, r) = (out.shape[0], out.shape[1]);
            let da = transpose_raw(grad, c, r);
            add_into(nodes, local, *a, da);
        }
        Op::Add { a, b } => {
            add_into(nodes, local, *a, grad.to_vec());
            add_into(nodes, local, *b, grad.to_vec());
        }
        Op::Sub { a, b } => {
            add_into(nodes, local, *a, grad.to_vec());
            if nodes[b.0].needs_grad {
                let db: Vec<f64> = grad.iter().map(|g| -g).collect();
                add_into(nodes, local, *b, db);
            }
        }
        Op::Hadamard { a, b } => {
            if nodes[a.0].needs_grad {
                let da: Vec<f64> =
                    grad.iter().zip(&nodes[b.0].tensor.data).map(|(g, y)| g * y).collect();
                add_into(nodes, local, *a, da);
            }
            if nodes[b.0].needs_grad {
                let db: Vec<f64> =
                    grad.iter().zip(&nodes[a.0].tensor.data).map(|(g, x)| g * x).collect();
                add_into(nodes, local, *b, db);
            }
        }
        Op::AddRow { a, row } => {
            add_into(nodes, local, *a, grad.to_vec());
            if nodes[row.0].needs_grad {
                let (r, c) = (out.shape[0], out.shape[1]);
                let mut drow = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        drow[j] += grad[i * c + j];
                    }
                }
                add_into(nodes, local, *row, drow);
            }
        }
        Op::MulScalar { a, s } => {
            let sv = nodes[s.0].tensor.data[0];
            if nodes[a.0].needs_grad {
                let da: Vec<f64> = grad.iter().map(|g| g * sv).collect();
                add_into(nodes, local, *a, da);
            }
            if nodes[s.0].needs_grad {
                let ds: f64 = grad.iter().zip(&nodes[a.0].tensor.data).map(|(g, x)| g * x).sum();
                add_into(nodes, local, *s, vec![ds]);
            }
        }
        Op::OneMinus { a } => {
            let da: Vec<f64> = grad.iter().map(|g| -g).collect();
            add_into(nodes, local, *a, da);
        }
        Op::Sigmoid { a } => {
            let da: Vec<f64> =
                grad.iter().zip(&out.data).map(|(g, &y)| g * y * (1.0 - y)).collect();
            add_into(nodes, local, *a, da);
        }
        Op::Tanh { a } => {
            let da: Vec<f64> = grad.iter().zip(&out.data).map(|(g, &y)| g * (1.0 - y * y)).collect();
            add_into(nodes, local, *a, da);
        }
        Op::Relu { a } => {
            let da: Vec<f64> =
                grad.iter().zip(&out.data).map(|(g, &y)| if y > 0.0 { *g } else { 0.0 }).collect();
            add_into(nodes, local, *a, da);
        }
        Op::MaskedSoftmax { a, mask } => {
            let (r, c) = (out.shape[0], out.shape[1]);
            let mut da = vec![0.0; r * c];
            for i in 0..r {
                let y = &out.data[i * c..(i + 1) * c];
                let g = &grad[i * c..(i + 1) * c];
                let m = &mask[i * c..(i + 1) * c];
                let dot: f64 = (0..c).filter(|&j| m[j]).map(|j| g[j] * y[j]).sum();
                for j in 0..c {
                    if m[j] {
                        da[i * c + j] = y[j] * (g[j] - dot);
                    }
                }
            }
            add_into(nodes, local, *a, da);
        }
        Op::Conv2dRelu { input, kernels, bias } => {
            let ishape = &nodes[input.0].tensor.shape;
            let kshape = &nodes[kernels.0].tensor.shape;
            let (ci, h, w) = (ishape[0], ishape[1], ishape[2]);
            let (f, _, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
            let (oh, ow) = (out.shape[1], out.shape[2]);
            let mut din = vec![0.0; ci * h * w];
            let mut dker = vec![0.0; f * ci * kh * kw];
            let mut dbias = vec![0.0; f];
            let src = &nodes[input.0].tensor.data;
            let ker = &nodes[kernels.0].tensor.data;
            for fi in 0..f {
                for i in 0..oh {
                    for j in 0..ow {
                        let at = (fi * oh + i) * ow + j;
                        if out.data[at] <= 0.0 {
                            continue;
                        }
                        let g = grad[at];
                        dbias[fi] += g;
                        for c in 0..ci {
                            for s in 0..kh {
                                for t in 0..kw {
                                    let kat = ((fi * ci + c) * kh + s) * kw + t;
                                    let iat = (c * h + i + s) * w + j + t;
                                    dker[kat] += g * src[iat];
                                    din[iat] += g * ker[kat];
                                }
                            }
                        }
                    }
                }
            }
            add_into(nodes, local, *input, din);
            add_into(nodes, local, *kernels, dker);
            add_into(nodes, local, *bias, dbias);
        }
        Op::MaxPool2d { input, argmax } => {
            let mut din = vec![0.0; nodes[input.0].tensor.data.len()];
            for (o, &src_at) in argmax.iter().enumerate() {
                din[src_at] += grad[o];
            }
            add_into(nodes, local, *input, din);
        }
        Op::Embed { table, ids } => {
            if !nodes[table.0].needs_grad {
                return;
            }
            let dim = nodes[table.0].tensor.shape[1];
            let mut dt = vec![0.0; nodes[table.0].tensor.data.len()];
            for (i, &id) in ids.iter().enumerate() {
                let id = id as usize;
                for j in 0..dim {
                    dt[id * dim + j] += grad[i * dim + j];
                }
            }
            add_into(nodes, local, *table, dt);
        }
        Op::ConcatRows { parts } => {
            let mut at = 0;
            for &p in parts {
                let n = nodes[p.0].tensor.data.len();
                if nodes[p.0].needs_grad {
                    add_into(nodes, local, p, grad[at..at + n].to_vec());
                }
                at += n;
            }
        }
        Op::ConcatCols { parts } => {
            let (r, cols) = (out.shape[0], out.shape[1]);
            let mut at = 0;
            for &p in parts {
                let pc = nodes[p.0].tensor.shape[1];
                if nodes[p.0].needs_grad {
                    let mut dp = vec![0.0; r * pc];
                    for i in 0..r {
                        dp[i * pc..(i + 1) * pc]
                            .copy_from_slice(&grad[i * cols + at..i * cols + at + pc]);
                    }
                    add_into(nodes, local, p, dp);
                }
                at += pc;
            }
        }
        Op::Row { a, index } => {
            let c = out.shape[1];
            let mut da = vec![0.0; nodes[a.0].tensor.data.len()];
            da[index * c..(index + 1) * c].copy_from_slice(grad);
            add_into(nodes, local, *a, da);
        }
        Op::Element { a, index } => {
            let mut da = vec![0.0; nodes[a.0].tensor.data.len()];
            da[*index] = grad[0];
            add_into(nodes, local, *a, da);
        }
        Op::Reshape { a } => {
            add_into(nodes, local, *a, grad.to_vec());
        }
        Op::SumAll { a } => {
            let da = vec![grad[0]; nodes[a.0].tensor.data.len()];
            add_into(nodes, local, *a, da);
        }
        Op::AttentionScores { scores, v, bias } => {
            let s = &nodes[scores.0].tensor.data;
            let vd = &nodes[v.0].tensor.data;
            let bd = &nodes[bias.0].tensor.data;
            let d = vd.len();
            let mut ds = vec![0.0; s.len()];
            let mut dv = vec![0.0; d];
            let mut db = vec![0.0; d];
            for (at, &sij) in s.iter().enumerate() {
                let g = grad[at];
                if g == 0.0 {
                    continue;
                }
                let mut dsij = 0.0;
                for k in 0..d {
                    let t = (sij + bd[k]).tanh();
                    let sech2 = 1.0 - t * t;
                    dsij += vd[k] * sech2;
                    dv[k] += g * t;
                    db[k] += g * vd[k] * sech2;
                }
                ds[at] = g * dsij;
            }
            add_into(nodes, local, *scores, ds);
            add_into(nodes, local, *v, dv);
            add_into(nodes, local, *bias, db);
        }
        Op::BceLoss { prob, target } => {
            let p = nodes[prob.0].tensor.data[0];
            let dp = if (1e-12..=1.0 - 1e-12).contains(&p) {
                if *target { -1.0 / p } else { 1.0 / (1.0 - p) }
            } else {
                0.0 // clamped: locally constant
            };
            add_into(nodes, local, *prob, vec![dp * grad[0]]);
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue; // pad rows embed to zero; skipping them is exact
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
        }
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2], false);
        let a = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], false);
        let c = tape.matmul(i2, a);
        assert_close(tape.data(c), &[1.0, 2.0, 3.0, 4.0], 0.0);
    }

    #[test]
    fn matmul_zero() {
        let mut tape = Tape::new();
        let z = tape.zeros(vec![2, 3]);
        let a = tape.leaf(vec![1.0; 6], vec![3, 2], false);
        let c = tape.matmul(z, a);
        assert_close(tape.data(c), &[0.0; 4], 0.0);
    }

    #[test]
    fn matmul_hand_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], false);
        let b = tape.leaf(vec![5.0, 6.0, 7.0, 8.0], vec![2, 2], false);
        let c = tape.matmul(a, b);
        assert_close(tape.data(c), &[19.0, 22.0, 43.0, 50.0], 0.0);
    }

    #[test]
    #[should_panic(expected = "inner dimensions disagree")]
    fn matmul_shape_error_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.zeros(vec![2, 3]);
        let b = tape.zeros(vec![4, 2]);
        tape.matmul(a, b);
    }

    #[test]
    fn elementwise_and_activations() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, -2.0, 3.0], vec![1, 3], false);
        let z = tape.zeros(vec![1, 3]);
        let h = tape.hadamard(x, z);
        assert_close(tape.data(h), &[0.0; 3], 0.0);

        let zero = tape.leaf(vec![0.0], vec![1], false);
        let s = tape.sigmoid(zero);
        assert_close(tape.data(s), &[0.5], 0.0);

        let r_in = tape.leaf(vec![-1.0, 2.0, 0.0], vec![1, 3], false);
        let r = tape.relu(r_in);
        assert_close(tape.data(r), &[0.0, 2.0, 0.0], 0.0);
    }

    #[test]
    #[should_panic(expected = "shapes disagree")]
    fn elementwise_shape_error() {
        let mut tape = Tape::new();
        let a = tape.zeros(vec![1, 3]);
        let b = tape.zeros(vec![1, 4]);
        tape.add(a, b);
    }

    #[test]
    fn masked_softmax_uniform_row() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![2.0; 4], vec![1, 4], false);
        let s = tape.masked_softmax(a, &[true; 4]);
        assert_close(tape.data(s), &[0.25; 4], 1e-15);
    }

    #[test]
    fn masked_softmax_single_unmasked() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![3.0, -1.0, 0.5, 9.0], vec![2, 2], false);
        let s = tape.masked_softmax(a, &[false, true, true, false]);
        assert_close(tape.data(s), &[0.0, 1.0, 1.0, 0.0], 0.0);
    }

    #[test]
    fn masked_softmax_hand_value() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![0.0, 3.0f64.ln()], vec![1, 2], false);
        let s = tape.masked_softmax(a, &[true, true]);
        assert_close(tape.data(s), &[0.25, 0.75], 1e-15);
    }

    #[test]
    fn masked_softmax_fully_masked_row_is_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], false);
        let s = tape.masked_softmax(a, &[false, false, true, true]);
        let out = tape.data(s);
        assert_close(&out[0..2], &[0.0, 0.0], 0.0);
        assert!((out[2] + out[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv_zero_kernels_gives_relu_bias() {
        let mut tape = Tape::new();
        let input = tape.leaf((0..9).map(|v| v as f64).collect(), vec![1, 3, 3], false);
        let k = tape.zeros(vec![2, 1, 2, 2]);
        let b = tape.leaf(vec![0.7, -0.3], vec![2], false);
        let out = tape.conv2d_relu(input, k, b);
        assert_eq!(tape.shape(out), &[2, 2, 2]);
        assert_close(&tape.data(out)[0..4], &[0.7; 4], 0.0);
        assert_close(&tape.data(out)[4..8], &[0.0; 4], 0.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let input = tape.leaf(vec![1.0, -2.0, 3.0, -4.0], vec![1, 2, 2], false);
        let k = tape.leaf(vec![1.0], vec![1, 1, 1, 1], false);
        let b = tape.zeros(vec![1]);
        let out = tape.conv2d_relu(input, k, b);
        assert_close(tape.data(out), &[1.0, 0.0, 3.0, 0.0], 0.0);
    }

    #[test]
    fn conv_ones_hand_value() {
        let mut tape = Tape::new();
        let input = tape.leaf(vec![1.0; 9], vec![1, 3, 3], false);
        let k = tape.leaf(vec![1.0; 4], vec![1, 1, 2, 2], false);
        let b = tape.zeros(vec![1]);
        let out = tape.conv2d_relu(input, k, b);
        assert_eq!(tape.shape(out), &[1, 2, 2]);
        assert_close(tape.data(out), &[4.0; 4], 0.0);
    }

    #[test]
    #[should_panic(expected = "window (4x4) larger than input (3x3)")]
    fn conv_window_too_large() {
        let mut tape = Tape::new();
        let input = tape.zeros(vec![1, 3, 3]);
        let k = tape.zeros(vec![1, 1, 4, 4]);
        let b = tape.zeros(vec![1]);
        tape.conv2d_relu(input, k, b);
    }

    #[test]
    fn maxpool_constant_and_small() {
        let mut tape = Tape::new();
        let c = tape.leaf(vec![5.0; 16], vec![1, 4, 4], false);
        let p = tape.maxpool2d(c, (2, 2));
        assert_eq!(tape.shape(p), &[1, 2, 2]);
        assert_close(tape.data(p), &[5.0; 4], 0.0);

        let a = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![1, 2, 2], false);
        let p = tape.maxpool2d(a, (2, 2));
        assert_close(tape.data(p), &[4.0], 0.0);
    }

    #[test]
    fn maxpool_hand_value_4x4() {
        let mut tape = Tape::new();
        let a = tape.leaf((1..=16).map(|v| v as f64).collect(), vec![1, 4, 4], false);
        let p = tape.maxpool2d(a, (2, 2));
        assert_close(tape.data(p), &[6.0, 8.0, 14.0, 16.0], 0.0);
    }

    #[test]
    fn maxpool_partial_trailing_window() {
        let mut tape = Tape::new();
        let a = tape.leaf((1..=9).map(|v| v as f64).collect(), vec![1, 3, 3], false);
        let p = tape.maxpool2d(a, (2, 2));
        assert_eq!(tape.shape(p), &[1, 2, 2]);
        assert_close(tape.data(p), &[5.0, 6.0, 8.0, 9.0], 0.0);
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0, 3.0], vec![1, 3], true);
        let s = tape.sum_all(x);
        tape.backward(s);
        assert_close(tape.grad(x).unwrap(), &[1.0; 3], 0.0);
    }

    #[test]
    fn backward_unused_input_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![1, 2], true);
        let y = tape.leaf(vec![3.0], vec![1], true);
        let s = tape.sum_all(y);
        tape.backward(s);
        assert_close(tape.grad(x).unwrap(), &[0.0; 2], 0.0);
    }

    #[test]
    fn backward_product_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2.0], vec![1], true);
        let y = tape.leaf(vec![3.0], vec![1], true);
        let p = tape.hadamard(x, y);
        tape.backward(p);
        assert_close(tape.grad(x).unwrap(), &[3.0], 0.0);
        assert_close(tape.grad(y).unwrap(), &[2.0], 0.0);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 1.0], vec![1, 2], true);
        let s = tape.sum_all(x);
        tape.backward(s);
        tape.backward(s);
        assert_close(tape.grad(x).unwrap(), &[2.0; 2], 0.0);
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![1, 2], true);
        tape.backward(x);
    }

    #[test]
    fn backward_linearity_of_sums() {
        // d(f1+f2)/dx accumulated at once equals two separate passes.
        let build = |tape: &mut Tape, x: TensorId| {
            let sq = tape.hadamard(x, x);
            let f1 = tape.sum_all(sq);
            let sig = tape.sigmoid(x);
            let f2 = tape.sum_all(sig);
            (f1, f2)
        };
        let data = vec![0.3, -0.7, 1.2];

        let mut t1 = Tape::new();
        let x1 = t1.leaf(data.clone(), vec![1, 3], true);
        let (f1, f2) = build(&mut t1, x1);
        let total = t1.add(f1, f2);
        t1.backward(total);
        let combined = t1.grad(x1).unwrap().to_vec();

        let mut t2 = Tape::new();
        let x2 = t2.leaf(data, vec![1, 3], true);
        let (f1, f2) = build(&mut t2, x2);
        t2.backward(f1);
        t2.backward(f2);
        assert_close(&combined, t2.grad(x2).unwrap(), 1e-15);
    }

    #[test]
    fn relu_conv_scales_positively_with_zero_bias() {
        let c = 2.5;
        let input: Vec<f64> = vec![0.4, -1.0, 2.0, 0.1, -0.2, 0.7, 1.5, -0.5, 0.9];
        let run = |scale: f64| {
            let mut tape = Tape::new();
            let scaled: Vec<f64> = input.iter().map(|v| v * scale).collect();
            let x = tape.leaf(scaled, vec![1, 3, 3], false);
            let k = tape.leaf(vec![0.5, -0.25, 1.0, 0.75], vec![1, 1, 2, 2], false);
            let b = tape.zeros(vec![1]);
            let out = tape.conv2d_relu(x, k, b);
            tape.data(out).to_vec()
        };
        let base = run(1.0);
        let scaled = run(c);
        for (b, s) in base.iter().zip(&scaled) {
            assert!((b * c - s).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_and_scatter_gradient() {
        let mut tape = Tape::new();
        let table = tape.leaf(vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0], vec![3, 2], true);
        let e = tape.embed(table, &[2, 2]);
        assert_close(tape.data(e), &[3.0, 4.0, 3.0, 4.0], 0.0);
        let s = tape.sum_all(e);
        tape.backward(s);
        assert_close(tape.grad(table).unwrap(), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0], 0.0);
    }

    #[test]
    #[should_panic(expected = "out of range for vocabulary")]
    fn embed_rejects_out_of_range() {
        let mut tape = Tape::new();
        let table = tape.zeros(vec![3, 2]);
        tape.embed(table, &[3]);
    }

    #[test]
    fn bce_loss_hand_values() {
        let mut tape = Tape::new();
        let half = tape.leaf(vec![0.5], vec![1], false);
        let l = tape.bce_loss(half, true);
        assert!((tape.scalar(l) - 2.0f64.ln()).abs() < 1e-15);

        let near_one = tape.leaf(vec![1.0 - 1e-9], vec![1], false);
        let l = tape.bce_loss(near_one, true);
        assert!(tape.scalar(l) < 1e-8);

        // symmetry: loss(g, 1) == loss(1-g, 0)
        let g = tape.leaf(vec![0.73], vec![1], false);
        let gc = tape.leaf(vec![0.27], vec![1], false);
        let l1 = tape.bce_loss(g, true);
        let l0 = tape.bce_loss(gc, false);
        assert!((tape.scalar(l1) - tape.scalar(l0)).abs() < 1e-12);
    }

    #[test]
    fn concat_and_slicing_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], vec![1, 2], true);
        let b = tape.leaf(vec![3.0, 4.0], vec![1, 2], true);
        let m = tape.concat_rows(&[a, b]);
        assert_eq!(tape.shape(m), &[2, 2]);
        let r1 = tape.row(m, 1);
        assert_close(tape.data(r1), &[3.0, 4.0], 0.0);
        let cc = tape.concat_cols(&[a, b]);
        assert_close(tape.data(cc), &[1.0, 2.0, 3.0, 4.0], 0.0);
        let e = tape.element(cc, 2);
        let loss = tape.sum_all(e);
        tape.backward(loss);
        assert_close(tape.grad(b).unwrap(), &[1.0, 0.0], 0.0);
    }
}
