//! Reverse-mode autodiff over a static, per-batch compute graph.
//!
//! A [`Graph`] is a flat tape of nodes; values are computed eagerly as nodes
//! are appended, so building the graph is the forward pass. [`Graph::backward`]
//! sweeps the tape in reverse, accumulating parameter gradients into a
//! [`Grads`] buffer and exposing gradients of tracked input leaves so that
//! separately taped stages (per-sequence encoders feeding a batch-level loss)
//! can be chained: run the loss tape backward, then seed each sequence tape
//! with the gradient of its embedding leaf.
//!
//! Parameters live outside the graph in a [`ParamSet`]; `Param` nodes hold
//! only an id, never a copy of the weights, so many graphs can be built
//! against the same set concurrently.

use rand::Rng;

use super::func;
use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Real, Tensor};

const LN_EPS: f64 = 1e-5;

/// Index of a parameter tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// A named bag of parameter tensors shared by all graphs built against it.
#[derive(Clone, Debug)]
pub struct ParamSet<R> {
    tensors: Vec<Tensor<R>>,
    names: Vec<String>,
}

impl<R: Real> ParamSet<R> {
    pub fn new() -> Self {
        ParamSet { tensors: Vec::new(), names: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<R>) -> ParamId {
        self.tensors.push(tensor);
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<R> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<R>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Total number of scalar values across all tensors.
    pub fn value_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn convert<S: Real>(&self) -> ParamSet<S> {
        ParamSet {
            tensors: self.tensors.iter().map(Tensor::convert).collect(),
            names: self.names.clone(),
        }
    }
}

impl<R: Real> Default for ParamSet<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers matching a [`ParamSet`] tensor-for-tensor.
#[derive(Clone, Debug)]
pub struct Grads<R> {
    tensors: Vec<Tensor<R>>,
}

impl<R: Real> Grads<R> {
    pub fn zeros_like(params: &ParamSet<R>) -> Self {
        Grads { tensors: params.tensors.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect() }
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<R> {
        &self.tensors[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, delta: &Tensor<R>) {
        self.tensors[id.0].add_assign(delta);
    }

    /// Adds another gradient buffer elementwise (chunk reduction).
    pub fn add_from(&mut self, other: &Grads<R>) {
        assert_eq!(self.tensors.len(), other.tensors.len());
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, c: R) {
        for t in &mut self.tensors {
            t.scale_in_place(c);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<R>)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<R> {
    Input,
    Param(ParamId),
    Gather { table: NodeId, tokens: Vec<u16> },
    MatMul { a: NodeId, b: NodeId },
    MatMulBt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: R },
    Gelu { a: NodeId, tanh: Tensor<R> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize },
    Dropout { a: NodeId, mask: Vec<R> },
    Rows { a: NodeId, start: usize },
    L2Normalize { a: NodeId },
    SoftmaxRows { a: NodeId },
    SumAll { a: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize> },
    BceWithLogits { logits: NodeId, labels: Tensor<R> },
}

struct Node<R> {
    op: Op<R>,
    value: Tensor<R>,
    needs_grad: bool,
}

/// Gradients of graph nodes left over after a backward sweep; only tracked
/// `Input` leaves retain theirs.
pub struct NodeGrads<R> {
    inner: Vec<Option<Tensor<R>>>,
}

impl<R: Real> NodeGrads<R> {
    pub fn take(&mut self, id: NodeId) -> Option<Tensor<R>> {
        self.inner[id.0].take()
    }
}

/// A static compute tape borrowing an immutable [`ParamSet`].
pub struct Graph<'p, R: Real> {
    params: &'p ParamSet<R>,
    nodes: Vec<Node<R>>,
}

impl<'p, R: Real> Graph<'p, R> {
    pub fn new(params: &'p ParamSet<R>) -> Self {
        Graph { params, nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<R> {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(pid) => self.params.tensor(pid),
            _ => &node.value,
        }
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, op: Op<R>, value: Tensor<R>, needs_grad: bool) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite value produced by a graph op");
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant or tracked input leaf. Tracked leaves retain their gradient
    /// in the [`NodeGrads`] returned by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor<R>, track_grad: bool) -> NodeId {
        self.push(Op::Input, value, track_grad)
    }

    /// A leaf bound to a parameter tensor; its gradient accumulates into the
    /// matching [`Grads`] slot.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        assert!(id.0 < self.params.len(), "param id out of range");
        self.push(Op::Param(id), Tensor::zeros(0, 0), true)
    }

    /// Row lookup: `out[t] = table[tokens[t]]`.
    pub fn gather(&mut self, table: NodeId, tokens: &[u16]) -> NodeId {
        assert!(!tokens.is_empty(), "gather over empty token sequence");
        let tab = self.value(table);
        let cols = tab.cols();
        let mut value = Tensor::zeros(tokens.len(), cols);
        for (t, &tok) in tokens.iter().enumerate() {
            assert!((tok as usize) < tab.rows(), "token id out of vocabulary");
            value.row_mut(t).copy_from_slice(tab.row(tok as usize));
        }
        let needs = self.needs_grad(table);
        self.push(Op::Gather { table, tokens: tokens.to_vec() }, value, needs)
    }

    /// `a @ b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = super::tensor::matmul(self.value(a), self.value(b));
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(Op::MatMul { a, b }, value, needs)
    }

    /// `a @ b^T`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = super::tensor::matmul_bt(self.value(a), self.value(b));
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(Op::MatMulBt { a, b }, value, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut value = va.clone();
        value.add_assign(vb);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(Op::Add { a, b }, value, needs)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.rows(), va.cols(), data);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(Op::Mul { a, b }, value, needs)
    }

    pub fn scale(&mut self, a: NodeId, c: R) -> NodeId {
        let value = self.value(a).map(|x| x * c);
        let needs = self.needs_grad(a);
        self.push(Op::Scale { a, c }, value, needs)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut value = va.clone();
        let mut tanh = va.clone();
        for (y, t) in value.data_mut().iter_mut().zip(tanh.data_mut()) {
            (*y, *t) = func::gelu_parts(*y);
        }
        let needs = self.needs_grad(a);
        self.push(Op::Gelu { a, tanh }, value, needs)
    }

    /// Row-wise layer normalization with learned gain and bias (`1 x cols`).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gain), self.value(bias));
        assert_eq!(vg.shape(), (1, vx.cols()), "layer norm gain shape");
        assert_eq!(vb.shape(), (1, vx.cols()), "layer norm bias shape");
        let mut value = vx.clone();
        for r in 0..value.rows() {
            let (xhat, _sigma) = normalize_row(vx.row(r));
            let out = value.row_mut(r);
            for c in 0..out.len() {
                out[c] = xhat[c].mul_add(vg.data()[c], vb.data()[c]);
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(gain) || self.needs_grad(bias);
        self.push(Op::LayerNorm { x, gain, bias }, value, needs)
    }

    /// Multi-head causal self-attention over `[seq, D]` projections. Rotary
    /// position embedding is applied to q and k per head inside the op; the
    /// softmax scale is `1/sqrt(d_head)`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> NodeId {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(vq.shape(), vk.shape(), "attention q/k shape mismatch");
        assert_eq!(vq.shape(), vv.shape(), "attention q/v shape mismatch");
        let d = vq.cols();
        assert!(heads > 0 && d % heads == 0, "head count must divide model dim");
        let d_head = d / heads;
        assert!(d_head % 2 == 0, "rotary needs an even head dim");

        let seq = vq.rows();
        let positions: Vec<usize> = (0..seq).collect();
        let mut value = Tensor::zeros(seq, d);
        for h in 0..heads {
            let qh = func::apply_rotary(&head_slice(vq, h, d_head), &positions);
            let kh = func::apply_rotary(&head_slice(vk, h, d_head), &positions);
            let vh = head_slice(vv, h, d_head);
            let out_h = func::causal_attention(&qh, &kh, &vh);
            write_head(&mut value, &out_h, h);
        }
        let needs = self.needs_grad(q) || self.needs_grad(k) || self.needs_grad(v);
        self.push(Op::Attention { q, k, v, heads }, value, needs)
    }

    /// Inverted dropout; a zero rate adds no node. The mask is drawn at build
    /// time from the caller's RNG, so a graph is replayable by reseeding.
    pub fn dropout(&mut self, a: NodeId, rate: f64, rng: &mut impl Rng) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        if rate == 0.0 {
            return a;
        }
        let keep = R::from_f64(1.0 / (1.0 - rate));
        let va = self.value(a);
        let mask: Vec<R> = (0..va.len())
            .map(|_| if rng.gen::<f64>() < rate { R::ZERO } else { keep })
            .collect();
        let data = va.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(va.rows(), va.cols(), data);
        let needs = self.needs_grad(a);
        self.push(Op::Dropout { a, mask }, value, needs)
    }

    /// Copy of rows `start..end`.
    pub fn rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let va = self.value(a);
        assert!(start < end && end <= va.rows(), "row slice out of range");
        let cols = va.cols();
        let data = va.data()[start * cols..end * cols].to_vec();
        let value = Tensor::new(end - start, cols, data);
        let needs = self.needs_grad(a);
        self.push(Op::Rows { a, start }, value, needs)
    }

    pub fn last_row(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).rows();
        self.rows(a, n - 1, n)
    }

    /// Row-wise L2 normalization; rows must be non-zero.
    pub fn l2_normalize(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..value.rows() {
            let norm = l2_norm(value.row(r));
            assert!(norm.to_f64() > 0.0, "cannot normalize a zero row");
            let inv = R::ONE / norm;
            for x in value.row_mut(r) {
                *x *= inv;
            }
        }
        let needs = self.needs_grad(a);
        self.push(Op::L2Normalize { a }, value, needs)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = func::softmax_rows(self.value(a));
        let needs = self.needs_grad(a);
        self.push(Op::SoftmaxRows { a }, value, needs)
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        let needs = self.needs_grad(a);
        self.push(Op::SumAll { a }, value, needs)
    }

    /// Mean over rows of `logsumexp(row) - row[target]`: softmax cross-entropy
    /// against one target class per row.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let vl = self.value(logits);
        assert_eq!(vl.rows(), targets.len(), "one target per logits row");
        let mut total = R::ZERO;
        for (r, &t) in targets.iter().enumerate() {
            let row = vl.row(r);
            assert!(t < row.len(), "target class out of range");
            total += log_sum_exp(row) - row[t];
        }
        let value = Tensor::scalar(total / R::from_f64(targets.len() as f64));
        let needs = self.needs_grad(logits);
        self.push(Op::SoftmaxCrossEntropy { logits, targets }, value, needs)
    }

    /// Mean binary cross-entropy of logits against labels in `{0,1}`,
    /// computed in the numerically stable softplus form.
    pub fn bce_with_logits(&mut self, logits: NodeId, labels: Tensor<R>) -> NodeId {
        let vl = self.value(logits);
        assert_eq!(vl.shape(), labels.shape(), "one label per logit");
        let mut total = R::ZERO;
        for (&z, &y) in vl.data().iter().zip(labels.data()) {
            total += y * func::softplus(-z) + (R::ONE - y) * func::softplus(z);
        }
        let value = Tensor::scalar(total / R::from_f64(vl.len() as f64));
        let needs = self.needs_grad(logits);
        self.push(Op::BceWithLogits { logits, labels }, value, needs)
    }

    /// Reverse sweep from `output` seeded with `seed` (same shape as the
    /// output value). Parameter gradients are accumulated into `grads`;
    /// gradients of tracked input leaves are returned.
    pub fn backward(&self, output: NodeId, seed: Tensor<R>, grads: &mut Grads<R>) -> NodeGrads<R> {
        assert_eq!(seed.shape(), self.value(output).shape(), "seed shape mismatch");
        let mut ng: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        ng[output.0] = Some(seed);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                ng[i] = None;
                continue;
            }
            let Some(g) = ng[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {
                    ng[i] = Some(g);
                }
                Op::Param(pid) => {
                    grads.accumulate(*pid, &g);
                }
                Op::Gather { table, tokens } => {
                    if self.needs_grad(*table) {
                        let tab = self.value(*table);
                        let slot = grad_slot(&mut ng, *table, tab.shape());
                        for (t, &tok) in tokens.iter().enumerate() {
                            let dst = slot.row_mut(tok as usize);
                            for (d, &gv) in g.row(t).iter().enumerate() {
                                dst[d] += gv;
                            }
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    if self.needs_grad(*a) {
                        let vb = self.value(*b);
                        let slot = grad_slot(&mut ng, *a, self.value(*a).shape());
                        matmul_bt_acc(slot, &g, vb);
                    }
                    if self.needs_grad(*b) {
                        let va = self.value(*a);
                        let slot = grad_slot(&mut ng, *b, self.value(*b).shape());
                        matmul_at_acc(slot, va, &g);
                    }
                }
                Op::MatMulBt { a, b } => {
                    if self.needs_grad(*a) {
                        let vb = self.value(*b);
                        let slot = grad_slot(&mut ng, *a, self.value(*a).shape());
                        matmul_acc(slot, &g, vb);
                    }
                    if self.needs_grad(*b) {
                        let va = self.value(*a);
                        let slot = grad_slot(&mut ng, *b, self.value(*b).shape());
                        matmul_at_acc(slot, &g, va);
                    }
                }
                Op::Add { a, b } => {
                    for &p in &[*a, *b] {
                        if self.needs_grad(p) {
                            grad_slot(&mut ng, p, g.shape()).add_assign(&g);
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs_grad(a) {
                        let vb = self.value(b).clone();
                        let slot = grad_slot(&mut ng, a, g.shape());
                        for ((s, &gv), &bv) in slot.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                            *s = gv.mul_add(bv, *s);
                        }
                    }
                    if self.needs_grad(b) {
                        let va = self.value(a).clone();
                        let slot = grad_slot(&mut ng, b, g.shape());
                        for ((s, &gv), &av) in slot.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                            *s = gv.mul_add(av, *s);
                        }
                    }
                }
                Op::Scale { a, c } => {
                    if self.needs_grad(*a) {
                        grad_slot(&mut ng, *a, g.shape()).add_scaled(&g, *c);
                    }
                }
                Op::Gelu { a, tanh } => {
                    if self.needs_grad(*a) {
                        let va = self.value(*a).clone();
                        let tanh = tanh.clone();
                        let slot = grad_slot(&mut ng, *a, g.shape());
                        for (((s, &gv), &xv), &tv) in
                            slot.data_mut().iter_mut().zip(g.data()).zip(va.data()).zip(tanh.data())
                        {
                            *s = gv.mul_add(func::gelu_grad_cached(xv, tv), *s);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    self.layer_norm_backward(*x, *gain, *bias, &g, &mut ng);
                }
                Op::Attention { q, k, v, heads } => {
                    self.attention_backward(*q, *k, *v, *heads, &g, &mut ng);
                }
                Op::Dropout { a, mask } => {
                    if self.needs_grad(*a) {
                        let slot = grad_slot(&mut ng, *a, g.shape());
                        for ((s, &gv), &m) in slot.data_mut().iter_mut().zip(g.data()).zip(mask) {
                            *s = gv.mul_add(m, *s);
                        }
                    }
                }
                Op::Rows { a, start } => {
                    if self.needs_grad(*a) {
                        let shape = self.value(*a).shape();
                        let slot = grad_slot(&mut ng, *a, shape);
                        for r in 0..g.rows() {
                            let dst = slot.row_mut(start + r);
                            for (c, &gv) in g.row(r).iter().enumerate() {
                                dst[c] += gv;
                            }
                        }
                    }
                }
                Op::L2Normalize { a } => {
                    if self.needs_grad(*a) {
                        let va = self.value(*a).clone();
                        let y = self.value(NodeId(i)).clone();
                        let slot = grad_slot(&mut ng, *a, va.shape());
                        for r in 0..va.rows() {
                            let norm = l2_norm(va.row(r));
                            let y_row = y.row(r);
                            let g_row = g.row(r);
                            let dot: R = y_row.iter().zip(g_row).map(|(&a, &b)| a * b).sum();
                            let dst = slot.row_mut(r);
                            for c in 0..dst.len() {
                                dst[c] += (g_row[c] - y_row[c] * dot) / norm;
                            }
                        }
                    }
                }
                Op::SoftmaxRows { a } => {
                    if self.needs_grad(*a) {
                        let y = self.value(NodeId(i)).clone();
                        let slot = grad_slot(&mut ng, *a, y.shape());
                        for r in 0..y.rows() {
                            let y_row = y.row(r);
                            let g_row = g.row(r);
                            let dot: R = y_row.iter().zip(g_row).map(|(&a, &b)| a * b).sum();
                            let dst = slot.row_mut(r);
                            for c in 0..dst.len() {
                                dst[c] += y_row[c] * (g_row[c] - dot);
                            }
                        }
                    }
                }
                Op::SumAll { a } => {
                    if self.needs_grad(*a) {
                        let gv = g.item();
                        let shape = self.value(*a).shape();
                        let slot = grad_slot(&mut ng, *a, shape);
                        for s in slot.data_mut() {
                            *s += gv;
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, targets } => {
                    if self.needs_grad(*logits) {
                        let probs = func::softmax_rows(self.value(*logits));
                        let gv = g.item() / R::from_f64(targets.len() as f64);
                        let slot = grad_slot(&mut ng, *logits, probs.shape());
                        for (r, &t) in targets.iter().enumerate() {
                            let p_row = probs.row(r);
                            let dst = slot.row_mut(r);
                            for c in 0..dst.len() {
                                let indicator = if c == t { R::ONE } else { R::ZERO };
                                dst[c] = (p_row[c] - indicator).mul_add(gv, dst[c]);
                            }
                        }
                    }
                }
                Op::BceWithLogits { logits, labels } => {
                    if self.needs_grad(*logits) {
                        let vl = self.value(*logits).clone();
                        let gv = g.item() / R::from_f64(vl.len() as f64);
                        let slot = grad_slot(&mut ng, *logits, vl.shape());
                        for ((s, &z), &y) in slot.data_mut().iter_mut().zip(vl.data()).zip(labels.data()) {
                            *s = (func::sigmoid(z) - y).mul_add(gv, *s);
                        }
                    }
                }
            }
        }
        NodeGrads { inner: ng }
    }

    fn layer_norm_backward(
        &self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        g: &Tensor<R>,
        ng: &mut Vec<Option<Tensor<R>>>,
    ) {
        let vx = self.value(x).clone();
        let vg = self.value(gain).clone();
        let n = R::from_f64(vx.cols() as f64);

        if self.needs_grad(x) {
            let slot = grad_slot(ng, x, vx.shape());
            for r in 0..vx.rows() {
                let (xhat, sigma) = normalize_row(vx.row(r));
                let g_row = g.row(r);
                let mut mean_dxhat = R::ZERO;
                let mut mean_dxhat_xhat = R::ZERO;
                for c in 0..xhat.len() {
                    let dxhat = g_row[c] * vg.data()[c];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat[c];
                }
                mean_dxhat /= n;
                mean_dxhat_xhat /= n;
                let dst = slot.row_mut(r);
                for c in 0..xhat.len() {
                    let dxhat = g_row[c] * vg.data()[c];
                    dst[c] += (dxhat - mean_dxhat - xhat[c] * mean_dxhat_xhat) / sigma;
                }
            }
        }
        if self.needs_grad(gain) {
            let slot = grad_slot(ng, gain, (1, vx.cols()));
            for r in 0..vx.rows() {
                let (xhat, _) = normalize_row(vx.row(r));
                let g_row = g.row(r);
                let dst = slot.row_mut(0);
                for c in 0..xhat.len() {
                    dst[c] = g_row[c].mul_add(xhat[c], dst[c]);
                }
            }
        }
        if self.needs_grad(bias) {
            let slot = grad_slot(ng, bias, (1, vx.cols()));
            for r in 0..vx.rows() {
                let g_row = g.row(r);
                let dst = slot.row_mut(0);
                for c in 0..g_row.len() {
                    dst[c] += g_row[c];
                }
            }
        }
    }

    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        g: &Tensor<R>,
        ng: &mut Vec<Option<Tensor<R>>>,
    ) {
        let (vq, vk, vv) = (self.value(q).clone(), self.value(k).clone(), self.value(v).clone());
        let seq = vq.rows();
        let d_head = vq.cols() / heads;
        let positions: Vec<usize> = (0..seq).collect();

        let mut dq = Tensor::zeros(seq, vq.cols());
        let mut dk = Tensor::zeros(seq, vq.cols());
        let mut dv = Tensor::zeros(seq, vq.cols());

        for h in 0..heads {
            let qh = func::apply_rotary(&head_slice(&vq, h, d_head), &positions);
            let kh = func::apply_rotary(&head_slice(&vk, h, d_head), &positions);
            let vh = head_slice(&vv, h, d_head);
            let (probs, scale) = func::causal_attention_probs(&qh, &kh);
            let g_h = head_slice(g, h, d_head);

            let mut dvh = Tensor::zeros(seq, d_head);
            matmul_at_acc(&mut dvh, &probs, &g_h);

            let dp = super::tensor::matmul_bt(&g_h, &vh);
            let mut ds = Tensor::zeros(seq, seq);
            for t in 0..seq {
                let p_row = probs.row(t);
                let dp_row = dp.row(t);
                let dot: R = (0..=t).map(|s| p_row[s] * dp_row[s]).sum();
                let ds_row = ds.row_mut(t);
                for s in 0..=t {
                    ds_row[s] = p_row[s] * (dp_row[s] - dot) * scale;
                }
            }

            let mut dqh = Tensor::zeros(seq, d_head);
            matmul_acc(&mut dqh, &ds, &kh);
            let mut dkh = Tensor::zeros(seq, d_head);
            matmul_at_acc(&mut dkh, &ds, &qh);
            func::unapply_rotary(&mut dqh, &positions);
            func::unapply_rotary(&mut dkh, &positions);

            add_head(&mut dq, &dqh, h);
            add_head(&mut dk, &dkh, h);
            add_head(&mut dv, &dvh, h);
        }

        if self.needs_grad(q) {
            grad_slot(ng, q, dq.shape()).add_assign(&dq);
        }
        if self.needs_grad(k) {
            grad_slot(ng, k, dk.shape()).add_assign(&dk);
        }
        if self.needs_grad(v) {
            grad_slot(ng, v, dv.shape()).add_assign(&dv);
        }
    }
}

fn grad_slot<'g, R: Real>(
    ng: &'g mut Vec<Option<Tensor<R>>>,
    id: NodeId,
    shape: (usize, usize),
) -> &'g mut Tensor<R> {
    ng[id.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

fn l2_norm<R: Real>(row: &[R]) -> R {
    row.iter().map(|&x| x * x).sum::<R>().sqrt()
}

fn log_sum_exp<R: Real>(row: &[R]) -> R {
    let max = row.iter().copied().fold(row[0], R::max);
    let sum: R = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// `(xhat, sigma)` for one layer-norm row with population variance.
fn normalize_row<R: Real>(row: &[R]) -> (Vec<R>, R) {
    let n = R::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<R>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<R>() / n;
    let sigma = (var + R::from_f64(LN_EPS)).sqrt();
    (row.iter().map(|&x| (x - mean) / sigma).collect(), sigma)
}

/// Copies head `h` (columns `h*d_head .. (h+1)*d_head`) into a contiguous tensor.
fn head_slice<R: Real>(x: &Tensor<R>, h: usize, d_head: usize) -> Tensor<R> {
    let mut out = Tensor::zeros(x.rows(), d_head);
    for r in 0..x.rows() {
        out.row_mut(r).copy_from_slice(&x.row(r)[h * d_head..(h + 1) * d_head]);
    }
    out
}

fn write_head<R: Real>(dst: &mut Tensor<R>, src: &Tensor<R>, h: usize) {
    let d_head = src.cols();
    for r in 0..src.rows() {
        dst.row_mut(r)[h * d_head..(h + 1) * d_head].copy_from_slice(src.row(r));
    }
}

fn add_head<R: Real>(dst: &mut Tensor<R>, src: &Tensor<R>, h: usize) {
    let d_head = src.cols();
    for r in 0..src.rows() {
        let dst_row = &mut dst.row_mut(r)[h * d_head..(h + 1) * d_head];
        for (d, &s) in dst_row.iter_mut().zip(src.row(r)) {
            *d += s;
        }
    }
}
