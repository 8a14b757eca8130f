//! Define-by-run computation tape with reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass, which keeps
//! variable-length question/object inputs trivial: nodes are appended in
//! evaluation order, so inputs always have smaller ids than their
//! consumers and [`Tape::backward`] can walk the node list once in
//! reverse.

use super::{matmul_values, ParamStore, Tensor};
use crate::{Error, Result, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Probability floor for the cross-entropy clamp away from log(0).
const CE_CLAMP: Scalar = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Dot(usize, usize),
    Scale(usize, Scalar),
    Sigmoid(usize),
    Tanh(usize),
    Transpose(usize),
    ConcatLast(usize, usize),
    ConcatRows(usize, usize),
    SoftmaxRows {
        input: usize,
        mask: Option<Vec<bool>>,
    },
    WeightedSum {
        weights: usize,
        rows: usize,
    },
    GatherRows {
        table: usize,
        indices: Vec<usize>,
    },
    SelectRow {
        input: usize,
        row: usize,
    },
    StackRows(Vec<usize>),
    SoftmaxCrossEntropy {
        logits: usize,
        label: usize,
        probs: Tensor,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Dot(..) => "dot",
            Op::Scale(..) => "scale",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Transpose(..) => "transpose",
            Op::ConcatLast(..) => "concat_last",
            Op::ConcatRows(..) => "concat_rows",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::GatherRows { .. } => "gather_rows",
            Op::SelectRow { .. } => "select_row",
            Op::StackRows(..) => "stack_rows",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    /// Set when this leaf mirrors a [`ParamStore`] entry.
    param: Option<String>,
}

/// Gradients of one backward pass, indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Zero tensor if the loss
    /// does not depend on `v`.
    pub fn get(&self, tape: &Tape, v: Var) -> Tensor {
        match &self.by_node[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }
}

/// Append-only computation graph. Inputs of a node always have smaller
/// ids, so the graph is acyclic by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite value from {}", op.name());
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant or input leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: Scalar) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    /// A leaf bound to a parameter; `backward_into` accumulates its
    /// gradient into the store entry of the same name.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_values(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a.0, b.0)))
    }

    /// Inner product of two equally sized vectors, as a scalar tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_vector() || !tb.is_vector() || ta.len() != tb.len() {
            return Err(Error::dimension(
                "dot",
                format!("incompatible shapes {:?} and {:?}", ta.shape(), tb.shape()),
            ));
        }
        let v: Scalar = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(v), Op::Dot(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, c: Scalar) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v *= c;
        }
        self.push(out, Op::Scale(a.0, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = sigmoid(*v);
        }
        self.push(out, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = v.tanh();
        }
        self.push(out, Op::Tanh(a.0))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.is_matrix() {
            return Err(Error::dimension(
                "transpose",
                format!("expected a matrix, got {:?}", t.shape()),
            ));
        }
        let out = t.transposed();
        Ok(self.push(out, Op::Transpose(a.0)))
    }

    /// Concatenate along the last axis. All extents except the last must
    /// agree; the output's last extent is the sum of the inputs'.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != tb.rank() || ta.rank() > 2 {
            return Err(Error::dimension(
                "concat_last",
                format!("ranks differ: {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out = if ta.is_vector() {
            let mut data = ta.data().to_vec();
            data.extend_from_slice(tb.data());
            Tensor::vector(data)
        } else {
            if ta.shape()[0] != tb.shape()[0] {
                return Err(Error::dimension(
                    "concat_last",
                    format!(
                        "leading extents differ: {:?} vs {:?}",
                        ta.shape(),
                        tb.shape()
                    ),
                ));
            }
            let rows = ta.shape()[0];
            let (ca, cb) = (ta.cols(), tb.cols());
            let mut data = Vec::with_capacity(rows * (ca + cb));
            for i in 0..rows {
                data.extend_from_slice(ta.row(i));
                data.extend_from_slice(tb.row(i));
            }
            Tensor::from_vec(&[rows, ca + cb], data)?
        };
        Ok(self.push(out, Op::ConcatLast(a.0, b.0)))
    }

    /// Concatenate two matrices along the row axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.cols() {
            return Err(Error::dimension(
                "concat_rows",
                format!("incompatible shapes {:?} and {:?}", ta.shape(), tb.shape()),
            ));
        }
        let rows = ta.shape()[0] + tb.shape()[0];
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let out = Tensor::from_vec(&[rows, ta.cols()], data)?;
        Ok(self.push(out, Op::ConcatRows(a.0, b.0)))
    }

    /// Row-wise softmax, numerically stabilized by max-subtraction.
    ///
    /// A rank-1 input is treated as a single row. `mask` marks valid
    /// columns; masked entries come out exactly 0. A fully masked row is
    /// a degenerate-attention error.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(Error::dimension(
                    "softmax_rows",
                    format!("mask length {} vs {} columns", m.len(), cols),
                ));
            }
        }
        let rows = t.rows();
        let mut out = t.clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            softmax_in_place(row, mask).map_err(|_| Error::DegenerateAttention { row: r })?;
        }
        Ok(self.push(
            out,
            Op::SoftmaxRows {
                input: a.0,
                mask: mask.map(|m| m.to_vec()),
            },
        ))
    }

    /// `sum_k weights[k] * rows[k, :]`.
    pub fn weighted_sum(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let (tw, tr) = (self.value(weights), self.value(rows));
        if !tw.is_vector() || !tr.is_matrix() || tw.len() != tr.shape()[0] {
            return Err(Error::dimension(
                "weighted_sum",
                format!(
                    "weights {:?} do not match rows {:?}",
                    tw.shape(),
                    tr.shape()
                ),
            ));
        }
        let d = tr.cols();
        let mut out = vec![0.0; d];
        for (k, &w) in tw.data().iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, &x) in out.iter_mut().zip(tr.row(k)) {
                *o += w * x;
            }
        }
        Ok(self.push(
            Tensor::vector(out),
            Op::WeightedSum {
                weights: weights.0,
                rows: rows.0,
            },
        ))
    }

    /// Collect rows of `table` at `indices` into a new matrix.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if !t.is_matrix() {
            return Err(Error::dimension(
                "gather_rows",
                format!("expected a matrix, got {:?}", t.shape()),
            ));
        }
        let rows = t.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_vec(&[indices.len(), cols], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table: table.0,
                indices: indices.to_vec(),
            },
        ))
    }

    /// One row of a matrix as a vector.
    pub fn select_row(&mut self, input: Var, row: usize) -> Result<Var> {
        let t = self.value(input);
        if !t.is_matrix() || row >= t.shape()[0] {
            return Err(Error::dimension(
                "select_row",
                format!("row {row} of {:?}", t.shape()),
            ));
        }
        let out = Tensor::vector(t.row(row).to_vec());
        Ok(self.push(
            out,
            Op::SelectRow {
                input: input.0,
                row,
            },
        ))
    }

    /// Stack equally sized vectors as matrix rows.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Contract("stack_rows needs at least one row".into()));
        }
        let cols = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let t = self.value(r);
            if !t.is_vector() || t.len() != cols {
                return Err(Error::dimension(
                    "stack_rows",
                    format!("expected vectors of length {cols}, got {:?}", t.shape()),
                ));
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(&[rows.len(), cols], data)?;
        Ok(self.push(out, Op::StackRows(rows.iter().map(|v| v.0).collect())))
    }

    /// Fused softmax + negative log-likelihood of `label`, clamped away
    /// from log(0). Gradient w.r.t. the logits is `probs - onehot(label)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = self.value(logits);
        if !t.is_vector() {
            return Err(Error::dimension(
                "softmax_cross_entropy",
                format!("logits must be a vector, got {:?}", t.shape()),
            ));
        }
        if label >= t.len() {
            return Err(Error::Data(format!(
                "label {label} out of range for {} answers",
                t.len()
            )));
        }
        let mut probs = t.clone();
        softmax_in_place(probs.data_mut(), None)
            .map_err(|_| Error::DegenerateAttention { row: 0 })?;
        let loss = -(probs.data()[label].max(CE_CLAMP)).ln();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                label,
                probs,
            },
        ))
    }

    /// Softmax probabilities saved by a `softmax_cross_entropy` node.
    pub fn saved_probs(&self, loss: Var) -> Option<&Tensor> {
        match &self.nodes[loss.0].op {
            Op::SoftmaxCrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse pass from a scalar loss node. Visits nodes in strictly
    /// decreasing id order; the result is deterministic for a fixed tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(go) = grads[id].take() else {
                continue;
            };
            if !go.all_finite() {
                return Err(Error::Numeric {
                    op: self.nodes[id].op.name().into(),
                });
            }
            self.backprop_node(id, &go, &mut grads)?;
            grads[id] = Some(go);
        }
        Ok(Gradients { by_node: grads })
    }

    /// Run backward and accumulate parameter-leaf gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(g)) = (&node.param, &grads.by_node[id]) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(grads)
    }

    fn backprop_node(
        &self,
        id: usize,
        go: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                if tb.is_vector() {
                    // out[m] = A[m x k] b[k]
                    let ga = accum(grads, *a, ta.shape());
                    for i in 0..m {
                        let g = go.data()[i];
                        if g == 0.0 {
                            continue;
                        }
                        for (gaij, &bj) in
                            ga.row_mut(i).iter_mut().zip(tb.data())
                        {
                            *gaij += g * bj;
                        }
                    }
                    let gb = accum(grads, *b, tb.shape());
                    for i in 0..m {
                        let g = go.data()[i];
                        if g == 0.0 {
                            continue;
                        }
                        for (gbj, &aij) in gb.data_mut().iter_mut().zip(ta.row(i)) {
                            *gbj += g * aij;
                        }
                    }
                } else {
                    let n = tb.shape()[1];
                    // ga += go . b^T ; gb += a^T . go
                    let ga = accum(grads, *a, ta.shape());
                    for i in 0..m {
                        let gorow = &go.data()[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = tb.row(p);
                            let mut acc = 0.0;
                            for (g, bv) in gorow.iter().zip(brow) {
                                acc += g * bv;
                            }
                            ga.row_mut(i)[p] += acc;
                        }
                    }
                    let gb = accum(grads, *b, tb.shape());
                    for i in 0..m {
                        let arow = ta.row(i);
                        let gorow = &go.data()[i * n..(i + 1) * n];
                        for (p, &av) in arow.iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            for (gbv, &g) in gb.row_mut(p).iter_mut().zip(gorow) {
                                *gbv += av * g;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let sb = self.nodes[*b].value.shape().to_vec();
                add_broadcast_grad(grads, *a, &sa, go);
                add_broadcast_grad(grads, *b, &sb, go);
            }
            Op::Sub(a, b) => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let sb = self.nodes[*b].value.shape().to_vec();
                add_broadcast_grad(grads, *a, &sa, go);
                let mut neg = go.clone();
                for v in neg.data_mut() {
                    *v = -*v;
                }
                add_broadcast_grad(grads, *b, &sb, &neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let ga_contrib = mul_grad(go, tb, ta.shape());
                add_into(grads, *a, &ga_contrib);
                let gb_contrib = mul_grad(go, ta, tb.shape());
                add_into(grads, *b, &gb_contrib);
            }
            Op::Dot(a, b) => {
                let g = go.item();
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let mut ga = tb.clone();
                for v in ga.data_mut() {
                    *v *= g;
                }
                add_into(grads, *a, &ga);
                let mut gb = ta.clone();
                for v in gb.data_mut() {
                    *v *= g;
                }
                add_into(grads, *b, &gb);
            }
            Op::Scale(a, c) => {
                let mut g = go.clone();
                for v in g.data_mut() {
                    *v *= c;
                }
                add_into(grads, *a, &g);
            }
            Op::Sigmoid(a) => {
                let mut g = go.clone();
                for (gv, &s) in g.data_mut().iter_mut().zip(out.data()) {
                    *gv *= s * (1.0 - s);
                }
                add_into(grads, *a, &g);
            }
            Op::Tanh(a) => {
                let mut g = go.clone();
                for (gv, &t) in g.data_mut().iter_mut().zip(out.data()) {
                    *gv *= 1.0 - t * t;
                }
                add_into(grads, *a, &g);
            }
            Op::Transpose(a) => {
                add_into(grads, *a, &go.transposed());
            }
            Op::ConcatLast(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (ca, cb) = (ta.cols(), tb.cols());
                let rows = ta.rows();
                let mut ga = Tensor::zeros(ta.shape());
                let mut gb = Tensor::zeros(tb.shape());
                for r in 0..rows {
                    let gorow = &go.data()[r * (ca + cb)..(r + 1) * (ca + cb)];
                    ga.data_mut()[r * ca..(r + 1) * ca].copy_from_slice(&gorow[..ca]);
                    gb.data_mut()[r * cb..(r + 1) * cb].copy_from_slice(&gorow[ca..]);
                }
                add_into(grads, *a, &ga);
                add_into(grads, *b, &gb);
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[*a].value.len();
                let ga = Tensor::from_vec(
                    self.nodes[*a].value.shape(),
                    go.data()[..na].to_vec(),
                )
                .expect("split matches input shape");
                let gb = Tensor::from_vec(
                    self.nodes[*b].value.shape(),
                    go.data()[na..].to_vec(),
                )
                .expect("split matches input shape");
                add_into(grads, *a, &ga);
                add_into(grads, *b, &gb);
            }
            Op::SoftmaxRows { input, mask } => {
                let cols = out.cols();
                let mut g = Tensor::zeros(out.shape());
                for r in 0..out.rows() {
                    let s = &out.data()[r * cols..(r + 1) * cols];
                    let gorow = &go.data()[r * cols..(r + 1) * cols];
                    let mut dot = 0.0;
                    for j in 0..cols {
                        if mask.as_ref().map_or(true, |m| m[j]) {
                            dot += gorow[j] * s[j];
                        }
                    }
                    let grow = &mut g.data_mut()[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        if mask.as_ref().map_or(true, |m| m[j]) {
                            grow[j] = s[j] * (gorow[j] - dot);
                        }
                    }
                }
                add_into(grads, *input, &g);
            }
            Op::WeightedSum { weights, rows } => {
                let (tw, tr) = (&self.nodes[*weights].value, &self.nodes[*rows].value);
                let gw = accum(grads, *weights, tw.shape());
                for k in 0..tw.len() {
                    let mut acc = 0.0;
                    for (g, &x) in go.data().iter().zip(tr.row(k)) {
                        acc += g * x;
                    }
                    gw.data_mut()[k] += acc;
                }
                let gr = accum(grads, *rows, tr.shape());
                for (k, &w) in tw.data().iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for (gv, &g) in gr.row_mut(k).iter_mut().zip(go.data()) {
                        *gv += w * g;
                    }
                }
            }
            Op::GatherRows { table, indices } => {
                let tt = &self.nodes[*table].value;
                let gt = accum(grads, *table, tt.shape());
                let cols = tt.cols();
                for (u, &i) in indices.iter().enumerate() {
                    let gorow = &go.data()[u * cols..(u + 1) * cols];
                    for (gv, &g) in gt.row_mut(i).iter_mut().zip(gorow) {
                        *gv += g;
                    }
                }
            }
            Op::SelectRow { input, row } => {
                let ti = &self.nodes[*input].value;
                let gi = accum(grads, *input, ti.shape());
                for (gv, &g) in gi.row_mut(*row).iter_mut().zip(go.data()) {
                    *gv += g;
                }
            }
            Op::StackRows(rows) => {
                let cols = out.cols();
                for (k, &r) in rows.iter().enumerate() {
                    let slice = Tensor::vector(go.data()[k * cols..(k + 1) * cols].to_vec());
                    add_into(grads, r, &slice);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            } => {
                let g = go.item();
                let tl = &self.nodes[*logits].value;
                let gl = accum(grads, *logits, tl.shape());
                for (j, gv) in gl.data_mut().iter_mut().enumerate() {
                    let onehot = if j == *label { 1.0 } else { 0.0 };
                    *gv += g * (probs.data()[j] - onehot);
                }
            }
        }
        Ok(())
    }
}

fn sigmoid(x: Scalar) -> Scalar {
    1.0 / (1.0 + (-x).exp())
}

/// Stable in-place softmax over one row. `Err(())` when every entry is
/// masked out.
fn softmax_in_place(row: &mut [Scalar], mask: Option<&[bool]>) -> std::result::Result<(), ()> {
    let valid = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = Scalar::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if valid(j) && v > max {
            max = v;
        }
    }
    if !max.is_finite() {
        return Err(());
    }
    let mut sum = 0.0;
    for j in 0..row.len() {
        if valid(j) {
            row[j] = (row[j] - max).exp();
            sum += row[j];
        } else {
            row[j] = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Pointwise binary with limited broadcasting: equal shapes, a scalar
/// right operand, or a vector right operand broadcast across matrix rows.
fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    op: &str,
    f: impl Fn(Scalar, Scalar) -> Scalar,
) -> Result<Tensor> {
    let mut out = a.clone();
    if a.shape() == b.shape() {
        for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
            *o = f(*o, bv);
        }
    } else if b.is_scalar() {
        let bv = b.item();
        for o in out.data_mut() {
            *o = f(*o, bv);
        }
    } else if a.is_matrix() && b.is_vector() && b.len() == a.cols() {
        let cols = a.cols();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o = f(*o, b.data()[i % cols]);
        }
    } else {
        return Err(Error::dimension(
            op,
            format!("incompatible shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(out)
}

/// Gradient of `a (*) b` w.r.t. the operand of shape `target`, where the
/// other operand is `other` and `go` has the output (= broadcast) shape.
fn mul_grad(go: &Tensor, other: &Tensor, target: &[usize]) -> Tensor {
    let out_shape = go.shape();
    // go * other, elementwise with `other` broadcast up to the output shape.
    let mut full = go.clone();
    if other.shape() == out_shape {
        for (v, &o) in full.data_mut().iter_mut().zip(other.data()) {
            *v *= o;
        }
    } else if other.is_scalar() {
        let o = other.item();
        for v in full.data_mut() {
            *v *= o;
        }
    } else {
        // other is a vector broadcast across rows of the output
        let cols = full.cols();
        for (i, v) in full.data_mut().iter_mut().enumerate() {
            *v *= other.data()[i % cols];
        }
    }
    reduce_to_shape(&full, target)
}

/// Sum `g` down to `shape` (inverse of the broadcasts above).
fn reduce_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape);
    if out.is_scalar() {
        out.data_mut()[0] = g.data().iter().sum();
    } else {
        // vector broadcast across rows
        let cols = out.len();
        for (i, &v) in g.data().iter().enumerate() {
            out.data_mut()[i % cols] += v;
        }
    }
    out
}

fn add_broadcast_grad(grads: &mut [Option<Tensor>], id: usize, shape: &[usize], go: &Tensor) {
    let reduced = reduce_to_shape(go, shape);
    add_into(grads, id, &reduced);
}

fn add_into(grads: &mut [Option<Tensor>], id: usize, g: &Tensor) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => grads[id] = Some(g.clone()),
    }
}

fn accum<'g>(grads: &'g mut [Option<Tensor>], id: usize, shape: &[usize]) -> &'g mut Tensor {
    if grads[id].is_none() {
        grads[id] = Some(Tensor::zeros(shape));
    }
    grads[id].as_mut().expect("just initialized")
}
