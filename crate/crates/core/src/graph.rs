//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape of tensor nodes. Operations append nodes whose
//! inputs always have smaller ids, so reverse iteration is a topological
//! backward sweep. Parameters enter the graph as named leaves; after
//! [`Graph::backward`] their gradients can be read back and accumulated
//! into the owning [`Parameter`]s.
//!
//! The op set is exactly what the importance-scoring model needs: matmul,
//! broadcast add/mul, activations, masked softmax, layer norm, dropout,
//! row gather/concat/slice, and mean reductions.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;
use crate::SeedRng;
use rand::Rng;

/// Additive penalty that disables a logit before softmax. Large enough that
/// `exp` underflows to exactly zero in both f32 and f64.
pub const MASK_PENALTY: f64 = 1e9;

/// A named, trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.dims());
        Parameter {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor<T>) -> Self {
        let mut p = Self::new(name, value);
        p.trainable = false;
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Binary attention mask over a square token grid. `true` means "may attend".
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    n: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                bits[i * n + j] = f(i, j);
            }
        }
        Mask { n, bits }
    }

    pub fn full(n: usize) -> Self {
        Mask {
            n,
            bits: vec![true; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        Mask::from_fn(n, |i, j| i == j)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn row_sum(&self, i: usize) -> usize {
        self.bits[i * self.n..(i + 1) * self.n]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.allowed(i, j) == self.allowed(j, i)))
    }

    /// Every row must allow at least one position (softmax is undefined
    /// otherwise) and every token must see itself.
    pub fn validate_for_attention(&self) -> Result<()> {
        for i in 0..self.n {
            if self.row_sum(i) == 0 {
                return Err(Error::EmptyMaskRow { row: i });
            }
            if !self.allowed(i, i) {
                return Err(Error::invalid(format!(
                    "attention mask diagonal must be 1, row {i} does not see itself"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    /// `(L x D) + (1 x D)` broadcast over rows.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `(L x D) * (L x 1)` broadcast over columns.
    MulCol(NodeId, NodeId),
    /// `a * x + b` elementwise with constants.
    Affine(NodeId, T, T),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Ln(NodeId),
    Clamp(NodeId, T, T),
    SoftmaxRows(NodeId),
    /// Adds `-MASK_PENALTY` to every disallowed logit (identity gradient).
    MaskPenalty(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        inv_std: Vec<T>,
        normalized: Tensor<T>,
    },
    MeanRows(NodeId),
    MeanAll(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Arc<Vec<usize>>),
    /// Mask holds 0 or 1/(1-rate); forward and backward multiply by it.
    Dropout(NodeId, Tensor<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of tensor operations. Build it forward, then call [`backward`] on a
/// scalar node.
///
/// [`backward`]: Graph::backward
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    param_nodes: HashMap<String, NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter leaf, cached by name so every use within one graph shares
    /// a single node (and therefore a single accumulated gradient).
    pub fn param(&mut self, p: &Parameter<T>) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&p.name) {
            return id;
        }
        let id = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.param_nodes.insert(p.name.clone(), id);
        id
    }

    /// Gradient of a named parameter leaf after `backward`.
    pub fn param_grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.param_nodes.get(name).and_then(|id| self.grad(*id))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), needs))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::shape(
                "add_row",
                format!("1 x {}", xv.cols()),
                format!("{:?}", rv.dims()),
            ));
        }
        let cols = xv.cols();
        let mut data = Vec::with_capacity(xv.numel());
        for i in 0..xv.rows() {
            for j in 0..cols {
                data.push(xv.at(i, j) + rv.data()[j]);
            }
        }
        let v = Tensor::from_vec(&[xv.rows(), cols], data)?;
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(v, Op::AddRow(x, row), needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), needs))
    }

    pub fn mul_col(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        let (xv, cv) = (self.value(x), self.value(col));
        if cv.cols() != 1 || cv.rows() != xv.rows() {
            return Err(Error::shape(
                "mul_col",
                format!("{} x 1", xv.rows()),
                format!("{:?}", cv.dims()),
            ));
        }
        let cols = xv.cols();
        let mut data = Vec::with_capacity(xv.numel());
        for i in 0..xv.rows() {
            let c = cv.data()[i];
            for j in 0..cols {
                data.push(xv.at(i, j) * c);
            }
        }
        let v = Tensor::from_vec(&[xv.rows(), cols], data)?;
        let needs = self.needs(x) || self.needs(col);
        Ok(self.push(v, Op::MulCol(x, col), needs))
    }

    pub fn affine(&mut self, x: NodeId, scale: T, shift: T) -> NodeId {
        let v = self.value(x).map(|e| scale * e + shift);
        let needs = self.needs(x);
        self.push(v, Op::Affine(x, scale, shift), needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).transpose();
        let needs = self.needs(x);
        self.push(v, Op::Transpose(x), needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| e.tanh());
        let needs = self.needs(x);
        self.push(v, Op::Tanh(x), needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let one = T::one();
        let v = self.value(x).map(|e| one / (one + (-e).exp()));
        let needs = self.needs(x);
        self.push(v, Op::Sigmoid(x), needs)
    }

    /// tanh-form GELU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu_fwd);
        let needs = self.needs(x);
        self.push(v, Op::Gelu(x), needs)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| e.ln());
        let needs = self.needs(x);
        self.push(v, Op::Ln(x), needs)
    }

    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> NodeId {
        let v = self.value(x).map(|e| e.max(lo).min(hi));
        let needs = self.needs(x);
        self.push(v, Op::Clamp(x, lo, hi), needs)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(xv.numel());
        for i in 0..rows {
            let row = xv.row(i);
            let mut mx = row[0];
            for &e in row {
                if e > mx {
                    mx = e;
                }
            }
            let mut sum = T::zero();
            let mut exps = Vec::with_capacity(cols);
            for &e in row {
                let w = (e - mx).exp();
                sum += w;
                exps.push(w);
            }
            for w in exps {
                data.push(w / sum);
            }
        }
        let v = Tensor::from_vec(&[rows, cols], data).unwrap();
        let needs = self.needs(x);
        self.push(v, Op::SoftmaxRows(x), needs)
    }

    /// Converts a binary mask into additive form on attention logits:
    /// disallowed entries get `-1e9`, which underflows to an exactly zero
    /// softmax weight.
    pub fn mask_penalty(&mut self, logits: NodeId, mask: &Arc<Mask>) -> Result<NodeId> {
        let lv = self.value(logits);
        let n = mask.size();
        if lv.rows() != n || lv.cols() != n {
            return Err(Error::shape(
                "mask_penalty",
                format!("{n} x {n}"),
                format!("{:?}", lv.dims()),
            ));
        }
        let penalty = sc::<T>(MASK_PENALTY);
        let mut data = Vec::with_capacity(lv.numel());
        for i in 0..n {
            for j in 0..n {
                let e = lv.at(i, j);
                data.push(if mask.allowed(i, j) { e } else { e - penalty });
            }
        }
        let v = Tensor::from_vec(&[n, n], data)?;
        let needs = self.needs(logits);
        Ok(self.push(v, Op::MaskPenalty(logits), needs))
    }

    /// Per-row normalization to zero mean and unit (population) variance,
    /// then elementwise `gain * x + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let cols = xv.cols();
        if gv.numel() != cols || bv.numel() != cols {
            return Err(Error::shape(
                "layer_norm",
                format!("gain/bias of length {cols}"),
                format!("{} / {}", gv.numel(), bv.numel()),
            ));
        }
        let rows = xv.rows();
        let inv_d = T::one() / sc::<T>(cols as f64);
        let mut normalized = Tensor::zeros(&[rows, cols]);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = xv.row(i);
            let mut mean = T::zero();
            for &e in row {
                mean += e;
            }
            mean *= inv_d;
            let mut var = T::zero();
            for &e in row {
                let d = e - mean;
                var += d * d;
            }
            var *= inv_d;
            let istd = T::one() / (var + eps).sqrt();
            inv_std.push(istd);
            for j in 0..cols {
                let nrm = (row[j] - mean) * istd;
                normalized.data_mut()[i * cols + j] = nrm;
                out.push(gv.data()[j] * nrm + bv.data()[j]);
            }
        }
        let v = Tensor::from_vec(&[rows, cols], out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                normalized,
            },
            needs,
        ))
    }

    /// `(L x D) -> (1 x D)` column means.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let inv = T::one() / sc::<T>(rows as f64);
        let mut data = vec![T::zero(); cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j] += xv.at(i, j);
            }
        }
        for d in data.iter_mut() {
            *d *= inv;
        }
        let v = Tensor::from_vec(&[1, cols], data).unwrap();
        let needs = self.needs(x);
        self.push(v, Op::MeanRows(x), needs)
    }

    /// Mean over every entry, producing a scalar node.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let inv = T::one() / sc::<T>(xv.numel() as f64);
        let mut sum = T::zero();
        for &e in xv.data() {
            sum += e;
        }
        let v = Tensor::scalar(sum * inv);
        let needs = self.needs(x);
        self.push(v, Op::MeanAll(x), needs)
    }

    /// Stack inputs vertically; all must share a column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows: no inputs"));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut needs = false;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{cols} cols"),
                    format!("{:?}", pv.dims()),
                ));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
            needs |= self.needs(p);
        }
        let v = Tensor::from_vec(&[rows, cols], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Stack inputs horizontally; all must share a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols: no inputs"));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        let mut needs = false;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("{rows} rows"),
                    format!("{:?}", pv.dims()),
                ));
            }
            cols += pv.cols();
            needs |= self.needs(p);
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::from_vec(&[rows, cols], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if start + len > xv.rows() || len == 0 {
            return Err(Error::invalid(format!(
                "slice_rows [{start}, {}) out of {} rows",
                start + len,
                xv.rows()
            )));
        }
        let cols = xv.cols();
        let data = xv.data()[start * cols..(start + len) * cols].to_vec();
        let v = Tensor::from_vec(&[len, cols], data)?;
        let needs = self.needs(x);
        Ok(self.push(v, Op::SliceRows(x, start, len), needs))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if start + len > xv.cols() || len == 0 {
            return Err(Error::invalid(format!(
                "slice_cols [{start}, {}) out of {} cols",
                start + len,
                xv.cols()
            )));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            let row = xv.row(i);
            data.extend_from_slice(&row[start..start + len]);
        }
        let v = Tensor::from_vec(&[rows, len], data)?;
        let needs = self.needs(x);
        Ok(self.push(v, Op::SliceCols(x, start, len), needs))
    }

    /// Pick rows of `x` by index, with repetition allowed. Gradients
    /// accumulate back into the source rows.
    pub fn gather_rows(&mut self, x: NodeId, indices: Arc<Vec<usize>>) -> Result<NodeId> {
        let xv = self.value(x);
        if indices.is_empty() {
            return Err(Error::invalid("gather_rows: empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::invalid(format!(
                "gather_rows index {bad} out of {} rows",
                xv.rows()
            )));
        }
        let cols = xv.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices.iter() {
            data.extend_from_slice(xv.row(i));
        }
        let v = Tensor::from_vec(&[indices.len(), cols], data)?;
        let needs = self.needs(x);
        Ok(self.push(v, Op::GatherRows(x, indices), needs))
    }

    /// Inverted dropout: in train mode each entry survives with probability
    /// `1 - rate` and is scaled by `1/(1 - rate)`; in inference mode this is
    /// the identity.
    pub fn dropout(
        &mut self,
        x: NodeId,
        rate: f64,
        train: bool,
        rng: &mut SeedRng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = sc::<T>(1.0 / keep);
        let xv = self.value(x);
        let mut mask = Tensor::zeros(xv.dims());
        for m in mask.data_mut().iter_mut() {
            if rng.gen::<f64>() >= rate {
                *m = scale;
            }
        }
        let v = xv.zip_map(&mask, |a, m| a * m)?;
        let needs = self.needs(x);
        Ok(self.push(v, Op::Dropout(x, mask), needs))
    }

    fn check_topological(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let ok = match &node.op {
                Op::Leaf => true,
                Op::Add(a, b)
                | Op::AddRow(a, b)
                | Op::Mul(a, b)
                | Op::MulCol(a, b)
                | Op::MatMul(a, b) => a.0 < i && b.0 < i,
                Op::Affine(a, _, _)
                | Op::Transpose(a)
                | Op::Tanh(a)
                | Op::Sigmoid(a)
                | Op::Gelu(a)
                | Op::Ln(a)
                | Op::Clamp(a, _, _)
                | Op::SoftmaxRows(a)
                | Op::MaskPenalty(a)
                | Op::MeanRows(a)
                | Op::MeanAll(a)
                | Op::SliceRows(a, _, _)
                | Op::SliceCols(a, _, _)
                | Op::GatherRows(a, _)
                | Op::Dropout(a, _) => a.0 < i,
                Op::LayerNorm { x, gain, bias, .. } => x.0 < i && gain.0 < i && bias.0 < i,
                Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.iter().all(|p| p.0 < i),
            };
            if !ok {
                return Err(Error::GraphCycle { node: i });
            }
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar `loss` node. Gradients stay inside
    /// the graph; use [`Graph::param_grad`] or
    /// [`Graph::accumulate_param_grads`] to read them out. Calling this on
    /// several graphs and accumulating into the same parameters adds up, as
    /// does calling it twice on one graph via fresh graphs; gradients are
    /// only cleared by [`Parameter::zero_grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let loss_dims = self.value(loss).dims().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss { dims: loss_dims });
        }
        self.check_topological()?;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::from_vec(&loss_dims, vec![T::one()]).unwrap());

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.backprop_node(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate_owned(&mut self, id: NodeId, delta: Tensor<T>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => g.add_scaled(&delta, T::one()),
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor<T>) -> Result<()> {
        // Ops reading input/output values clone small aux data up front to
        // satisfy the borrow checker; bulk tensors are built directly.
        enum Owned<T> {
            None,
            One(NodeId, Tensor<T>),
            Two(NodeId, Tensor<T>, NodeId, Tensor<T>),
            Three(NodeId, Tensor<T>, NodeId, Tensor<T>, NodeId, Tensor<T>),
        }
        let out = match &self.nodes[i].op {
            Op::Leaf => Owned::None,
            Op::Add(a, b) => Owned::Two(*a, g.clone(), *b, g.clone()),
            Op::AddRow(x, row) => {
                let cols = g.cols();
                let mut rb = vec![T::zero(); cols];
                for r in 0..g.rows() {
                    for j in 0..cols {
                        rb[j] += g.at(r, j);
                    }
                }
                let rdims = self.nodes[row.0].value.dims().to_vec();
                Owned::Two(*x, g.clone(), *row, Tensor::from_vec(&rdims, rb)?)
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(&self.nodes[b.0].value, |gg, bb| gg * bb)?;
                let db = g.zip_map(&self.nodes[a.0].value, |gg, aa| gg * aa)?;
                Owned::Two(*a, da, *b, db)
            }
            Op::MulCol(x, col) => {
                let xv = &self.nodes[x.0].value;
                let cv = &self.nodes[col.0].value;
                let (rows, cols) = (xv.rows(), xv.cols());
                let mut dx = Tensor::zeros(xv.dims());
                let mut dc = vec![T::zero(); rows];
                for r in 0..rows {
                    let c = cv.data()[r];
                    for j in 0..cols {
                        let gg = g.at(r, j);
                        dx.data_mut()[r * cols + j] = gg * c;
                        dc[r] += gg * xv.at(r, j);
                    }
                }
                let cdims = cv.dims().to_vec();
                Owned::Two(*x, dx, *col, Tensor::from_vec(&cdims, dc)?)
            }
            Op::Affine(x, scale, _) => {
                let s = *scale;
                Owned::One(*x, g.map(|e| e * s))
            }
            Op::MatMul(a, b) => {
                let da = g.matmul(&self.nodes[b.0].value.transpose())?;
                let db = self.nodes[a.0].value.transpose().matmul(g)?;
                Owned::Two(*a, da, *b, db)
            }
            Op::Transpose(x) => Owned::One(*x, g.transpose()),
            Op::Tanh(x) => {
                let y = &self.nodes[i].value;
                Owned::One(*x, g.zip_map(y, |gg, yy| gg * (T::one() - yy * yy))?)
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                Owned::One(*x, g.zip_map(y, |gg, yy| gg * yy * (T::one() - yy))?)
            }
            Op::Gelu(x) => {
                let xv = &self.nodes[x.0].value;
                Owned::One(*x, g.zip_map(xv, |gg, xx| gg * gelu_bwd(xx))?)
            }
            Op::Ln(x) => {
                let xv = &self.nodes[x.0].value;
                Owned::One(*x, g.zip_map(xv, |gg, xx| gg / xx)?)
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let xv = &self.nodes[x.0].value;
                Owned::One(
                    *x,
                    g.zip_map(xv, |gg, xx| if xx > lo && xx < hi { gg } else { T::zero() })?,
                )
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[i].value;
                let (rows, cols) = (y.rows(), y.cols());
                let mut dx = Tensor::zeros(y.dims());
                for r in 0..rows {
                    let mut dot = T::zero();
                    for j in 0..cols {
                        dot += g.at(r, j) * y.at(r, j);
                    }
                    for j in 0..cols {
                        dx.data_mut()[r * cols + j] = y.at(r, j) * (g.at(r, j) - dot);
                    }
                }
                Owned::One(*x, dx)
            }
            Op::MaskPenalty(x) => Owned::One(*x, g.clone()),
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                normalized,
            } => {
                let gv = &self.nodes[gain.0].value;
                let (rows, cols) = (normalized.rows(), normalized.cols());
                let inv_d = T::one() / sc::<T>(cols as f64);
                let mut dx = Tensor::zeros(normalized.dims());
                let mut dgain = vec![T::zero(); cols];
                let mut dbias = vec![T::zero(); cols];
                for r in 0..rows {
                    let istd = inv_std[r];
                    let mut mean_dyh = T::zero();
                    let mut mean_dyh_n = T::zero();
                    for j in 0..cols {
                        let gg = g.at(r, j);
                        let nrm = normalized.at(r, j);
                        let dyh = gg * gv.data()[j];
                        mean_dyh += dyh;
                        mean_dyh_n += dyh * nrm;
                        dgain[j] += gg * nrm;
                        dbias[j] += gg;
                    }
                    mean_dyh *= inv_d;
                    mean_dyh_n *= inv_d;
                    for j in 0..cols {
                        let gg = g.at(r, j);
                        let nrm = normalized.at(r, j);
                        let dyh = gg * gv.data()[j];
                        dx.data_mut()[r * cols + j] = (dyh - mean_dyh - nrm * mean_dyh_n) * istd;
                    }
                }
                let gdims = gv.dims().to_vec();
                let bdims = self.nodes[bias.0].value.dims().to_vec();
                Owned::Three(
                    *x,
                    dx,
                    *gain,
                    Tensor::from_vec(&gdims, dgain)?,
                    *bias,
                    Tensor::from_vec(&bdims, dbias)?,
                )
            }
            Op::MeanRows(x) => {
                let xv = &self.nodes[x.0].value;
                let (rows, cols) = (xv.rows(), xv.cols());
                let inv = T::one() / sc::<T>(rows as f64);
                let mut dx = Tensor::zeros(xv.dims());
                for r in 0..rows {
                    for j in 0..cols {
                        dx.data_mut()[r * cols + j] = g.data()[j] * inv;
                    }
                }
                Owned::One(*x, dx)
            }
            Op::MeanAll(x) => {
                let xv = &self.nodes[x.0].value;
                let inv = T::one() / sc::<T>(xv.numel() as f64);
                let gs = g.scalar_value() * inv;
                Owned::One(*x, Tensor::full(xv.dims(), gs))
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let cols = g.cols();
                let mut start = 0;
                let mut grads = Vec::with_capacity(parts.len());
                for &p in &parts {
                    let rows = self.nodes[p.0].value.rows();
                    let dims = self.nodes[p.0].value.dims().to_vec();
                    let data = g.data()[start * cols..(start + rows) * cols].to_vec();
                    grads.push((p, Tensor::from_vec(&dims, data)?));
                    start += rows;
                }
                for (p, d) in grads {
                    self.accumulate_owned(p, d);
                }
                Owned::None
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let rows = g.rows();
                let mut start = 0;
                let mut grads = Vec::with_capacity(parts.len());
                for &p in &parts {
                    let pcols = self.nodes[p.0].value.cols();
                    let dims = self.nodes[p.0].value.dims().to_vec();
                    let mut data = Vec::with_capacity(rows * pcols);
                    for r in 0..rows {
                        let grow = g.row(r);
                        data.extend_from_slice(&grow[start..start + pcols]);
                    }
                    grads.push((p, Tensor::from_vec(&dims, data)?));
                    start += pcols;
                }
                for (p, d) in grads {
                    self.accumulate_owned(p, d);
                }
                Owned::None
            }
            Op::SliceRows(x, start, _len) => {
                let xv = &self.nodes[x.0].value;
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.dims());
                let off = start * cols;
                for (k, &gg) in g.data().iter().enumerate() {
                    dx.data_mut()[off + k] = gg;
                }
                Owned::One(*x, dx)
            }
            Op::SliceCols(x, start, len) => {
                let (start, len) = (*start, *len);
                let xv = &self.nodes[x.0].value;
                let (rows, cols) = (xv.rows(), xv.cols());
                let mut dx = Tensor::zeros(xv.dims());
                for r in 0..rows {
                    for j in 0..len {
                        dx.data_mut()[r * cols + start + j] = g.at(r, j);
                    }
                }
                Owned::One(*x, dx)
            }
            Op::GatherRows(x, indices) => {
                let indices = Arc::clone(indices);
                let xv = &self.nodes[x.0].value;
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.dims());
                for (k, &src) in indices.iter().enumerate() {
                    for j in 0..cols {
                        dx.data_mut()[src * cols + j] += g.at(k, j);
                    }
                }
                Owned::One(*x, dx)
            }
            Op::Dropout(x, mask) => Owned::One(*x, g.zip_map(mask, |gg, mm| gg * mm)?),
        };
        match out {
            Owned::None => {}
            Owned::One(a, da) => self.accumulate_owned(a, da),
            Owned::Two(a, da, b, db) => {
                self.accumulate_owned(a, da);
                self.accumulate_owned(b, db);
            }
            Owned::Three(a, da, b, db, c, dc) => {
                self.accumulate_owned(a, da);
                self.accumulate_owned(b, db);
                self.accumulate_owned(c, dc);
            }
        }
        Ok(())
    }

    /// Add this graph's parameter gradients into the owning parameters.
    pub fn accumulate_param_grads<'a>(
        &self,
        params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    ) -> Result<()>
    where
        T: 'a,
    {
        for p in params {
            if let Some(g) = self.param_grad(&p.name) {
                if g.dims() != p.grad.dims() {
                    return Err(Error::shape(
                        format!("gradient of {}", p.name),
                        format!("{:?}", p.grad.dims()),
                        format!("{:?}", g.dims()),
                    ));
                }
                p.grad.add_scaled(g, T::one());
            }
        }
        Ok(())
    }
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = sc::<T>(0.7978845608028654); // sqrt(2/pi)
    let a = sc::<T>(0.044715);
    let half = sc::<T>(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = sc::<T>(0.7978845608028654);
    let a = sc::<T>(0.044715);
    let half = sc::<T>(0.5);
    let three = sc::<T>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng_from_seed;

    #[test]
    fn square_gradient() {
        let x = Parameter::new("x", Tensor::scalar(3.0f64));
        let mut g = Graph::new();
        let xid = g.param(&x);
        let loss = g.mul(xid, xid).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.param_grad("x").unwrap().scalar_value(), 6.0);
    }

    #[test]
    fn constant_loss_has_zero_grads() {
        let x = Parameter::new("x", Tensor::scalar(2.0f64));
        let mut g = Graph::new();
        let _ = g.param(&x);
        let loss = g.constant(Tensor::scalar(5.0f64));
        g.backward(loss).unwrap();
        assert!(g.param_grad("x").is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }

    #[test]
    fn repeated_backward_accumulates_into_params() {
        let mut x = Parameter::new("x", Tensor::scalar(3.0f64));
        for _ in 0..2 {
            let mut g = Graph::new();
            let xid = g.param(&x);
            let loss = g.mul(xid, xid).unwrap();
            g.backward(loss).unwrap();
            g.accumulate_param_grads(std::iter::once(&mut x)).unwrap();
        }
        assert_eq!(x.grad.scalar_value(), 12.0);
        x.zero_grad();
        assert_eq!(x.grad.scalar_value(), 0.0);
    }

    #[test]
    fn shared_param_uses_one_leaf() {
        let w = Parameter::new("w", Tensor::scalar(2.0f64));
        let mut g = Graph::new();
        let a = g.param(&w);
        let b = g.param(&w);
        assert_eq!(a, b);
        // loss = w * w + w -> dw = 2w + 1 = 5
        let sq = g.mul(a, b).unwrap();
        let loss = g.add(sq, a).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.param_grad("w").unwrap().scalar_value(), 5.0);
    }

    /// Finite-difference check of every primitive op on random inputs.
    #[test]
    fn finite_difference_all_ops() {
        let mut rng = rng_from_seed(7);
        let rand_t = |rng: &mut crate::SeedRng, dims: &[usize]| {
            let mut t = Tensor::<f64>::zeros(dims);
            for v in t.data_mut() {
                *v = rng.gen::<f64>() * 2.0 - 1.0;
            }
            t
        };

        // Each case builds a scalar loss from a single parameter.
        type Builder = Box<dyn Fn(&mut Graph<f64>, NodeId) -> NodeId>;
        let aux = std::sync::Arc::new(Mask::from_fn(3, |i, j| i == j || (i < 2 && j < 2)));
        let cases: Vec<(&str, Vec<usize>, Builder)> = vec![
            (
                "tanh",
                vec![2, 3],
                Box::new(|g, x| {
                    let y = g.tanh(x);
                    g.mean_all(y)
                }),
            ),
            (
                "sigmoid",
                vec![2, 3],
                Box::new(|g, x| {
                    let y = g.sigmoid(x);
                    g.mean_all(y)
                }),
            ),
            (
                "gelu",
                vec![2, 3],
                Box::new(|g, x| {
                    let y = g.gelu(x);
                    g.mean_all(y)
                }),
            ),
            (
                "affine",
                vec![2, 3],
                Box::new(|g, x| {
                    let y = g.affine(x, -2.5, 0.75);
                    g.mean_all(y)
                }),
            ),
            (
                "softmax",
                vec![3, 4],
                Box::new(|g, x| {
                    let s = g.softmax_rows(x);
                    let w = g.constant(
                        Tensor::from_vec(
                            &[3, 4],
                            (0..12).map(|i| (i as f64) * 0.3 - 1.0).collect(),
                        )
                        .unwrap(),
                    );
                    let m = g.mul(s, w).unwrap();
                    g.mean_all(m)
                }),
            ),
            (
                "matmul",
                vec![3, 2],
                Box::new(|g, x| {
                    let w = g.constant(
                        Tensor::from_vec(&[2, 4], (0..8).map(|i| 0.1 * i as f64 - 0.3).collect())
                            .unwrap(),
                    );
                    let y = g.matmul(x, w).unwrap();
                    let t = g.tanh(y);
                    g.mean_all(t)
                }),
            ),
            (
                "transpose",
                vec![2, 3],
                Box::new(|g, x| {
                    let t = g.transpose(x);
                    let y = g.tanh(t);
                    g.mean_all(y)
                }),
            ),
            (
                "mean_rows",
                vec![4, 3],
                Box::new(|g, x| {
                    let m = g.mean_rows(x);
                    let y = g.sigmoid(m);
                    g.mean_all(y)
                }),
            ),
            (
                "slice_gather",
                vec![4, 3],
                Box::new(|g, x| {
                    let s = g.slice_rows(x, 1, 2).unwrap();
                    let c = g.slice_cols(s, 1, 2).unwrap();
                    let picked = g
                        .gather_rows(x, std::sync::Arc::new(vec![0, 2, 2]))
                        .unwrap();
                    let pm = g.mean_rows(picked);
                    let cm = g.mean_rows(c);
                    let joined = g.concat_cols(&[pm, cm]).unwrap();
                    let y = g.tanh(joined);
                    g.mean_all(y)
                }),
            ),
            (
                "concat_mulcol",
                vec![3, 2],
                Box::new(|g, x| {
                    let col = g.slice_cols(x, 0, 1).unwrap();
                    let scaled = g.mul_col(x, col).unwrap();
                    let both = g.concat_rows(&[x, scaled]).unwrap();
                    g.mean_all(both)
                }),
            ),
            (
                "layer_norm",
                vec![3, 4],
                Box::new(|g, x| {
                    let gain =
                        g.constant(Tensor::from_vec(&[1, 4], vec![1.1, 0.9, -0.4, 0.7]).unwrap());
                    let bias =
                        g.constant(Tensor::from_vec(&[1, 4], vec![0.1, -0.2, 0.3, 0.0]).unwrap());
                    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
                    let t = g.tanh(y);
                    g.mean_all(t)
                }),
            ),
            (
                "masked_softmax",
                vec![3, 3],
                Box::new(move |g, x| {
                    let masked = g.mask_penalty(x, &aux).unwrap();
                    let s = g.softmax_rows(masked);
                    let w = g.constant(
                        Tensor::from_vec(&[3, 3], (0..9).map(|i| 0.2 * i as f64 - 0.7).collect())
                            .unwrap(),
                    );
                    let m = g.mul(s, w).unwrap();
                    g.mean_all(m)
                }),
            ),
            (
                "ln_clamp",
                vec![2, 3],
                Box::new(|g, x| {
                    let s = g.sigmoid(x);
                    let c = g.clamp(s, 1e-7, 1.0 - 1e-7);
                    let l = g.ln(c);
                    g.mean_all(l)
                }),
            ),
            (
                "add_row",
                vec![3, 4],
                Box::new(|g, x| {
                    let row = g.slice_rows(x, 0, 1).unwrap();
                    let rest = g.slice_rows(x, 1, 2).unwrap();
                    let y = g.add_row(rest, row).unwrap();
                    let t = g.tanh(y);
                    g.mean_all(t)
                }),
            ),
        ];

        for (name, dims, build) in cases {
            let value = rand_t(&mut rng, &dims);
            let mut p = Parameter::new("p", value);

            let mut g = Graph::new();
            let xid = g.param(&p);
            let loss = build(&mut g, xid);
            g.backward(loss).unwrap();
            let analytic = g.param_grad("p").unwrap().clone();

            let n = p.value.numel();
            let mut worst = 0.0f64;
            for k in 0..n {
                let orig = p.value.data()[k];
                let fd = gradcheck::central_difference(
                    |v| {
                        p.value.data_mut()[k] = v;
                        let mut g = Graph::new();
                        let xid = g.param(&p);
                        let loss = build(&mut g, xid);
                        Ok(g.value(loss).scalar_value())
                    },
                    orig,
                    1e-6,
                )
                .unwrap();
                p.value.data_mut()[k] = orig;
                let rel = gradcheck::relative_error(analytic.data()[k], fd);
                if rel > worst {
                    worst = rel;
                }
            }
            assert!(worst < 1e-6, "op {name}: max rel err {worst}");
        }
    }

    /// Weighted BCE of a two-layer network against finite differences.
    #[test]
    fn two_layer_network_bce_gradients() {
        let mut rng = rng_from_seed(21);
        let rand_t = |rng: &mut crate::SeedRng, dims: &[usize]| {
            let mut t = Tensor::<f64>::zeros(dims);
            for v in t.data_mut() {
                *v = rng.gen::<f64>() - 0.5;
            }
            t
        };
        let x = rand_t(&mut rng, &[4, 3]);
        let targets = [1.0, 0.0, 1.0, 0.0];
        let weight = 3.0;
        let mut w1 = Parameter::new("w1", rand_t(&mut rng, &[3, 5]));
        let mut w2 = Parameter::new("w2", rand_t(&mut rng, &[5, 1]));

        let build =
            |g: &mut Graph<f64>, w1: &Parameter<f64>, w2: &Parameter<f64>, x: &Tensor<f64>| {
                let xid = g.constant(x.clone());
                let w1id = g.param(w1);
                let h = g.matmul(xid, w1id).unwrap();
                let h = g.tanh(h);
                let w2id = g.param(w2);
                let logits = g.matmul(h, w2id).unwrap();
                let p = g.sigmoid(logits);
                let p = g.clamp(p, 1e-7, 1.0 - 1e-7);
                let log_p = g.ln(p);
                let q = g.affine(p, -1.0, 1.0);
                let log_q = g.ln(q);
                let wy = g.constant(
                    Tensor::from_vec(&[4, 1], targets.iter().map(|&y| weight * y).collect())
                        .unwrap(),
                );
                let comp = g.constant(
                    Tensor::from_vec(&[4, 1], targets.iter().map(|&y| 1.0 - y).collect()).unwrap(),
                );
                let t1 = g.mul(wy, log_p).unwrap();
                let t2 = g.mul(comp, log_q).unwrap();
                let s = g.add(t1, t2).unwrap();
                let neg = g.affine(s, -1.0, 0.0);
                g.mean_all(neg)
            };

        let mut g = Graph::new();
        let loss = build(&mut g, &w1, &w2, &x);
        g.backward(loss).unwrap();
        let grads = [
            g.param_grad("w1").unwrap().clone(),
            g.param_grad("w2").unwrap().clone(),
        ];

        for which in 0..2 {
            let numel = grads[which].numel();
            for k in 0..numel {
                let orig = if which == 0 {
                    w1.value.data()[k]
                } else {
                    w2.value.data()[k]
                };
                let fd = gradcheck::central_difference(
                    |v| {
                        if which == 0 {
                            w1.value.data_mut()[k] = v;
                        } else {
                            w2.value.data_mut()[k] = v;
                        }
                        let mut g = Graph::new();
                        let loss = build(&mut g, &w1, &w2, &x);
                        Ok(g.value(loss).scalar_value())
                    },
                    orig,
                    1e-5,
                )
                .unwrap();
                if which == 0 {
                    w1.value.data_mut()[k] = orig;
                } else {
                    w2.value.data_mut()[k] = orig;
                }
                let rel = gradcheck::relative_error(grads[which].data()[k], fd);
                assert!(rel < 1e-4, "param {which} entry {k}: rel err {rel}");
            }
        }
    }

    #[test]
    fn dropout_statistics_and_identity() {
        let mut rng = rng_from_seed(11);
        let x = Tensor::<f64>::full(&[100, 100], 1.0);
        let mut g = Graph::new();
        let xid = g.constant(x.clone());

        // rate 0 and infer mode are the identity (same node returned).
        assert_eq!(g.dropout(xid, 0.0, true, &mut rng).unwrap(), xid);
        assert_eq!(g.dropout(xid, 0.5, false, &mut rng).unwrap(), xid);

        let d = g.dropout(xid, 0.5, true, &mut rng).unwrap();
        let out = g.value(d);
        let survivors = out.data().iter().filter(|&&v| v != 0.0).count() as f64;
        let frac = survivors / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "surviving fraction {frac}");
        let mean: f64 = out.data().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");

        assert!(g.dropout(xid, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_is_deterministic_per_seed() {
        let run = |seed: u64| {
            let mut rng = rng_from_seed(seed);
            let mut g = Graph::new();
            let x = g.constant(Tensor::<f64>::full(&[10, 10], 1.0));
            let d = g.dropout(x, 0.3, true, &mut rng).unwrap();
            g.value(d).data().to_vec()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }
}
