//! Dense f64 tensors and a recorded-tape reverse-mode autodiff engine.
//!
//! The engine is deliberately minimal: it supplies exactly the primitives the
//! encoder stack needs (matmul, row softmax, layer norm, relu, elementwise
//! arithmetic, concatenation, and the two relation-embedding gather ops), each
//! with a hand-written gradient rule. Ops are recorded on a [`Tape`];
//! [`Tape::backward`] walks the recording in reverse and accumulates gradients
//! for every node, so a leaf used several times sums its contributions.
//!
//! Everything is f64: the diagnostics compare norm ratios across depths and
//! f32 noise would contaminate those checks. There is no broadcasting beyond
//! adding a trailing vector over rows.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{CoreError, Result};

/// Epsilon added inside the square root of the layer-norm denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;

static TAPE_STAMPS: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct NodeRef {
    stamp: u64,
    index: usize,
}

/// Dense row-major tensor. A tensor produced by (or registered on) a tape
/// carries a handle to its tape node; detached tensors are plain immutable
/// values and can be shared freely between threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    node: Option<NodeRef>,
}

impl Tensor {
    /// Builds a tensor, validating that every dimension is positive and the
    /// data length matches the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(CoreError::BadShape {
                op: "tensor",
                shape,
                reason: "dimensions must be positive",
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::BadShape {
                op: "tensor",
                shape,
                reason: "data length does not match shape product",
            });
        }
        Ok(Self {
            shape,
            data,
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            node: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Rows of a rank-2 tensor (or length of a rank-1 tensor).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing axis length.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Euclidean norm of each row of a rank-2 tensor.
    pub fn row_norms(&self) -> Vec<f64> {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        self.data
            .chunks(cols)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    pub fn max_row_norm(&self) -> f64 {
        self.row_norms().into_iter().fold(0.0, f64::max)
    }

    /// Copy without the tape handle.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    /// In-place multiply by a constant. Used by the initialization schemes on
    /// detached parameter tensors; not recorded anywhere.
    pub fn scale_in_place(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn is_on_tape(&self) -> bool {
        self.node.is_some()
    }
}

/// An n-by-n grid of relation labels, each indexing a row of the shared
/// relation embedding tables. Labels are op metadata, not differentiable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationLabels {
    n: usize,
    labels: Vec<usize>,
}

impl RelationLabels {
    pub fn new(n: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != n * n {
            return Err(CoreError::BadShape {
                op: "relation_labels",
                shape: vec![labels.len()],
                reason: "label grid must have n*n entries",
            });
        }
        Ok(Self { n, labels })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.labels[i * self.n + j]
    }

    pub fn max_label(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    SoftmaxRows { a: usize },
    LayerNorm { a: usize, gain: usize, bias: usize },
    Relu { a: usize },
    Add { a: usize, b: usize, broadcast: bool },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    SumAll { a: usize },
    ConcatLast { a: usize, b: usize },
    RelScores { qx: usize, table: usize, labels: Arc<RelationLabels> },
    RelValues { attn: usize, table: usize, labels: Arc<RelationLabels> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
}

/// Append-only recording of primitive ops. Node inputs always reference
/// earlier nodes, so the recording is topologically ordered by construction.
#[derive(Debug)]
pub struct Tape {
    stamp: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    stamp: u64,
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `t`, as a flat slice in
    /// the tensor's row-major layout. `None` if `t` is not on the tape that
    /// produced these gradients.
    pub fn get<'a>(&'a self, t: &Tensor) -> Option<&'a [f64]> {
        let node = t.node?;
        if node.stamp != self.stamp {
            return None;
        }
        self.grads.get(node.index).map(|g| g.as_slice())
    }

    /// Gradient wrapped back into a tensor of the parameter's shape.
    pub fn get_tensor(&self, t: &Tensor) -> Option<Tensor> {
        self.get(t)
            .map(|g| Tensor::new(t.shape.to_vec(), g.to_vec()).expect("gradient shape"))
    }

    /// Sum of squared gradient entries for `t`.
    pub fn squared_norm(&self, t: &Tensor) -> Option<f64> {
        self.get(t).map(|g| g.iter().map(|v| v * v).sum())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            stamp: TAPE_STAMPS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> Tensor {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape: shape.clone(),
            value: value.clone(),
        });
        Tensor {
            shape,
            data: value,
            node: Some(NodeRef {
                stamp: self.stamp,
                index,
            }),
        }
    }

    /// Registers a (typically parameter or input) tensor as a differentiable
    /// leaf and returns the on-tape handle.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone())
    }

    /// Resolves a tensor to a node index, recording tensors that are not on
    /// any tape as constants (they take part in the forward value but receive
    /// no gradient lookup of interest).
    fn input(&mut self, t: &Tensor, op: &'static str) -> Result<usize> {
        match t.node {
            Some(node) => {
                if node.stamp != self.stamp {
                    return Err(CoreError::TapeMismatch { op });
                }
                Ok(node.index)
            }
            None => {
                let n = self.push(Op::Constant, t.shape.clone(), t.data.clone());
                Ok(n.node.expect("just pushed").index)
            }
        }
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let ai = self.input(a, "matmul")?;
        let bi = self.input(b, "matmul")?;
        Ok(self.push(Op::Matmul { a: ai, b: bi }, vec![m, n], out))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 {
            return Err(CoreError::BadShape {
                op: "transpose",
                shape: a.shape.clone(),
                reason: "rank-2 required",
            });
        }
        let (m, n) = (a.shape[0], a.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a.data[i * n + j];
            }
        }
        let ai = self.input(a, "transpose")?;
        Ok(self.push(Op::Transpose { a: ai }, vec![n, m], out))
    }

    /// Softmax over the last axis, computed with max-subtraction so large
    /// logits cannot overflow.
    pub fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let d = a.cols();
        if d == 0 {
            return Err(CoreError::BadShape {
                op: "softmax_rows",
                shape: a.shape.clone(),
                reason: "empty last axis",
            });
        }
        let mut out = a.data.clone();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let ai = self.input(a, "softmax_rows")?;
        Ok(self.push(Op::SoftmaxRows { a: ai }, a.shape.clone(), out))
    }

    /// Normalizes each row over the last axis to zero mean and unit variance
    /// (epsilon inside the square root), then applies the affine gain/bias.
    pub fn layer_norm(&mut self, a: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let d = a.cols();
        if gain.shape != [d] || bias.shape != [d] {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm",
                lhs: a.shape.clone(),
                rhs: gain.shape.clone(),
            });
        }
        let mut out = vec![0.0; a.numel()];
        for (row, orow) in a.data.chunks(d).zip(out.chunks_mut(d)) {
            let (xhat, _sigma) = normalize_row(row);
            for j in 0..d {
                orow[j] = xhat[j] * gain.data[j] + bias.data[j];
            }
        }
        let ai = self.input(a, "layer_norm")?;
        let gi = self.input(gain, "layer_norm")?;
        let bi = self.input(bias, "layer_norm")?;
        Ok(self.push(
            Op::LayerNorm {
                a: ai,
                gain: gi,
                bias: bi,
            },
            a.shape.clone(),
            out,
        ))
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        let out = a.data.iter().map(|&v| v.max(0.0)).collect();
        let ai = self.input(a, "relu")?;
        Ok(self.push(Op::Relu { a: ai }, a.shape.clone(), out))
    }

    /// Elementwise sum. A rank-1 right operand whose length matches the last
    /// axis of a rank-2 left operand is broadcast over rows.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let broadcast = a.rank() == 2 && b.rank() == 1 && b.shape[0] == a.shape[1];
        if !broadcast && a.shape != b.shape {
            return Err(CoreError::ShapeMismatch {
                op: "add",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let out = if broadcast {
            let d = a.shape[1];
            a.data
                .iter()
                .enumerate()
                .map(|(idx, &v)| v + b.data[idx % d])
                .collect()
        } else {
            a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect()
        };
        let ai = self.input(a, "add")?;
        let bi = self.input(b, "add")?;
        Ok(self.push(
            Op::Add {
                a: ai,
                b: bi,
                broadcast,
            },
            a.shape.clone(),
            out,
        ))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(CoreError::ShapeMismatch {
                op: "sub",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let out = a.data.iter().zip(&b.data).map(|(&x, &y)| x - y).collect();
        let ai = self.input(a, "sub")?;
        let bi = self.input(b, "sub")?;
        Ok(self.push(Op::Sub { a: ai, b: bi }, a.shape.clone(), out))
    }

    /// Elementwise (Hadamard) product of same-shape tensors.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(CoreError::ShapeMismatch {
                op: "mul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let out = a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect();
        let ai = self.input(a, "mul")?;
        let bi = self.input(b, "mul")?;
        Ok(self.push(Op::Mul { a: ai, b: bi }, a.shape.clone(), out))
    }

    pub fn scale(&mut self, a: &Tensor, factor: f64) -> Result<Tensor> {
        let out = a.data.iter().map(|&v| v * factor).collect();
        let ai = self.input(a, "scale")?;
        Ok(self.push(Op::Scale { a: ai, factor }, a.shape.clone(), out))
    }

    /// Sum of every entry, as a scalar (shape `[1]`) tensor.
    pub fn sum_all(&mut self, a: &Tensor) -> Result<Tensor> {
        let total: f64 = a.data.iter().sum();
        let ai = self.input(a, "sum_all")?;
        Ok(self.push(Op::SumAll { a: ai }, vec![1], vec![total]))
    }

    /// Concatenates two rank-2 tensors along the last axis.
    pub fn concat_last(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || b.rank() != 2 || a.shape[0] != b.shape[0] {
            return Err(CoreError::ShapeMismatch {
                op: "concat_last",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (rows, ca, cb) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for i in 0..rows {
            out.extend_from_slice(&a.data[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&b.data[i * cb..(i + 1) * cb]);
        }
        let ai = self.input(a, "concat_last")?;
        let bi = self.input(b, "concat_last")?;
        Ok(self.push(Op::ConcatLast { a: ai, b: bi }, vec![rows, ca + cb], out))
    }

    /// Pairwise relation score offsets: `out[i][j] = qx[i] . table[labels[i][j]]`.
    /// Realizes the query-times-relation-key term of relational attention.
    pub fn relation_scores(
        &mut self,
        qx: &Tensor,
        table: &Tensor,
        labels: &Arc<RelationLabels>,
    ) -> Result<Tensor> {
        let n = labels.n();
        if qx.rank() != 2 || qx.shape[0] != n || table.rank() != 2 || table.shape[1] != qx.shape[1]
        {
            return Err(CoreError::ShapeMismatch {
                op: "relation_scores",
                lhs: qx.shape.clone(),
                rhs: table.shape.clone(),
            });
        }
        check_labels(labels, table.shape[0])?;
        let dz = qx.shape[1];
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let qrow = &qx.data[i * dz..(i + 1) * dz];
            for j in 0..n {
                let trow = &table.data[labels.get(i, j) * dz..][..dz];
                out[i * n + j] = qrow.iter().zip(trow).map(|(&q, &t)| q * t).sum();
            }
        }
        let qi = self.input(qx, "relation_scores")?;
        let ti = self.input(table, "relation_scores")?;
        Ok(self.push(
            Op::RelScores {
                qx: qi,
                table: ti,
                labels: Arc::clone(labels),
            },
            vec![n, n],
            out,
        ))
    }

    /// Attention-weighted relation value offsets:
    /// `out[i] = sum_j attn[i][j] * table[labels[i][j]]`.
    pub fn relation_values(
        &mut self,
        attn: &Tensor,
        table: &Tensor,
        labels: &Arc<RelationLabels>,
    ) -> Result<Tensor> {
        let n = labels.n();
        if attn.shape != [n, n] || table.rank() != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "relation_values",
                lhs: attn.shape.clone(),
                rhs: table.shape.clone(),
            });
        }
        check_labels(labels, table.shape[0])?;
        let dz = table.shape[1];
        let mut out = vec![0.0; n * dz];
        for i in 0..n {
            for j in 0..n {
                let w = attn.data[i * n + j];
                let trow = &table.data[labels.get(i, j) * dz..][..dz];
                let orow = &mut out[i * dz..(i + 1) * dz];
                for (o, &t) in orow.iter_mut().zip(trow) {
                    *o += w * t;
                }
            }
        }
        let ai = self.input(attn, "relation_values")?;
        let ti = self.input(table, "relation_values")?;
        Ok(self.push(
            Op::RelValues {
                attn: ai,
                table: ti,
                labels: Arc::clone(labels),
            },
            vec![n, dz],
            out,
        ))
    }

    /// Reverse pass from a scalar root. Every node reachable from the root
    /// receives an accumulated gradient; unreached nodes keep zeros.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        let node = root.node.ok_or(CoreError::RootNotOnTape)?;
        if node.stamp != self.stamp || node.index >= self.nodes.len() {
            return Err(CoreError::RootNotOnTape);
        }
        if !root.is_scalar() {
            return Err(CoreError::NonScalarRoot {
                shape: root.shape.clone(),
            });
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[node.index] = vec![1.0; 1];

        for idx in (0..=node.index).rev() {
            let g = std::mem::take(&mut grads[idx]);
            if g.iter().all(|&v| v == 0.0) {
                grads[idx] = g;
                continue;
            }
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = g;
        }
        Ok(Gradients {
            stamp: self.stamp,
            grads,
        })
    }

    fn accumulate(&self, idx: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                // dA = g . B^T
                {
                    let da = &mut grads[*a];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] += acc;
                        }
                    }
                }
                // dB = A^T . g
                {
                    let db = &mut grads[*b];
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av[i * k + p] * g[i * n + j];
                            }
                            db[p * n + j] += acc;
                        }
                    }
                }
            }
            Op::Transpose { a } => {
                let (m, n) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let da = &mut grads[*a];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                let d = *node.shape.last().expect("non-empty");
                let da = &mut grads[*a];
                for (row, (srow, grow)) in node.value.chunks(d).zip(g.chunks(d)).enumerate() {
                    let dot: f64 = srow.iter().zip(grow).map(|(&s, &gv)| s * gv).sum();
                    for j in 0..d {
                        da[row * d + j] += srow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::LayerNorm { a, gain, bias } => {
                let d = *node.shape.last().expect("non-empty");
                let av = &self.nodes[*a].value;
                let gv = &self.nodes[*gain].value;
                for (row_idx, (row, grow)) in av.chunks(d).zip(g.chunks(d)).enumerate() {
                    let (xhat, sigma) = normalize_row(row);
                    let dxhat: Vec<f64> = (0..d).map(|j| grow[j] * gv[j]).collect();
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(&dx, &xh)| dx * xh).sum::<f64>() / d as f64;
                    for j in 0..d {
                        grads[*a][row_idx * d + j] +=
                            (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) / sigma;
                        grads[*gain][j] += grow[j] * xhat[j];
                        grads[*bias][j] += grow[j];
                    }
                }
            }
            Op::Relu { a } => {
                let av = &self.nodes[*a].value;
                let da = &mut grads[*a];
                for (j, (&input, &gv)) in av.iter().zip(g).enumerate() {
                    if input > 0.0 {
                        da[j] += gv;
                    }
                }
            }
            Op::Add { a, b, broadcast } => {
                for (j, &gv) in g.iter().enumerate() {
                    grads[*a][j] += gv;
                }
                if *broadcast {
                    let d = self.nodes[*b].value.len();
                    let db = &mut grads[*b];
                    for (j, &gv) in g.iter().enumerate() {
                        db[j % d] += gv;
                    }
                } else {
                    for (j, &gv) in g.iter().enumerate() {
                        grads[*b][j] += gv;
                    }
                }
            }
            Op::Sub { a, b } => {
                for (j, &gv) in g.iter().enumerate() {
                    grads[*a][j] += gv;
                    grads[*b][j] -= gv;
                }
            }
            Op::Mul { a, b } => {
                let av = self.nodes[*a].value.clone();
                let bv = self.nodes[*b].value.clone();
                for (j, &gv) in g.iter().enumerate() {
                    grads[*a][j] += gv * bv[j];
                    grads[*b][j] += gv * av[j];
                }
            }
            Op::Scale { a, factor } => {
                let da = &mut grads[*a];
                for (j, &gv) in g.iter().enumerate() {
                    da[j] += gv * factor;
                }
            }
            Op::SumAll { a } => {
                let da = &mut grads[*a];
                for v in da.iter_mut() {
                    *v += g[0];
                }
            }
            Op::ConcatLast { a, b } => {
                let rows = node.shape[0];
                let ca = self.nodes[*a].shape[1];
                let cb = self.nodes[*b].shape[1];
                for i in 0..rows {
                    for j in 0..ca {
                        grads[*a][i * ca + j] += g[i * (ca + cb) + j];
                    }
                    for j in 0..cb {
                        grads[*b][i * cb + j] += g[i * (ca + cb) + ca + j];
                    }
                }
            }
            Op::RelScores { qx, table, labels } => {
                let n = labels.n();
                let dz = self.nodes[*qx].shape[1];
                let qv = self.nodes[*qx].value.clone();
                let tv = self.nodes[*table].value.clone();
                for i in 0..n {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let lab = labels.get(i, j);
                        for t in 0..dz {
                            grads[*qx][i * dz + t] += gv * tv[lab * dz + t];
                            grads[*table][lab * dz + t] += gv * qv[i * dz + t];
                        }
                    }
                }
            }
            Op::RelValues { attn, table, labels } => {
                let n = labels.n();
                let dz = self.nodes[*table].shape[1];
                let av = self.nodes[*attn].value.clone();
                let tv = self.nodes[*table].value.clone();
                for i in 0..n {
                    for j in 0..n {
                        let lab = labels.get(i, j);
                        let mut acc = 0.0;
                        for t in 0..dz {
                            let gv = g[i * dz + t];
                            acc += gv * tv[lab * dz + t];
                            grads[*table][lab * dz + t] += av[i * n + j] * gv;
                        }
                        grads[*attn][i * n + j] += acc;
                    }
                }
            }
        }
    }

    /// Recomputes every node from its parents and returns the maximum
    /// absolute deviation from the recorded forward values. A faithful
    /// recording replays to exactly zero.
    pub fn replay_max_deviation(&self) -> f64 {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        let mut worst = 0.0f64;
        for node in &self.nodes {
            let recomputed = self.recompute(node, &values);
            for (a, b) in recomputed.iter().zip(&node.value) {
                worst = worst.max((a - b).abs());
            }
            values.push(recomputed);
        }
        worst
    }

    fn recompute(&self, node: &Node, values: &[Vec<f64>]) -> Vec<f64> {
        match &node.op {
            Op::Leaf | Op::Constant => node.value.clone(),
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = values[*a][i * k + p];
                        for j in 0..n {
                            out[i * n + j] += av * values[*b][p * n + j];
                        }
                    }
                }
                out
            }
            Op::Transpose { a } => {
                let (m, n) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = values[*a][i * n + j];
                    }
                }
                out
            }
            Op::SoftmaxRows { a } => {
                let d = *node.shape.last().expect("non-empty");
                let mut out = values[*a].clone();
                for row in out.chunks_mut(d) {
                    softmax_in_place(row);
                }
                out
            }
            Op::LayerNorm { a, gain, bias } => {
                let d = *node.shape.last().expect("non-empty");
                let mut out = vec![0.0; values[*a].len()];
                for (row, orow) in values[*a].chunks(d).zip(out.chunks_mut(d)) {
                    let (xhat, _) = normalize_row(row);
                    for j in 0..d {
                        orow[j] = xhat[j] * values[*gain][j] + values[*bias][j];
                    }
                }
                out
            }
            Op::Relu { a } => values[*a].iter().map(|&v| v.max(0.0)).collect(),
            Op::Add { a, b, broadcast } => {
                if *broadcast {
                    let d = values[*b].len();
                    values[*a]
                        .iter()
                        .enumerate()
                        .map(|(idx, &v)| v + values[*b][idx % d])
                        .collect()
                } else {
                    values[*a]
                        .iter()
                        .zip(&values[*b])
                        .map(|(&x, &y)| x + y)
                        .collect()
                }
            }
            Op::Sub { a, b } => values[*a]
                .iter()
                .zip(&values[*b])
                .map(|(&x, &y)| x - y)
                .collect(),
            Op::Mul { a, b } => values[*a]
                .iter()
                .zip(&values[*b])
                .map(|(&x, &y)| x * y)
                .collect(),
            Op::Scale { a, factor } => values[*a].iter().map(|&v| v * factor).collect(),
            Op::SumAll { a } => vec![values[*a].iter().sum()],
            Op::ConcatLast { a, b } => {
                let rows = node.shape[0];
                let ca = self.nodes[*a].shape[1];
                let cb = self.nodes[*b].shape[1];
                let mut out = Vec::with_capacity(rows * (ca + cb));
                for i in 0..rows {
                    out.extend_from_slice(&values[*a][i * ca..(i + 1) * ca]);
                    out.extend_from_slice(&values[*b][i * cb..(i + 1) * cb]);
                }
                out
            }
            Op::RelScores { qx, table, labels } => {
                let n = labels.n();
                let dz = self.nodes[*qx].shape[1];
                let mut out = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        let lab = labels.get(i, j);
                        out[i * n + j] = (0..dz)
                            .map(|t| values[*qx][i * dz + t] * values[*table][lab * dz + t])
                            .sum();
                    }
                }
                out
            }
            Op::RelValues { attn, table, labels } => {
                let n = labels.n();
                let dz = self.nodes[*table].shape[1];
                let mut out = vec![0.0; n * dz];
                for i in 0..n {
                    for j in 0..n {
                        let lab = labels.get(i, j);
                        let w = values[*attn][i * n + j];
                        for t in 0..dz {
                            out[i * dz + t] += w * values[*table][lab * dz + t];
                        }
                    }
                }
                out
            }
        }
    }
}

fn check_labels(labels: &RelationLabels, n_relations: usize) -> Result<()> {
    let max = labels.max_label();
    if max >= n_relations {
        return Err(CoreError::LabelOutOfRange {
            label: max,
            n_relations,
        });
    }
    Ok(())
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn normalize_row(row: &[f64]) -> (Vec<f64>, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let sigma = (var + LAYER_NORM_EPS).sqrt();
    (row.iter().map(|&v| (v - mean) / sigma).collect(), sigma)
}
