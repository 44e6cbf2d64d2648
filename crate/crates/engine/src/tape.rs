use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{EngineError, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm, MatView, Tensor};

pub type NodeId = usize;

/// Hookable node names. The model declares them while building the graph;
/// the engine only uses them to resolve hooks and lookups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    /// The `n* x |V|` (possibly relaxed) one-hot input matrix.
    OneHotInput,
    /// Residual stream after layer `r` (`r = 0` is the embedding output).
    Resid(usize),
    /// Output `z_{m+1}` of residual block `m` (1-based).
    BlockOut(usize),
    /// First op of block `m`'s residual branch, the only consumer of `z_m`
    /// besides the skip connection.
    BranchEntry(usize),
    /// Branch output `R_m(z_m)` of block `m`.
    BranchOut(usize),
    Logits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    ResidualAdd,
    Scale,
    SliceRows,
    SliceCols,
    ConcatCols,
    RmsNorm,
    CausalSoftmax,
    SwiGlu,
    CrossEntropy,
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    ResidualAdd {
        skip: NodeId,
        branch: NodeId,
    },
    Scale {
        x: NodeId,
        factor: T,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        inv_rms: Vec<T>,
    },
    CausalSoftmax {
        x: NodeId,
        scale: T,
    },
    SwiGlu {
        gate: NodeId,
        up: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<(usize, usize)>,
    },
}

impl<T> Op<T> {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::ResidualAdd { .. } => OpKind::ResidualAdd,
            Op::Scale { .. } => OpKind::Scale,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols { .. } => OpKind::ConcatCols,
            Op::RmsNorm { .. } => OpKind::RmsNorm,
            Op::CausalSoftmax { .. } => OpKind::CausalSoftmax,
            Op::SwiGlu { .. } => OpKind::SwiGlu,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } => vec![*a, *b],
            Op::ResidualAdd { skip, branch } => vec![*skip, *branch],
            Op::Scale { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::CausalSoftmax { x, .. } => vec![*x],
            Op::ConcatCols { parts } => parts.clone(),
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::SwiGlu { gate, up } => vec![*gate, *up],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node<T> {
    pub op: Op<T>,
    pub value: Arc<Tensor<T>>,
    pub requires_grad: bool,
}

/// Record of one forward pass. Nodes are appended in execution order, so the
/// node list is topologically sorted by construction.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) labels: BTreeMap<Label, NodeId>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            labels: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn value_arc(&self, id: NodeId) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[id].value)
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id].op.kind()
    }

    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id].op.inputs()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn node_of(&self, label: Label) -> Option<NodeId> {
        self.labels.get(&label).copied()
    }

    pub fn labels(&self) -> impl Iterator<Item = (Label, NodeId)> + '_ {
        self.labels.iter().map(|(&l, &n)| (l, n))
    }

    /// Attach a hookable label to an existing node.
    pub fn label(&mut self, id: NodeId, label: Label) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(EngineError::UnknownNode(id));
        }
        if self.labels.insert(label, id).is_some() {
            return Err(EngineError::DuplicateLabel(label));
        }
        Ok(())
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.leaf_arc(Arc::new(value), requires_grad)
    }

    /// Leaf sharing storage with the caller, e.g. model weights.
    pub fn leaf_arc(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(EngineError::NonFinite {
                node: format!("{:?}#{id}", op.kind()),
            });
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            requires_grad,
        });
        Ok(id)
    }

    fn check(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.nodes
            .get(id)
            .map(|n| n.value.as_ref())
            .ok_or(EngineError::UnknownNode(id))
    }

    /// `a @ b`, or `a @ b^T` when `trans_b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (va, vb) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (MatView::of(va, false), MatView::of(vb, trans_b));
        let ((m, k), (k2, n)) = (av.logical(), bv.logical());
        if va.shape().len() != 2 || vb.shape().len() != 2 || k != k2 {
            return Err(EngineError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(av, bv, &mut out, T::zero());
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul { a, b, trans_b }, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.check(a)?.add(self.check(b)?)?;
        self.push(Op::Add { a, b }, value)
    }

    /// `skip + branch`, where the branch edge is subject to
    /// [`HookSet::residual_branch_scale`](crate::HookSet) during backward.
    pub fn residual_add(&mut self, skip: NodeId, branch: NodeId) -> Result<NodeId> {
        let value = self.check(skip)?.add(self.check(branch)?)?;
        self.push(Op::ResidualAdd { skip, branch }, value)
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId> {
        let value = self.check(x)?.scaled(factor);
        self.push(Op::Scale { x, factor }, value)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.check(x)?;
        if v.shape().len() != 2 || start + len > v.rows() {
            return Err(EngineError::Invalid(format!(
                "slice_rows {start}..{} of {:?}",
                start + len,
                v.shape()
            )));
        }
        let c = v.cols();
        let data = v.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        self.push(Op::SliceRows { x, start }, value)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let v = self.check(x)?;
        if v.shape().len() != 2 || start + width > v.cols() {
            return Err(EngineError::Invalid(format!(
                "slice_cols {start}..{} of {:?}",
                start + width,
                v.shape()
            )));
        }
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..start + width]);
        }
        let value = Tensor::new(vec![rows, width], data)?;
        self.push(Op::SliceCols { x, start }, value)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.check(
            *parts
                .first()
                .ok_or_else(|| EngineError::Invalid("concat_cols of nothing".into()))?,
        )?;
        let rows = first.rows();
        let mut width = 0;
        for &p in parts {
            let v = self.check(p)?;
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(EngineError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            width += v.cols();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p].value.row(r));
            }
        }
        let value = Tensor::new(vec![rows, width], data)?;
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            value,
        )
    }

    /// Row-wise RMS normalisation with a learned gain:
    /// `y = x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: T) -> Result<NodeId> {
        let (vx, vg) = (self.check(x)?, self.check(gain)?);
        let d = vx.cols();
        if vg.numel() != d {
            return Err(EngineError::ShapeMismatch {
                op: "rms_norm",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let rows = vx.rows();
        let g = vg.data();
        let mut inv_rms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        let dt = T::of(d as f64);
        for r in 0..rows {
            let row = vx.row(r);
            let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / dt;
            let inv = (ms + eps).sqrt().recip();
            inv_rms.push(inv);
            out.extend(row.iter().zip(g).map(|(&v, &gi)| v * inv * gi));
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(Op::RmsNorm { x, gain, inv_rms }, value)
    }

    /// Softmax of `scale * x` over each row, restricted to columns `j <= i`.
    /// Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: NodeId, scale: T) -> Result<NodeId> {
        let v = self.check(x)?;
        let (rows, cols) = (v.rows(), v.cols());
        if v.shape().len() != 2 || rows > cols {
            return Err(EngineError::Invalid(format!(
                "causal_softmax needs rows <= cols, got {:?}",
                v.shape()
            )));
        }
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            let row = &v.row(i)[..=i];
            let max = row.iter().fold(T::neg_infinity(), |m, &a| m.max(a * scale));
            let dst = &mut out[i * cols..i * cols + i + 1];
            let mut sum = T::zero();
            for (o, &a) in dst.iter_mut().zip(row) {
                *o = (a * scale - max).exp();
                sum = sum + *o;
            }
            for o in dst.iter_mut() {
                *o = *o / sum;
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push(Op::CausalSoftmax { x, scale }, value)
    }

    /// Gated activation `silu(gate) * up`.
    pub fn swiglu(&mut self, gate: NodeId, up: NodeId) -> Result<NodeId> {
        let (vg, vu) = (self.check(gate)?, self.check(up)?);
        vg.check_same("swiglu", vu)?;
        let data = vg
            .data()
            .iter()
            .zip(vu.data())
            .map(|(&a, &b)| silu(a) * b)
            .collect();
        let value = Tensor::new(vg.shape().to_vec(), data)?;
        self.push(Op::SwiGlu { gate, up }, value)
    }

    /// Mean cross-entropy over the selected `(row, target class)` pairs.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[(usize, usize)]) -> Result<NodeId> {
        let v = self.check(logits)?;
        if targets.is_empty() {
            return Err(EngineError::Invalid("cross_entropy with no targets".into()));
        }
        let mut total = T::zero();
        for &(r, t) in targets {
            if r >= v.rows() || t >= v.cols() {
                return Err(EngineError::Invalid(format!(
                    "cross_entropy target ({r}, {t}) outside {:?}",
                    v.shape()
                )));
            }
            total = total + nll(v.row(r), t);
        }
        let value = Tensor::scalar(total / T::of(targets.len() as f64));
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            value,
        )
    }
}

pub(crate) fn sigmoid<T: Scalar>(a: T) -> T {
    (T::one() + (-a).exp()).recip()
}

pub(crate) fn silu<T: Scalar>(a: T) -> T {
    a * sigmoid(a)
}

/// `-log softmax(row)[target]`, computed with the max shift.
pub(crate) fn nll<T: Scalar>(row: &[T], target: usize) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &a| m.max(a));
    let lse = row.iter().map(|&a| (a - max).exp()).sum::<T>().ln() + max;
    lse - row[target]
}

/// Softmax of a row, max-shifted.
pub(crate) fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().fold(T::neg_infinity(), |m, &a| m.max(a));
    let e: Vec<T> = row.iter().map(|&a| (a - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / s).collect()
}
