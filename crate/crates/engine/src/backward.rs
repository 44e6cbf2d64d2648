use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use crate::error::{EngineError, Result};
use crate::scalar::Scalar;
use crate::tape::{sigmoid, softmax_row, Label, NodeId, Op, Tape};
use crate::tensor::{gemm, MatView, Tensor};

/// Output of a replacement rule.
#[derive(Clone, Debug, PartialEq)]
pub struct Replacement<T> {
    pub value: Vec<T>,
    /// The rule declined to act; `value` is the incoming adjoint unchanged.
    pub skipped: bool,
}

pub type ReplacementFn<T> = dyn Fn(&[T]) -> Replacement<T> + Send + Sync;

#[derive(Clone)]
pub enum ReplacementRule<T> {
    /// Overwrite the row with a constant vector.
    Fixed(Vec<T>),
    /// Overwrite the row with a function of the incoming adjoint row.
    Map(Arc<ReplacementFn<T>>),
}

impl<T: fmt::Debug> fmt::Debug for ReplacementRule<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed(v) => f.debug_tuple("Fixed").field(v).finish(),
            Self::Map(_) => f.write_str("Map(..)"),
        }
    }
}

/// Substitute row `row` of the adjoint arriving at `label`.
#[derive(Clone, Debug)]
pub struct GradReplacement<T> {
    pub label: Label,
    pub row: usize,
    pub rule: ReplacementRule<T>,
}

/// Backward-pass interception rules. The default value leaves the adjoint
/// computation untouched.
#[derive(Clone, Debug, Default)]
pub struct HookSet<T> {
    /// Factor applied to the adjoint entering every residual branch
    /// (`ResidualAdd`'s branch operand). The skip operand is never scaled.
    pub residual_branch_scale: Option<T>,
    pub grad_replacements: Vec<GradReplacement<T>>,
}

impl<T: Scalar> HookSet<T> {
    pub fn empty() -> Self {
        Self {
            residual_branch_scale: None,
            grad_replacements: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.residual_branch_scale.is_none() && self.grad_replacements.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReplacementEvent {
    pub label: Label,
    pub row: usize,
    pub skipped: bool,
}

/// Adjoints produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    adjoints: Vec<Option<Tensor<T>>>,
    labels: BTreeMap<Label, NodeId>,
    captured: BTreeMap<NodeId, Vec<Option<Tensor<T>>>>,
    events: Vec<ReplacementEvent>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of a node after all hooks were applied; `None` if no gradient
    /// reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.adjoints.get(id).and_then(Option::as_ref)
    }

    pub fn by_label(&self, label: Label) -> Option<&Tensor<T>> {
        self.labels.get(&label).and_then(|&id| self.get(id))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.adjoints.get_mut(id).and_then(Option::take)
    }

    /// Per-input contributions a captured node sent during backward, in the
    /// node's input order.
    pub fn captured(&self, id: NodeId) -> Option<&[Option<Tensor<T>>]> {
        self.captured.get(&id).map(Vec::as_slice)
    }

    pub fn events(&self) -> &[ReplacementEvent] {
        &self.events
    }
}

impl<T: Scalar> Tape<T> {
    /// Reverse-mode pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId, hooks: &HookSet<T>) -> Result<Gradients<T>> {
        let v = self.nodes.get(loss).ok_or(EngineError::UnknownNode(loss))?;
        if !v.value.is_scalar() {
            return Err(EngineError::NonScalarLoss(v.value.shape().to_vec()));
        }
        let seed = Tensor::new(v.value.shape().to_vec(), vec![T::one()])?;
        self.backward_from(&[(loss, seed)], hooks, &[])
    }

    /// Reverse-mode pass seeded with arbitrary adjoints. Only nodes at or
    /// below the highest seeded node are visited. For every node in
    /// `capture`, the contribution it sends to each of its inputs is kept.
    pub fn backward_from(
        &self,
        seeds: &[(NodeId, Tensor<T>)],
        hooks: &HookSet<T>,
        capture: &[NodeId],
    ) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        let mut adjoints: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut top = 0;
        for (id, seed) in seeds {
            let node = self.nodes.get(*id).ok_or(EngineError::UnknownNode(*id))?;
            node.value.check_same("backward seed", seed)?;
            accumulate(&mut adjoints, *id, seed.clone());
            top = top.max(*id + 1);
        }

        let mut by_node: BTreeMap<NodeId, Vec<&GradReplacement<T>>> = BTreeMap::new();
        for rep in &hooks.grad_replacements {
            let id = self
                .node_of(rep.label)
                .ok_or(EngineError::UnknownLabel(rep.label))?;
            let value = &self.nodes[id].value;
            if value.shape().len() != 2 || rep.row >= value.rows() {
                return Err(EngineError::HookRow {
                    label: rep.label,
                    row: rep.row,
                    rows: value.rows(),
                });
            }
            if let ReplacementRule::Fixed(v) = &rep.rule {
                if v.len() != value.cols() {
                    return Err(EngineError::HookWidth {
                        label: rep.label,
                        got: v.len(),
                        expected: value.cols(),
                    });
                }
            }
            by_node.entry(id).or_default().push(rep);
        }
        let capture: BTreeSet<NodeId> = capture.iter().copied().collect();
        let mut captured = BTreeMap::new();
        let mut events = Vec::new();

        for id in (0..top).rev() {
            if let Some(reps) = by_node.get(&id) {
                let shape = self.nodes[id].value.shape().to_vec();
                let g = adjoints[id].get_or_insert_with(|| Tensor::zeros(shape));
                for rep in reps {
                    let row = g.row_mut(rep.row);
                    let (value, skipped) = match &rep.rule {
                        ReplacementRule::Fixed(v) => (v.clone(), false),
                        ReplacementRule::Map(f) => {
                            let r = f(row);
                            (r.value, r.skipped)
                        }
                    };
                    if value.len() != row.len() {
                        return Err(EngineError::HookWidth {
                            label: rep.label,
                            got: value.len(),
                            expected: row.len(),
                        });
                    }
                    row.copy_from_slice(&value);
                    events.push(ReplacementEvent {
                        label: rep.label,
                        row: rep.row,
                        skipped,
                    });
                }
            }
            let Some(g) = adjoints[id].take() else {
                continue;
            };
            if !g.is_finite() {
                return Err(EngineError::NonFinite {
                    node: format!("adjoint of {:?}#{id}", self.nodes[id].op.kind()),
                });
            }
            let contributions = self.node_vjp(id, &g, hooks);
            if capture.contains(&id) {
                captured.insert(id, contributions.iter().map(|c| c.1.clone()).collect());
            }
            for (input, c) in contributions {
                if let Some(c) = c {
                    accumulate(&mut adjoints, input, c);
                }
            }
            adjoints[id] = Some(g);
        }

        Ok(Gradients {
            adjoints,
            labels: self.labels.clone(),
            captured,
            events,
        })
    }

    /// Vector-Jacobian products of one node, one entry per input. Inputs that
    /// do not require gradients get `None`.
    fn node_vjp(
        &self,
        id: NodeId,
        g: &Tensor<T>,
        hooks: &HookSet<T>,
    ) -> Vec<(NodeId, Option<Tensor<T>>)> {
        let node = &self.nodes[id];
        let wants = |i: NodeId| self.nodes[i].requires_grad;
        let val = |i: NodeId| self.nodes[i].value.as_ref();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (val(*a), val(*b));
                let da = wants(*a).then(|| {
                    // dA = G B^T, or G B when the forward used B^T
                    let mut out = vec![T::zero(); va.numel()];
                    gemm(
                        MatView::of(g, false),
                        MatView::of(vb, !trans_b),
                        &mut out,
                        T::zero(),
                    );
                    Tensor::new(va.shape().to_vec(), out).expect("matmul da shape")
                });
                let db = wants(*b).then(|| {
                    let mut out = vec![T::zero(); vb.numel()];
                    if *trans_b {
                        gemm(
                            MatView::of(g, true),
                            MatView::of(va, false),
                            &mut out,
                            T::zero(),
                        );
                    } else {
                        gemm(
                            MatView::of(va, true),
                            MatView::of(g, false),
                            &mut out,
                            T::zero(),
                        );
                    }
                    Tensor::new(vb.shape().to_vec(), out).expect("matmul db shape")
                });
                vec![(*a, da), (*b, db)]
            }
            Op::Add { a, b } => vec![
                (*a, wants(*a).then(|| g.clone())),
                (*b, wants(*b).then(|| g.clone())),
            ],
            Op::ResidualAdd { skip, branch } => {
                let db = wants(*branch).then(|| match hooks.residual_branch_scale {
                    Some(gamma) => g.scaled(gamma),
                    None => g.clone(),
                });
                vec![(*skip, wants(*skip).then(|| g.clone())), (*branch, db)]
            }
            Op::Scale { x, factor } => vec![(*x, wants(*x).then(|| g.scaled(*factor)))],
            Op::SliceRows { x, start } => {
                let dx = wants(*x).then(|| {
                    let mut out = Tensor::zeros(val(*x).shape().to_vec());
                    let c = g.cols();
                    out.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                    out
                });
                vec![(*x, dx)]
            }
            Op::SliceCols { x, start } => {
                let dx = wants(*x).then(|| {
                    let mut out = Tensor::zeros(val(*x).shape().to_vec());
                    let w = g.cols();
                    for r in 0..g.rows() {
                        out.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                    }
                    out
                });
                vec![(*x, dx)]
            }
            Op::ConcatCols { parts } => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let w = val(p).cols();
                        let d = wants(p).then(|| {
                            let mut out = Tensor::zeros(val(p).shape().to_vec());
                            for r in 0..g.rows() {
                                out.row_mut(r)
                                    .copy_from_slice(&g.row(r)[offset..offset + w]);
                            }
                            out
                        });
                        offset += w;
                        (p, d)
                    })
                    .collect()
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (vx, vg) = (val(*x), val(*gain));
                let d = vx.cols();
                let dt = T::of(d as f64);
                let gain_v = vg.data();
                let dx = wants(*x).then(|| {
                    let mut out = Tensor::zeros(vx.shape().to_vec());
                    for r in 0..vx.rows() {
                        let (xr, gr, inv) = (vx.row(r), g.row(r), inv_rms[r]);
                        let proj = (0..d).fold(T::zero(), |acc, j| acc + gr[j] * gain_v[j] * xr[j]);
                        let coef = inv * inv * inv * proj / dt;
                        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                            *o = inv * gr[j] * gain_v[j] - coef * xr[j];
                        }
                    }
                    out
                });
                let dg = wants(*gain).then(|| {
                    let mut out = vec![T::zero(); d];
                    for r in 0..vx.rows() {
                        let (xr, gr, inv) = (vx.row(r), g.row(r), inv_rms[r]);
                        for j in 0..d {
                            out[j] = out[j] + gr[j] * xr[j] * inv;
                        }
                    }
                    Tensor::new(vg.shape().to_vec(), out).expect("rms gain shape")
                });
                vec![(*x, dx), (*gain, dg)]
            }
            Op::CausalSoftmax { x, scale } => {
                let y = node.value.as_ref();
                let dx = wants(*x).then(|| {
                    let mut out = Tensor::zeros(y.shape().to_vec());
                    for i in 0..y.rows() {
                        let (yr, gr) = (&y.row(i)[..=i], &g.row(i)[..=i]);
                        let s = yr
                            .iter()
                            .zip(gr)
                            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                        for (j, o) in out.row_mut(i)[..=i].iter_mut().enumerate() {
                            *o = *scale * yr[j] * (gr[j] - s);
                        }
                    }
                    out
                });
                vec![(*x, dx)]
            }
            Op::SwiGlu { gate, up } => {
                let (va, vb) = (val(*gate), val(*up));
                let dgate = wants(*gate).then(|| {
                    let data = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .zip(g.data())
                        .map(|((&a, &b), &gg)| {
                            let s = sigmoid(a);
                            gg * b * s * (T::one() + a * (T::one() - s))
                        })
                        .collect();
                    Tensor::new(va.shape().to_vec(), data).expect("swiglu shape")
                });
                let dup = wants(*up).then(|| {
                    let data = va
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&a, &gg)| gg * a * sigmoid(a))
                        .collect();
                    Tensor::new(vb.shape().to_vec(), data).expect("swiglu shape")
                });
                vec![(*gate, dgate), (*up, dup)]
            }
            Op::CrossEntropy { logits, targets } => {
                let vl = val(*logits);
                let dl = wants(*logits).then(|| {
                    let mut out = Tensor::zeros(vl.shape().to_vec());
                    let w = g.item() / T::of(targets.len() as f64);
                    for &(r, t) in targets {
                        let p = softmax_row(vl.row(r));
                        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            *o = *o + w * (p[j] - onehot);
                        }
                    }
                    out
                });
                vec![(*logits, dl)]
            }
        }
    }
}

fn accumulate<T: Scalar>(adjoints: &mut [Option<Tensor<T>>], id: NodeId, c: Tensor<T>) {
    match &mut adjoints[id] {
        Some(existing) => existing.add_assign(&c),
        slot @ None => *slot = Some(c),
    }
}
