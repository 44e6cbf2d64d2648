use suffixlab_engine::{Label, Scalar, Tensor};

use crate::error::{LabError, Result};
use crate::layout::PromptLayout;
use crate::model::{adversarial_loss, ActivationCache, LossReport, Model};
use crate::surgery::{make_hooks, DirectionalGuide, Objective, SurgeryConfig};

/// Loss derivatives with respect to the one-hot rows of the suffix tokens.
#[derive(Clone, Debug)]
pub struct OneHotGradient<T> {
    /// Absolute positions of the suffix tokens, one per row.
    pub positions: Vec<usize>,
    /// `|suffix| x |V|`.
    pub grad: Tensor<T>,
    /// The guide replacement declined to act (degenerate denominator).
    pub replacement_skipped: bool,
}

impl<T: Scalar> OneHotGradient<T> {
    pub fn norm(&self) -> T {
        self.grad.norm()
    }
}

/// Forward plus surgery-modified backward. Also returns the cache and the
/// cross-entropy report of the differentiated prompt.
pub fn gradient_pass<T: Scalar>(
    model: &Model<T>,
    layout: &PromptLayout,
    surgery: &SurgeryConfig,
    guide: Option<&DirectionalGuide<T>>,
) -> Result<(OneHotGradient<T>, ActivationCache<T>, LossReport<T>)> {
    surgery.validate(model.config().n_layers)?;
    let (cache, mut tape) = model.forward_cached(layout)?;
    let report = adversarial_loss(&cache, layout);
    let (hooks, objective) = make_hooks(surgery, guide)?;
    let grads = match objective {
        Objective::CrossEntropy => {
            let logits = tape.node_of(Label::Logits).expect("model labels logits");
            let loss = tape.cross_entropy(logits, &layout.loss_targets())?;
            tape.backward(loss, &hooks)?
        }
        Objective::NegatedProjection { layer, position, v } => {
            let node = tape
                .node_of(Label::Resid(layer))
                .ok_or_else(|| LabError::Config(format!("no residual stream at layer {layer}")))?;
            let mut seed = Tensor::zeros(tape.value(node).shape().to_vec());
            for (s, &x) in seed.row_mut(position).iter_mut().zip(&v) {
                *s = -x;
            }
            tape.backward_from(&[(node, seed)], &hooks, &[])?
        }
    };
    let vocab = model.config().vocab_size;
    let positions: Vec<usize> = layout.suffix_span().collect();
    let mut rows = Vec::with_capacity(positions.len() * vocab);
    match grads.by_label(Label::OneHotInput) {
        Some(full) => {
            for &p in &positions {
                rows.extend_from_slice(full.row(p));
            }
        }
        None => rows.resize(positions.len() * vocab, T::zero()),
    }
    let grad = Tensor::new(vec![positions.len(), vocab], rows)?;
    let replacement_skipped = grads.events().iter().any(|e| e.skipped);
    Ok((
        OneHotGradient {
            positions,
            grad,
            replacement_skipped,
        },
        cache,
        report,
    ))
}

/// Gradient of the surgery mode's objective with respect to the suffix's
/// one-hot rows.
pub fn one_hot_gradient<T: Scalar>(
    model: &Model<T>,
    layout: &PromptLayout,
    surgery: &SurgeryConfig,
    guide: Option<&DirectionalGuide<T>>,
) -> Result<OneHotGradient<T>> {
    gradient_pass(model, layout, surgery, guide).map(|(g, _, _)| g)
}
