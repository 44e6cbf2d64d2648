//! Analysis procedures: per-block cosine between the skip and residual
//! gradient terms, causal branch tracing, and projection/loss correlations.
//!
//! None of these touch attack state; every random draw comes from the
//! caller's generator and is made sequentially before parallel evaluation.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use suffixlab_engine::{cosine_similarity, HookSet, Label, Scalar, Tensor};

use crate::error::{LabError, Result};
use crate::layout::PromptLayout;
use crate::model::{adversarial_loss, Branch, BranchPatch, ForwardInput, ForwardOptions, Model};

/// Variances below this make a correlation undefined.
pub const VARIANCE_EPS: f64 = 1e-24;

/// Sample Pearson correlation; `None` when either input is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() {
        return Err(LabError::ShapeMismatch {
            name: "pearson inputs".into(),
            got: vec![ys.len()],
            expected: vec![xs.len()],
        });
    }
    if xs.len() < 2 {
        return Err(LabError::Config(
            "pearson needs at least two samples".into(),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx / n < VARIANCE_EPS || syy / n < VARIANCE_EPS {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>().to_f64()
}

/// Both summands of the adjoint at a block input.
#[derive(Clone, Debug)]
pub struct BlockTerms<T> {
    /// `dL/dz_{m+1}`, passed through the skip connection.
    pub skip: Tensor<T>,
    /// `(dR_m/dz_m)^T dL/dz_{m+1}`.
    pub residual: Tensor<T>,
    /// `dL/dz_m` as accumulated by the backward pass.
    pub stream: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockGradientReport {
    /// Entry `m - 1` is block `m`; `None` when either term vanishes.
    pub cosines: Vec<Option<f64>>,
}

/// Plain cross-entropy backward with both branch terms of every block kept.
pub fn branch_gradient_terms<T: Scalar>(
    model: &Model<T>,
    layout: &PromptLayout,
) -> Result<Vec<BlockTerms<T>>> {
    let (_, mut tape) = model.forward_cached(layout)?;
    let n_blocks = model.config().n_blocks();
    let logits = tape.node_of(Label::Logits).expect("model labels logits");
    let loss = tape.cross_entropy(logits, &layout.loss_targets())?;
    let entries: Vec<_> = (1..=n_blocks)
        .map(|m| {
            tape.node_of(Label::BranchEntry(m))
                .expect("model labels branch entries")
        })
        .collect();
    let seed = Tensor::scalar(T::one());
    let grads = tape.backward_from(&[(loss, seed)], &HookSet::empty(), &entries)?;
    let adjoint = |label: Label| -> Result<Tensor<T>> {
        grads.by_label(label).cloned().ok_or(LabError::Engine(
            suffixlab_engine::EngineError::UnknownLabel(label),
        ))
    };
    (1..=n_blocks)
        .map(|m| {
            let skip = adjoint(Label::BlockOut(m))?;
            let residual = grads
                .captured(entries[m - 1])
                .and_then(|c| c[0].clone())
                .unwrap_or_else(|| Tensor::zeros(skip.shape().to_vec()));
            let input = if m == 1 {
                Label::Resid(0)
            } else {
                Label::BlockOut(m - 1)
            };
            Ok(BlockTerms {
                skip,
                residual,
                stream: adjoint(input)?,
            })
        })
        .collect()
}

/// Cosine between the skip and residual gradient terms at every block,
/// flattened over positions and width.
pub fn branch_gradient_cosines<T: Scalar>(
    model: &Model<T>,
    layout: &PromptLayout,
) -> Result<BlockGradientReport> {
    let cosines = branch_gradient_terms(model, layout)?
        .iter()
        .map(|t| Ok(cosine_similarity(&t.skip, &t.residual)?.map(Scalar::to_f64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockGradientReport { cosines })
}

/// How the perturbed prompt of a tracing or correlation sample is made.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alteration {
    /// One uniformly chosen suffix token to a uniform other token.
    SuffixToken,
    /// One uniformly chosen query token to a uniform other token.
    QueryToken,
    /// The original prompt, unchanged.
    Identity,
}

/// Draw one perturbed copy of `layout`.
pub fn alter(
    layout: &PromptLayout,
    how: Alteration,
    vocab: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PromptLayout> {
    let span = match how {
        Alteration::Identity => return Ok(layout.clone()),
        Alteration::SuffixToken => layout.suffix_span(),
        Alteration::QueryToken => layout.query_span(),
    };
    if span.is_empty() {
        return Err(LabError::Layout("nothing to alter in an empty span".into()));
    }
    let pos = rng.gen_range(span);
    let incumbent = layout.tokens()[pos];
    // uniform over the vocabulary without the incumbent
    let mut tok = rng.gen_range(0..vocab - 1);
    if tok >= incumbent {
        tok += 1;
    }
    Ok(layout.with_token(pos, tok))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchEffect {
    pub block: usize,
    pub branch: Branch,
    pub mean_effect: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchEffectReport {
    /// Block-major, skip before residual.
    pub effects: Vec<BranchEffect>,
}

/// Causal branch tracing: patch each block's skip or residual operand with
/// its value under a perturbed prompt and record the change in loss.
pub fn branch_effect_trace<T: Scalar>(
    model: &Model<T>,
    layout: &PromptLayout,
    samples: usize,
    how: Alteration,
    rng: &mut ChaCha8Rng,
) -> Result<BranchEffectReport> {
    if samples == 0 {
        return Err(LabError::Config("tracing needs at least one sample".into()));
    }
    let vocab = model.config().vocab_size;
    let n_blocks = model.config().n_blocks();
    let altered = (0..samples)
        .map(|_| alter(layout, how, vocab, rng))
        .collect::<Result<Vec<_>>>()?;
    let clean = model.loss(layout)?;
    let per_sample = altered
        .par_iter()
        .map(|alt| -> Result<Vec<T>> {
            let (cache, _) = model.forward_cached(alt)?;
            let mut deltas = Vec::with_capacity(2 * n_blocks);
            for m in 1..=n_blocks {
                for (branch, value) in [
                    (Branch::Skip, &cache.branch_skip[m - 1]),
                    (Branch::Residual, &cache.branch_resid[m - 1]),
                ] {
                    let opts = ForwardOptions {
                        patches: vec![BranchPatch {
                            block: m,
                            branch,
                            value: Arc::clone(value),
                        }],
                        ..ForwardOptions::default()
                    };
                    let (patched, _) =
                        model.forward(ForwardInput::Tokens(layout.tokens()), &opts)?;
                    deltas.push(adversarial_loss(&patched, layout).total - clean);
                }
            }
            Ok(deltas)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut effects = Vec::with_capacity(2 * n_blocks);
    for m in 1..=n_blocks {
        for (j, branch) in [Branch::Skip, Branch::Residual].into_iter().enumerate() {
            let idx = 2 * (m - 1) + j;
            let sum: f64 = per_sample.iter().map(|d| d[idx].to_f64()).sum();
            effects.push(BranchEffect {
                block: m,
                branch,
                mean_effect: sum / samples as f64,
                samples,
            });
        }
    }
    Ok(BranchEffectReport { effects })
}

/// Column of the correlation grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PccColumn {
    /// A suffix or connector position; paired with the full loss.
    Prompt(usize),
    /// A target position `o`; paired with the mean of `l_o` onward.
    Target(usize),
    /// All positions of `h_r` at once; paired with the full loss.
    Whole,
}

impl PccColumn {
    pub fn label(&self, layout: &PromptLayout) -> String {
        let suffix = layout.suffix_span();
        let connector = layout.connector_span();
        match *self {
            Self::Prompt(o) if suffix.contains(&o) => format!("adv{}", o - suffix.start + 1),
            Self::Prompt(o) => format!("conn{}", o - connector.start + 1),
            Self::Target(o) => format!("tgt{}", o - layout.last_prompt_position()),
            Self::Whole => "h".into(),
        }
    }
}

/// Most target positions given their own column.
pub const PCC_TARGET_COLUMNS: usize = 10;

/// Grid columns in order: suffix and connector positions, the first target
/// positions, then the whole representation.
pub fn pcc_columns(layout: &PromptLayout) -> Vec<PccColumn> {
    let n = layout.last_prompt_position();
    let mut cols: Vec<PccColumn> = (layout.suffix_span().start..=n)
        .map(PccColumn::Prompt)
        .collect();
    let last_loss = layout.len() - 2;
    let end = (n + PCC_TARGET_COLUMNS).min(last_loss);
    cols.extend((n + 1..=end).map(PccColumn::Target));
    cols.push(PccColumn::Whole);
    cols
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PccReport {
    /// Row `i` is layer `i + 1`.
    pub layers: usize,
    pub columns: Vec<PccColumn>,
    pub labels: Vec<String>,
    /// Negated correlation per (layer, column); `None` when undefined.
    pub neg_pcc: Vec<Vec<Option<f64>>>,
    pub samples: usize,
}

/// Raw (projection, loss) pairs per grid cell, `[layer][column][sample]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PccSamples {
    pub columns: Vec<PccColumn>,
    pub projections: Vec<Vec<Vec<f64>>>,
    pub losses: Vec<Vec<Vec<f64>>>,
}

/// Collect projection/loss pairs for the correlation grid. Guides are
/// `v_{r,o} = h_{r,o}(layout) - h_{r,o}(reference)`.
pub fn projection_samples<T: Scalar>(
    model: &Model<T>,
    layout: &PromptLayout,
    reference: &PromptLayout,
    samples: usize,
    how: Alteration,
    rng: &mut ChaCha8Rng,
) -> Result<PccSamples> {
    if samples < 2 {
        return Err(LabError::Config(
            "correlation needs at least two samples".into(),
        ));
    }
    if reference.len() != layout.len() {
        return Err(LabError::Layout(
            "reference prompt has a different length".into(),
        ));
    }
    let layers = model.config().n_layers;
    let vocab = model.config().vocab_size;
    let columns = pcc_columns(layout);
    let (current, _) = model.forward_cached(layout)?;
    let (base, _) = model.forward_cached(reference)?;
    let guides: Vec<Tensor<T>> = (1..=layers)
        .map(|r| current.resid(r).sub(base.resid(r)))
        .collect::<std::result::Result<_, _>>()?;
    let altered = (0..samples)
        .map(|_| alter(layout, how, vocab, rng))
        .collect::<Result<Vec<_>>>()?;

    // per sample: [layer][column] projection and [column] loss
    let rows = altered
        .par_iter()
        .map(|alt| -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
            let (cache, _) = model.forward_cached(alt)?;
            let report = adversarial_loss(&cache, alt);
            let n = alt.last_prompt_position();
            let losses = columns
                .iter()
                .map(|c| match *c {
                    PccColumn::Target(o) => {
                        let tail = &report.per_token[o - n..];
                        tail.iter().map(|&l| Scalar::to_f64(l)).sum::<f64>() / tail.len() as f64
                    }
                    _ => report.total.to_f64(),
                })
                .collect();
            let proj = (1..=layers)
                .map(|r| {
                    let h = cache.resid(r);
                    let v = &guides[r - 1];
                    columns
                        .iter()
                        .map(|c| match *c {
                            PccColumn::Prompt(o) | PccColumn::Target(o) => dot(v.row(o), h.row(o)),
                            PccColumn::Whole => dot(v.data(), h.data()),
                        })
                        .collect()
                })
                .collect();
            Ok((proj, losses))
        })
        .collect::<Result<Vec<_>>>()?;

    let projections = (0..layers)
        .map(|r| {
            (0..columns.len())
                .map(|c| rows.iter().map(|(p, _)| p[r][c]).collect())
                .collect()
        })
        .collect();
    let loss_col: Vec<Vec<f64>> = (0..columns.len())
        .map(|c| rows.iter().map(|(_, l)| l[c]).collect())
        .collect();
    Ok(PccSamples {
        columns,
        projections,
        losses: vec![loss_col; layers],
    })
}

/// Negated Pearson correlation between scalar projections and
/// position-restricted losses for every (layer, position) cell.
pub fn projection_pcc<T: Scalar>(
    model: &Model<T>,
    layout: &PromptLayout,
    reference: &PromptLayout,
    samples: usize,
    how: Alteration,
    rng: &mut ChaCha8Rng,
) -> Result<PccReport> {
    let raw = projection_samples(model, layout, reference, samples, how, rng)?;
    let neg_pcc = raw
        .projections
        .iter()
        .zip(&raw.losses)
        .map(|(pr, lr)| {
            pr.iter()
                .zip(lr)
                .map(|(p, l)| Ok(pearson(p, l)?.map(|c| -c)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PccReport {
        layers: model.config().n_layers,
        labels: raw.columns.iter().map(|c| c.label(layout)).collect(),
        columns: raw.columns,
        neg_pcc,
        samples,
    })
}
