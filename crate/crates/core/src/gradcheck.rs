//! Finite-difference checks of the one-hot gradient for every mode whose
//! gradient is the exact derivative of some forward function.
//!
//! * `none`: the target cross-entropy.
//! * `lsgm`: the cross-entropy of a forward pass in which every block is
//!   `z + gamma R(z) + (1 - gamma) R(z0)` with `R(z0)` frozen at the
//!   evaluation point.
//! * `lila`: `-(v . h_{r,n})`.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use suffixlab_engine::{finite_diff_entries, Tensor};

use crate::error::{LabError, Result};
use crate::gradient::one_hot_gradient;
use crate::layout::PromptLayout;
use crate::model::{adversarial_loss, ForwardInput, ForwardOptions, Model};
use crate::surgery::{compute_guide, DirectionalGuide, SurgeryConfig, SurgeryMode};

pub const FD_STEP: f64 = 1e-6;
/// Magnitudes below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Modes whose gradient has a finite-difference oracle.
pub const CHECKABLE_MODES: [SurgeryMode; 3] =
    [SurgeryMode::None, SurgeryMode::Lsgm, SurgeryMode::Lila];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub mode: SurgeryMode,
    pub entries: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOL
    }
}

/// Compare the analytic one-hot gradient of `mode` with central differences
/// on the chosen `(suffix row, token)` entries.
pub fn check_mode(
    model: &Model<f64>,
    layout: &PromptLayout,
    surgery: &SurgeryConfig,
    guide: Option<&DirectionalGuide<f64>>,
    entries: &[(usize, usize)],
) -> Result<GradCheck> {
    let vocab = model.config().vocab_size;
    let analytic = one_hot_gradient(model, layout, surgery, guide)?;
    let x0 = Tensor::one_hot(layout.tokens(), vocab)?;
    let suffix_start = layout.suffix_span().start;
    let flat: Vec<usize> = entries
        .iter()
        .map(|&(r, t)| (suffix_start + r) * vocab + t)
        .collect();

    let frozen = match surgery.mode {
        SurgeryMode::Lsgm => {
            let (cache, _) = model.forward_cached(layout)?;
            Some((surgery.gamma, cache.branch_resid.clone()))
        }
        SurgeryMode::None | SurgeryMode::Lila => None,
        other => {
            return Err(LabError::Config(format!(
                "mode {other} has no finite-difference oracle"
            )))
        }
    };
    let opts = ForwardOptions {
        frozen_branches: frozen,
        ..ForwardOptions::default()
    };
    let mut failure = None;
    let objective = |x: &Tensor<f64>| -> f64 {
        let run = || -> Result<f64> {
            let (cache, _) = model.forward(ForwardInput::Relaxed(x), &opts)?;
            Ok(match (surgery.mode, guide) {
                (SurgeryMode::Lila, Some(g)) => -crate::surgery::lila_objective(&cache, g),
                _ => adversarial_loss(&cache, layout).total,
            })
        };
        run().unwrap_or_else(|e| {
            failure.get_or_insert(e);
            f64::NAN
        })
    };
    let numeric = finite_diff_entries(objective, &x0, FD_STEP, &flat);
    if let Some(e) = failure {
        return Err(e);
    }
    let numeric = numeric?;
    let max_rel_error = entries
        .iter()
        .zip(&numeric)
        .map(|(&(r, t), &fd)| relative_error(analytic.grad.row(r)[t], fd))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        mode: surgery.mode,
        entries: entries.len(),
        max_rel_error,
    })
}

/// Random layout fitting the model: prefix, query, suffix, connector and
/// target of the given lengths.
pub fn random_layout(vocab: usize, lens: [usize; 5], rng: &mut ChaCha8Rng) -> Result<PromptLayout> {
    let mut part = |n: usize| -> Vec<usize> { (0..n).map(|_| rng.gen_range(0..vocab)).collect() };
    let (p, q, s, c, t) = (
        part(lens[0]),
        part(lens[1]),
        part(lens[2]),
        part(lens[3]),
        part(lens[4]),
    );
    PromptLayout::assemble(&p, &q, &s, &c, &t)
}

/// Every checkable mode on `trials` random prompts. At most `max_entries`
/// suffix entries are sampled per prompt.
pub fn gradcheck(
    model: &Model<f64>,
    trials: usize,
    lens: [usize; 5],
    max_entries: usize,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GradCheck>> {
    let cfg = model.config();
    let vocab = cfg.vocab_size;
    let mut worst: Vec<GradCheck> = CHECKABLE_MODES
        .iter()
        .map(|&mode| GradCheck {
            mode,
            entries: 0,
            max_rel_error: 0.0,
        })
        .collect();
    for _ in 0..trials {
        let layout = random_layout(vocab, lens, rng)?;
        let reference = random_layout(vocab, lens, rng)?;
        let reference = layout.with_suffix(reference.suffix())?;
        let total = lens[2] * vocab;
        let entries: Vec<(usize, usize)> = sample(rng, total, max_entries.min(total))
            .into_iter()
            .map(|i| (i / vocab, i % vocab))
            .collect();
        let layer = cfg.mid_layer();
        let n = layout.last_prompt_position();
        let (ref_cache, _) = model.forward_cached(&reference)?;
        let (cur_cache, _) = model.forward_cached(&layout)?;
        let guide = compute_guide(&cur_cache, ref_cache.h(layer, n), layer, n)?;
        for (slot, &mode) in worst.iter_mut().zip(CHECKABLE_MODES.iter()) {
            let mut surgery = SurgeryConfig::new(mode, cfg.n_layers);
            surgery.gamma = gamma;
            let g = mode.needs_guide().then_some(&guide);
            let r = check_mode(model, &layout, &surgery, g, &entries)?;
            slot.entries += r.entries;
            slot.max_rel_error = slot.max_rel_error.max(r.max_rel_error);
        }
    }
    Ok(worst)
}
