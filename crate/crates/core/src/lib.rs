//! Toy decoder-only transformer, gradient surgery on its backward pass and
//! greedy coordinate-descent suffix attacks built on top.

pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod gradient;
pub mod layout;
pub mod model;
pub mod optimizer;
pub mod surgery;
pub mod toylab;

pub use diagnostics::{
    branch_effect_trace, branch_gradient_cosines, branch_gradient_terms, pearson, projection_pcc,
    Alteration, BlockGradientReport, BranchEffectReport, PccColumn, PccReport,
};
pub use error::{LabError, Result};
pub use gradient::{gradient_pass, one_hot_gradient, OneHotGradient};
pub use layout::{PromptLayout, PromptParts, TokenId};
pub use model::{
    adversarial_loss, argmax, ActivationCache, Branch, BranchPatch, ForwardInput, ForwardOptions,
    LossReport, Model, ModelConfig,
};
pub use optimizer::{
    run_attack, run_universal, AttackConfig, AttackContext, AttackResult, AttackState,
    IterationLog, IterationTrace, Method, UniversalResult,
};
pub use surgery::{
    compute_guide, lila_dagger_replace, lila_objective, make_hooks, Beta, DirectionalGuide,
    Objective, SurgeryConfig, SurgeryMode,
};
