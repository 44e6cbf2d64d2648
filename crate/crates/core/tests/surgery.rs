mod common;

use common::*;
use suffixlab_core::gradcheck::{check_mode, GRADCHECK_TOL};
use suffixlab_core::{
    compute_guide, lila_objective, make_hooks, one_hot_gradient, Beta, DirectionalGuide, Model,
    PromptLayout, SurgeryConfig, SurgeryMode,
};
use suffixlab_engine::Label;

fn guide_for(model: &Model<f64>, l: &PromptLayout, seed: u64) -> DirectionalGuide<f64> {
    let reference = l.with_suffix(layout(seed).suffix()).unwrap();
    let (r, _) = model.forward_cached(&reference).unwrap();
    let (c, _) = model.forward_cached(l).unwrap();
    let n = l.last_prompt_position();
    compute_guide(&c, r.h(1, n), 1, n).unwrap()
}

fn surgery(mode: SurgeryMode) -> SurgeryConfig {
    let mut s = SurgeryConfig::new(mode, 2);
    s.layer = 1;
    s
}

fn all_entries(l: &PromptLayout) -> Vec<(usize, usize)> {
    (0..l.suffix().len())
        .flat_map(|r| (0..32).map(move |t| (r, t)))
        .collect()
}

#[test]
fn lsgm_gamma_one_is_plain_gradient() {
    let model = tiny_model(1);
    let l = layout(1);
    let base = one_hot_gradient(&model, &l, &SurgeryConfig::none(), None).unwrap();
    let mut s = surgery(SurgeryMode::Lsgm);
    s.gamma = 1.0;
    let g = one_hot_gradient(&model, &l, &s, None).unwrap();
    assert_eq!(base.grad.data(), g.grad.data());
}

#[test]
fn lila_dagger_beta_zero_is_plain_gradient() {
    let model = tiny_model(2);
    let l = layout(2);
    let guide = guide_for(&model, &l, 99);
    assert!(guide.norm() > 0.0);
    let base = one_hot_gradient(&model, &l, &SurgeryConfig::none(), None).unwrap();
    let mut s = surgery(SurgeryMode::LilaDagger);
    s.beta = Beta::Finite(0.0);
    let g = one_hot_gradient(&model, &l, &s, Some(&guide)).unwrap();
    for (a, b) in base.grad.data().iter().zip(g.grad.data()) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn lsgm_matches_gamma_unrolled_forward() {
    let model = tiny_model(3);
    for (seed, gamma) in [(3, 0.5), (4, 0.0), (5, 0.25)] {
        let l = layout(seed);
        let mut s = surgery(SurgeryMode::Lsgm);
        s.gamma = gamma;
        let r = check_mode(&model, &l, &s, None, &all_entries(&l)).unwrap();
        assert!(
            r.max_rel_error < GRADCHECK_TOL,
            "gamma {gamma}: {}",
            r.max_rel_error
        );
    }
}

#[test]
fn lila_matches_projection_finite_differences() {
    let model = tiny_model(4);
    let l = layout(6);
    let guide = guide_for(&model, &l, 77);
    let r = check_mode(
        &model,
        &l,
        &surgery(SurgeryMode::Lila),
        Some(&guide),
        &all_entries(&l),
    )
    .unwrap();
    assert!(r.max_rel_error < GRADCHECK_TOL, "{}", r.max_rel_error);
}

#[test]
fn lila_with_zero_guide_gives_zero_gradient() {
    let model = tiny_model(5);
    let l = layout(7);
    let guide = guide_for(&model, &l, 7);
    assert_eq!(guide.norm(), 0.0);
    let g = one_hot_gradient(&model, &l, &surgery(SurgeryMode::Lila), Some(&guide)).unwrap();
    assert!(g.grad.data().iter().all(|&x| x == 0.0));
}

#[test]
fn lila_with_orthogonal_guide_has_zero_objective_but_moves() {
    let model = tiny_model(6);
    let l = layout(8);
    let (cache, _) = model.forward_cached(&l).unwrap();
    let n = l.last_prompt_position();
    let h = cache.h(1, n).to_vec();
    // v orthogonal to h: swap two coordinates with a sign flip
    let mut v = vec![0.0; h.len()];
    v[0] = h[1];
    v[1] = -h[0];
    let guide = DirectionalGuide {
        v,
        reference_h0: h.clone(),
        layer: 1,
        position: n,
    };
    assert!(lila_objective(&cache, &guide).abs() < 1e-12);
    let g = one_hot_gradient(&model, &l, &surgery(SurgeryMode::Lila), Some(&guide)).unwrap();
    assert!(g.norm() > 1e-6);
}

#[test]
fn lila_dagger_only_touches_guide_row() {
    let model = tiny_model(7);
    let l = layout(9);
    let guide = guide_for(&model, &l, 55);
    let n = l.last_prompt_position();
    let adjoints = |s: &SurgeryConfig, g: Option<&DirectionalGuide<f64>>| {
        let (_, mut tape) = model.forward_cached(&l).unwrap();
        let (hooks, _) = make_hooks(s, g).unwrap();
        let logits = tape.node_of(Label::Logits).unwrap();
        let loss = tape.cross_entropy(logits, &l.loss_targets()).unwrap();
        let grads = tape.backward(loss, &hooks).unwrap();
        (
            grads.by_label(Label::Resid(1)).unwrap().clone(),
            grads.by_label(Label::Resid(2)).unwrap().clone(),
        )
    };
    let (plain1, plain2) = adjoints(&SurgeryConfig::none(), None);
    let (hooked1, hooked2) = adjoints(&surgery(SurgeryMode::LilaDagger), Some(&guide));
    assert_eq!(plain2.data(), hooked2.data());
    for o in 0..l.len() {
        if o == n {
            assert_ne!(plain1.row(o), hooked1.row(o));
            let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((norm(plain1.row(o)) - norm(hooked1.row(o))).abs() < 1e-12);
        } else {
            assert_eq!(plain1.row(o), hooked1.row(o), "row {o}");
        }
    }
}

#[test]
fn lsgm_lila_dagger_changes_every_suffix_row() {
    let model = tiny_model(8);
    let l = layout(10);
    let guide = guide_for(&model, &l, 66);
    let base = one_hot_gradient(&model, &l, &SurgeryConfig::none(), None).unwrap();
    let g = one_hot_gradient(
        &model,
        &l,
        &surgery(SurgeryMode::LsgmLilaDagger),
        Some(&guide),
    )
    .unwrap();
    for r in 0..l.suffix().len() {
        assert_ne!(base.grad.row(r), g.grad.row(r), "suffix row {r}");
    }
}

#[test]
fn guide_modes_require_a_guide() {
    let model = tiny_model(9);
    let l = layout(11);
    for mode in [
        SurgeryMode::Lila,
        SurgeryMode::LilaDagger,
        SurgeryMode::LsgmLilaDagger,
    ] {
        assert!(one_hot_gradient(&model, &l, &surgery(mode), None).is_err());
    }
}

#[test]
fn degenerate_guide_skips_replacement() {
    let model = tiny_model(10);
    let l = layout(12);
    let guide = guide_for(&model, &l, 12);
    let base = one_hot_gradient(&model, &l, &SurgeryConfig::none(), None).unwrap();
    let g = one_hot_gradient(&model, &l, &surgery(SurgeryMode::LilaDagger), Some(&guide)).unwrap();
    assert!(g.replacement_skipped);
    assert_eq!(base.grad.data(), g.grad.data());
}

#[test]
fn cli_names_round_trip() {
    for mode in SurgeryMode::ALL {
        assert_eq!(mode.cli_name().parse::<SurgeryMode>().unwrap(), mode);
    }
    assert_eq!("inf".parse::<Beta>().unwrap(), Beta::Infinite);
}
