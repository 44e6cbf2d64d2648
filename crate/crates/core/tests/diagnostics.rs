mod common;

use std::sync::Arc;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use suffixlab_core::diagnostics::{pcc_columns, projection_samples};
use suffixlab_core::{
    adversarial_loss, branch_effect_trace, branch_gradient_cosines, branch_gradient_terms, pearson,
    projection_pcc, Alteration, Branch, BranchPatch, ForwardInput, ForwardOptions, PccColumn,
};

#[test]
fn branch_terms_sum_to_stream_adjoint() {
    let model = tiny_model(1);
    for seed in 0..3 {
        let terms = branch_gradient_terms(&model, &layout(seed)).unwrap();
        assert_eq!(terms.len(), 4);
        for (m, t) in terms.iter().enumerate() {
            let sum = t.skip.add(&t.residual).unwrap();
            let err = sum.sub(&t.stream).unwrap().norm() / t.stream.norm();
            assert!(err < 1e-5, "block {}: {err}", m + 1);
        }
    }
}

#[test]
fn cosines_lie_in_unit_interval() {
    let model = tiny_model(2);
    let r = branch_gradient_cosines(&model, &layout(2)).unwrap();
    assert_eq!(r.cosines.len(), 4);
    for c in r.cosines.iter().flatten() {
        assert!((-1.0..=1.0).contains(c));
    }
}

#[test]
fn identical_alteration_has_zero_effect() {
    let model = tiny_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = branch_effect_trace(&model, &layout(3), 3, Alteration::Identity, &mut rng).unwrap();
    assert_eq!(r.effects.len(), 8);
    for e in &r.effects {
        assert_eq!(e.mean_effect, 0.0, "block {} {:?}", e.block, e.branch);
        assert_eq!(e.samples, 3);
    }
}

#[test]
fn random_alteration_effects_are_finite() {
    let model = tiny_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let r = branch_effect_trace(&model, &layout(4), 4, Alteration::SuffixToken, &mut rng).unwrap();
    assert!(r.effects.iter().all(|e| e.mean_effect.is_finite()));
    assert!(r.effects.iter().any(|e| e.mean_effect != 0.0));
}

/// Patching the skip operand of the last block: the final stream is the
/// patch plus the clean branch output, so the loss follows by hand.
#[test]
fn final_skip_patch_matches_hand_recomputation() {
    let model = tiny_model(5);
    let l = layout(5);
    let other = l.with_token(l.suffix_span().start, 0);
    let (clean, _) = model.forward_cached(&l).unwrap();
    let (alt, _) = model.forward_cached(&other).unwrap();
    let last = model.config().n_blocks();
    let patch = Arc::clone(&alt.branch_skip[last - 1]);
    let opts = ForwardOptions {
        patches: vec![BranchPatch {
            block: last,
            branch: Branch::Skip,
            value: Arc::clone(&patch),
        }],
        ..ForwardOptions::default()
    };
    let (patched, _) = model
        .forward(ForwardInput::Tokens(l.tokens()), &opts)
        .unwrap();
    let got = adversarial_loss(&patched, &l).total;

    let z = patch.add(&clean.branch_resid[last - 1]).unwrap();
    let params = model.params();
    let gain = params[params.len() - 2].data();
    let unembed = &params[params.len() - 1];
    let (d, v) = (16, 32);
    let mut want = 0.0;
    let rows = l.loss_targets();
    for &(o, t) in &rows {
        let row = z.row(o);
        let inv = 1.0 / (row.iter().map(|a| a * a).sum::<f64>() / d as f64 + 1e-6).sqrt();
        let logits: Vec<f64> = (0..v)
            .map(|j| {
                (0..d)
                    .map(|i| row[i] * inv * gain[i] * unembed.data()[i * v + j])
                    .sum()
            })
            .collect();
        let lse = logits.iter().map(|a| a.exp()).sum::<f64>().ln();
        want += lse - logits[t];
    }
    want /= rows.len() as f64;
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
}

#[test]
fn pcc_grid_shape_follows_layout() {
    let model = tiny_model(6);
    let l = layout(6);
    let reference = l.with_suffix(&[0; 5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let r = projection_pcc(&model, &l, &reference, 8, Alteration::SuffixToken, &mut rng).unwrap();
    // 5 suffix + 2 connector + min(10, target - 1) + whole
    let expected = 5 + 2 + 3 + 1;
    assert_eq!(r.columns.len(), expected);
    assert_eq!(r.neg_pcc.len(), 2);
    assert!(r.neg_pcc.iter().all(|row| row.len() == expected));
    assert_eq!(r.columns.last(), Some(&PccColumn::Whole));
    for c in r.neg_pcc.iter().flatten().flatten() {
        assert!((-1.0..=1.0).contains(c));
    }
}

#[test]
fn zero_guide_makes_every_cell_undefined() {
    let model = tiny_model(7);
    let l = layout(7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = projection_pcc(&model, &l, &l, 6, Alteration::SuffixToken, &mut rng).unwrap();
    assert!(r.neg_pcc.iter().flatten().all(|c| c.is_none()));
}

/// One-pass sums formula, independent of the two-pass implementation.
fn pearson_sums(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

#[test]
fn pcc_cells_match_independent_statistics() {
    let model = tiny_model(8);
    let l = layout(8);
    let reference = l.with_suffix(&[1; 5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let raw = projection_samples(
        &model,
        &l,
        &reference,
        16,
        Alteration::SuffixToken,
        &mut rng,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let report = projection_pcc(
        &model,
        &l,
        &reference,
        16,
        Alteration::SuffixToken,
        &mut rng,
    )
    .unwrap();
    assert_eq!(raw.columns, pcc_columns(&l));
    let mut checked = 0;
    for r in 0..2 {
        for c in 0..raw.columns.len() {
            if let Some(neg) = report.neg_pcc[r][c] {
                let want = pearson_sums(&raw.projections[r][c], &raw.losses[r][c]);
                assert!((neg + want).abs() < 1e-10);
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn pearson_hand_values() {
    assert!(
        (pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0])
            .unwrap()
            .unwrap()
            - 0.5)
            .abs()
            < 1e-12
    );
    assert!(pearson(&[1.0], &[1.0]).is_err());
}
