//! Every primitive's backward against central finite differences (f64), and
//! the hook semantics of `backward`.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use suffixlab_engine::{
    finite_diff_grad, GradReplacement, HookSet, Label, NodeId, ReplacementRule, Tape, Tensor,
};

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let scale = a
        .data()
        .iter()
        .chain(b.data())
        .fold(1e-8_f64, |m, v| m.max(v.abs()));
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / scale)
        .fold(0.0, f64::max)
}

/// Builds `loss = sum(w * op(x, params))` with a fixed random projection `w`
/// so the check covers every output coordinate, then compares the adjoint of
/// input `which` against finite differences.
fn check_op(
    inputs: Vec<Tensor<f64>>,
    which: usize,
    build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let run = |xs: &[Tensor<f64>], proj: Option<&Tensor<f64>>| {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = build(&mut tape, &ids);
        (tape, ids, out, proj.cloned())
    };
    let (tape0, _, out0, _) = run(&inputs, None);
    let out_shape = tape0.value(out0).shape().to_vec();
    let proj = random(&out_shape, &mut rng);

    let loss_of = |xs: &[Tensor<f64>]| -> f64 {
        let (tape, _, out, _) = run(xs, Some(&proj));
        tape.value(out).dot(&proj).unwrap()
    };

    let (tape, ids, out, _) = run(&inputs, Some(&proj));
    let grads = tape
        .backward_from(&[(out, proj.clone())], &HookSet::empty(), &[])
        .unwrap();
    let analytic = grads.get(ids[which]).unwrap().clone();

    let numeric = finite_diff_grad(
        |x| {
            let mut xs = inputs.clone();
            xs[which] = x.clone();
            loss_of(&xs)
        },
        &inputs[which],
        EPS,
    )
    .unwrap();
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn matmul_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 5], &mut rng);
    let bt = random(&[5, 4], &mut rng);
    for which in 0..2 {
        check_op(vec![a.clone(), b.clone()], which, |t, x| {
            t.matmul(x[0], x[1], false).unwrap()
        });
        check_op(vec![a.clone(), bt.clone()], which, |t, x| {
            t.matmul(x[0], x[1], true).unwrap()
        });
    }
}

#[test]
fn embedding_as_matmul_matches_finite_differences() {
    // relaxed one-hot rows times an embedding table
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut onehot = Tensor::<f64>::one_hot(&[2, 0, 5], 6).unwrap();
    onehot.data_mut()[1] = 0.25;
    let table = random(&[6, 4], &mut rng);
    for which in 0..2 {
        check_op(vec![onehot.clone(), table.clone()], which, |t, x| {
            t.matmul(x[0], x[1], false).unwrap()
        });
    }
}

#[test]
fn causal_softmax_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[4, 4], &mut rng);
    check_op(vec![x], 0, |t, x| t.causal_softmax(x[0], 0.7).unwrap());
}

#[test]
fn rms_norm_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[3, 6], &mut rng);
    let g = random(&[6], &mut rng);
    for which in 0..2 {
        check_op(vec![x.clone(), g.clone()], which, |t, x| {
            t.rms_norm(x[0], x[1], 1e-6).unwrap()
        });
    }
}

#[test]
fn swiglu_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[3, 5], &mut rng);
    let b = random(&[3, 5], &mut rng);
    for which in 0..2 {
        check_op(vec![a.clone(), b.clone()], which, |t, x| {
            t.swiglu(x[0], x[1]).unwrap()
        });
    }
}

#[test]
fn cross_entropy_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = random(&[4, 7], &mut rng);
    check_op(vec![logits], 0, |t, x| {
        t.cross_entropy(x[0], &[(0, 3), (2, 6), (3, 0)]).unwrap()
    });
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[5, 6], &mut rng);
    let y = random(&[5, 6], &mut rng);
    check_op(vec![x.clone()], 0, |t, x| t.slice_rows(x[0], 1, 3).unwrap());
    check_op(vec![x.clone()], 0, |t, x| t.slice_cols(x[0], 2, 3).unwrap());
    check_op(vec![x.clone()], 0, |t, x| t.scale(x[0], -1.5).unwrap());
    for which in 0..2 {
        check_op(vec![x.clone(), y.clone()], which, |t, x| {
            let a = t.slice_cols(x[0], 0, 2).unwrap();
            let b = t.slice_cols(x[1], 1, 4).unwrap();
            t.concat_cols(&[b, a]).unwrap()
        });
        check_op(vec![x.clone(), y.clone()], which, |t, x| {
            t.add(x[0], x[1]).unwrap()
        });
        check_op(vec![x.clone(), y.clone()], which, |t, x| {
            t.residual_add(x[0], x[1]).unwrap()
        });
    }
}

#[test]
fn square_gradient_is_six_at_three() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 1], vec![3.0_f64]).unwrap(), true);
    let y = tape.matmul(x, x, false).unwrap();
    let grads = tape
        .backward_from(
            &[(y, Tensor::new(vec![1, 1], vec![1.0]).unwrap())],
            &HookSet::empty(),
            &[],
        )
        .unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
}

/// z' = z + w*z, upstream 1: the branch adjoint is scaled by gamma.
fn scalar_residual_block(w: f64, gamma: Option<f64>) -> f64 {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::new(vec![1, 1], vec![0.7]).unwrap(), true);
    let wn = tape.leaf(Tensor::new(vec![1, 1], vec![w]).unwrap(), false);
    let branch = tape.matmul(z, wn, false).unwrap();
    let out = tape.residual_add(z, branch).unwrap();
    let hooks = HookSet {
        residual_branch_scale: gamma,
        grad_replacements: vec![],
    };
    let seed = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let grads = tape.backward_from(&[(out, seed)], &hooks, &[]).unwrap();
    grads.get(z).unwrap().item()
}

#[test]
fn residual_branch_scale_on_scalar_block() {
    assert_eq!(scalar_residual_block(2.0, Some(0.5)), 2.0);
    assert_eq!(scalar_residual_block(2.0, None), 3.0);
    // exactly linear in gamma
    for k in 0..=10 {
        let gamma = k as f64 / 10.0;
        assert_eq!(scalar_residual_block(2.0, Some(gamma)), 1.0 + gamma * 2.0);
    }
}

/// Small two-layer graph with a labelled middle node.
fn mid_graph(seed: u64) -> (Tape<f64>, NodeId, NodeId, NodeId) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let x = tape.leaf(random(&[3, 4], &mut rng), true);
    let w1 = tape.leaf(random(&[4, 4], &mut rng), false);
    let g = tape.leaf(Tensor::from_fn(vec![4], |_| 1.0), false);
    let h = tape.matmul(x, w1, false).unwrap();
    let n = tape.rms_norm(h, g, 1e-6).unwrap();
    let mid = tape.residual_add(h, n).unwrap();
    tape.label(mid, Label::Resid(1)).unwrap();
    let w2 = tape.leaf(random(&[4, 5], &mut rng), false);
    let logits = tape.matmul(mid, w2, false).unwrap();
    let loss = tape
        .cross_entropy(logits, &[(0, 1), (1, 4), (2, 2)])
        .unwrap();
    (tape, x, mid, loss)
}

#[test]
fn fixed_replacement_matches_truncated_tape() {
    let (tape, x, mid, loss) = mid_graph(11);
    let u: Vec<Vec<f64>> = vec![
        vec![0.3, -1.0, 0.2, 0.5],
        vec![1.0, 0.0, -0.4, 0.1],
        vec![0.0; 4],
    ];
    let hooks = HookSet {
        residual_branch_scale: None,
        grad_replacements: (0..3)
            .map(|row| GradReplacement {
                label: Label::Resid(1),
                row,
                rule: ReplacementRule::Fixed(u[row].clone()),
            })
            .collect(),
    };
    let replaced = tape.backward(loss, &hooks).unwrap();

    // Oracle: the lower sub-tape seeded directly with u at the middle node.
    let seed = Tensor::new(vec![3, 4], u.concat()).unwrap();
    let truncated = tape
        .backward_from(&[(mid, seed)], &HookSet::empty(), &[])
        .unwrap();
    assert_eq!(replaced.get(x).unwrap(), truncated.get(x).unwrap());
    assert_eq!(replaced.events().len(), 3);
}

#[test]
fn empty_hooks_equal_unit_gamma_bitwise() {
    let (tape, x, _, loss) = mid_graph(12);
    let plain = tape.backward(loss, &HookSet::empty()).unwrap();
    let unit = tape
        .backward(
            loss,
            &HookSet {
                residual_branch_scale: Some(1.0),
                grad_replacements: vec![],
            },
        )
        .unwrap();
    assert_eq!(plain.get(x).unwrap(), unit.get(x).unwrap());
}

#[test]
fn unknown_label_is_configuration_error() {
    let (tape, _, _, loss) = mid_graph(13);
    let hooks = HookSet {
        residual_branch_scale: None,
        grad_replacements: vec![GradReplacement {
            label: Label::Resid(7),
            row: 0,
            rule: ReplacementRule::Fixed(vec![0.0; 4]),
        }],
    };
    let err = tape.backward(loss, &hooks).unwrap_err();
    assert!(matches!(
        err,
        suffixlab_engine::EngineError::UnknownLabel(Label::Resid(7))
    ));
}

#[test]
fn nan_in_adjoint_names_the_node() {
    let (tape, _, _, loss) = mid_graph(14);
    let hooks = HookSet {
        residual_branch_scale: None,
        grad_replacements: vec![GradReplacement {
            label: Label::Resid(1),
            row: 0,
            rule: ReplacementRule::Fixed(vec![f64::NAN; 4]),
        }],
    };
    let err = tape.backward(loss, &hooks).unwrap_err();
    match err {
        suffixlab_engine::EngineError::NonFinite { node } => assert!(node.contains("ResidualAdd")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn non_finite_forward_is_rejected() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::new(vec![1, 1], vec![f64::MAX]).unwrap(), false);
    let err = tape.add(a, a).unwrap_err();
    assert!(matches!(
        err,
        suffixlab_engine::EngineError::NonFinite { .. }
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn adjoints_are_linear_in_the_seed(seed in 0u64..1000, c in -4.0f64..4.0) {
        let (tape, x, mid, _) = mid_graph(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let u = random(&[3, 4], &mut rng);
        let base = tape.backward_from(&[(mid, u.clone())], &HookSet::empty(), &[]).unwrap();
        let scaled = tape.backward_from(&[(mid, u.scaled(c))], &HookSet::empty(), &[]).unwrap();
        let expect = base.get(x).unwrap().scaled(c);
        let got = scaled.get(x).unwrap();
        for (a, b) in expect.data().iter().zip(got.data()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }
}
