use std::collections::HashSet;

use suffixlab_core::toylab::*;
use suffixlab_core::{LabError, ModelConfig};

fn small_model() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: CharVocab::new().len(),
        max_seq_len: 96,
        seed: 1,
    }
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        steps: 25,
        batch_size: 4,
        warmup: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn dataset_is_seed_deterministic_and_splits_disjoint() {
    let cfg = ToyDatasetConfig::default();
    let a = synthesize_dataset(&cfg).unwrap();
    let b = synthesize_dataset(&cfg).unwrap();
    assert_eq!(a, b);
    let train: HashSet<_> = a.split(Split::Train).map(|r| &r.query).collect();
    let held: HashSet<_> = a.split(Split::Heldout).map(|r| &r.query).collect();
    assert!(train.is_disjoint(&held));
    assert_eq!(train.len() + held.len(), 200);
    assert_eq!(a.flagged(Split::Heldout).len(), 30);
    let other = synthesize_dataset(&ToyDatasetConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.records, other.records);
}

#[test]
fn corpus_strings_round_trip_through_vocab() {
    let vocab = CharVocab::new();
    let ds = synthesize_dataset(&ToyDatasetConfig::default()).unwrap();
    for r in &ds.records {
        for s in [&r.prompt, &r.completion, &r.query] {
            assert_eq!(&vocab.decode(&vocab.encode(s).unwrap()), s);
        }
    }
}

#[test]
fn jsonl_round_trip() {
    let ds = synthesize_dataset(&ToyDatasetConfig::default()).unwrap();
    let mut buf = Vec::new();
    ds.write_jsonl(&mut buf).unwrap();
    let first: serde_json::Value =
        serde_json::from_slice(buf.split(|&b| b == b'\n').next().unwrap()).unwrap();
    for key in ["prompt", "completion", "flagged", "split"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    let back = ToyDataset::read_jsonl(ds.config.clone(), buf.as_slice()).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn training_reduces_loss_and_is_bit_reproducible() {
    let ds = synthesize_dataset(&ToyDatasetConfig::default()).unwrap();
    let a = train_toy_model(&small_model(), &ds, &quick_train(), |_, _| {}).unwrap();
    let b = train_toy_model(&small_model(), &ds, &quick_train(), |_, _| {}).unwrap();
    let head: f64 = a.losses[..3].iter().sum::<f64>() / 3.0;
    let tail: f64 = a.losses[a.losses.len() - 3..].iter().sum::<f64>() / 3.0;
    assert!(tail < head, "{head} -> {tail}");
    assert_eq!(encode_checkpoint(&a.model), encode_checkpoint(&b.model));
}

#[test]
fn training_diverges_loudly() {
    let ds = synthesize_dataset(&ToyDatasetConfig::default()).unwrap();
    let cfg = TrainConfig {
        lr: 1e30,
        warmup: 1,
        grad_clip: 0.0,
        ..quick_train()
    };
    let err = train_toy_model(&small_model(), &ds, &cfg, |_, _| {}).unwrap_err();
    assert!(matches!(err, LabError::Diverged { .. }), "{err}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = suffixlab_core::Model::<f32>::init(small_model()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let tokens: Vec<usize> = (0..40).map(|i| (i * 7) % 97).collect();
    let (a, b) = (
        model.logits(&tokens).unwrap(),
        back.logits(&tokens).unwrap(),
    );
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    let manifest = read_manifest(&path).unwrap();
    // embeddings, 9 per layer, final norm, unembedding
    assert_eq!(manifest.tensors.len(), 2 + 9 * small_model().n_layers + 2);
}

#[test]
fn corrupted_checkpoints_rejected() {
    let model = suffixlab_core::Model::<f32>::init(small_model()).unwrap();
    let bytes = encode_checkpoint(&model);
    let p = std::path::Path::new("x.ckpt");
    let corrupt = |b: &[u8]| match decode_checkpoint(b, p) {
        Err(LabError::CorruptCheckpoint { .. }) => {}
        other => panic!("expected corrupt-checkpoint error, got {other:?}"),
    };
    corrupt(&bytes[..bytes.len() - 5]);
    corrupt(&bytes[..4]);
    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x40;
    corrupt(&flipped);
    let mut header = bytes.clone();
    header[10] = b'#';
    corrupt(&header);
}

#[test]
fn refusal_gate_on_untrained_model_fails() {
    let ds = synthesize_dataset(&ToyDatasetConfig::default()).unwrap();
    let model = suffixlab_core::Model::<f32>::init(toy_model_config(0)).unwrap();
    assert!(refusal_rate(&model, &ds, Split::Train).unwrap() < 0.9);
}
