//! Desk-scale attack subject: character vocabulary, synthetic
//! refusal/compliance corpus, training loop and checkpoint files.

pub mod checkpoint;
pub mod dataset;
pub mod train;
pub mod vocab;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_manifest, save_checkpoint,
    CheckpointManifest, TensorEntry, FORMAT_VERSION,
};
pub use dataset::{
    prompt_parts, synthesize_dataset, Split, ToyDataset, ToyDatasetConfig, ToyRecord,
};
pub use train::{
    default_suffix, refusal_rate, toy_model_config, train_toy_model, training_tokens, TrainConfig,
    TrainOutcome, DEFAULT_SUFFIX_LEN, FILLER,
};
pub use vocab::{CharVocab, BOS, PAD};
