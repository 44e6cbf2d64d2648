use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use suffixlab_engine::{EngineError, Label, Tensor};

use super::dataset::{prompt_parts, Split, ToyDataset, ToyRecord};
use super::vocab::CharVocab;
use crate::error::{LabError, Result};
use crate::layout::TokenId;
use crate::model::{ForwardInput, ForwardOptions, Model, ModelConfig};

/// Filler character used for the default suffix.
pub const FILLER: char = '!';
/// Suffix length of the default attack template.
pub const DEFAULT_SUFFIX_LEN: usize = 20;

/// The default attack subject: 8 layers, width 64, 4 heads.
pub fn toy_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 8,
        d_model: 64,
        n_heads: 4,
        d_ff: 256,
        vocab_size: CharVocab::new().len(),
        max_seq_len: 128,
        seed,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup length in steps, then constant.
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Training suffixes have uniform length in `0..=max_filler`.
    pub max_filler: usize,
    /// Probability that a training suffix is random printable text rather
    /// than repeated filler.
    pub noise_filler_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 16,
            lr: 3e-3,
            warmup: 50,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            max_filler: DEFAULT_SUFFIX_LEN,
            noise_filler_prob: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(LabError::Config("steps and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(LabError::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.noise_filler_prob) {
            return Err(LabError::Config("noise_filler_prob outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// Token sequence of one training example and the number of prompt tokens.
pub fn training_tokens(
    vocab: &CharVocab,
    record: &ToyRecord,
    filler: &[TokenId],
) -> Result<(Vec<TokenId>, usize)> {
    let parts = prompt_parts(vocab, &record.query, &record.completion)?;
    let mut tokens = parts.prefix;
    tokens.extend(parts.query);
    tokens.extend_from_slice(filler);
    tokens.extend(parts.connector);
    let prompt_len = tokens.len();
    tokens.extend(parts.target);
    Ok((tokens, prompt_len))
}

fn sample_filler(vocab: &CharVocab, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    let len = rng.gen_range(0..=cfg.max_filler);
    if rng.gen_bool(cfg.noise_filler_prob) {
        // printable characters only
        (0..len).map(|_| rng.gen_range(2..vocab.len())).collect()
    } else {
        vec![vocab.id(FILLER).expect("filler is printable"); len]
    }
}

/// Completion-only cross-entropy of one example and its parameter gradients.
fn example_grad(
    model: &Model<f32>,
    tokens: &[TokenId],
    prompt_len: usize,
) -> Result<(f32, Vec<Tensor<f32>>)> {
    let opts = ForwardOptions {
        param_grads: true,
        ..ForwardOptions::default()
    };
    let (_, mut tape, pnodes) = model.build(ForwardInput::Tokens(tokens), &opts)?;
    let logits = tape.node_of(Label::Logits).expect("model labels logits");
    let targets: Vec<(usize, TokenId)> = (prompt_len - 1..tokens.len() - 1)
        .map(|o| (o, tokens[o + 1]))
        .collect();
    let loss = tape.cross_entropy(logits, &targets)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss, &suffixlab_engine::HookSet::empty())?;
    let out = pnodes
        .iter()
        .zip(model.params())
        .map(|(&id, p)| {
            grads
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();
    Ok((value, out))
}

fn diverged(step: usize) -> impl Fn(LabError) -> LabError {
    move |e| match e {
        LabError::Engine(EngineError::NonFinite { .. }) => LabError::Diverged {
            step,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Next-token training on completions with Adam. `on_step` sees every
/// step's mean batch loss.
pub fn train_toy_model(
    model_config: &ModelConfig,
    dataset: &ToyDataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let vocab = CharVocab::new();
    if model_config.vocab_size != vocab.len() {
        return Err(LabError::Config(format!(
            "model vocab {} differs from character vocab {}",
            model_config.vocab_size,
            vocab.len()
        )));
    }
    let train: Vec<&ToyRecord> = dataset.split(Split::Train).collect();
    if train.is_empty() {
        return Err(LabError::Config("training split is empty".into()));
    }
    let mut model = Model::<f32>::init(model_config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut m: Vec<Vec<f32>> = model
        .params()
        .iter()
        .map(|p| vec![0.0; p.numel()])
        .collect();
    let mut v = m.clone();
    let mut losses = Vec::with_capacity(cfg.steps);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);

    for step in 1..=cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let rec = train[rng.gen_range(0..train.len())];
                let filler = sample_filler(&vocab, cfg, &mut rng);
                training_tokens(&vocab, rec, &filler)
            })
            .collect::<Result<Vec<_>>>()?;
        for (tokens, _) in &batch {
            if tokens.len() > model_config.max_seq_len {
                return Err(LabError::SequenceTooLong {
                    len: tokens.len(),
                    max: model_config.max_seq_len,
                });
            }
        }
        let results = batch
            .par_iter()
            .map(|(tokens, p)| example_grad(&model, tokens, *p))
            .collect::<Result<Vec<_>>>()
            .map_err(diverged(step))?;

        // reduce in batch order
        let scale = 1.0 / cfg.batch_size as f32;
        let mut loss = 0.0f64;
        let mut grad: Vec<Vec<f32>> = m.iter().map(|x| vec![0.0; x.len()]).collect();
        for (l, g) in &results {
            loss += *l as f64;
            for (acc, t) in grad.iter_mut().zip(g) {
                for (a, &x) in acc.iter_mut().zip(t.data()) {
                    *a += x * scale;
                }
            }
        }
        loss /= cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(LabError::Diverged { step, loss });
        }
        let norm = grad
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            (cfg.grad_clip / norm) as f32
        } else {
            1.0
        };

        let lr = cfg.lr * (step as f64 / cfg.warmup.max(1) as f64).min(1.0);
        let bc1 = 1.0 - b1.powi(step as i32);
        let bc2 = 1.0 - b2.powi(step as i32);
        let (lr, eps) = (lr as f32, cfg.eps as f32);
        model = model.map_params(|i, p| {
            let mut data = p.data().to_vec();
            for (j, w) in data.iter_mut().enumerate() {
                let g = grad[i][j] * clip;
                m[i][j] = b1 * m[i][j] + (1.0 - b1) * g;
                v[i][j] = b2 * v[i][j] + (1.0 - b2) * g * g;
                *w -= lr * (m[i][j] / bc1) / ((v[i][j] / bc2).sqrt() + eps);
            }
            Tensor::new(p.shape().to_vec(), data).expect("same shape")
        });
        losses.push(loss);
        on_step(step, loss);
    }
    Ok(TrainOutcome { model, losses })
}

/// Default attack suffix: the filler repeated.
pub fn default_suffix(vocab: &CharVocab, len: usize) -> Vec<TokenId> {
    vec![vocab.id(FILLER).expect("filler is printable"); len]
}

/// Fraction of flagged queries in `split` whose greedy continuation under
/// the default suffix is exactly the refusal.
pub fn refusal_rate(model: &Model<f32>, dataset: &ToyDataset, split: Split) -> Result<f64> {
    let vocab = CharVocab::new();
    let suffix = default_suffix(&vocab, DEFAULT_SUFFIX_LEN);
    let flagged = dataset.flagged(split);
    if flagged.is_empty() {
        return Ok(0.0);
    }
    let hits = flagged
        .par_iter()
        .map(|r| {
            let layout = dataset.trained_parts(&vocab, r)?.layout(&suffix)?;
            model.exact_match(&layout)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}
