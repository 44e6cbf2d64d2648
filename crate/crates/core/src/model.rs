//! Decoder-only pre-norm transformer over one-hot inputs.
//!
//! Each layer contributes two residual blocks, attention then MLP, so an
//! `l`-layer model has blocks `m = 1..=2l` with `m = 2r - 1` the attention
//! block of layer `r` and `m = 2r` its MLP block. The residual stream after
//! layer `r` is `h_r`; `h_0` is the embedding output.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use suffixlab_engine::{Label, NodeId, Scalar, Tape, Tensor};

use crate::error::{LabError, Result};
use crate::layout::{PromptLayout, TokenId};

const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(LabError::Config("n_layers must be >= 1".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(LabError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(LabError::Config("vocab_size must be >= 4".into()));
        }
        if self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(LabError::Config(
                "d_ff and max_seq_len must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        2 * self.n_layers
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Midpoint layer, the default placement for the intermediate-level guide.
    pub fn mid_layer(&self) -> usize {
        self.n_layers.div_ceil(2)
    }

    /// Names and shapes of every parameter tensor, in checkpoint order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        for i in 0..self.n_layers {
            for (name, shape) in [
                ("attn_norm", vec![d]),
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("mlp_norm", vec![d]),
                ("w_gate", vec![d, f]),
                ("w_up", vec![d, f]),
                ("w_down", vec![f, d]),
            ] {
                out.push((format!("layers.{i}.{name}"), shape));
            }
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("unembed".to_string(), vec![d, v]));
        out
    }
}

#[derive(Clone, Debug)]
pub struct LayerWeights<T> {
    pub attn_norm: Arc<Tensor<T>>,
    pub wq: Arc<Tensor<T>>,
    pub wk: Arc<Tensor<T>>,
    pub wv: Arc<Tensor<T>>,
    pub wo: Arc<Tensor<T>>,
    pub mlp_norm: Arc<Tensor<T>>,
    pub w_gate: Arc<Tensor<T>>,
    pub w_up: Arc<Tensor<T>>,
    pub w_down: Arc<Tensor<T>>,
}

/// Immutable model weights; clones share storage.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Arc<Tensor<T>>>,
}

/// Which operand of a residual block to overwrite in a patched forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Skip,
    Residual,
}

#[derive(Clone, Debug)]
pub struct BranchPatch<T> {
    /// 1-based block index.
    pub block: usize,
    pub branch: Branch,
    pub value: Arc<Tensor<T>>,
}

pub enum ForwardInput<'a, T> {
    Tokens(&'a [TokenId]),
    /// Real-valued `n x |V|` matrix standing in for the one-hot rows.
    Relaxed(&'a Tensor<T>),
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions<T> {
    pub patches: Vec<BranchPatch<T>>,
    /// Replace every block by `z + gamma * R(z) + (1 - gamma) * frozen_m`,
    /// which has the same value at the frozen point but a Jacobian of
    /// `I + gamma * dR/dz`. Used as an independent oracle for the scaled
    /// backward pass.
    pub frozen_branches: Option<(T, Vec<Arc<Tensor<T>>>)>,
    /// Track gradients for the weights (training).
    pub param_grads: bool,
}

/// Activations recorded during one forward pass.
#[derive(Clone, Debug)]
pub struct ActivationCache<T> {
    /// `stream[0]` is `z_1` (embedding output), `stream[m]` is the output of
    /// block `m`.
    pub stream: Vec<Arc<Tensor<T>>>,
    /// `I(z_m)` for block `m` at index `m - 1`.
    pub branch_skip: Vec<Arc<Tensor<T>>>,
    /// `R_m(z_m)` for block `m` at index `m - 1`.
    pub branch_resid: Vec<Arc<Tensor<T>>>,
    pub logits: Arc<Tensor<T>>,
}

impl<T: Scalar> ActivationCache<T> {
    pub fn n_layers(&self) -> usize {
        (self.stream.len() - 1) / 2
    }

    /// Residual stream `h_r` after layer `r`, all positions.
    pub fn resid(&self, r: usize) -> &Tensor<T> {
        &self.stream[2 * r]
    }

    /// `h_{r,o}`.
    pub fn h(&self, r: usize, o: usize) -> &[T] {
        self.stream[2 * r].row(o)
    }

    pub fn block_input(&self, m: usize) -> &Tensor<T> {
        &self.stream[m - 1]
    }

    pub fn block_output(&self, m: usize) -> &Tensor<T> {
        &self.stream[m]
    }
}

/// Per-position cross-entropies of the target continuation and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport<T> {
    pub total: T,
    /// `l_o` for `o` from the last prompt position to `n* - 2` (0-based).
    pub per_token: Vec<T>,
}

impl<T: Scalar> Model<T> {
    /// Random initialisation from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let std = match name.rsplit('.').next().unwrap_or(&name) {
                    "attn_norm" | "mlp_norm" | "final_norm" => {
                        return Arc::new(Tensor::from_fn(shape, |_| T::one()));
                    }
                    "tok_emb" | "pos_emb" => 0.5,
                    "wo" | "w_down" => out_scale / (shape[0] as f64).sqrt(),
                    _ => 1.0 / (shape[0] as f64).sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                Arc::new(Tensor::from_fn(shape, |_| T::of(normal.sample(&mut rng))))
            })
            .collect();
        Ok(Self { config, params })
    }

    /// All weights zero, norm gains one.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let one = name.ends_with("norm");
                Arc::new(Tensor::from_fn(shape, |_| {
                    if one {
                        T::one()
                    } else {
                        T::zero()
                    }
                }))
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Build from named tensors in any order; every expected name must be
    /// present with the expected shape.
    pub fn from_named(config: ModelConfig, mut named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if named.len() != shapes.len() {
            return Err(LabError::Config(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let idx = named
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| LabError::Config(format!("missing parameter tensor {name}")))?;
            let (_, t) = named.swap_remove(idx);
            if t.shape() != shape.as_slice() {
                return Err(LabError::ShapeMismatch {
                    name,
                    got: t.shape().to_vec(),
                    expected: shape,
                });
            }
            params.push(Arc::new(t));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Arc<Tensor<T>>] {
        &self.params
    }

    pub fn named_params(&self) -> Vec<(String, Arc<Tensor<T>>)> {
        self.config
            .param_shapes()
            .into_iter()
            .zip(&self.params)
            .map(|((name, _), p)| (name, Arc::clone(p)))
            .collect()
    }

    /// New model with every parameter replaced; `f` receives the parameter
    /// index and current value.
    pub fn map_params(&self, mut f: impl FnMut(usize, &Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .enumerate()
                .map(|(i, p)| Arc::new(f(i, p)))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|p| Arc::new(p.cast())).collect(),
        }
    }

    pub fn layer(&self, i: usize) -> LayerWeights<T> {
        let p = &self.params[2 + 9 * i..2 + 9 * (i + 1)];
        LayerWeights {
            attn_norm: Arc::clone(&p[0]),
            wq: Arc::clone(&p[1]),
            wk: Arc::clone(&p[2]),
            wv: Arc::clone(&p[3]),
            wo: Arc::clone(&p[4]),
            mlp_norm: Arc::clone(&p[5]),
            w_gate: Arc::clone(&p[6]),
            w_up: Arc::clone(&p[7]),
            w_down: Arc::clone(&p[8]),
        }
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.config.max_seq_len {
            return Err(LabError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if tokens.is_empty() {
            return Err(LabError::Layout("empty token sequence".into()));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(LabError::InvalidToken {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Plain forward pass over a layout's tokens.
    pub fn forward_cached(&self, layout: &PromptLayout) -> Result<(ActivationCache<T>, Tape<T>)> {
        self.forward(
            ForwardInput::Tokens(layout.tokens()),
            &ForwardOptions::default(),
        )
    }

    pub fn forward(
        &self,
        input: ForwardInput<'_, T>,
        opts: &ForwardOptions<T>,
    ) -> Result<(ActivationCache<T>, Tape<T>)> {
        let (cache, tape, _) = self.build(input, opts)?;
        Ok((cache, tape))
    }

    /// Forward pass that also returns the tape node of every parameter, in
    /// [`ModelConfig::param_shapes`] order.
    pub(crate) fn build(
        &self,
        input: ForwardInput<'_, T>,
        opts: &ForwardOptions<T>,
    ) -> Result<(ActivationCache<T>, Tape<T>, Vec<NodeId>)> {
        let cfg = &self.config;
        let onehot = match input {
            ForwardInput::Tokens(tokens) => {
                self.check_tokens(tokens)?;
                Tensor::one_hot(tokens, cfg.vocab_size)?
            }
            ForwardInput::Relaxed(x) => {
                if x.shape().len() != 2 || x.cols() != cfg.vocab_size {
                    return Err(LabError::Layout(format!(
                        "relaxed input shape {:?} incompatible with vocab {}",
                        x.shape(),
                        cfg.vocab_size
                    )));
                }
                if x.rows() > cfg.max_seq_len {
                    return Err(LabError::SequenceTooLong {
                        len: x.rows(),
                        max: cfg.max_seq_len,
                    });
                }
                x.clone()
            }
        };
        let n = onehot.rows();
        let mut tape = Tape::new();
        let pnodes: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf_arc(Arc::clone(p), opts.param_grads))
            .collect();

        let x = tape.leaf(onehot, true);
        tape.label(x, Label::OneHotInput)?;
        let tok = tape.matmul(x, pnodes[0], false)?;
        let pos = tape.slice_rows(pnodes[1], 0, n)?;
        let mut z = tape.add(tok, pos)?;
        tape.label(z, Label::Resid(0))?;

        let mut stream = vec![tape.value_arc(z)];
        let mut branch_skip = Vec::with_capacity(cfg.n_blocks());
        let mut branch_resid = Vec::with_capacity(cfg.n_blocks());
        let eps = T::of(NORM_EPS);
        let dh = cfg.head_dim();
        let att_scale = T::of(1.0 / (dh as f64).sqrt());

        for layer in 0..cfg.n_layers {
            let w = &pnodes[2 + 9 * layer..2 + 9 * (layer + 1)];
            for half in 0..2 {
                let m = 2 * layer + half + 1;
                let branch_in = if half == 0 {
                    tape.rms_norm(z, w[0], eps)?
                } else {
                    tape.rms_norm(z, w[5], eps)?
                };
                tape.label(branch_in, Label::BranchEntry(m))?;
                let r = if half == 0 {
                    let q = tape.matmul(branch_in, w[1], false)?;
                    let k = tape.matmul(branch_in, w[2], false)?;
                    let v = tape.matmul(branch_in, w[3], false)?;
                    let mut heads = Vec::with_capacity(cfg.n_heads);
                    for h in 0..cfg.n_heads {
                        let qh = tape.slice_cols(q, h * dh, dh)?;
                        let kh = tape.slice_cols(k, h * dh, dh)?;
                        let vh = tape.slice_cols(v, h * dh, dh)?;
                        let scores = tape.matmul(qh, kh, true)?;
                        let probs = tape.causal_softmax(scores, att_scale)?;
                        heads.push(tape.matmul(probs, vh, false)?);
                    }
                    let cat = if heads.len() == 1 {
                        heads[0]
                    } else {
                        tape.concat_cols(&heads)?
                    };
                    tape.matmul(cat, w[4], false)?
                } else {
                    let gate = tape.matmul(branch_in, w[6], false)?;
                    let up = tape.matmul(branch_in, w[7], false)?;
                    let act = tape.swiglu(gate, up)?;
                    tape.matmul(act, w[8], false)?
                };
                tape.label(r, Label::BranchOut(m))?;

                let mut skip = z;
                let mut branch = r;
                for patch in opts.patches.iter().filter(|p| p.block == m) {
                    let shape = tape.value(z).shape().to_vec();
                    if patch.value.shape() != shape.as_slice() {
                        return Err(LabError::Layout(format!(
                            "patch for block {m} has shape {:?}, expected {shape:?}",
                            patch.value.shape()
                        )));
                    }
                    let leaf = tape.leaf_arc(Arc::clone(&patch.value), false);
                    match patch.branch {
                        Branch::Skip => skip = leaf,
                        Branch::Residual => branch = leaf,
                    }
                }
                branch_skip.push(tape.value_arc(skip));
                branch_resid.push(tape.value_arc(branch));

                z = match &opts.frozen_branches {
                    Some((gamma, frozen)) => {
                        let live = tape.scale(branch, *gamma)?;
                        let fixed = frozen
                            .get(m - 1)
                            .ok_or_else(|| {
                                LabError::Config(format!("no frozen value for block {m}"))
                            })?
                            .scaled(T::one() - *gamma);
                        let fixed = tape.leaf(fixed, false);
                        let mixed = tape.add(live, fixed)?;
                        tape.add(skip, mixed)?
                    }
                    None => tape.residual_add(skip, branch)?,
                };
                tape.label(z, Label::BlockOut(m))?;
                if half == 1 {
                    tape.label(z, Label::Resid(layer + 1))?;
                }
                stream.push(tape.value_arc(z));
            }
        }

        let last = pnodes.len();
        let normed = tape.rms_norm(z, pnodes[last - 2], eps)?;
        let logits = tape.matmul(normed, pnodes[last - 1], false)?;
        tape.label(logits, Label::Logits)?;

        let cache = ActivationCache {
            stream,
            branch_skip,
            branch_resid,
            logits: tape.value_arc(logits),
        };
        Ok((cache, tape, pnodes))
    }

    /// Logits only.
    pub fn logits(&self, tokens: &[TokenId]) -> Result<Tensor<T>> {
        let (cache, _) = self.forward(ForwardInput::Tokens(tokens), &ForwardOptions::default())?;
        Ok(Arc::unwrap_or_clone(cache.logits))
    }

    /// Target cross-entropy of a layout in one forward pass.
    pub fn loss(&self, layout: &PromptLayout) -> Result<T> {
        let (cache, _) = self.forward_cached(layout)?;
        Ok(adversarial_loss(&cache, layout).total)
    }

    /// Greedy continuation of `prefix` for `steps` tokens; ties go to the
    /// lowest token id.
    pub fn greedy_decode(&self, prefix: &[TokenId], steps: usize) -> Result<Vec<TokenId>> {
        if prefix.len() + steps > self.config.max_seq_len {
            return Err(LabError::SequenceTooLong {
                len: prefix.len() + steps,
                max: self.config.max_seq_len,
            });
        }
        let mut seq = prefix.to_vec();
        for _ in 0..steps {
            let logits = self.logits(&seq)?;
            seq.push(argmax(logits.row(seq.len() - 1)));
        }
        Ok(seq.split_off(prefix.len()))
    }

    /// Whether greedy decoding from the prompt reproduces the target exactly.
    ///
    /// Uses one teacher-forced pass: greedy decoding emits the target iff the
    /// argmax at every loss position is the next target token.
    pub fn exact_match(&self, layout: &PromptLayout) -> Result<bool> {
        let logits = self.logits(layout.tokens())?;
        Ok(layout
            .loss_targets()
            .into_iter()
            .all(|(o, t)| argmax(logits.row(o)) == t))
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-token target cross-entropies from cached logits.
pub fn adversarial_loss<T: Scalar>(
    cache: &ActivationCache<T>,
    layout: &PromptLayout,
) -> LossReport<T> {
    let per_token: Vec<T> = layout
        .loss_targets()
        .into_iter()
        .map(|(o, t)| {
            let row = cache.logits.row(o);
            let max = row.iter().fold(T::neg_infinity(), |m, &a| m.max(a));
            let lse = row.iter().map(|&a| (a - max).exp()).sum::<T>().ln() + max;
            lse - row[t]
        })
        .collect();
    let total = per_token.iter().copied().sum::<T>() / T::of(per_token.len() as f64);
    LossReport { total, per_token }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 32,
            max_seq_len: 24,
            seed: 7,
        }
    }

    fn layout() -> PromptLayout {
        PromptLayout::assemble(&[1], &[5, 6, 7], &[9, 10, 11, 12], &[3], &[20, 21, 22]).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.vocab_size = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.n_layers = 0;
        assert!(c.validate().is_err());
        assert_eq!(tiny_config().mid_layer(), 1);
    }

    #[test]
    fn block_identity_holds_exactly() {
        let model = Model::<f32>::init(tiny_config()).unwrap();
        let (cache, _) = model.forward_cached(&layout()).unwrap();
        for m in 1..=4 {
            let sum = cache.branch_skip[m - 1]
                .add(&cache.branch_resid[m - 1])
                .unwrap();
            assert_eq!(&sum, cache.block_output(m));
            assert_eq!(cache.branch_skip[m - 1].as_ref(), cache.block_input(m));
        }
    }

    #[test]
    fn zero_weight_model_has_constant_logits() {
        let model = Model::<f64>::zeros(tiny_config()).unwrap();
        let logits = model.logits(layout().tokens()).unwrap();
        let first = logits.row(0).to_vec();
        for o in 1..logits.rows() {
            assert_eq!(logits.row(o), first.as_slice());
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        let model = Model::<f64>::zeros(tiny_config()).unwrap();
        let (cache, _) = model.forward_cached(&layout()).unwrap();
        let report = adversarial_loss(&cache, &layout());
        let ln32 = 32f64.ln();
        assert!((report.total - ln32).abs() < 1e-12);
        assert!(report.per_token.iter().all(|&l| (l - ln32).abs() < 1e-12));
        assert!((ln32 - 3.4657).abs() < 1e-4);
    }

    #[test]
    fn rejects_long_or_invalid_sequences() {
        let model = Model::<f32>::init(tiny_config()).unwrap();
        assert!(matches!(
            model.logits(&[0; 25]),
            Err(LabError::SequenceTooLong { len: 25, max: 24 })
        ));
        assert!(matches!(
            model.logits(&[0, 32]),
            Err(LabError::InvalidToken { id: 32, vocab: 32 })
        ));
        assert!(model.greedy_decode(&[0; 20], 5).is_err());
    }

    #[test]
    fn argmax_ties_prefer_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }

    #[test]
    fn param_count_matches_config() {
        let cfg = tiny_config();
        let model = Model::<f32>::init(cfg.clone()).unwrap();
        let count: usize = model.params().iter().map(|p| p.numel()).sum();
        let (d, f, v, l, s) = (16, 32, 32, 2, 24);
        assert_eq!(
            count,
            v * d + s * d + l * (2 * d + 4 * d * d + 3 * d * f) + d + d * v
        );
    }
}
