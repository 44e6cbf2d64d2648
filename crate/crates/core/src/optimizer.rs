//! Greedy coordinate-descent suffix attacks (GCG and AutoPrompt), for one
//! prompt or for several prompts sharing one suffix.
//!
//! Every iteration proposes single-token replacements from the Top-k most
//! negative one-hot gradient entries, evaluates them with the plain target
//! cross-entropy and moves to the best candidate. Surgery modes only change
//! the gradient used for the proposal.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use suffixlab_engine::{Scalar, Tensor};

use crate::error::{LabError, Result};
use crate::gradient::gradient_pass;
use crate::layout::{PromptLayout, PromptParts, TokenId};
use crate::model::Model;
use crate::surgery::{compute_guide, DirectionalGuide, SurgeryConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gcg,
    Autoprompt,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gcg => "gcg",
            Self::Autoprompt => "autoprompt",
        })
    }
}

impl FromStr for Method {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcg" => Ok(Self::Gcg),
            "autoprompt" => Ok(Self::Autoprompt),
            other => Err(LabError::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: Method,
    pub top_k: usize,
    pub batch: usize,
    pub iterations: usize,
    pub suffix_len: usize,
    pub init_token: TokenId,
    pub seed: u64,
    pub surgery: SurgeryConfig,
    /// Exact-match check cadence in iterations.
    pub match_every: usize,
    /// Stop once every training prompt matches.
    pub early_exit: bool,
    /// Fill `wall_ms`; off keeps logs byte-reproducible.
    pub record_timing: bool,
    /// Keep every iteration's proposals, candidates and losses.
    pub record_candidates: bool,
}

impl AttackConfig {
    pub fn new(surgery: SurgeryConfig, init_token: TokenId) -> Self {
        Self {
            method: Method::Gcg,
            top_k: 4,
            batch: 20,
            iterations: 100,
            suffix_len: 20,
            init_token,
            seed: 0,
            surgery,
            match_every: 10,
            early_exit: false,
            record_timing: false,
            record_candidates: false,
        }
    }

    pub fn validate(&self, n_layers: usize, vocab: usize) -> Result<()> {
        if self.top_k == 0 || self.top_k >= vocab {
            return Err(LabError::Config(format!(
                "top_k {} must be in 1..{vocab}",
                self.top_k
            )));
        }
        if self.batch == 0 {
            return Err(LabError::Config("batch must be >= 1".into()));
        }
        if self.suffix_len == 0 {
            return Err(LabError::Config("suffix_len must be >= 1".into()));
        }
        if self.match_every == 0 {
            return Err(LabError::Config("match_every must be >= 1".into()));
        }
        if self.init_token >= vocab {
            return Err(LabError::InvalidToken {
                id: self.init_token,
                vocab,
            });
        }
        self.surgery.validate(n_layers)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Clone, Debug)]
pub struct AttackState<T> {
    pub current_suffix: Vec<TokenId>,
    pub current_loss: T,
    pub best_suffix: Vec<TokenId>,
    pub best_loss: T,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    pub selected_loss: f64,
    pub best_loss: f64,
    /// Fraction of training prompts matched by the best suffix; only filled
    /// on check iterations.
    #[serde(rename = "match")]
    pub matched: Option<f64>,
    pub grad_norm: f64,
    pub guide_norm: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    /// Per suffix position, the proposal tokens offered to the sampler.
    pub proposals: Vec<Vec<TokenId>>,
    pub candidates: Vec<Vec<TokenId>>,
    pub losses: Vec<f64>,
    pub selected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub config: AttackConfig,
    pub config_hash: String,
    pub initial_suffix: Vec<TokenId>,
    pub initial_loss: f64,
    pub logs: Vec<IterationLog>,
    pub best_suffix: Vec<TokenId>,
    pub best_loss: f64,
    /// Every training prompt matches under the best suffix.
    pub matched: bool,
    /// Current suffix after each iteration.
    pub suffix_history: Vec<Vec<TokenId>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace: Option<Vec<IterationTrace>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniversalResult {
    pub attack: AttackResult,
    pub train_matches: Vec<bool>,
    pub heldout_matches: Vec<bool>,
    pub train_mr: f64,
    pub heldout_mr: f64,
}

fn topk_row<T: Scalar>(row: &[T], k: usize, exclude: Option<TokenId>) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..row.len()).filter(|&i| Some(i) != exclude).collect();
    let cmp = |a: &TokenId, b: &TokenId| {
        row[*a]
            .partial_cmp(&row[*b])
            .expect("finite gradient")
            .then(a.cmp(b))
    };
    let k = k.min(ids.len());
    if k < ids.len() {
        ids.select_nth_unstable_by(k, cmp);
        ids.truncate(k);
    }
    ids.sort_by(cmp);
    ids
}

/// For each row, the `k` token ids with the most negative entries, most
/// negative first; ties go to the lower id.
pub fn topk_candidates<T: Scalar>(grad: &Tensor<T>, k: usize) -> Vec<Vec<TokenId>> {
    (0..grad.rows())
        .map(|r| topk_row(grad.row(r), k, None))
        .collect()
}

/// Top-k per position with the incumbent token left out, so every proposal
/// is an actual change.
pub fn proposal_sets<T: Scalar>(
    grad: &Tensor<T>,
    k: usize,
    incumbent: &[TokenId],
) -> Vec<Vec<TokenId>> {
    (0..grad.rows())
        .map(|r| topk_row(grad.row(r), k, Some(incumbent[r])))
        .collect()
}

/// `batch` single-position replacements of `current`: position uniform,
/// token uniform within that position's proposals, with replacement.
pub fn sample_gcg_candidates(
    current: &[TokenId],
    proposals: &[Vec<TokenId>],
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<TokenId>> {
    (0..batch)
        .map(|_| {
            let pos = rng.gen_range(0..current.len());
            let list = &proposals[pos];
            let mut cand = current.to_vec();
            cand[pos] = list[rng.gen_range(0..list.len())];
            cand
        })
        .collect()
}

/// One uniformly chosen position, every proposal at that position.
pub fn autoprompt_step_candidates(
    current: &[TokenId],
    proposals: &[Vec<TokenId>],
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<TokenId>> {
    let pos = rng.gen_range(0..current.len());
    proposals[pos]
        .iter()
        .map(|&tok| {
            let mut cand = current.to_vec();
            cand[pos] = tok;
            cand
        })
        .collect()
}

/// Mean target cross-entropy over `prompts` for every candidate suffix.
/// Candidates are evaluated in parallel; the result does not depend on the
/// worker count.
pub fn evaluate_candidates<T: Scalar>(
    model: &Model<T>,
    prompts: &[PromptLayout],
    candidates: &[Vec<TokenId>],
) -> Result<Vec<T>> {
    candidates
        .par_iter()
        .map(|cand| mean_loss(model, prompts, cand))
        .collect()
}

fn mean_loss<T: Scalar>(
    model: &Model<T>,
    prompts: &[PromptLayout],
    suffix: &[TokenId],
) -> Result<T> {
    let mut sum = T::zero();
    for p in prompts {
        sum = sum + model.loss(&p.with_suffix(suffix)?)?;
    }
    Ok(sum / T::of(prompts.len() as f64))
}

/// First index of the minimum.
fn argmin<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

/// Everything an attack step needs besides its mutable state.
pub struct AttackContext<'a, T> {
    pub model: &'a Model<T>,
    pub prompts: Vec<PromptLayout>,
    /// `h_{r,n}` of each prompt under the initial suffix; empty when the
    /// surgery mode needs no guide.
    pub references: Vec<Vec<T>>,
    pub config: &'a AttackConfig,
    guides: Vec<DirectionalGuide<T>>,
}

/// What a single step produced, for logging.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub selected_loss: f64,
    pub grad_norm: f64,
    pub guide_norm: Option<f64>,
    pub trace: IterationTrace,
}

impl<'a, T: Scalar> AttackContext<'a, T> {
    pub fn new(
        model: &'a Model<T>,
        parts: &[PromptParts],
        config: &'a AttackConfig,
    ) -> Result<Self> {
        if parts.is_empty() {
            return Err(LabError::Config("attack needs at least one prompt".into()));
        }
        let cfg = model.config();
        config.validate(cfg.n_layers, cfg.vocab_size)?;
        let init = vec![config.init_token; config.suffix_len];
        let prompts = parts
            .iter()
            .map(|p| p.layout(&init))
            .collect::<Result<Vec<_>>>()?;
        for p in &prompts {
            if p.len() > cfg.max_seq_len {
                return Err(LabError::SequenceTooLong {
                    len: p.len(),
                    max: cfg.max_seq_len,
                });
            }
        }
        let references = if config.surgery.mode.needs_guide() {
            let r = config.surgery.layer;
            prompts
                .iter()
                .map(|p| {
                    let (cache, _) = model.forward_cached(p)?;
                    Ok(cache.h(r, p.last_prompt_position()).to_vec())
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            model,
            prompts,
            references,
            config,
            guides: Vec::new(),
        })
    }

    pub fn initial_state(&self) -> Result<AttackState<T>> {
        let init = self.prompts[0].suffix().to_vec();
        let loss = mean_loss(self.model, &self.prompts, &init)?;
        Ok(AttackState {
            current_suffix: init.clone(),
            current_loss: loss,
            best_suffix: init,
            best_loss: loss,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(self.config.seed),
        })
    }

    fn refresh_guides(&mut self, suffix: &[TokenId]) -> Result<()> {
        let r = self.config.surgery.layer;
        self.guides = self
            .prompts
            .iter()
            .zip(&self.references)
            .map(|(p, h0)| {
                let layout = p.with_suffix(suffix)?;
                let (cache, _) = self.model.forward_cached(&layout)?;
                compute_guide(&cache, h0, r, layout.last_prompt_position())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    /// One coordinate-descent iteration.
    pub fn step(&mut self, state: &mut AttackState<T>) -> Result<StepOutcome> {
        let cfg = self.config;
        let needs_guide = cfg.surgery.mode.needs_guide();
        if needs_guide
            && (self.guides.is_empty() || state.iteration % cfg.surgery.guide_refresh == 0)
        {
            let best = state.best_suffix.clone();
            self.refresh_guides(&best)?;
        }

        // mean one-hot gradient over prompts, aligned by suffix position
        let mut grad: Option<Tensor<T>> = None;
        for (i, p) in self.prompts.iter().enumerate() {
            let layout = p.with_suffix(&state.current_suffix)?;
            let guide = needs_guide.then(|| &self.guides[i]);
            let (g, _, _) = gradient_pass(self.model, &layout, &cfg.surgery, guide)?;
            grad = Some(match grad {
                None => g.grad,
                Some(acc) => acc.add(&g.grad)?,
            });
        }
        let grad = grad
            .expect("at least one prompt")
            .scaled(T::one() / T::of(self.prompts.len() as f64));
        let guide_norm = needs_guide.then(|| {
            let sq: f64 = self.guides.iter().map(|g| g.norm().to_f64().powi(2)).sum();
            (sq / self.guides.len() as f64).sqrt()
        });

        let proposals = proposal_sets(&grad, cfg.top_k, &state.current_suffix);
        let candidates = match cfg.method {
            Method::Gcg => {
                sample_gcg_candidates(&state.current_suffix, &proposals, cfg.batch, &mut state.rng)
            }
            Method::Autoprompt => {
                autoprompt_step_candidates(&state.current_suffix, &proposals, &mut state.rng)
            }
        };
        let losses = evaluate_candidates(self.model, &self.prompts, &candidates)?;
        let selected = argmin(&losses);
        state.current_suffix = candidates[selected].clone();
        state.current_loss = losses[selected];
        if losses[selected] < state.best_loss {
            state.best_loss = losses[selected];
            state.best_suffix = state.current_suffix.clone();
        }
        state.iteration += 1;

        Ok(StepOutcome {
            selected_loss: losses[selected].to_f64(),
            grad_norm: grad.norm().to_f64(),
            guide_norm,
            trace: IterationTrace {
                proposals,
                candidates,
                losses: losses.iter().map(|&l| Scalar::to_f64(l)).collect(),
                selected,
            },
        })
    }

    /// Exact-match flags of every training prompt under `suffix`.
    pub fn matches(&self, suffix: &[TokenId]) -> Result<Vec<bool>> {
        self.prompts
            .iter()
            .map(|p| self.model.exact_match(&p.with_suffix(suffix)?))
            .collect()
    }

    /// Run the configured number of iterations from the initial suffix.
    pub fn run(&mut self) -> Result<AttackResult> {
        let cfg = self.config;
        let mut state = self.initial_state()?;
        let initial_suffix = state.current_suffix.clone();
        let initial_loss = state.current_loss.to_f64();
        let mut logs = Vec::with_capacity(cfg.iterations);
        let mut history = Vec::with_capacity(cfg.iterations);
        let mut trace = cfg.record_candidates.then(Vec::new);
        for _ in 0..cfg.iterations {
            let started = Instant::now();
            let out = self.step(&mut state)?;
            let matched = if state.iteration % cfg.match_every == 0 || cfg.early_exit {
                let m = self.matches(&state.best_suffix)?;
                Some(m.iter().filter(|&&b| b).count() as f64 / m.len() as f64)
            } else {
                None
            };
            logs.push(IterationLog {
                iter: state.iteration,
                selected_loss: out.selected_loss,
                best_loss: state.best_loss.to_f64(),
                matched,
                grad_norm: out.grad_norm,
                guide_norm: out.guide_norm,
                wall_ms: if cfg.record_timing {
                    started.elapsed().as_millis() as u64
                } else {
                    0
                },
            });
            history.push(state.current_suffix.clone());
            if let Some(t) = trace.as_mut() {
                t.push(out.trace);
            }
            if cfg.early_exit && matched == Some(1.0) {
                break;
            }
        }
        let matched = self.matches(&state.best_suffix)?.into_iter().all(|b| b);
        Ok(AttackResult {
            config: cfg.clone(),
            config_hash: cfg.hash(),
            initial_suffix,
            initial_loss,
            logs,
            best_suffix: state.best_suffix,
            best_loss: state.best_loss.to_f64(),
            matched,
            suffix_history: history,
            trace,
        })
    }
}

/// Query-specific attack on one prompt.
pub fn run_attack<T: Scalar>(
    model: &Model<T>,
    prompt: &PromptParts,
    config: &AttackConfig,
) -> Result<AttackResult> {
    AttackContext::new(model, std::slice::from_ref(prompt), config)?.run()
}

/// One suffix optimised jointly over `train`, then scored on `heldout`.
pub fn run_universal<T: Scalar>(
    model: &Model<T>,
    train: &[PromptParts],
    heldout: &[PromptParts],
    config: &AttackConfig,
) -> Result<UniversalResult> {
    let mut ctx = AttackContext::new(model, train, config)?;
    let attack = ctx.run()?;
    let train_matches = ctx.matches(&attack.best_suffix)?;
    let heldout_matches = heldout
        .iter()
        .map(|p| model.exact_match(&p.layout(&attack.best_suffix)?))
        .collect::<Result<Vec<_>>>()?;
    let rate = |m: &[bool]| {
        if m.is_empty() {
            0.0
        } else {
            m.iter().filter(|&&b| b).count() as f64 / m.len() as f64
        }
    };
    Ok(UniversalResult {
        train_mr: rate(&train_matches),
        heldout_mr: rate(&heldout_matches),
        attack,
        train_matches,
        heldout_matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn topk_orders_by_value() {
        assert_eq!(
            topk_candidates(&row(&[0.3, -0.5, 0.1, -0.2]), 2),
            vec![vec![1, 3]]
        );
    }

    #[test]
    fn topk_ties_go_to_lowest_id() {
        assert_eq!(topk_candidates(&row(&[0.0; 5]), 3), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn proposals_skip_incumbent() {
        let g = row(&[0.3, -0.5, 0.1, -0.2]);
        assert_eq!(proposal_sets(&g, 2, &[1]), vec![vec![3, 2]]);
    }

    #[test]
    fn gcg_candidates_change_exactly_one_position() {
        let current = vec![0, 0, 0, 0];
        let proposals = vec![vec![1, 2], vec![3, 4], vec![5, 6], vec![7, 8]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = sample_gcg_candidates(&current, &proposals, 50, &mut rng);
        assert_eq!(batch.len(), 50);
        for c in &batch {
            let diff: Vec<usize> = (0..4).filter(|&i| c[i] != current[i]).collect();
            assert_eq!(diff.len(), 1);
            assert!(proposals[diff[0]].contains(&c[diff[0]]));
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            batch,
            sample_gcg_candidates(&current, &proposals, 50, &mut rng2)
        );
    }

    #[test]
    fn autoprompt_evaluates_all_k_at_one_position() {
        let current = vec![0, 0, 0];
        let proposals = vec![vec![1, 2, 3], vec![4, 5, 6], vec![7, 8, 9]];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch = autoprompt_step_candidates(&current, &proposals, &mut rng);
        assert_eq!(batch.len(), 3);
        let pos = (0..3).find(|&i| batch[0][i] != 0).unwrap();
        for (c, &tok) in batch.iter().zip(&proposals[pos]) {
            assert_eq!(c[pos], tok);
            assert_eq!((0..3).filter(|&i| c[i] != current[i]).count(), 1);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        assert_eq!(
            batch,
            autoprompt_step_candidates(&current, &proposals, &mut rng2)
        );
    }

    #[test]
    fn argmin_takes_first_minimum() {
        assert_eq!(argmin(&[3.0, 1.0, 1.0, 2.0]), 1);
    }
}
