use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub type TokenId = usize;

/// Token sequence `prefix | query | suffix | connector | target` with the
/// span boundaries kept alongside. All indices are 0-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    tokens: Vec<TokenId>,
    query: Range<usize>,
    suffix: Range<usize>,
    connector: Range<usize>,
    target: Range<usize>,
}

impl PromptLayout {
    pub fn assemble(
        prefix: &[TokenId],
        query: &[TokenId],
        suffix: &[TokenId],
        connector: &[TokenId],
        target: &[TokenId],
    ) -> Result<Self> {
        if suffix.is_empty() {
            return Err(LabError::Layout("adversarial suffix is empty".into()));
        }
        if target.is_empty() {
            return Err(LabError::Layout("target span is empty".into()));
        }
        let mut tokens = Vec::with_capacity(
            prefix.len() + query.len() + suffix.len() + connector.len() + target.len(),
        );
        let mut span = |part: &[TokenId]| {
            let start = tokens.len();
            tokens.extend_from_slice(part);
            start..tokens.len()
        };
        span(prefix);
        let query = span(query);
        let suffix = span(suffix);
        let connector = span(connector);
        let target = span(target);
        Ok(Self {
            tokens,
            query,
            suffix,
            connector,
            target,
        })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn query_span(&self) -> Range<usize> {
        self.query.clone()
    }

    pub fn suffix_span(&self) -> Range<usize> {
        self.suffix.clone()
    }

    pub fn connector_span(&self) -> Range<usize> {
        self.connector.clone()
    }

    pub fn target_span(&self) -> Range<usize> {
        self.target.clone()
    }

    pub fn suffix(&self) -> &[TokenId] {
        &self.tokens[self.suffix.clone()]
    }

    pub fn target(&self) -> &[TokenId] {
        &self.tokens[self.target.clone()]
    }

    /// Everything before the target.
    pub fn prompt(&self) -> &[TokenId] {
        &self.tokens[..self.target.start]
    }

    /// Position of the last token before the target (the last connector
    /// token, or the last suffix token without a connector).
    pub fn last_prompt_position(&self) -> usize {
        self.target.start - 1
    }

    /// Positions whose logits predict a target token, with that token:
    /// `(o, tokens[o + 1])` for `o` in `last_prompt_position()..len() - 1`.
    pub fn loss_targets(&self) -> Vec<(usize, TokenId)> {
        (self.last_prompt_position()..self.tokens.len() - 1)
            .map(|o| (o, self.tokens[o + 1]))
            .collect()
    }

    /// Same layout with a different suffix of equal length.
    pub fn with_suffix(&self, suffix: &[TokenId]) -> Result<Self> {
        if suffix.len() != self.suffix.len() {
            return Err(LabError::Layout(format!(
                "suffix length {} differs from layout's {}",
                suffix.len(),
                self.suffix.len()
            )));
        }
        let mut out = self.clone();
        out.tokens[self.suffix.clone()].copy_from_slice(suffix);
        Ok(out)
    }

    /// Same layout with the token at `position` replaced.
    pub fn with_token(&self, position: usize, token: TokenId) -> Self {
        let mut out = self.clone();
        out.tokens[position] = token;
        out
    }
}

/// A prompt without its adversarial suffix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptParts {
    pub prefix: Vec<TokenId>,
    pub query: Vec<TokenId>,
    pub connector: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl PromptParts {
    pub fn layout(&self, suffix: &[TokenId]) -> Result<PromptLayout> {
        PromptLayout::assemble(
            &self.prefix,
            &self.query,
            suffix,
            &self.connector,
            &self.target,
        )
    }
}
