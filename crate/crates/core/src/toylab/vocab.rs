use crate::error::{LabError, Result};
use crate::layout::TokenId;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
const FIRST_CHAR: u8 = b' ';
const LAST_CHAR: u8 = b'~';

/// Character vocabulary: `pad`, `bos`, then printable ASCII in code-point
/// order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CharVocab;

impl CharVocab {
    pub fn new() -> Self {
        Self
    }

    pub fn len(&self) -> usize {
        2 + (LAST_CHAR - FIRST_CHAR + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> Result<TokenId> {
        match u8::try_from(c) {
            Ok(b) if (FIRST_CHAR..=LAST_CHAR).contains(&b) => Ok(2 + (b - FIRST_CHAR) as usize),
            _ => Err(LabError::UnknownChar(c)),
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Printable form of one token; specials render as `<pad>` / `<bos>`.
    pub fn token_str(&self, id: TokenId) -> String {
        match id {
            PAD => "<pad>".into(),
            BOS => "<bos>".into(),
            _ if id < self.len() => char::from(FIRST_CHAR + (id - 2) as u8).to_string(),
            _ => format!("<{id}>"),
        }
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&id| self.token_str(id)).collect()
    }
}
