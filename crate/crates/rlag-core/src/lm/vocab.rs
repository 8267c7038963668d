//! Word-level whitespace tokenizer over a closed vocabulary.
//!
//! The synthetic corpus is closed-vocabulary by construction, so a word-level
//! tokenizer keeps token counts deterministic (the `|y|` and `|z|` lengths in
//! the reward normalizations) and removes all subword complexity. Out-of-
//! vocabulary words map to `<unk>`; a distinct `<pad>` is reserved so padding
//! can never be confused with end-of-sequence in length accounting.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token ids for one text span plus the text it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub char_source: String,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Dense token-to-id map with reserved control tokens at fixed ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const UNK: usize = 3;

    /// Builds a vocabulary from text sources: every whitespace-separated,
    /// lowercased word gets an id. Word ids follow the four reserved ids in
    /// sorted order, so construction is independent of input ordering.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for text in texts {
            for w in text.split_whitespace() {
                words.insert(w.to_lowercase());
            }
        }
        let reserved = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];
        let mut tokens: Vec<String> = reserved.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            words
                .into_iter()
                .filter(|w| !reserved.contains(&w.as_str())),
        );
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Whitespace-split, lowercased tokenization; unknown words become
    /// `<unk>`. Empty text is an error: every scored span must contain at
    /// least one token.
    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        let ids: Vec<usize> = text
            .split_whitespace()
            .map(|w| {
                self.index
                    .get(&w.to_lowercase())
                    .copied()
                    .unwrap_or(Self::UNK)
            })
            .collect();
        if ids.is_empty() {
            return Err(Error::EmptyInput(format!("no tokens in {text:?}")));
        }
        Ok(TokenSeq {
            ids,
            char_source: text.to_string(),
        })
    }

    /// Inverse of [`Vocabulary::tokenize`] up to whitespace normalization.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i).map(|s| s.as_str()).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.tokens.join("\n") + "\n";
        std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let tokens: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        if tokens.len() < 4
            || tokens[0] != PAD_TOKEN
            || tokens[1] != BOS_TOKEN
            || tokens[2] != EOS_TOKEN
            || tokens[3] != UNK_TOKEN
        {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: "missing reserved tokens <pad>/<bos>/<eos>/<unk> at ids 0..4".into(),
            });
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary { tokens, index })
    }
}
