//! Text segmentation, vocabulary building and BERT-style fixed-length encoding.
//!
//! Segmentation is deliberately simple: every CJK ideograph is a token of its
//! own, and any other maximal run of non-whitespace characters is a single
//! lowercased token.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Special tokens in id order.
pub const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const CLS_ID: TokenId = 2;
pub const SEP_ID: TokenId = 3;
pub const MASK_ID: TokenId = 4;
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xF900..=0xFAFF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2EBEF
        | 0x2F800..=0x2FA1F
        | 0x30000..=0x3134F)
}

/// Splits text into tokens.
///
/// ```
/// use ensemble_bert::tokenizer::segment_text;
/// assert_eq!(segment_text("I love 中国"), ["i", "love", "中", "国"]);
/// ```
pub fn segment_text(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, tokens: &mut Vec<String>| {
        if !word.is_empty() {
            tokens.push(word.to_lowercase());
            word.clear();
        }
    };
    for c in text.chars() {
        if c.is_whitespace() {
            flush(&mut word, &mut tokens);
        } else if is_cjk(c) {
            flush(&mut word, &mut tokens);
            tokens.push(c.to_string());
        } else {
            word.push(c);
        }
    }
    flush(&mut word, &mut tokens);
    tokens
}

/// Bidirectional token/id map. Ids 0 to 4 are always
/// `[PAD] [UNK] [CLS] [SEP] [MASK]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from raw texts. Tokens are ordered by descending
    /// frequency, ties broken lexicographically; tokens seen fewer than
    /// `min_frequency` times are dropped and the result, specials included,
    /// holds at most `max_size` entries.
    pub fn build<S: AsRef<str>>(
        corpus: &[S],
        max_size: usize,
        min_frequency: usize,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Validation(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        if max_size < NUM_SPECIAL {
            return Err(Error::Config(format!(
                "max vocabulary size {max_size} cannot hold the {NUM_SPECIAL} special tokens"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for token in segment_text(text.as_ref()) {
                *counts.entry(token).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(token, n)| {
                *n >= min_frequency.max(1) && !SPECIAL_TOKENS.contains(&token.as_str())
            })
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - NUM_SPECIAL);
        Self::from_tokens(
            SPECIAL_TOKENS
                .iter()
                .map(|s| s.to_string())
                .chain(ranked.into_iter().map(|(t, _)| t)),
        )
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let id_to_token: Vec<String> = tokens.into_iter().collect();
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::Validation(format!(
                    "vocabulary must start with {SPECIAL_TOKENS:?}, id {i} is {:?}",
                    id_to_token.get(i)
                )));
            }
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, token) in id_to_token.iter().enumerate() {
            if token_to_id.insert(token.clone(), i as TokenId).is_some() {
                return Err(Error::Validation(format!("duplicate token {token:?}")));
            }
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Writes one token per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for token in &self.id_to_token {
            writeln!(file, "{token}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_owned))
    }

    /// Encodes text as `[CLS] tokens... [SEP] [PAD]...`, keeping the first
    /// `max_seq_len - 2` tokens.
    pub fn encode(&self, text: &str, max_seq_len: usize, label: usize) -> Result<EncodedExample> {
        if max_seq_len < 3 {
            return Err(Error::Config(format!(
                "max_seq_len must be at least 3, got {max_seq_len}"
            )));
        }
        let mut token_ids = Vec::with_capacity(max_seq_len);
        token_ids.push(CLS_ID);
        token_ids.extend(
            segment_text(text)
                .iter()
                .take(max_seq_len - 2)
                .map(|t| self.id(t).unwrap_or(UNK_ID)),
        );
        token_ids.push(SEP_ID);
        let real = token_ids.len();
        token_ids.resize(max_seq_len, PAD_ID);
        let attention_mask = (0..max_seq_len).map(|i| u8::from(i < real)).collect();
        Ok(EncodedExample {
            token_ids,
            segment_ids: vec![0; max_seq_len],
            attention_mask,
            label,
        })
    }

    /// The content tokens of an encoded sequence, without `[CLS]`, `[SEP]`
    /// and padding.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD_ID | CLS_ID | SEP_ID))
            .map(|&id| self.token(id).unwrap_or(UNK).to_owned())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub token_ids: Vec<TokenId>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    pub label: usize,
}

impl EncodedExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of leading positions covered by the attention mask.
    pub fn content_len(&self) -> usize {
        self.attention_mask
            .iter()
            .rposition(|&m| m != 0)
            .map_or(0, |p| p + 1)
    }

    /// Checks the structural invariants against a vocabulary size.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let n = self.token_ids.len();
        if self.segment_ids.len() != n || self.attention_mask.len() != n {
            return Err(Error::Validation("ragged encoded example".into()));
        }
        if self.token_ids.first() != Some(&CLS_ID) {
            return Err(Error::Validation("position 0 must hold [CLS]".into()));
        }
        let sep = self
            .token_ids
            .iter()
            .position(|&id| id == SEP_ID)
            .ok_or_else(|| Error::Validation("missing [SEP]".into()))?;
        if self.token_ids[sep + 1..].iter().any(|&id| id != PAD_ID) {
            return Err(Error::Validation("non-padding token after [SEP]".into()));
        }
        if self.token_ids[..sep].contains(&PAD_ID) {
            return Err(Error::Validation("padding before [SEP]".into()));
        }
        for (&id, &m) in self.token_ids.iter().zip(&self.attention_mask) {
            if (id != PAD_ID) != (m == 1) || m > 1 {
                return Err(Error::Validation(
                    "attention mask disagrees with padding".into(),
                ));
            }
        }
        if let Some(&bad) = self.token_ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::Validation(format!(
                "token id {bad} out of range for vocabulary of {vocab_size}"
            )));
        }
        if self.segment_ids.iter().any(|&s| s > 1) {
            return Err(Error::Validation("segment ids must be 0 or 1".into()));
        }
        Ok(())
    }
}
