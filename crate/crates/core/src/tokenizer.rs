//! Fixed-vocabulary whitespace tokenizer.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KestError, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const UNK: TokenId = 4;
pub const NUM_SPECIAL: usize = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<mask>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from regular (non-special) tokens. Tokens are
    /// sorted and deduplicated, then numbered after the five specials.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = tokens.into_iter().map(|t| t.as_ref().to_string()).collect();
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for tok in set {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(KestError::config(format!("invalid vocabulary token {tok:?}")));
            }
            if SPECIAL_TOKENS.contains(&tok.as_str()) {
                return Err(KestError::config(format!("token {tok:?} collides with a special token")));
            }
            id_to_token.push(tok);
        }
        Ok(Self::from_id_list(id_to_token))
    }

    fn from_id_list(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        Self { id_to_token, token_to_id }
    }

    /// Builds from every whitespace token in the given texts.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        Self::from_tokens(texts.into_iter().flat_map(str::split_whitespace))
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

    /// Regular tokens in id order.
    pub fn regular_tokens(&self) -> &[String] {
        &self.id_to_token[NUM_SPECIAL..]
    }

    /// One regular token per line; line number = id − 5.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.regular_tokens().join("\n");
        body.push('\n');
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut ids: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for line in text.lines() {
            let tok = line.trim_end_matches('\r');
            if tok.is_empty() {
                continue;
            }
            ids.push(tok.to_string());
        }
        let vocab = Self::from_id_list(ids);
        if vocab.token_to_id.len() != vocab.id_to_token.len() {
            return Err(KestError::integrity("vocabulary file contains duplicate tokens"));
        }
        Ok(vocab)
    }
}

/// Token ids padded to a fixed `L_max`; `length` counts BOS through EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    length: usize,
}

impl TokenSequence {
    /// Wraps content ids in BOS/EOS and pads to `l_max`, truncating content
    /// to `l_max − 2` tokens.
    pub fn from_content(content: &[TokenId], l_max: usize) -> Self {
        assert!(l_max >= 2, "L_max must leave room for BOS and EOS");
        let keep = content.len().min(l_max - 2);
        let mut ids = Vec::with_capacity(l_max);
        ids.push(BOS);
        ids.extend_from_slice(&content[..keep]);
        ids.push(EOS);
        let length = ids.len();
        ids.resize(l_max, PAD);
        Self { ids, length }
    }

    /// Validates raw padded ids: no PAD inside `[0, length)`, only PAD after.
    pub fn from_padded(ids: Vec<TokenId>, length: usize) -> Result<Self> {
        if length > ids.len() {
            return Err(KestError::integrity(format!("length {length} exceeds L_max {}", ids.len())));
        }
        if ids[..length].contains(&PAD) {
            return Err(KestError::integrity("PAD inside the active span"));
        }
        if ids[length..].iter().any(|&t| t != PAD) {
            return Err(KestError::integrity("non-PAD token after the active span"));
        }
        Ok(Self { ids, length })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn l_max(&self) -> usize {
        self.ids.len()
    }

    /// The active span, BOS through EOS.
    pub fn active(&self) -> &[TokenId] {
        &self.ids[..self.length]
    }

    /// Tokens strictly between BOS and EOS.
    pub fn content(&self) -> &[TokenId] {
        let end = if self.length >= 1 && self.ids[self.length - 1] == EOS { self.length - 1 } else { self.length };
        let start = if self.ids.first() == Some(&BOS) { 1 } else { 0 };
        &self.ids[start.min(end)..end]
    }

    /// Positions a mask may touch: `[1, length − 1)`.
    pub fn maskable_len(&self) -> usize {
        self.length.saturating_sub(2)
    }

    pub(crate) fn set(&mut self, pos: usize, id: TokenId) {
        assert!(pos < self.length, "write outside the active span");
        self.ids[pos] = id;
    }
}

/// Whitespace-tokenizes `text` into a padded sequence.
pub fn encode(text: &str, vocab: &Vocabulary, l_max: usize) -> TokenSequence {
    let content: Vec<TokenId> = text.split_whitespace().map(|t| vocab.id(t).unwrap_or(UNK)).collect();
    TokenSequence::from_content(&content, l_max)
}

/// Renders the tokens between BOS and EOS. MASK renders as `<mask>` and
/// UNK as `<unk>`.
pub fn decode(seq: &TokenSequence, vocab: &Vocabulary) -> Result<String> {
    let mut words = Vec::new();
    for &id in seq.active() {
        let tok = vocab
            .token(id)
            .ok_or_else(|| KestError::integrity(format!("token id {id} outside vocabulary of {}", vocab.len())))?;
        match id {
            PAD | BOS => continue,
            EOS => break,
            _ => words.push(tok),
        }
    }
    Ok(words.join(" "))
}
