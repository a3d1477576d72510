use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HetaError, Result};

pub const UNK: &str = "<unk>";
pub const SENTINEL: &str = "<sentinel>";
pub const SEPARATOR: &str = "<s>";

pub const UNK_ID: usize = 0;
pub const SENTINEL_ID: usize = 1;
pub const SEPARATOR_ID: usize = 2;

pub const VOCAB_VERSION: u32 = 1;

/// Whitespace tokenizer over a fixed token list.
///
/// Ids are dense from zero; the first three are always `<unk>`,
/// `<sentinel>` and `<s>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    tokens: Vec<String>,
}

impl Vocab {
    /// Reserved tokens followed by `extra` in order. Duplicates are rejected.
    pub fn new<S: AsRef<str>>(extra: &[S]) -> Result<Self> {
        let tokens = [UNK, SENTINEL, SEPARATOR]
            .iter()
            .map(|s| s.to_string())
            .chain(extra.iter().map(|s| s.as_ref().to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[UNK_ID] != UNK || tokens[SENTINEL_ID] != SENTINEL || tokens[SEPARATOR_ID] != SEPARATOR {
            return Err(HetaError::VocabMismatch("reserved tokens missing or out of place".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(HetaError::VocabMismatch(format!("invalid token {:?}", t)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(HetaError::VocabMismatch(format!("duplicate token {:?}", t)));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(HetaError::OutOfVocab { id, vocab: self.len() })
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids.iter().map(|&i| self.token(i)).collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// Hex SHA-256 over the newline-joined token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&VocabFile {
            version: VOCAB_VERSION,
            tokens: self.tokens.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(s)?;
        if file.version != VOCAB_VERSION {
            return Err(HetaError::Version {
                found: file.version.to_string(),
                expected: VOCAB_VERSION.to_string(),
            });
        }
        Self::from_tokens(file.tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Self::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}
