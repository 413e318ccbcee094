//! Tokenizer vocabularies and a greedy longest-match tokenizer.
//!
//! A vocabulary is an ordered list of unique, non-empty token strings; a
//! token's id is its position in that list.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Serialize, Deserialize)]
struct VocabFile {
    name: String,
    tokens: Vec<String>,
}

/// Bidirectional id <-> string mapping for one tokenizer.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    name: String,
    tokens: Vec<String>,
    lookup: HashMap<String, TokenId>,
    max_token_chars: usize,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.tokens == other.tokens
    }
}

impl Vocabulary {
    pub fn new(name: impl Into<String>, tokens: Vec<String>) -> Result<Self> {
        let name = name.into();
        let mut lookup = HashMap::with_capacity(tokens.len());
        let mut max_token_chars = 0;
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Vocab {
                    vocab: name,
                    msg: format!("entry {id} is the empty string"),
                });
            }
            let id = TokenId::try_from(id).map_err(|_| Error::Vocab {
                vocab: name.clone(),
                msg: "too many tokens".into(),
            })?;
            if let Some(prev) = lookup.insert(tok.clone(), id) {
                return Err(Error::Vocab {
                    vocab: name,
                    msg: format!("duplicate token {tok:?} at entries {prev} and {id}"),
                });
            }
            max_token_chars = max_token_chars.max(tok.chars().count());
        }
        Ok(Self {
            name,
            tokens,
            lookup,
            max_token_chars,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.lookup.get(token).copied()
    }

    pub fn contains_id(&self, id: TokenId) -> bool {
        (id as usize) < self.tokens.len()
    }

    pub fn decode(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::OutOfRange {
                vocab: self.name.clone(),
                id,
                size: self.tokens.len(),
            })
    }

    /// Builds a [`TokenSequence`] from ids, decoding each one.
    pub fn sequence(&self, ids: &[TokenId]) -> Result<TokenSequence> {
        let texts = ids
            .iter()
            .map(|&id| self.decode(id).map(str::to_owned))
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenSequence {
            vocab: self.name.clone(),
            ids: ids.to_vec(),
            texts,
        })
    }

    /// Greedy longest-match segmentation, left to right.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut ids = Vec::new();
        let mut texts = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            let start = chars[pos].0;
            let longest = self.max_token_chars.min(chars.len() - pos);
            let hit = (1..=longest).rev().find_map(|len| {
                let end = chars.get(pos + len).map_or(text.len(), |&(b, _)| b);
                let piece = &text[start..end];
                self.lookup.get(piece).map(|&id| (id, piece, len))
            });
            match hit {
                Some((id, piece, len)) => {
                    ids.push(id);
                    texts.push(piece.to_owned());
                    pos += len;
                }
                None => {
                    return Err(Error::Uncoverable {
                        vocab: self.name.clone(),
                        position: pos,
                        ch: chars[pos].1,
                    })
                }
            }
        }
        Ok(TokenSequence {
            vocab: self.name.clone(),
            ids,
            texts,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&raw).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            },
            other => other,
        })
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(raw).map_err(|e| Error::Parse {
            path: Default::default(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        Self::new(file.name, file.tokens)
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            name: self.name.clone(),
            tokens: self.tokens.clone(),
        };
        serde_json::to_string(&file).expect("vocabulary serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Loads a vocabulary file.
pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocabulary> {
    Vocabulary::load(path)
}

pub fn tokenize(vocab: &Vocabulary, text: &str) -> Result<TokenSequence> {
    vocab.tokenize(text)
}

pub fn decode(vocab: &Vocabulary, id: TokenId) -> Result<&str> {
    vocab.decode(id)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub vocab: String,
    pub ids: Vec<TokenId>,
    pub texts: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Builds a sequence directly from strings, without a backing vocabulary.
    /// Ids are positions; only the texts matter for pairing.
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        Self {
            vocab: String::new(),
            ids: (0..texts.len() as TokenId).collect(),
            texts: texts.iter().map(|s| s.as_ref().to_owned()).collect(),
        }
    }
}
