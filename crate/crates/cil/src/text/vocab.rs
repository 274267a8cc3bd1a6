//! Token inventory. Nine special tokens own the lowest ids in a fixed order;
//! corpus words follow, sorted, so a vocabulary is a pure function of its
//! corpus and threshold.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const H_CLS: usize = 5;
pub const H_SEP: usize = 6;
pub const T_CLS: usize = 7;
pub const T_SEP: usize = 8;

pub const SPECIAL_TOKENS: [&str; 9] =
    ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[H-CLS]", "[H-SEP]", "[T-CLS]", "[T-SEP]"];
pub const N_SPECIAL: usize = SPECIAL_TOKENS.len();

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_sorted_words(words: impl IntoIterator<Item = String>) -> Vocab {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    /// Counts tokens across the given corpora and keeps those seen at least
    /// `min_freq` times. Words that collide with a special literal are
    /// dropped rather than given a second id.
    pub fn from_corpora(corpora: &[&Corpus], min_freq: usize) -> Vocab {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for corpus in corpora {
            for bag in &corpus.bags {
                for inst in &bag.instances {
                    for tok in &inst.tokens {
                        *freq.entry(tok.as_str()).or_insert(0) += 1;
                    }
                }
            }
        }
        let words = freq
            .into_iter()
            .filter(|(w, f)| *f >= min_freq.max(1) && !SPECIAL_TOKENS.contains(w))
            .map(|(w, _)| w.to_string());
        Vocab::from_sorted_words(words)
    }

    /// Rebuilds a vocabulary from a complete id-ordered token list, as
    /// stored in checkpoints. The special prefix and uniqueness are checked.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < N_SPECIAL {
            return Err(Error::config(format!("vocabulary has fewer than {N_SPECIAL} tokens")));
        }
        for (i, want) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::config(format!(
                    "vocabulary id {i} must be {want:?}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::config(format!("vocabulary id {i} is empty")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// All tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id for a word, falling back to `[UNK]`.
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for t in &self.tokens {
            writeln!(w, "{t}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let tok = line.trim().to_string();
            if tok.is_empty() {
                return Err(Error::data(path, i + 1, "empty token"));
            }
            tokens.push(tok);
        }
        if tokens.len() < N_SPECIAL {
            return Err(Error::data(path, 1, format!("fewer than {N_SPECIAL} tokens")));
        }
        for (i, want) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::data(path, i + 1, format!("expected {want:?}, found {:?}", tokens[i])));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::data(path, i + 1, format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }
}
