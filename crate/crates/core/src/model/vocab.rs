use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::taskstream::Sample;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const RESERVED: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Token ↔ id map over every scene, question and answer token of a stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved ids first, then every other token in sorted order.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let mut set = BTreeSet::new();
        for s in samples {
            for tok in s.scene.iter().chain(&s.question).chain(&s.answer) {
                set.insert(tok.to_lowercase());
            }
        }
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(set.into_iter().filter(|t| !RESERVED.contains(&t.as_str())))
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.id(&t.to_lowercase())
                    .ok_or_else(|| Error::contract(format!("token {t:?} not in vocabulary")))
            })
            .collect()
    }

    /// Maps ids back to tokens, dropping reserved ids.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id > EOS)
            .filter_map(|&id| self.token(id).map(str::to_string))
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.to_tsv().as_bytes()).into()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, i + 1, "expected token<TAB>id"))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad id {id:?}")))?;
            if id != tokens.len() {
                return Err(Error::parse(path, i + 1, "ids must be dense and ordered"));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED.map(String::from) {
            return Err(Error::parse(path, 1, "reserved tokens missing"));
        }
        Ok(Self::from_tokens(tokens))
    }
}
