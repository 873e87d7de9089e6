use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{CtegError, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token to id mapping; ids are contiguous, `<pad>` = 0, `<unk>` = 1, then
/// tokens in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let sorted: BTreeSet<&str> = tokens.into_iter().collect();
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(
            sorted
                .into_iter()
                .filter(|t| *t != PAD_TOKEN && *t != UNK_TOKEN)
                .map(str::to_string),
        );
        Vocabulary::from(all)
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

pub fn build_vocab(dataset: &Dataset) -> Result<Vocabulary> {
    if dataset.is_empty() {
        return Err(CtegError::EmptyInput("build_vocab"));
    }
    Ok(Vocabulary::from_tokens(
        dataset.instances().flat_map(|i| i.tokens.iter().map(String::as_str)),
    ))
}
