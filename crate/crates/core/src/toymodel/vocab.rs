// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const N_CONTENT: usize = 40;
pub const N_FILLER: usize = 16;

pub const NAMES: [&str; 16] = [
    "Mary", "John", "Alice", "Bob", "Carol", "Dave", "Erin", "Frank", "Grace", "Henry", "Ivy",
    "Jack", "Kate", "Leo", "Mia", "Noah",
];
pub const PLACES: [&str; 4] = ["store", "park", "school", "beach"];
pub const OBJECTS: [&str; 4] = ["bag", "ball", "book", "drink"];
pub const VERBS: [&str; 2] = ["gave", "handed"];
const TEMPLATE_WORDS: [&str; 5] = ["When", "and", "went", "to", "the"];

/// The shared symbolic vocabulary for all three task families.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// BOS, PAD, digits, brackets, induction content and filler tokens,
    /// names and the IOI template words.
    pub fn standard() -> Self {
        let mut t: Vec<String> = vec!["<bos>".into(), "<pad>".into()];
        t.extend((0..10).map(|d| d.to_string()));
        t.push("[".into());
        t.push("]".into());
        t.extend((0..N_CONTENT).map(|i| format!("c{i:02}")));
        t.extend((0..N_FILLER).map(|i| format!("f{i:02}")));
        t.extend(NAMES.iter().map(|s| s.to_string()));
        t.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        t.extend(PLACES.iter().map(|s| s.to_string()));
        t.extend(OBJECTS.iter().map(|s| s.to_string()));
        t.extend(VERBS.iter().map(|s| s.to_string()));
        t.push(",".into());
        Vocabulary::new(t).expect("standard vocabulary has unique tokens")
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(self) -> Result<Self> {
        Vocabulary::new(self.tokens)
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

    /// Id of a token that must exist; panics otherwise.
    pub fn expect_id(&self, token: &str) -> usize {
        self.id(token).unwrap_or_else(|| panic!("token {token:?} not in vocabulary"))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn bos(&self) -> usize {
        self.expect_id("<bos>")
    }

    pub fn pad(&self) -> usize {
        self.expect_id("<pad>")
    }

    pub fn digit(&self, d: usize) -> usize {
        self.expect_id(&(d % 10).to_string())
    }

    pub fn content_ids(&self) -> Vec<usize> {
        (0..N_CONTENT).map(|i| self.expect_id(&format!("c{i:02}"))).collect()
    }

    pub fn filler_ids(&self) -> Vec<usize> {
        (0..N_FILLER).map(|i| self.expect_id(&format!("f{i:02}"))).collect()
    }

    pub fn name_ids(&self) -> Vec<usize> {
        NAMES.iter().map(|n| self.expect_id(n)).collect()
    }

    /// Space-separated rendering of a token id sequence.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_vocabulary_fits_a_byte() {
        let v = Vocabulary::standard();
        assert!(v.len() <= 256);
        assert_eq!(v.bos(), 0);
        assert_eq!(v.render(&[v.digit(3), v.expect_id("[")]), "3 [");
    }

    #[test]
    fn serde_round_trip_rebuilds_index() {
        let v = Vocabulary::standard();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        let back = back.reindex().unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("Mary"), v.id("Mary"));
    }
}
