use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::{BOS, EOS, PAD, UNK};

const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Lowercased word-and-punctuation split. Runs of ASCII alphanumerics (and
/// any non-ASCII letters) form words; every other non-space character is
/// its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Closed word vocabulary. Ids `0..4` are `<pad> <unk> <bos> <eos>`; the
/// remaining words follow in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .flat_map(|w| split_words(w.as_ref()))
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let words: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(set)
            .collect();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        debug_assert_eq!((PAD, UNK, BOS, EOS), (0, 1, 2, 3));
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("<unk>", String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_words_and_punctuation() {
        assert_eq!(
            split_words("What is the capital of Sweden ?"),
            ["what", "is", "the", "capital", "of", "sweden", "?"]
        );
        assert_eq!(split_words("Sweden?"), ["sweden", "?"]);
        assert!(split_words("").is_empty());
        assert_eq!(split_words("X's job."), ["x", "'", "s", "job", "."]);
    }

    #[test]
    fn tokenize_is_deterministic_with_unk() {
        let v = Vocab::from_words(["what is the capital of sweden ?"]);
        let a = v.tokenize("What is the capital of Sweden ?");
        assert_eq!(a, v.tokenize("What is the capital of Sweden ?"));
        assert_eq!(a.len(), 7);
        assert!(a.iter().all(|&t| t >= 4));
        assert_eq!(v.tokenize("capital of narnia"), vec![v.id("capital"), v.id("of"), UNK]);
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.decode(&a), "what is the capital of sweden ?");
    }
}
