//! Whitespace word-level tokenizer with four reserved ids.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::{Result, VlmError, EOS_ID, PAD_ID, SEP_ID, UNK_ID};

const RESERVED: [&str; 4] = ["<pad>", "<eos>", "<unk>", "<sep>"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TokenizerFile", into = "TokenizerFile")]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    words: Vec<String>,
}

impl TryFrom<TokenizerFile> for Tokenizer {
    type Error = VlmError;
    fn try_from(f: TokenizerFile) -> Result<Self> {
        Tokenizer::from_words(f.words)
    }
}

impl From<Tokenizer> for TokenizerFile {
    fn from(t: Tokenizer) -> Self {
        TokenizerFile { words: t.words }
    }
}

impl Tokenizer {
    /// Keeps the `vocab_size - 4` most frequent words; ties go to the
    /// lexicographically smaller word.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Result<Self> {
        if vocab_size < 5 {
            return Err(VlmError::Invalid(format!("vocabulary size {vocab_size} leaves no room for words")));
        }
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for line in corpus {
            for w in line.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(VlmError::EmptyDataset("tokenizer corpus has no words".into()));
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        // stable sort keeps lexicographic order within equal counts
        ranked.sort_by(|a, b| b.1.cmp(&a.1));
        let words = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(vocab_size - 4).map(|(w, _)| w.to_string()))
            .collect();
        Self::from_words(words)
    }

    /// Rebuilds from an id-ordered word list whose first four entries are the reserved tokens.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 4 || words[..4].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(VlmError::Invalid("word list must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(VlmError::Invalid(format!("duplicate word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Space-joined words; PAD and EOS are dropped, other reserved ids print as their markers.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD_ID && i != EOS_ID)
            .map(|&i| self.word(i).unwrap_or(RESERVED[UNK_ID as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn sep_word() -> &'static str {
        RESERVED[SEP_ID as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic() {
        let t = Tokenizer::build(["a a b"], 6).unwrap();
        assert_eq!(t.vocab_size(), 6);
        assert_eq!(t.id("a"), 4);
        assert_eq!(t.id("b"), 5);
        let t = Tokenizer::build(["c b a c"], 6).unwrap();
        assert_eq!(t.id("c"), 4);
        assert_eq!(t.id("a"), 5);
        assert_eq!(t.id("b"), UNK_ID);
    }

    #[test]
    fn round_trip_and_unknowns() {
        let t = Tokenizer::build(["the cat sat on the mat"], 64).unwrap();
        let ids = t.encode("the mat sat");
        assert_eq!(t.decode(&ids), "the mat sat");
        assert_eq!(t.encode("dog"), vec![UNK_ID]);
        assert_eq!(t.decode(&[t.id("cat"), EOS_ID, PAD_ID]), "cat");
    }

    #[test]
    fn rejects_tiny_vocab_and_empty_corpus() {
        assert!(Tokenizer::build(["a"], 4).is_err());
        assert!(Tokenizer::build(["   "], 10).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let t = Tokenizer::build(["x y z z"], 10).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        let back: Tokenizer = serde_json::from_str(&s).unwrap();
        assert_eq!(t, back);
        assert!(serde_json::from_str::<Tokenizer>(r#"{"words":["a"]}"#).is_err());
    }
}
