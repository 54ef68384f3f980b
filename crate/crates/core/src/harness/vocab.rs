//! Character- and word-level vocabularies.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::config::Tokenization;
use super::HarnessError;

pub const UNK: &str = "<unk>";

/// Token types ordered by descending corpus frequency, ties broken
/// lexicographically, with `<unk>` last.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabDoc", into = "VocabDoc")]
pub struct Vocab {
    mode: Tokenization,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabDoc {
    mode: Tokenization,
    tokens: Vec<String>,
}

impl From<VocabDoc> for Vocab {
    fn from(doc: VocabDoc) -> Self {
        Self::from_tokens(doc.mode, doc.tokens)
    }
}

impl From<Vocab> for VocabDoc {
    fn from(v: Vocab) -> Self {
        Self {
            mode: v.mode,
            tokens: v.tokens,
        }
    }
}

/// Splits text into surface tokens for the given mode.
pub fn tokenize(text: &str, mode: Tokenization) -> Vec<String> {
    match mode {
        Tokenization::Char => text.chars().map(String::from).collect(),
        Tokenization::Word => text.split_whitespace().map(String::from).collect(),
    }
}

impl Vocab {
    /// Builds a vocabulary from `text`. Word types seen fewer than `min_count`
    /// times are dropped; `max_size` (when given) caps the total size,
    /// `<unk>` included.
    pub fn build(
        text: &str,
        mode: Tokenization,
        min_count: usize,
        max_size: Option<usize>,
    ) -> Result<Self, HarnessError> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for tok in tokenize(text, mode) {
            if tok != UNK {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(HarnessError::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let floor = match mode {
            Tokenization::Char => 1,
            Tokenization::Word => min_count.max(1),
        };
        let mut types: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= floor).collect();
        types.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(cap) = max_size {
            if cap < 2 {
                return Err(HarnessError::Config(format!("vocab_size {cap} leaves no room for real tokens")));
            }
            types.truncate(cap - 1);
        }
        let mut tokens: Vec<String> = types.into_iter().map(|(t, _)| t).collect();
        tokens.push(UNK.to_string());
        Ok(Self::from_tokens(mode, tokens))
    }

    fn from_tokens(mode: Tokenization, tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { mode, tokens, index }
    }

    pub fn mode(&self) -> Tokenization {
        self.mode
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

    pub fn unk_id(&self) -> usize {
        self.index[UNK]
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or_else(|| self.unk_id())
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text, self.mode).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let sep = match self.mode {
            Tokenization::Char => "",
            Tokenization::Word => " ",
        };
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(sep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn char_vocab() {
        let v = Vocab::build("abab", Tokenization::Char, 1, None).unwrap();
        assert_eq!(v.tokens(), &["a", "b", UNK]);
        assert_eq!(v.encode("abz"), vec![0, 1, 2]);
    }

    #[test]
    fn word_vocab_orders_by_frequency_then_lexically() {
        let v = Vocab::build("a b a", Tokenization::Word, 1, None).unwrap();
        assert_eq!(v.tokens(), &["a", "b", UNK]);
        let v = Vocab::build("z y y x x", Tokenization::Word, 1, None).unwrap();
        assert_eq!(v.tokens(), &["x", "y", "z", UNK]);
        let v = Vocab::build("z y y x x", Tokenization::Word, 2, None).unwrap();
        assert_eq!(v.tokens(), &["x", "y", UNK]);
        let v = Vocab::build("z y y x x", Tokenization::Word, 1, Some(2)).unwrap();
        assert_eq!(v.tokens(), &["x", UNK]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(Vocab::build("", Tokenization::Char, 1, None).is_err());
        assert!(Vocab::build("  \n ", Tokenization::Word, 1, None).is_err());
    }

    #[test]
    fn serde_round_trip_rebuilds_index() {
        let v = Vocab::build("hello world", Tokenization::Char, 1, None).unwrap();
        let back: Vocab = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("o"), v.id("o"));
    }

    proptest! {
        #[test]
        fn char_encode_decode_is_identity(text in "[a-z ,.\n]{1,40}") {
            let v = Vocab::build(&text, Tokenization::Char, 1, None).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&text)), text);
        }

        #[test]
        fn word_encode_decode_is_identity(words in proptest::collection::vec("[a-z]{1,5}", 1..12)) {
            let text = words.join(" ");
            let v = Vocab::build(&text, Tokenization::Word, 1, None).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&text)), text);
        }
    }
}
