use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSentence, QuestionBank};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Lower-cased word vocabulary. Id 0 is padding, id 1 is the unknown word.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from training sentences plus every question in the bank.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a AnnotatedSentence>, bank: &QuestionBank) -> Self {
        let mut words = vec!["<pad>".to_string(), "<unk>".to_string()];
        let mut index: HashMap<String, usize> = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let mut add = |w: String| {
            if !index.contains_key(&w) {
                index.insert(w.clone(), words.len());
                words.push(w);
            }
        };
        for s in sentences {
            for t in &s.tokens {
                add(normalize(t));
            }
        }
        for (_, group) in bank.groups() {
            for q in group {
                for t in tokenize(q) {
                    add(t);
                }
            }
        }
        Self { words, index }
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(&normalize(token)).copied().unwrap_or(UNK)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }
}

pub fn normalize(token: &str) -> String {
    token.to_lowercase()
}

/// Whitespace tokenisation with a trailing `?`, `.` or `,` split off.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for w in text.split_whitespace() {
        let w = normalize(w);
        match w.char_indices().last() {
            Some((i, c)) if i > 0 && matches!(c, '?' | ',' | '.') => {
                out.push(w[..i].to_string());
                out.push(c.to_string());
            }
            _ => out.push(w),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_unknowns() {
        let bank = QuestionBank::from_json(r#"{"toloc": ["Where to?"]}"#).unwrap();
        let s = AnnotatedSentence {
            id: "a".into(),
            tokens: vec!["Show".into(), "flights".into()],
            slots: vec![],
        };
        let v = Vocabulary::build([&s], &bank);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.encode(&["show", "FLIGHTS"]), vec![2, 3]);
        assert_eq!(v.encode_text("where to?"), vec![4, 5, 6]);
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("Where to?"), vec!["where", "to", "?"]);
        assert_eq!(tokenize("a ?"), vec!["a", "?"]);
    }
}
