use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const ABB_ID: u32 = 3;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const ABB: &str = "[ABB]";

const RESERVED: [&str; 4] = [PAD, UNK, CLS, ABB];

/// Default number of corpus tokens kept in a vocabulary.
pub const DEFAULT_VOCAB_TOKENS: usize = 8000;

/// Splits text into lowercased word and punctuation pieces. The literal
/// `[ABB]` comes out as a single piece.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with(ABB) {
            flush(&mut word, &mut out);
            out.push(ABB.to_string());
            rest = &rest[ABB.len()..];
            continue;
        }
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            flush(&mut word, &mut out);
            if !c.is_whitespace() {
                out.push(c.to_lowercase().collect());
            }
        }
        rest = &rest[c.len_utf8()..];
    }
    flush(&mut word, &mut out);
    out
}

fn flush(word: &mut String, out: &mut Vec<String>) {
    if !word.is_empty() {
        out.push(std::mem::take(word));
    }
}

/// Token ↔ id map with four reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Vocabulary::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}

impl Vocabulary {
    /// Builds a vocabulary from the `max_tokens` most frequent corpus tokens
    /// (ties broken lexicographically).
    pub fn from_corpus<I, S>(sentences: I, max_tokens: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for s in sentences {
            for tok in split_tokens(s.as_ref()) {
                if !RESERVED.contains(&tok.as_str()) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(max_tokens).map(|(t, _)| t))
            .collect();
        Vocabulary::from_tokens(tokens).expect("corpus tokens exclude reserved strings")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err("vocabulary must start with [PAD] [UNK] [CLS] [ABB]".into());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(format!("duplicate vocabulary token `{t}`"));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[CLS]` followed by the ids of `text`'s pieces.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        std::iter::once(CLS_ID)
            .chain(split_tokens(text).iter().map(|t| self.id(t)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_corpus(["he saw a dog", "a dog saw a cat."], 100)
    }

    #[test]
    fn splits_punctuation_and_markers() {
        assert_eq!(
            split_tokens("Mrs. Everett,[ABB] saw"),
            vec!["mrs", ".", "everett", ",", "[ABB]", "saw"]
        );
        assert_eq!(split_tokens("[abb]"), vec!["[", "abb", "]"]);
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab();
        assert_eq!(v.tokenize("[ABB] saw a [ABB]"), vec![CLS_ID, ABB_ID, v.id("saw"), v.id("a"), ABB_ID]);
        assert_eq!(v.tokenize(""), vec![CLS_ID]);
        assert_eq!(v.tokenize("Zebra"), vec![CLS_ID, UNK_ID]);
        assert_eq!(v.tokenize("A DOG"), v.tokenize("a dog"));
    }

    #[test]
    fn frequency_ordering_and_limit() {
        let v = vocab();
        assert_eq!(v.token(4), Some("a"));
        let small = Vocabulary::from_corpus(["he saw a dog", "a dog saw a cat."], 2);
        assert_eq!(small.len(), 6);
    }

    #[test]
    fn reserved_ids_are_exclusive() {
        let v = vocab();
        assert_eq!(v.id(ABB), ABB_ID);
        let abb_like = v.tokens().iter().filter(|t| v.id(t) == ABB_ID).count();
        assert_eq!(abb_like, 1);
        assert!(Vocabulary::from_tokens(vec!["x".into()]).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let v = vocab();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
