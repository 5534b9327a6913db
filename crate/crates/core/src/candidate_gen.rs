//! Rule-based short-form generators.
//!
//! Two generators feed every lookup table in the crate:
//!
//! * [`contractions_of`] lists the contraction keys of a single word: drop
//!   everything but letters, drop vowels, keep the first remaining character
//!   and append every order-preserving subsequence of the rest.
//! * [`extract_abbreviations`] finds runs of capitalized words (joined across
//!   connector words such as "of" or "for") and pairs each run with the
//!   lowercase initials of its capitalized words.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;

/// Devoweled forms longer than this are truncated before enumeration.
pub const MAX_DEVOWELED_LEN: usize = 16;

/// Lowercase words that may sit inside a capitalized phrase without breaking it.
pub const CONNECTORS: [&str; 9] = ["of", "for", "and", "in", "on", "at", "to", "the", "by"];

/// A word reduced to lowercase ASCII letters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NormalizedWord(String);

impl NormalizedWord {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The word with `a e i o u` removed.
    pub fn devoweled(&self) -> String {
        self.0.chars().filter(|c| !is_vowel(*c)).collect()
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for NormalizedWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for NormalizedWord {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// A contraction key such as `ptnt` for `patient`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContractionKey(String);

impl ContractionKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for ContractionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for ContractionKey {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// An (initials, phrase) pair found in a sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedAbbreviation {
    /// Lowercase initials of the capitalized words, e.g. `acl`.
    pub key: String,
    /// The phrase exactly as it appears in the source sentence.
    pub expansion: String,
    /// Byte range of `expansion` within the source sentence.
    pub span: Range<usize>,
}

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u')
}

/// Keeps only ASCII letters and lowercases them.
pub fn normalize_word(raw: &str) -> NormalizedWord {
    NormalizedWord(
        raw.chars()
            .filter(char::is_ascii_alphabetic)
            .map(|c| c.to_ascii_lowercase())
            .collect(),
    )
}

/// Devoweled form, truncated to [`MAX_DEVOWELED_LEN`] characters.
pub fn devowel_for_keys(word: &NormalizedWord) -> String {
    word.devoweled().chars().take(MAX_DEVOWELED_LEN).collect()
}

/// All contraction keys of `word`.
///
/// The first devoweled character is fixed; it is prefixed to every
/// subsequence (including the empty one) of the remaining devoweled
/// characters. Empty when the word has no consonants.
pub fn contractions_of(word: &NormalizedWord) -> BTreeSet<ContractionKey> {
    let base = devowel_for_keys(word);
    let mut chars = base.chars();
    let Some(first) = chars.next() else {
        return BTreeSet::new();
    };
    let rest: Vec<char> = chars.collect();

    let mut keys: Vec<String> = Vec::with_capacity(1 << rest.len());
    keys.push(first.to_string());
    for &c in &rest {
        for i in 0..keys.len() {
            let mut next = String::with_capacity(keys[i].len() + 1);
            next.push_str(&keys[i]);
            next.push(c);
            keys.push(next);
        }
    }
    keys.into_iter().map(ContractionKey).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokenClass {
    Capitalized,
    Connector,
    Other,
}

#[derive(Debug)]
struct ScannedToken {
    class: TokenClass,
    core: Range<usize>,
    break_before: bool,
    break_after: bool,
}

fn is_capitalized(core: &str) -> bool {
    let mut chars = core.chars();
    match chars.next() {
        Some(c) if c.is_uppercase() => chars.all(|c| c.is_alphabetic() || c == '.'),
        _ => false,
    }
}

/// A lone trailing period on a longer word ("Court.") ends the sentence;
/// short titles such as "Mrs." or "Co." do not.
fn ends_sentence(core: &str) -> bool {
    core.ends_with('.') && core.matches('.').count() == 1 && core.len() > 4
}

fn scan(sentence: &str) -> Vec<ScannedToken> {
    let mut out = Vec::new();
    for raw in sentence.split_whitespace() {
        // split_whitespace yields subslices of `sentence`.
        let start = raw.as_ptr() as usize - sentence.as_ptr() as usize;

        let lead = raw.len() - raw.trim_start_matches(|c: char| !c.is_alphabetic()).len();
        let body = &raw[lead..];
        let trimmed = body.trim_end_matches(|c: char| !(c.is_alphabetic() || c == '.'));
        let core = start + lead..start + lead + trimmed.len();
        let core_str = &sentence[core.clone()];
        let class = if core_str.is_empty() {
            TokenClass::Other
        } else if CONNECTORS.contains(&core_str) {
            TokenClass::Connector
        } else if is_capitalized(core_str) {
            TokenClass::Capitalized
        } else {
            TokenClass::Other
        };
        out.push(ScannedToken {
            class,
            break_before: lead > 0,
            break_after: trimmed.len() < body.len()
                || (class == TokenClass::Capitalized && ends_sentence(core_str)),
            core,
        });
    }
    out
}

struct Run {
    caps: Vec<Range<usize>>,
}

fn finish(sentence: &str, run: Option<Run>, out: &mut Vec<ExtractedAbbreviation>) {
    let Some(run) = run else { return };
    if run.caps.len() < 2 {
        return;
    }
    let start = run.caps[0].start;
    let last = run.caps.last().expect("non-empty run");
    let last_str = &sentence[last.clone()];
    let mut end = last.end;
    if last_str.ends_with('.') && last_str.matches('.').count() == 1 {
        end -= 1;
    }
    let key = run
        .caps
        .iter()
        .filter_map(|r| sentence[r.clone()].chars().next())
        .flat_map(char::to_lowercase)
        .collect();
    out.push(ExtractedAbbreviation {
        key,
        expansion: sentence[start..end].to_string(),
        span: start..end,
    });
}

/// Finds capitalized phrases of two or more capitalized words, left to right.
///
/// Connector words join neighbouring capitalized runs and contribute no
/// initial. Punctuation attached to a token (other than periods inside
/// acronyms like "U.S.") ends the current phrase.
pub fn extract_abbreviations(sentence: &str) -> Vec<ExtractedAbbreviation> {
    let mut out = Vec::new();
    let mut current: Option<Run> = None;
    for tok in scan(sentence) {
        if tok.break_before {
            finish(sentence, current.take(), &mut out);
        }
        match tok.class {
            TokenClass::Capitalized => {
                current.get_or_insert_with(|| Run { caps: Vec::new() }).caps.push(tok.core);
            }
            // A connector only matters when it sits between two capitalized
            // words; trailing connectors are dropped in `finish`.
            TokenClass::Connector => {}
            TokenClass::Other => finish(sentence, current.take(), &mut out),
        }
        if tok.break_after {
            finish(sentence, current.take(), &mut out);
        }
    }
    finish(sentence, current, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(word: &str) -> Vec<String> {
        contractions_of(&normalize_word(word)).into_iter().map(|k| k.into_string()).collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_word("U.S.A!").as_str(), "usa");
        assert_eq!(normalize_word("doctor").as_str(), "doctor");
        assert_eq!(normalize_word("Ptnt-42").as_str(), "ptnt");
        assert!(normalize_word("42!").is_empty());
    }

    #[test]
    fn doctor_keys_hand_enumerated() {
        let mut expected = vec!["d", "dc", "dt", "dr", "dct", "dcr", "dtr", "dctr"];
        expected.sort();
        assert_eq!(keys("doctor"), expected);
    }

    #[test]
    fn vowel_only_word_has_no_keys() {
        assert!(keys("a").is_empty());
        assert!(keys("aeiou").is_empty());
    }

    #[test]
    fn patient_contains_table_keys() {
        let ks = keys("patient");
        assert!(ks.contains(&"ptnt".to_string()));
        assert!(ks.contains(&"pt".to_string()));
    }

    #[test]
    fn vowel_initial_word_drops_initial() {
        let ks = keys("apple");
        assert!(ks.iter().all(|k| k.starts_with('p')));
        assert!(ks.contains(&"ppl".to_string()));
    }

    #[test]
    fn long_words_are_truncated() {
        let w = normalize_word("bcdfghjklmnpqrstvwxz");
        assert_eq!(devowel_for_keys(&w).len(), MAX_DEVOWELED_LEN);
        assert_eq!(contractions_of(&w).len(), 1 << (MAX_DEVOWELED_LEN - 1));
    }

    fn pairs(sentence: &str) -> Vec<(String, String)> {
        extract_abbreviations(sentence).into_iter().map(|a| (a.key, a.expansion)).collect()
    }

    #[test]
    fn extracts_connector_joined_phrases() {
        assert_eq!(
            pairs("In 1962 the Association for Computational Linguistics met in Denver"),
            vec![("acl".into(), "Association for Computational Linguistics".into())]
        );
        assert_eq!(
            pairs("United States of America"),
            vec![("usa".into(), "United States of America".into())]
        );
        assert!(pairs("the quick brown fox").is_empty());
    }

    #[test]
    fn handles_titles_and_sentence_punctuation() {
        let got = pairs("When I got to the house, Mrs. Everett, the housekeeper, told me");
        assert_eq!(
            got,
            vec![("wi".into(), "When I".into()), ("me".into(), "Mrs. Everett".into())]
        );
        assert_eq!(
            pairs("Bosnian claims were brought to the World Court."),
            vec![("wc".into(), "World Court".into())]
        );
        assert_eq!(pairs("the U.S. Army base"), vec![("ua".into(), "U.S. Army".into())]);
    }

    #[test]
    fn spans_point_into_sentence() {
        let s = "visit  the World   Health Organization today";
        for a in extract_abbreviations(s) {
            assert_eq!(&s[a.span.clone()], a.expansion);
        }
        assert_eq!(pairs(s), vec![("who".into(), "World   Health Organization".into())]);
    }

    #[test]
    fn trailing_connector_is_not_part_of_phrase() {
        assert_eq!(pairs("Bank Street and the river"), vec![("bs".into(), "Bank Street".into())]);
    }

    #[test]
    fn extraction_is_idempotent_on_fixtures() {
        for s in [
            "the Association for Computational Linguistics",
            "United States of America",
            "Mrs. Everett",
            "the U.S. Army base",
        ] {
            for a in extract_abbreviations(s) {
                assert_eq!(pairs(&a.expansion), vec![(a.key.clone(), a.expansion.clone())]);
            }
        }
    }
}
