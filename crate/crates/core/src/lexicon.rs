//! Inverse lookup tables from short-form keys to candidate expansions.
//!
//! A contraction lexicon maps every key produced by
//! [`contractions_of`](crate::candidate_gen::contractions_of) to the corpus
//! words that generate it. An abbreviation lexicon maps initials to the
//! capitalized phrases found by
//! [`extract_abbreviations`](crate::candidate_gen::extract_abbreviations).
//! Candidate lists are ordered by corpus frequency, descending, with ties
//! broken by ascending expansion string.
//!
//! ## On-disk format
//!
//! A UTF-8 text body followed by a 32-byte binary footer:
//!
//! ```text
//! # abb-lexicon kind=<cont|abb> corpus=<id>
//! <key>\t<expansion>\t<count>
//! ...
//! \0ABBLEX\0 | version u32 | kind u8 | 3 zero bytes | records u64 | checksum u64
//! ```
//!
//! Records are sorted by key, then by candidate order. The checksum covers
//! the text body.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{self, BufRead};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidate_gen::{contractions_of, extract_abbreviations, normalize_word};
use crate::exec::Exec;
use crate::format::FormatError;
use crate::hash::checksum64;

/// Words shorter than this are not indexed for contractions.
pub const MIN_CONTRACTION_WORD_LEN: usize = 2;

pub const LEXICON_FORMAT_VERSION: u32 = 1;
const FOOTER_MAGIC: &[u8; 8] = b"\0ABBLEX\0";
const FOOTER_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LexiconKind {
    #[serde(rename = "cont")]
    Contraction,
    #[serde(rename = "abb")]
    Abbreviation,
}

impl LexiconKind {
    fn tag(self) -> u8 {
        match self {
            LexiconKind::Contraction => 0,
            LexiconKind::Abbreviation => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(LexiconKind::Contraction),
            1 => Some(LexiconKind::Abbreviation),
            _ => None,
        }
    }
}

impl fmt::Display for LexiconKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LexiconKind::Contraction => "cont",
            LexiconKind::Abbreviation => "abb",
        })
    }
}

impl FromStr for LexiconKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cont" | "contraction" => Ok(LexiconKind::Contraction),
            "abb" | "abbreviation" => Ok(LexiconKind::Abbreviation),
            other => Err(format!("unknown lexicon kind `{other}` (expected cont or abb)")),
        }
    }
}

/// One expansion of a key with its corpus frequency.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub expansion: String,
    pub count: u64,
}

impl Candidate {
    pub fn new(expansion: impl Into<String>, count: u64) -> Self {
        Candidate { expansion: expansion.into(), count }
    }
}

fn candidate_order(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.count.cmp(&a.count).then_with(|| a.expansion.cmp(&b.expansion))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconStats {
    pub kind: LexiconKind,
    pub key_count: usize,
    /// Number of (key, expansion) records.
    pub entry_count: usize,
    pub distinct_expansions: usize,
    pub max_options: usize,
    /// Keys of a single character; allowed, but rarely useful.
    pub single_letter_keys: usize,
    pub corpus_id: String,
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("failed to read corpus {path} at line {line}: {source}")]
    CorpusRead {
        path: PathBuf,
        line: usize,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// An immutable key → ranked candidates table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    kind: LexiconKind,
    corpus_id: String,
    entries: BTreeMap<String, Vec<Candidate>>,
}

impl Lexicon {
    pub fn empty(kind: LexiconKind, corpus_id: impl Into<String>) -> Self {
        Lexicon { kind, corpus_id: corpus_id.into(), entries: BTreeMap::new() }
    }

    pub fn kind(&self) -> LexiconKind {
        self.kind
    }

    pub fn corpus_id(&self) -> &str {
        &self.corpus_id
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn key_count(&self) -> usize {
        self.entries.len()
    }

    /// All candidates of `key` in stored order.
    pub fn get(&self, key: &str) -> &[Candidate] {
        self.entries.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The first `limit` candidates of `key`; unknown keys give an empty slice.
    pub fn lookup(&self, key: &str, limit: usize) -> &[Candidate] {
        let all = self.get(key);
        &all[..limit.min(all.len())]
    }

    /// Frequency of `expansion` under `key`, if listed.
    pub fn frequency(&self, key: &str, expansion: &str) -> Option<u64> {
        self.get(key).iter().find(|c| c.expansion == expansion).map(|c| c.count)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Candidate])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Every distinct expansion string, sorted.
    pub fn expansions(&self) -> BTreeSet<&str> {
        self.entries.values().flatten().map(|c| c.expansion.as_str()).collect()
    }

    pub fn stats(&self) -> LexiconStats {
        LexiconStats {
            kind: self.kind,
            key_count: self.entries.len(),
            entry_count: self.entries.values().map(Vec::len).sum(),
            distinct_expansions: self.expansions().len(),
            max_options: self.entries.values().map(Vec::len).max().unwrap_or(0),
            single_letter_keys: self.entries.keys().filter(|k| k.chars().count() == 1).count(),
            corpus_id: self.corpus_id.clone(),
        }
    }

    /// Serializes to the TSV-plus-footer format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = format!("# abb-lexicon kind={} corpus={}\n", self.kind, self.corpus_id);
        let mut records: u64 = 0;
        for (key, cands) in &self.entries {
            for c in cands {
                body.push_str(key);
                body.push('\t');
                body.push_str(&c.expansion);
                body.push('\t');
                body.push_str(&c.count.to_string());
                body.push('\n');
                records += 1;
            }
        }
        let mut out = body.into_bytes();
        let checksum = checksum64(&out);
        out.extend_from_slice(FOOTER_MAGIC);
        out.extend_from_slice(&LEXICON_FORMAT_VERSION.to_le_bytes());
        out.push(self.kind.tag());
        out.extend_from_slice(&[0, 0, 0]);
        out.extend_from_slice(&records.to_le_bytes());
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < FOOTER_LEN {
            return Err(FormatError::Truncated("missing lexicon footer".into()));
        }
        let (body, footer) = bytes.split_at(bytes.len() - FOOTER_LEN);
        if &footer[..8] != FOOTER_MAGIC {
            return Err(FormatError::Truncated("lexicon footer not found".into()));
        }
        let version = u32::from_le_bytes(footer[8..12].try_into().expect("4 bytes"));
        if version != LEXICON_FORMAT_VERSION {
            return Err(FormatError::VersionMismatch { found: version, expected: LEXICON_FORMAT_VERSION });
        }
        let kind = LexiconKind::from_tag(footer[12])
            .ok_or_else(|| FormatError::Invalid(format!("unknown lexicon kind tag {}", footer[12])))?;
        let records = u64::from_le_bytes(footer[16..24].try_into().expect("8 bytes"));
        let stored = u64::from_le_bytes(footer[24..32].try_into().expect("8 bytes"));
        let computed = checksum64(body);
        if stored != computed {
            return Err(FormatError::ChecksumMismatch { stored, computed });
        }
        let text = std::str::from_utf8(body)
            .map_err(|e| FormatError::Invalid(format!("lexicon body is not UTF-8: {e}")))?;

        let mut lines = text.lines().enumerate();
        let corpus_id = match lines.next() {
            Some((_, header)) => parse_header(header, kind)?,
            None => return Err(FormatError::Malformed { line: 1, reason: "missing header".into() }),
        };
        let mut entries: BTreeMap<String, Vec<Candidate>> = BTreeMap::new();
        let mut seen: u64 = 0;
        let mut last_key: Option<String> = None;
        for (idx, line) in lines {
            let lineno = idx + 1;
            let bad = |reason: &str| FormatError::Malformed { line: lineno, reason: reason.into() };
            let mut parts = line.split('\t');
            let (Some(key), Some(expansion), Some(count), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad("expected three tab-separated fields"));
            };
            let count: u64 = count.parse().map_err(|_| bad("count is not an integer"))?;
            if last_key.as_deref().is_some_and(|k| k > key) {
                return Err(bad("keys out of order"));
            }
            let list = entries.entry(key.to_string()).or_default();
            let cand = Candidate::new(expansion, count);
            if list.last().is_some_and(|prev| candidate_order(prev, &cand).is_ge()) {
                return Err(bad("candidates out of order"));
            }
            list.push(cand);
            last_key = Some(key.to_string());
            seen += 1;
        }
        if seen != records {
            return Err(FormatError::Invalid(format!(
                "footer declares {records} records, body has {seen}"
            )));
        }
        Ok(Lexicon { kind, corpus_id, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| FormatError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn parse_header(header: &str, kind: LexiconKind) -> Result<String, FormatError> {
    let bad = |reason: String| FormatError::Malformed { line: 1, reason };
    let rest = header
        .strip_prefix("# abb-lexicon kind=")
        .ok_or_else(|| bad("missing `# abb-lexicon` header".into()))?;
    let (kind_str, corpus) = rest
        .split_once(" corpus=")
        .ok_or_else(|| bad("header lacks corpus field".into()))?;
    if kind_str != kind.to_string() {
        return Err(bad(format!("header kind `{kind_str}` disagrees with footer `{kind}`")));
    }
    Ok(corpus.to_string())
}

/// Accumulates corpus counts; [`LexiconBuilder::finish`] inverts them.
#[derive(Debug, Clone)]
pub struct LexiconBuilder {
    kind: LexiconKind,
    corpus_id: String,
    words: HashMap<String, u64>,
    phrases: HashMap<(String, String), u64>,
}

impl LexiconBuilder {
    pub fn new(kind: LexiconKind, corpus_id: impl Into<String>) -> Self {
        LexiconBuilder { kind, corpus_id: corpus_id.into(), words: HashMap::new(), phrases: HashMap::new() }
    }

    pub fn add_sentence(&mut self, sentence: &str) {
        match self.kind {
            LexiconKind::Contraction => {
                for raw in sentence.split_whitespace() {
                    let word = normalize_word(raw);
                    if word.len() >= MIN_CONTRACTION_WORD_LEN {
                        *self.words.entry(word.into_string()).or_default() += 1;
                    }
                }
            }
            LexiconKind::Abbreviation => {
                for abb in extract_abbreviations(sentence) {
                    *self.phrases.entry((abb.key, abb.expansion)).or_default() += 1;
                }
            }
        }
    }

    pub fn finish(self, exec: Exec) -> Lexicon {
        let mut entries: BTreeMap<String, Vec<Candidate>> = BTreeMap::new();
        match self.kind {
            LexiconKind::Contraction => {
                let mut words: Vec<(String, u64)> = self.words.into_iter().collect();
                words.sort_unstable();
                let keyed = exec.map(&words, |(word, _)| {
                    contractions_of(&normalize_word(word))
                        .into_iter()
                        .map(|k| k.into_string())
                        .collect::<Vec<_>>()
                });
                for ((word, count), keys) in words.iter().zip(keyed) {
                    for key in keys {
                        entries.entry(key).or_default().push(Candidate::new(word.clone(), *count));
                    }
                }
            }
            LexiconKind::Abbreviation => {
                for ((key, phrase), count) in self.phrases {
                    entries.entry(key).or_default().push(Candidate::new(phrase, count));
                }
            }
        }
        let mut lists: Vec<&mut Vec<Candidate>> = entries.values_mut().collect();
        sort_lists(exec, &mut lists);
        Lexicon { kind: self.kind, corpus_id: self.corpus_id, entries }
    }
}

fn sort_lists(exec: Exec, lists: &mut [&mut Vec<Candidate>]) {
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        lists.par_iter_mut().for_each(|l| l.sort_by(candidate_order));
        return;
    }
    let _ = exec;
    for l in lists.iter_mut() {
        l.sort_by(candidate_order);
    }
}

/// Builds a lexicon from in-memory sentences.
pub fn build_lexicon<I, S>(kind: LexiconKind, corpus_id: &str, sentences: I, exec: Exec) -> Lexicon
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut builder = LexiconBuilder::new(kind, corpus_id);
    for s in sentences {
        builder.add_sentence(s.as_ref());
    }
    builder.finish(exec)
}

pub fn build_contraction_lexicon<I, S>(sentences: I) -> Lexicon
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    build_lexicon(LexiconKind::Contraction, "memory", sentences, Exec::default())
}

pub fn build_abbreviation_lexicon<I, S>(sentences: I) -> Lexicon
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    build_lexicon(LexiconKind::Abbreviation, "memory", sentences, Exec::default())
}

/// Builds a lexicon from a line-per-sentence reader. `source` names the
/// corpus in errors and in the lexicon's corpus id.
pub fn build_lexicon_from_reader<R: BufRead>(
    kind: LexiconKind,
    source: &Path,
    reader: R,
    exec: Exec,
) -> Result<Lexicon, LexiconError> {
    let mut builder = LexiconBuilder::new(kind, source.display().to_string());
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source_err| LexiconError::CorpusRead {
            path: source.to_path_buf(),
            line: idx + 1,
            source: source_err,
        })?;
        builder.add_sentence(&line);
    }
    Ok(builder.finish(exec))
}

pub fn build_lexicon_from_path(kind: LexiconKind, path: &Path, exec: Exec) -> Result<Lexicon, LexiconError> {
    let file = fs::File::open(path)
        .map_err(|e| LexiconError::CorpusRead { path: path.to_path_buf(), line: 0, source: e })?;
    build_lexicon_from_reader(kind, path, io::BufReader::new(file), exec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(c: &[Candidate]) -> Vec<&str> {
        c.iter().map(|c| c.expansion.as_str()).collect()
    }

    #[test]
    fn counts_and_orders_contractions() {
        let lex = build_contraction_lexicon(["patient patient patent"]);
        assert_eq!(
            lex.get("ptnt"),
            &[Candidate::new("patient", 2), Candidate::new("patent", 1)]
        );
    }

    #[test]
    fn ties_break_lexicographically() {
        let lex = build_contraction_lexicon(["potent patent potential patient"]);
        assert_eq!(names(lex.get("ptnt")), vec!["patent", "patient", "potent", "potential"]);
    }

    #[test]
    fn lookup_limits_and_unknown_keys() {
        let lex = build_contraction_lexicon(["patient patient patent potent potential"]);
        assert_eq!(names(lex.lookup("ptnt", 4)), vec!["patient", "patent", "potent", "potential"]);
        assert_eq!(lex.lookup("ptnt", 2).len(), 2);
        assert!(lex.lookup("zzzz", 10).is_empty());
    }

    #[test]
    fn empty_corpus_gives_empty_lexicon() {
        let lex = build_contraction_lexicon(Vec::<String>::new());
        assert!(lex.is_empty());
        let lex = build_abbreviation_lexicon(["the quick brown fox"]);
        assert!(lex.is_empty());
    }

    #[test]
    fn abbreviation_counts() {
        let lex = build_abbreviation_lexicon([
            "the United States of America is large",
            "United States of America",
            "Urban Songwriter Award winners",
        ]);
        assert_eq!(lex.get("usa")[0], Candidate::new("United States of America", 2));
        assert_eq!(lex.get("usa").len(), 2);
    }

    #[test]
    fn short_words_are_not_indexed() {
        let lex = build_contraction_lexicon(["a b cd"]);
        assert_eq!(lex.stats().distinct_expansions, 1);
        assert_eq!(lex.get("c"), &[Candidate::new("cd", 1)]);
        assert_eq!(lex.stats().single_letter_keys, 1);
    }

    #[test]
    fn stats_are_consistent() {
        let lex = build_contraction_lexicon(["doctor director"]);
        let s = lex.stats();
        assert_eq!(s.key_count, lex.key_count());
        assert_eq!(s.entry_count, lex.iter().map(|(_, c)| c.len()).sum::<usize>());
        assert_eq!(s.distinct_expansions, 2);
        assert_eq!(s.max_options, 2);
    }

    #[test]
    fn round_trip_and_error_kinds() {
        let lex = build_contraction_lexicon(["patient patient patent", "doctor"]);
        let bytes = lex.to_bytes();
        assert_eq!(Lexicon::from_bytes(&bytes).unwrap(), lex);
        assert_eq!(Lexicon::from_bytes(&bytes).unwrap().to_bytes(), bytes);

        let mut corrupt = bytes.clone();
        corrupt[40] ^= 1;
        assert!(matches!(Lexicon::from_bytes(&corrupt), Err(FormatError::ChecksumMismatch { .. })));

        let mut wrong_version = bytes.clone();
        let at = bytes.len() - FOOTER_LEN + 8;
        wrong_version[at] = 9;
        assert!(matches!(
            Lexicon::from_bytes(&wrong_version),
            Err(FormatError::VersionMismatch { found: 9, .. })
        ));

        assert!(matches!(Lexicon::from_bytes(&bytes[..bytes.len() - 5]), Err(FormatError::Truncated(_))));
        assert!(matches!(Lexicon::from_bytes(&bytes[..10]), Err(FormatError::Truncated(_))));
    }

    #[test]
    fn corpus_read_error_has_line_context() {
        let data: &[u8] = b"fine line\n\xff\xfe broken\n";
        let err = build_lexicon_from_reader(LexiconKind::Contraction, Path::new("c.txt"), data, Exec::Serial)
            .unwrap_err();
        match err {
            LexiconError::CorpusRead { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
