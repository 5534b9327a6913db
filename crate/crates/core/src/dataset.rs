//! Synthesized `[ABB]` datasets.
//!
//! Clean sentences are corrupted by replacing chosen words (contractions) or
//! capitalized phrases (abbreviations) with `[ABB]`. Each slot carries an
//! option list whose first entry is the original text, followed by
//! distractors taken in lexicon order from the slot's key.
//!
//! Every sentence draws from its own RNG stream derived from
//! `(seed, sentence index)`, so parallel generation equals serial generation.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidate_gen::{contractions_of, devowel_for_keys, extract_abbreviations, normalize_word};
use crate::encoder::{Vocabulary, ABB_ID};
use crate::encoder::vocab::ABB;
use crate::exec::Exec;
use crate::lexicon::Lexicon;

/// Option lists are capped at this length.
pub const MAX_OPTIONS: usize = 50;
/// Fraction of eligible words turned into contractions.
pub const DEFAULT_CONTRACTION_RATE: f64 = 0.15;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("text has {found} [ABB] markers but {expected} slots were given")]
    SlotCount { expected: usize, found: usize },
    #[error("selection rate must lie strictly between 0 and 1, got {0}")]
    InvalidRate(f64),
}

/// One `[ABB]` position with its candidate expansions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Slot {
    pub pos: usize,
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<usize>,
    /// Short-form key the options were looked up under.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

impl Slot {
    /// A slot whose position is filled in by [`AbbSentence::from_text`].
    pub fn new(options: Vec<String>, gold: Option<usize>) -> Self {
        Slot { pos: 0, options, gold, key: None }
    }

    pub fn with_key(mut self, key: impl Into<String>) -> Self {
        self.key = Some(key.into());
        self
    }

    pub fn gold_option(&self) -> Option<&str> {
        self.gold.and_then(|g| self.options.get(g)).map(String::as_str)
    }
}

/// A tokenized sentence with `[ABB]` slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbbSentence {
    pub text: String,
    pub tokens: Vec<u32>,
    pub slots: Vec<Slot>,
    pub seed: u64,
}

impl AbbSentence {
    /// Tokenizes `text` and assigns the `[ABB]` positions to `slots` in order.
    pub fn from_text(text: &str, vocab: &Vocabulary, mut slots: Vec<Slot>, seed: u64) -> Result<Self, DatasetError> {
        let tokens = vocab.tokenize(text);
        let positions: Vec<usize> =
            tokens.iter().enumerate().filter(|(_, &t)| t == ABB_ID).map(|(i, _)| i).collect();
        if positions.len() != slots.len() {
            return Err(DatasetError::SlotCount { expected: slots.len(), found: positions.len() });
        }
        for (slot, pos) in slots.iter_mut().zip(positions) {
            slot.pos = pos;
        }
        Ok(AbbSentence { text: text.to_string(), tokens, slots, seed })
    }

    /// Checks token alignment and option bounds.
    pub fn validate(&self) -> Result<(), String> {
        let abb_count = self.tokens.iter().filter(|&&t| t == ABB_ID).count();
        if abb_count != self.slots.len() {
            return Err(format!("{abb_count} [ABB] tokens but {} slots", self.slots.len()));
        }
        let mut last: Option<usize> = None;
        for (i, slot) in self.slots.iter().enumerate() {
            if self.tokens.get(slot.pos) != Some(&ABB_ID) {
                return Err(format!("slot {i} position {} is not an [ABB] token", slot.pos));
            }
            if last.is_some_and(|l| l >= slot.pos) {
                return Err(format!("slot positions are not strictly increasing at slot {i}"));
            }
            last = Some(slot.pos);
            if let Some(g) = slot.gold {
                if g >= slot.options.len() {
                    return Err(format!("slot {i} gold index {g} out of {} options", slot.options.len()));
                }
            }
        }
        Ok(())
    }

    pub fn gold_count(&self) -> usize {
        self.slots.iter().filter(|s| s.gold.is_some()).count()
    }
}

/// A named collection of sentences generated from one corpus and seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub name: String,
    pub sentences: Vec<AbbSentence>,
    pub seed: u64,
    pub corpus_id: String,
}

impl DatasetSplit {
    pub fn slot_count(&self) -> usize {
        self.sentences.iter().map(|s| s.slots.len()).sum()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(&serde_json::to_string(s).expect("sentences serialize"));
            out.push('\n');
        }
        out
    }

    /// Writes one JSON object per sentence.
    pub fn export(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        let io_err = |source| DatasetError::Io { path: path.to_path_buf(), source };
        let file = fs::File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        for s in &self.sentences {
            serde_json::to_writer(&mut w, s).map_err(|e| io_err(e.into()))?;
            w.write_all(b"\n").map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn from_jsonl<R: BufRead>(reader: R, name: &str, corpus_id: &str) -> Result<Self, DatasetError> {
        let mut sentences = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| DatasetError::Schema { line: lineno, message: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let s: AbbSentence = serde_json::from_str(&line)
                .map_err(|e| DatasetError::Schema { line: lineno, message: e.to_string() })?;
            s.validate().map_err(|message| DatasetError::Schema { line: lineno, message })?;
            sentences.push(s);
        }
        let seed = sentences.first().map(|s| s.seed).unwrap_or(0);
        Ok(DatasetSplit { name: name.to_string(), sentences, seed, corpus_id: corpus_id.to_string() })
    }

    pub fn import(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
        Self::from_jsonl(BufReader::new(file), name, &path.display().to_string())
    }
}

/// RNG stream for sentence `index` of a split seeded with `seed`.
pub fn sentence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone)]
enum Segment {
    Plain(String),
    Slot(Slot),
}

fn options_for(gold: &str, key: &str, lexicon: &Lexicon, max_options: usize) -> Vec<String> {
    let mut options = Vec::with_capacity(max_options.min(lexicon.get(key).len() + 1));
    options.push(gold.to_string());
    options.extend(
        lexicon
            .get(key)
            .iter()
            .filter(|c| c.expansion != gold)
            .take(max_options.saturating_sub(1))
            .map(|c| c.expansion.clone()),
    );
    options
}

/// A word may become a contraction when it is purely alphabetic, has at
/// least three letters and at least two consonants.
fn eligible_core(token: &str) -> Option<(usize, usize)> {
    let lead = token.len() - token.trim_start_matches(|c: char| c.is_ascii_punctuation()).len();
    let core = token[lead..].trim_end_matches(|c: char| c.is_ascii_punctuation());
    let ok = core.len() >= 3
        && core.chars().all(|c| c.is_ascii_alphabetic())
        && normalize_word(core).devoweled().len() >= 2;
    ok.then_some((lead, lead + core.len()))
}

fn contraction_pass<R: Rng>(segments: Vec<Segment>, rate: f64, rng: &mut R, lexicon: &Lexicon, max_options: usize) -> Vec<Segment> {
    let mut out = Vec::with_capacity(segments.len());
    for seg in segments {
        let text = match seg {
            Segment::Plain(text) => text,
            slot => {
                out.push(slot);
                continue;
            }
        };
        let mut cursor = 0;
        for raw in text.split_whitespace() {
            let start = raw.as_ptr() as usize - text.as_ptr() as usize;
            let Some((a, b)) = eligible_core(raw) else { continue };
            if !rng.gen_bool(rate) {
                continue;
            }
            let word = normalize_word(&raw[a..b]);
            let identity = devowel_for_keys(&word);
            let keys: Vec<String> = contractions_of(&word)
                .into_iter()
                .map(|k| k.into_string())
                .filter(|k| *k != identity)
                .collect();
            let Some(key) = keys.choose(rng) else { continue };
            out.push(Segment::Plain(text[cursor..start + a].to_string()));
            let options = options_for(word.as_str(), key, lexicon, max_options);
            out.push(Segment::Slot(Slot::new(options, Some(0)).with_key(key.clone())));
            cursor = start + b;
        }
        out.push(Segment::Plain(text[cursor..].to_string()));
    }
    out
}

fn abbreviation_pass(segments: Vec<Segment>, lexicon: &Lexicon, max_options: usize) -> Vec<Segment> {
    let mut out = Vec::with_capacity(segments.len());
    for seg in segments {
        let text = match seg {
            Segment::Plain(text) => text,
            slot => {
                out.push(slot);
                continue;
            }
        };
        let mut cursor = 0;
        for abb in extract_abbreviations(&text) {
            out.push(Segment::Plain(text[cursor..abb.span.start].to_string()));
            let options = options_for(&abb.expansion, &abb.key, lexicon, max_options);
            out.push(Segment::Slot(Slot::new(options, Some(0)).with_key(abb.key)));
            cursor = abb.span.end;
        }
        out.push(Segment::Plain(text[cursor..].to_string()));
    }
    out
}

fn render(segments: Vec<Segment>, vocab: &Vocabulary, seed: u64) -> Result<AbbSentence, DatasetError> {
    let mut text = String::new();
    let mut slots = Vec::new();
    for seg in segments {
        match seg {
            Segment::Plain(t) => text.push_str(&t),
            Segment::Slot(s) => {
                text.push_str(ABB);
                slots.push(s);
            }
        }
    }
    AbbSentence::from_text(&text, vocab, slots, seed)
}

fn check_rate(rate: f64) -> Result<(), DatasetError> {
    if rate > 0.0 && rate < 1.0 {
        Ok(())
    } else {
        Err(DatasetError::InvalidRate(rate))
    }
}

/// Replaces each eligible word with `[ABB]` with probability `rate`.
pub fn make_contraction_example<R: Rng>(
    sentence: &str,
    rate: f64,
    rng: &mut R,
    lexicon: &Lexicon,
    vocab: &Vocabulary,
) -> Result<AbbSentence, DatasetError> {
    check_rate(rate)?;
    let segs = contraction_pass(vec![Segment::Plain(sentence.to_string())], rate, rng, lexicon, MAX_OPTIONS);
    render(segs, vocab, 0)
}

/// Replaces every extractable capitalized phrase with `[ABB]`.
pub fn make_abbreviation_example(sentence: &str, lexicon: &Lexicon, vocab: &Vocabulary) -> Result<AbbSentence, DatasetError> {
    let segs = abbreviation_pass(vec![Segment::Plain(sentence.to_string())], lexicon, MAX_OPTIONS);
    render(segs, vocab, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corruption {
    Contraction,
    Abbreviation,
    /// Contractions first, then abbreviations over the remaining text.
    Mixed,
}

/// Generates whole splits from a corpus.
#[derive(Debug, Clone)]
pub struct DatasetBuilder<'a> {
    pub vocab: &'a Vocabulary,
    pub contractions: Option<&'a Lexicon>,
    pub abbreviations: Option<&'a Lexicon>,
    pub corruption: Corruption,
    pub rate: f64,
    pub max_options: usize,
    /// Drop sentences that end up without any slot.
    pub drop_empty: bool,
}

impl<'a> DatasetBuilder<'a> {
    pub fn new(vocab: &'a Vocabulary, corruption: Corruption) -> Self {
        DatasetBuilder {
            vocab,
            contractions: None,
            abbreviations: None,
            corruption,
            rate: DEFAULT_CONTRACTION_RATE,
            max_options: MAX_OPTIONS,
            drop_empty: true,
        }
    }

    pub fn example<R: Rng>(&self, sentence: &str, rng: &mut R, seed: u64) -> Result<AbbSentence, DatasetError> {
        check_rate(self.rate)?;
        let empty = Lexicon::empty(crate::lexicon::LexiconKind::Contraction, "");
        let cont = self.contractions.unwrap_or(&empty);
        let abb = self.abbreviations.unwrap_or(&empty);
        let mut segs = vec![Segment::Plain(sentence.to_string())];
        if matches!(self.corruption, Corruption::Contraction | Corruption::Mixed) {
            segs = contraction_pass(segs, self.rate, rng, cont, self.max_options);
        }
        if matches!(self.corruption, Corruption::Abbreviation | Corruption::Mixed) {
            segs = abbreviation_pass(segs, abb, self.max_options);
        }
        render(segs, self.vocab, seed)
    }

    pub fn build_split(
        &self,
        name: &str,
        corpus_id: &str,
        sentences: &[String],
        seed: u64,
        exec: Exec,
    ) -> Result<DatasetSplit, DatasetError> {
        let generated = exec.map_range(sentences.len(), |i| {
            let mut rng = sentence_rng(seed, i as u64);
            self.example(&sentences[i], &mut rng, seed)
        });
        let mut out = Vec::with_capacity(generated.len());
        for s in generated {
            let s = s?;
            if !(self.drop_empty && s.slots.is_empty()) {
                out.push(s);
            }
        }
        Ok(DatasetSplit { name: name.to_string(), sentences: out, seed, corpus_id: corpus_id.to_string() })
    }
}
