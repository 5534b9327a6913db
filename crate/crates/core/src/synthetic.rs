//! Generated topic corpora for end-to-end checks.
//!
//! Words are grouped into topics; a sentence uses words of a single topic,
//! one of which is replaced by `[ABB]`. In the separable task the gold option
//! is the replaced word and every distractor comes from another topic. In the
//! domain-shift task the gold comes from the context topic's partner, so a
//! model trained on the separable task ranks it no better than chance.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{sentence_rng, AbbSentence, DatasetSplit, Slot};
use crate::encoder::Vocabulary;
use crate::personalization::FeedbackRecord;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub topics: usize,
    pub words_per_topic: usize,
    pub sentences: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub options: usize,
    /// Fraction of sentences held out for validation.
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            topics: 20,
            words_per_topic: 25,
            sentences: 2000,
            min_words: 8,
            max_words: 12,
            options: 10,
            valid_fraction: 0.2,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub config: SyntheticConfig,
    pub topics: Vec<Vec<String>>,
    pub vocab: Vocabulary,
    /// Clean sentences, before any word is replaced.
    pub corpus: Vec<String>,
    pub train: DatasetSplit,
    pub valid: DatasetSplit,
}

fn word<R: Rng>(rng: &mut R) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::with_capacity(6);
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).expect("non-empty") as char);
        w.push(*VOWELS.choose(rng).expect("non-empty") as char);
    }
    w
}

/// `topics` groups of distinct pronounceable words.
pub fn topic_words(topics: usize, per_topic: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = sentence_rng(seed, u64::MAX);
    let mut seen = BTreeSet::new();
    (0..topics)
        .map(|_| {
            let mut group = Vec::with_capacity(per_topic);
            while group.len() < per_topic {
                let w = word(&mut rng);
                if seen.insert(w.clone()) {
                    group.push(w);
                }
            }
            group
        })
        .collect()
}

/// Partner topic used by the domain shift: topics are swapped in pairs.
pub fn partner(topic: usize, topics: usize) -> usize {
    let p = topic ^ 1;
    if p < topics {
        p
    } else {
        topic
    }
}

fn distractors<R: Rng>(topics: &[Vec<String>], exclude: &[usize], n: usize, rng: &mut R) -> Vec<String> {
    let pool: Vec<&String> =
        topics.iter().enumerate().filter(|(t, _)| !exclude.contains(t)).flat_map(|(_, ws)| ws).collect();
    pool.choose_multiple(rng, n).map(|s| s.to_string()).collect()
}

struct Generated {
    clean: String,
    sentence: AbbSentence,
}

fn generate(
    cfg: &SyntheticConfig,
    topics: &[Vec<String>],
    vocab: &Vocabulary,
    seed: u64,
    index: u64,
    shifted: bool,
) -> Generated {
    let mut rng = sentence_rng(seed, index);
    let topic = rng.gen_range(0..topics.len());
    let len = rng.gen_range(cfg.min_words..=cfg.max_words);
    let words: Vec<&String> = (0..len).map(|_| topics[topic].choose(&mut rng).expect("non-empty topic")).collect();
    let slot_at = rng.gen_range(0..len);
    let (gold, exclude) = if shifted {
        let p = partner(topic, topics.len());
        (topics[p].choose(&mut rng).expect("non-empty topic").clone(), vec![topic, p])
    } else {
        (words[slot_at].clone(), vec![topic])
    };
    let mut options = vec![gold];
    options.extend(distractors(topics, &exclude, cfg.options - 1, &mut rng));
    let clean = words.iter().map(|w| w.as_str()).collect::<Vec<_>>().join(" ");
    let text = words
        .iter()
        .enumerate()
        .map(|(i, w)| if i == slot_at { "[ABB]" } else { w.as_str() })
        .collect::<Vec<_>>()
        .join(" ");
    let sentence = AbbSentence::from_text(&text, vocab, vec![Slot::new(options, Some(0))], seed)
        .expect("one marker per generated sentence");
    Generated { clean, sentence }
}

fn split(name: &str, sentences: Vec<AbbSentence>, seed: u64) -> DatasetSplit {
    DatasetSplit { name: name.to_string(), sentences, seed, corpus_id: format!("synthetic:{seed}") }
}

/// Builds the separable task and its train/validation splits.
pub fn separable_task(cfg: &SyntheticConfig) -> SyntheticTask {
    let topics = topic_words(cfg.topics, cfg.words_per_topic, cfg.seed);
    let vocab = Vocabulary::from_corpus(topics.iter().flatten(), usize::MAX);
    let generated: Vec<Generated> =
        (0..cfg.sentences as u64).map(|i| generate(cfg, &topics, &vocab, cfg.seed, i, false)).collect();
    let n_valid = (cfg.sentences as f64 * cfg.valid_fraction).round() as usize;
    let n_train = cfg.sentences - n_valid;
    let corpus = generated.iter().map(|g| g.clean.clone()).collect();
    let mut sentences: Vec<AbbSentence> = generated.into_iter().map(|g| g.sentence).collect();
    let valid = sentences.split_off(n_train);
    SyntheticTask {
        config: cfg.clone(),
        topics,
        vocab,
        corpus,
        train: split("train", sentences, cfg.seed),
        valid: split("validation", valid, cfg.seed),
    }
}

impl SyntheticTask {
    /// `n` domain-shift sentences drawn with `seed`.
    pub fn domain_shift(&self, name: &str, n: usize, seed: u64) -> DatasetSplit {
        let sentences = (0..n as u64)
            .map(|i| generate(&self.config, &self.topics, &self.vocab, seed, i, true).sentence)
            .collect();
        split(name, sentences, seed)
    }
}

/// Feedback choosing each slot's gold option.
pub fn feedback_from_split(split: &DatasetSplit, source: &str) -> Vec<FeedbackRecord> {
    split
        .sentences
        .iter()
        .flat_map(|s| {
            s.slots.iter().enumerate().filter_map(move |(j, slot)| {
                slot.gold.map(|g| FeedbackRecord {
                    sentence: s.clone(),
                    slot: j,
                    options: slot.options.clone(),
                    chosen: g,
                    timestamp: 0,
                    source: source.to_string(),
                })
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_shape() {
        let task = separable_task(&SyntheticConfig::default());
        assert_eq!(task.topics.len(), 20);
        assert_eq!(task.vocab.len(), 4 + 500);
        assert_eq!(task.train.sentences.len(), 1600);
        assert_eq!(task.valid.sentences.len(), 400);
        for s in task.train.sentences.iter().chain(&task.valid.sentences) {
            s.validate().unwrap();
            let slot = &s.slots[0];
            assert_eq!(slot.options.len(), 10);
            let distinct: BTreeSet<&String> = slot.options.iter().collect();
            assert_eq!(distinct.len(), 10);
            assert!(!s.tokens.contains(&crate::encoder::UNK_ID));
        }
    }

    #[test]
    fn gold_belongs_to_context_topic() {
        let task = separable_task(&SyntheticConfig { sentences: 50, ..SyntheticConfig::default() });
        let topic_of = |w: &str| task.topics.iter().position(|t| t.iter().any(|x| x == w)).unwrap();
        for (s, clean) in task.train.sentences.iter().zip(&task.corpus) {
            let ctx = topic_of(clean.split(' ').next().unwrap());
            let slot = &s.slots[0];
            assert_eq!(topic_of(&slot.options[0]), ctx);
            assert!(slot.options[1..].iter().all(|o| topic_of(o) != ctx));
        }
        let shift = task.domain_shift("shift", 50, 3);
        for s in &shift.sentences {
            let ctx_word = s.text.split(' ').find(|w| *w != "[ABB]").unwrap();
            let ctx = topic_of(ctx_word);
            let slot = &s.slots[0];
            assert_eq!(topic_of(&slot.options[0]), partner(ctx, 20));
            assert!(slot.options[1..].iter().all(|o| ![ctx, partner(ctx, 20)].contains(&topic_of(o))));
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SyntheticConfig { sentences: 30, ..SyntheticConfig::default() };
        assert_eq!(separable_task(&cfg).train.to_jsonl(), separable_task(&cfg).train.to_jsonl());
    }
}
