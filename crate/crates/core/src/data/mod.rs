//! Dataset records, tokenisation, vocabulary, corpus statistics, and the
//! on-disk formats for knowledge edges and embeddings.

mod formats;
mod stats;
mod vocab;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::artifact::{read_jsonl, write_jsonl, Header};
use crate::error::{Error, Result};

pub use formats::{EmbeddingTable, KnowledgeEdgeList};
pub(crate) use formats::fnv1a;
pub use stats::{corpus_stats, CorpusStats};
pub use vocab::{build_vocab, SpecialToken, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub image_id: String,
    pub feature: Vec<f64>,
    #[serde(default)]
    pub seed_concepts: Vec<String>,
}

/// A gold story is one token list per image position.
pub type GoldStory = Vec<Vec<String>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceRecord {
    pub sequence_id: String,
    pub images: Vec<ImageEntry>,
    #[serde(default)]
    pub gold_stories: Vec<GoldStory>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.images.first().map_or(0, |i| i.feature.len())
    }

    pub fn seeds(&self) -> Vec<Vec<String>> {
        self.images.iter().map(|i| i.seed_concepts.clone()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Lowercases and splits on whitespace; within a chunk, alphanumeric runs
/// become tokens and every other character is a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars().flat_map(char::to_lowercase) {
            if ch.is_alphanumeric() {
                word.push(ch);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

pub fn normalize_tokens<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens.iter().flat_map(|t| tokenize(t.as_ref())).collect()
}

pub fn is_word(token: &str) -> bool {
    !token.is_empty() && token.chars().all(char::is_alphanumeric)
}

pub fn stopwords() -> &'static BTreeSet<String> {
    static WORDS: OnceLock<BTreeSet<String>> = OnceLock::new();
    WORDS.get_or_init(|| {
        include_str!("../../data/stopwords-v1.txt")
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect()
    })
}

/// The word set of a gold story minus stop-words and punctuation.
pub fn gold_concepts(story: &GoldStory) -> BTreeSet<String> {
    let stop = stopwords();
    story
        .iter()
        .flatten()
        .filter(|t| is_word(t) && !stop.contains(t.as_str()))
        .cloned()
        .collect()
}

fn normalize_record(mut rec: SequenceRecord) -> SequenceRecord {
    for img in &mut rec.images {
        let mut seen = BTreeSet::new();
        img.seed_concepts = img
            .seed_concepts
            .iter()
            .map(|c| c.trim().to_lowercase())
            .filter(|c| !c.is_empty() && seen.insert(c.clone()))
            .collect();
    }
    for story in &mut rec.gold_stories {
        for sentence in story.iter_mut() {
            *sentence = normalize_tokens(sentence);
        }
    }
    rec
}

/// Checks record invariants; `expected_dim` pins the dataset feature width.
pub fn validate_record(rec: &SequenceRecord, split: Split, expected_dim: Option<usize>) -> Result<()> {
    let id = &rec.sequence_id;
    if rec.images.is_empty() {
        return Err(Error::Schema(format!("{id}: sequence has no images")));
    }
    let dim = expected_dim.unwrap_or_else(|| rec.feature_dim());
    for (i, img) in rec.images.iter().enumerate() {
        if img.feature.len() != dim {
            return Err(Error::Schema(format!(
                "{id}: image {i} has feature dimension {}, expected {dim}",
                img.feature.len()
            )));
        }
        if img.feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("{id}: image {i} has non-finite features")));
        }
        if split == Split::Train && img.seed_concepts.is_empty() {
            return Err(Error::Schema(format!("{id}: image {i} has no seed concepts")));
        }
    }
    for (g, story) in rec.gold_stories.iter().enumerate() {
        if story.len() != rec.images.len() {
            return Err(Error::Schema(format!(
                "{id}: gold story {g} has {} sentences for {} images",
                story.len(),
                rec.images.len()
            )));
        }
    }
    if split == Split::Train && rec.gold_stories.is_empty() {
        return Err(Error::Schema(format!("{id}: training record without a gold story")));
    }
    Ok(())
}

/// Loads a line-delimited dataset. Order is preserved; tokens are normalised.
pub fn load_dataset(path: &Path, split: Split) -> Result<Vec<SequenceRecord>> {
    let (_, raw): (_, Vec<SequenceRecord>) = read_jsonl(path)?;
    let mut out = Vec::with_capacity(raw.len());
    let mut dim = None;
    for rec in raw {
        let rec = normalize_record(rec);
        validate_record(&rec, split, dim)?;
        dim.get_or_insert(rec.feature_dim());
        out.push(rec);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, records: &[SequenceRecord], seed: u64) -> Result<()> {
    write_jsonl(path, &Header::new("dataset", seed), records)
}
