use std::collections::{BTreeSet, HashMap};

use super::{is_word, SequenceRecord};

/// Frequencies and co-occurrence counts over training gold stories.
///
/// `frequency(c)` counts gold sentences containing `c`. Co-occurrence is kept
/// at two granularities: pairs sharing a sentence and pairs sharing a story.
/// Pairs are stored once with the smaller token id first, so lookups are
/// symmetric by construction.
#[derive(Clone, Debug, Default)]
pub struct CorpusStats {
    ids: HashMap<String, u32>,
    frequency: Vec<u32>,
    sentence_cooc: HashMap<(u32, u32), u32>,
    story_cooc: HashMap<(u32, u32), u32>,
}

fn key(a: u32, b: u32) -> (u32, u32) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl CorpusStats {
    fn intern(&mut self, tok: &str) -> u32 {
        if let Some(&id) = self.ids.get(tok) {
            return id;
        }
        let id = self.frequency.len() as u32;
        self.ids.insert(tok.to_string(), id);
        self.frequency.push(0);
        id
    }

    pub fn from_records(records: &[SequenceRecord]) -> Self {
        let mut s = CorpusStats::default();
        for rec in records {
            for story in &rec.gold_stories {
                let mut story_words = BTreeSet::new();
                for sentence in story {
                    let words: BTreeSet<u32> = sentence
                        .iter()
                        .filter(|t| is_word(t))
                        .map(|t| s.intern(t))
                        .collect();
                    for &w in &words {
                        s.frequency[w as usize] += 1;
                    }
                    bump_pairs(&mut s.sentence_cooc, &words);
                    story_words.extend(words);
                }
                bump_pairs(&mut s.story_cooc, &story_words);
            }
        }
        s
    }

    pub fn frequency(&self, token: &str) -> u32 {
        self.ids
            .get(token)
            .map_or(0, |&i| self.frequency[i as usize])
    }

    pub fn sentence_cooc(&self, a: &str, b: &str) -> u32 {
        self.lookup(&self.sentence_cooc, a, b)
    }

    pub fn story_cooc(&self, a: &str, b: &str) -> u32 {
        self.lookup(&self.story_cooc, a, b)
    }

    /// Sentence-level or story-level co-occurrence is non-zero.
    pub fn co_occurs(&self, a: &str, b: &str) -> bool {
        self.sentence_cooc(a, b) > 0 || self.story_cooc(a, b) > 0
    }

    fn lookup(&self, table: &HashMap<(u32, u32), u32>, a: &str, b: &str) -> u32 {
        if a == b {
            return 0;
        }
        match (self.ids.get(a), self.ids.get(b)) {
            (Some(&x), Some(&y)) => table.get(&key(x, y)).copied().unwrap_or(0),
            _ => 0,
        }
    }

    pub fn vocabulary_size(&self) -> usize {
        self.frequency.len()
    }
}

fn bump_pairs(table: &mut HashMap<(u32, u32), u32>, words: &BTreeSet<u32>) {
    let v: Vec<u32> = words.iter().copied().collect();
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            *table.entry(key(v[i], v[j])).or_default() += 1;
        }
    }
}

pub fn corpus_stats(records: &[SequenceRecord]) -> CorpusStats {
    CorpusStats::from_records(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{tokenize, ImageEntry};
    use proptest::prelude::*;

    fn rec(stories: &[&[&str]]) -> SequenceRecord {
        let n = stories[0].len();
        SequenceRecord {
            sequence_id: "s".into(),
            images: (0..n)
                .map(|i| ImageEntry {
                    image_id: i.to_string(),
                    feature: vec![0.0],
                    seed_concepts: vec!["x".into()],
                })
                .collect(),
            gold_stories: stories
                .iter()
                .map(|s| s.iter().map(|t| tokenize(t)).collect())
                .collect(),
        }
    }

    #[test]
    fn sentence_frequency() {
        let s = CorpusStats::from_records(&[rec(&[&["the dog ran", "dog dog"]])]);
        assert_eq!(s.frequency("dog"), 2);
        assert_eq!(s.frequency("ran"), 1);
        assert_eq!(s.frequency("cat"), 0);
    }

    #[test]
    fn sentence_and_story_cooc() {
        let s = CorpusStats::from_records(&[rec(&[&["dog park", "ball"]])]);
        assert_eq!(s.sentence_cooc("dog", "park"), 1);
        assert_eq!(s.sentence_cooc("park", "dog"), 1);
        assert_eq!(s.sentence_cooc("dog", "ball"), 0);
        assert_eq!(s.story_cooc("dog", "ball"), 1);
        assert!(s.co_occurs("ball", "park"));
    }

    #[test]
    fn separate_stories_do_not_cooccur() {
        let s = CorpusStats::from_records(&[rec(&[&["dog park"]]), rec(&[&["cat tree"]])]);
        for a in ["dog", "park"] {
            for b in ["cat", "tree"] {
                assert_eq!(s.sentence_cooc(a, b), 0);
                assert_eq!(s.story_cooc(a, b), 0);
            }
        }
    }

    proptest! {
        #[test]
        fn cooc_is_symmetric(words in proptest::collection::vec("[a-e]", 1..12)) {
            let text = words.join(" ");
            let half = words[..words.len() / 2].join(" ");
            let s = CorpusStats::from_records(&[rec(&[&[text.as_str(), half.as_str()]])]);
            for a in ["a", "b", "c", "d", "e"] {
                for b in ["a", "b", "c", "d", "e"] {
                    prop_assert_eq!(s.sentence_cooc(a, b), s.sentence_cooc(b, a));
                    prop_assert_eq!(s.story_cooc(a, b), s.story_cooc(b, a));
                }
            }
        }
    }
}
