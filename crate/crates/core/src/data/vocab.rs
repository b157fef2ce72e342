use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SequenceRecord;
use crate::artifact::{read_text, write_text};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpecialToken {
    Pad,
    Unk,
    Start,
    End,
    Sep,
    Mask,
}

impl SpecialToken {
    pub const ALL: [SpecialToken; 6] = [
        SpecialToken::Pad,
        SpecialToken::Unk,
        SpecialToken::Start,
        SpecialToken::End,
        SpecialToken::Sep,
        SpecialToken::Mask,
    ];

    pub fn text(self) -> &'static str {
        match self {
            SpecialToken::Pad => "<pad>",
            SpecialToken::Unk => "<unk>",
            SpecialToken::Start => "<sos>",
            SpecialToken::End => "<eos>",
            SpecialToken::Sep => "<sep>",
            SpecialToken::Mask => "<mask>",
        }
    }

    pub fn id(self) -> usize {
        self as usize
    }
}

/// Dense token ids; the special tokens occupy the first ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        let specials = SpecialToken::ALL.iter().map(|s| s.text().to_string());
        for w in specials.chain(words) {
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.tokens.len());
                v.tokens.push(w);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(SpecialToken::Unk.id())
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SpecialToken::ALL.len()
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("vocabulary serializes");
        write_text(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let v: Vocabulary = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let specials_ok = SpecialToken::ALL
            .iter()
            .all(|s| v.tokens.get(s.id()).map(String::as_str) == Some(s.text()));
        if !specials_ok {
            return Err(Error::Schema(format!(
                "{}: vocabulary does not start with the special tokens",
                path.display()
            )));
        }
        Ok(Vocabulary::from_tokens(v.tokens.into_iter().skip(SpecialToken::ALL.len())))
    }
}

/// Counts story tokens and seed concepts, ranks by descending frequency with
/// lexicographic tie-break, and keeps at most `cap` entries including specials.
pub fn build_vocab(records: &[SequenceRecord], cap: usize) -> Result<Vocabulary> {
    let specials = SpecialToken::ALL.len();
    if cap < specials + 1 {
        return Err(Error::Config(format!(
            "vocabulary cap {cap} must be at least {}",
            specials + 1
        )));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for rec in records {
        for story in &rec.gold_stories {
            for tok in story.iter().flatten() {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        for img in &rec.images {
            for c in &img.seed_concepts {
                *counts.entry(c.as_str()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, _)| !SpecialToken::ALL.iter().any(|s| s.text() == *t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(cap - specials);
    Ok(Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string())))
}

impl Vocabulary {
    pub fn build(records: &[SequenceRecord], cap: usize) -> Result<Self> {
        build_vocab(records, cap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{tokenize, ImageEntry};

    fn corpus(text: &str) -> Vec<SequenceRecord> {
        vec![SequenceRecord {
            sequence_id: "s".into(),
            images: vec![ImageEntry {
                image_id: "i".into(),
                feature: vec![0.0],
                seed_concepts: vec![],
            }],
            gold_stories: vec![vec![tokenize(text)]],
        }]
    }

    #[test]
    fn frequency_order_after_specials() {
        let v = build_vocab(&corpus("a a b"), 100).unwrap();
        assert_eq!(v.token(6), "a");
        assert_eq!(v.token(7), "b");
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn cap_binds() {
        let v = build_vocab(&corpus("a b"), 7).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.get("a"), Some(6));
        assert_eq!(v.id("b"), SpecialToken::Unk.id());
        assert!(build_vocab(&corpus("a"), 6).is_err());
    }

    #[test]
    fn ties_are_lexicographic_and_round_trip() {
        let v = build_vocab(&corpus("b a"), 100).unwrap();
        assert_eq!(v.get("a"), Some(6));
        assert_eq!(v.get("b"), Some(7));
        for id in 0..v.len() {
            assert_eq!(v.id(v.token(id)), id);
        }
    }

    #[test]
    fn deterministic_and_persistable() {
        let c = corpus("the dog saw the cat and the dog");
        let a = build_vocab(&c, 100).unwrap();
        assert_eq!(a, build_vocab(&c, 100).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.json");
        a.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), a);
    }
}
