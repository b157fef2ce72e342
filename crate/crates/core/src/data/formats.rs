use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::artifact::{read_text, write_text, Header};
use crate::error::{Error, Result};
use crate::neural::Tensor;

/// Unordered, relation-free concept pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnowledgeEdgeList {
    neighbors: BTreeMap<String, BTreeSet<String>>,
    edges: usize,
}

impl KnowledgeEdgeList {
    pub fn new() -> Self {
        KnowledgeEdgeList::default()
    }

    /// Adds `a – b`; self pairs and duplicates are ignored. Returns whether it was new.
    pub fn insert(&mut self, a: &str, b: &str) -> bool {
        let (a, b) = (a.trim().to_lowercase(), b.trim().to_lowercase());
        if a == b || a.is_empty() || b.is_empty() {
            return false;
        }
        let fresh = self.neighbors.entry(a.clone()).or_default().insert(b.clone());
        self.neighbors.entry(b).or_default().insert(a);
        if fresh {
            self.edges += 1;
        }
        fresh
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut kb = KnowledgeEdgeList::new();
        for (a, b) in pairs {
            kb.insert(a, b);
        }
        kb
    }

    pub fn related(&self, a: &str, b: &str) -> bool {
        self.neighbors.get(a).is_some_and(|n| n.contains(b))
    }

    /// Sorted neighbours of `concept`.
    pub fn neighbors(&self, concept: &str) -> impl Iterator<Item = &str> {
        self.neighbors
            .get(concept)
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
    }

    pub fn len(&self) -> usize {
        self.edges
    }

    pub fn is_empty(&self) -> bool {
        self.edges == 0
    }

    /// Each pair once, smaller string first, sorted.
    pub fn pairs(&self) -> Vec<(&str, &str)> {
        self.neighbors
            .iter()
            .flat_map(|(a, ns)| {
                ns.iter()
                    .filter(move |b| a.as_str() < b.as_str())
                    .map(move |b| (a.as_str(), b.as_str()))
            })
            .collect()
    }

    /// Tab-separated pairs; extra columns (relation labels) are ignored and
    /// `#` lines are comments.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut kb = KnowledgeEdgeList::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            match (cols.next(), cols.next()) {
                (Some(a), Some(b)) => {
                    kb.insert(a, b);
                }
                _ => {
                    return Err(Error::Parse {
                        path: origin.to_string(),
                        line: i + 1,
                        message: "expected two tab-separated concepts".into(),
                    })
                }
            }
        }
        Ok(kb)
    }

    pub fn load(path: &Path) -> Result<Self> {
        KnowledgeEdgeList::parse(&read_text(path)?, &path.display().to_string())
    }

    pub fn save(&self, path: &Path, header: &Header) -> Result<()> {
        let mut s = header.comment_line();
        s.push('\n');
        for (a, b) in self.pairs() {
            let _ = writeln!(s, "{a}\t{b}");
        }
        write_text(path, &s)
    }
}

/// Word vectors keyed by token: `token v1 … vD` per line.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            ..Default::default()
        }
    }

    pub fn insert(&mut self, token: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "embedding for {token} has {} values, table dimension is {}",
                vector.len(),
                self.dim
            )));
        }
        match self.index.get(token) {
            Some(&i) => self.values[i * self.dim..(i + 1) * self.dim].copy_from_slice(vector),
            None => {
                self.index.insert(token.to_string(), self.tokens.len());
                self.tokens.push(token.to_string());
                self.values.extend_from_slice(vector);
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
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

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index
            .get(token)
            .map(|&i| &self.values[i * self.dim..(i + 1) * self.dim])
    }

    /// Stored vector, or a deterministic pseudo-random one derived from the token text.
    pub fn vector_or_hashed(&self, token: &str) -> Vec<f64> {
        match self.get(token) {
            Some(v) => v.to_vec(),
            None => hashed_vector(token, self.dim),
        }
    }

    /// Rows for `tokens` as an `n × dim` tensor.
    pub fn lookup(&self, tokens: &[String]) -> Tensor {
        let rows: Vec<Vec<f64>> = tokens.iter().map(|t| self.vector_or_hashed(t)).collect();
        if rows.is_empty() {
            return Tensor::zeros(0, self.dim);
        }
        Tensor::from_rows(&rows).expect("uniform rows")
    }

    /// Most cosine-similar other token; ties go to the earlier table entry.
    pub fn nearest(&self, token: &str) -> Option<&str> {
        let q = self.vector_or_hashed(token);
        let qn = norm(&q);
        let mut best: Option<(usize, f64)> = None;
        for (i, t) in self.tokens.iter().enumerate() {
            if t == token {
                continue;
            }
            let v = &self.values[i * self.dim..(i + 1) * self.dim];
            let denom = (qn * norm(v)).max(1e-12);
            let sim = q.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / denom;
            if best.map_or(true, |(_, b)| sim > b) {
                best = Some((i, sim));
            }
        }
        best.map(|(i, _)| self.tokens[i].as_str())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut table: Option<EmbeddingTable> = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().unwrap_or_default();
            let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            let err = |message: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                message,
            };
            let values = values.map_err(|e| err(format!("bad float: {e}")))?;
            if values.is_empty() {
                return Err(err(format!("token {token} has no vector")));
            }
            let t = table.get_or_insert_with(|| EmbeddingTable::new(values.len()));
            if values.len() != t.dim {
                return Err(err(format!(
                    "{} values for {token}, expected {}",
                    values.len(),
                    t.dim
                )));
            }
            t.insert(&token.to_lowercase(), &values)?;
        }
        Ok(table.unwrap_or_default())
    }

    pub fn load(path: &Path) -> Result<Self> {
        EmbeddingTable::parse(&read_text(path)?, &path.display().to_string())
    }

    pub fn save(&self, path: &Path, header: &Header) -> Result<()> {
        let mut s = header.comment_line();
        s.push('\n');
        for (i, t) in self.tokens.iter().enumerate() {
            s.push_str(t);
            for v in &self.values[i * self.dim..(i + 1) * self.dim] {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        write_text(path, &s)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// 64-bit FNV-1a, stable across platforms and releases.
pub(crate) fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub(crate) fn hashed_vector(token: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token));
    Tensor::uniform(1, dim, 0.5, &mut rng).into_data()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kb_dedups_and_drops_self_pairs() {
        let kb = KnowledgeEdgeList::parse("dog\tpark\tAtLocation\npark\tdog\ncat\tcat\n# c\n", "kb").unwrap();
        assert_eq!(kb.len(), 1);
        assert!(kb.related("park", "dog"));
        assert!(!kb.related("cat", "cat"));
        assert!(KnowledgeEdgeList::parse("lonely\n", "kb").is_err());
    }

    #[test]
    fn kb_round_trip() {
        let kb = KnowledgeEdgeList::from_pairs([("b", "a"), ("c", "a")]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("kb.tsv");
        kb.save(&p, &Header::new("kb", 0)).unwrap();
        assert_eq!(KnowledgeEdgeList::load(&p).unwrap(), kb);
        assert_eq!(kb.pairs(), vec![("a", "b"), ("a", "c")]);
    }

    #[test]
    fn embeddings_parse_and_nearest() {
        let e = EmbeddingTable::parse("dog 1 0\npuppy 0.9 0.1\ncar 0 1\n", "emb").unwrap();
        assert_eq!(e.dim(), 2);
        assert_eq!(e.nearest("dog"), Some("puppy"));
        assert_eq!(e.nearest("car"), Some("puppy"));
        assert!(EmbeddingTable::parse("a 1 2\nb 1\n", "emb").is_err());
    }

    #[test]
    fn hashed_vectors_are_stable() {
        let e = EmbeddingTable::new(4);
        assert_eq!(e.vector_or_hashed("zebra"), e.vector_or_hashed("zebra"));
        assert_ne!(e.vector_or_hashed("zebra"), e.vector_or_hashed("zebu"));
    }
}
