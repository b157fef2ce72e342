//! Planted-correlation benchmark generator.
//!
//! Concepts are grouped into topics. Each sequence draws one gold topic and
//! plants a single gold concept from it on a few images; every other
//! candidate comes from other topics. Image features carry the gold topic's
//! direction, the gold concept's direction, a weaker sum of the visible
//! distractors and uniform noise. Word vectors cluster by topic and the
//! knowledge base links concepts of the same topic.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{read_jsonl, write_jsonl, Header};
use crate::data::{tokenize, write_dataset, EmbeddingTable, ImageEntry, KnowledgeEdgeList, SequenceRecord, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub sequences: usize,
    pub test_fraction: f64,
    pub images: usize,
    pub k: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    /// Images that receive a gold concept.
    pub gold_images: usize,
    /// Distractors drawn from one topic within a sequence, at most.
    pub max_per_topic: usize,
    pub feature_dim: usize,
    pub word_dim: usize,
    pub topic_strength: f64,
    pub concept_strength: f64,
    pub distractor_strength: f64,
    pub noise: f64,
    /// Knowledge-base edges between random concepts of different topics.
    pub cross_topic_edges: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sequences: 500,
            test_fraction: 0.2,
            images: 5,
            k: 10,
            topics: 60,
            words_per_topic: 8,
            gold_images: 3,
            max_per_topic: 1,
            feature_dim: 32,
            word_dim: 32,
            topic_strength: 2.0,
            concept_strength: 1.0,
            distractor_strength: 0.5,
            noise: 0.5,
            cross_topic_edges: 200,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.images == 0 || self.k == 0 || self.sequences == 0 {
            return bad("sequences, images and k must be positive");
        }
        if self.gold_images > self.images {
            return bad("gold_images exceeds images");
        }
        if self.gold_images > self.words_per_topic {
            return bad("gold_images exceeds words_per_topic");
        }
        let distractors = self.images * self.k - self.gold_images;
        if self.topics < 2 || (self.topics - 1) * self.max_per_topic.min(self.words_per_topic) < distractors {
            return bad("not enough distractor topics for images × k candidates");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Ground truth of one generated sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sequence_id: String,
    pub split: Split,
    pub topic: usize,
    /// Gold concepts per image (empty where none was planted).
    pub gold: Vec<Vec<String>>,
}

#[derive(Clone, Debug)]
pub struct SynthBenchmark {
    pub config: SynthConfig,
    pub train: Vec<SequenceRecord>,
    pub test: Vec<SequenceRecord>,
    pub kb: KnowledgeEdgeList,
    pub words: EmbeddingTable,
    pub manifest: Vec<ManifestEntry>,
}

pub fn concept_name(topic: usize, word: usize) -> String {
    format!("t{topic:02}w{word}")
}

fn unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (y, x) in acc.iter_mut().zip(x) {
        *y += a * x;
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthBenchmark> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (t, w) = (cfg.topics, cfg.words_per_topic);

    let topic_dirs: Vec<Vec<f64>> = (0..t).map(|_| unit(cfg.feature_dim, &mut rng)).collect();
    let concept_dirs: Vec<Vec<Vec<f64>>> =
        (0..t).map(|_| (0..w).map(|_| unit(cfg.feature_dim, &mut rng)).collect()).collect();

    let mut words = EmbeddingTable::new(cfg.word_dim);
    for topic in 0..t {
        let centre = unit(cfg.word_dim, &mut rng);
        for word in 0..w {
            let mut v = centre.clone();
            axpy(&mut v, 0.3, &unit(cfg.word_dim, &mut rng));
            words.insert(&concept_name(topic, word), &v)?;
        }
    }

    let mut kb = KnowledgeEdgeList::new();
    for topic in 0..t {
        for a in 0..w {
            for b in a + 1..w {
                kb.insert(&concept_name(topic, a), &concept_name(topic, b));
            }
        }
    }
    let mut added = 0;
    while added < cfg.cross_topic_edges {
        let (ta, tb) = (rng.gen_range(0..t), rng.gen_range(0..t));
        if ta != tb && kb.insert(&concept_name(ta, rng.gen_range(0..w)), &concept_name(tb, rng.gen_range(0..w))) {
            added += 1;
        }
    }

    let n_test = (cfg.sequences as f64 * cfg.test_fraction).round() as usize;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut manifest = Vec::new();
    for s in 0..cfg.sequences {
        let split = if s < cfg.sequences - n_test { Split::Train } else { Split::Test };
        let id = format!("synth{s:04}");
        let gold_topic = rng.gen_range(0..t);
        let mut gold_words: Vec<usize> = (0..w).collect();
        gold_words.shuffle(&mut rng);
        let mut gold_slots: Vec<usize> = (0..cfg.images).collect();
        gold_slots.shuffle(&mut rng);
        gold_slots.truncate(cfg.gold_images);
        gold_slots.sort_unstable();

        // Distractor pool: up to max_per_topic words from each other topic.
        let mut pool: Vec<(usize, usize)> = Vec::new();
        for topic in (0..t).filter(|&x| x != gold_topic) {
            let mut ws: Vec<usize> = (0..w).collect();
            ws.shuffle(&mut rng);
            pool.extend(ws.into_iter().take(cfg.max_per_topic).map(|x| (topic, x)));
        }
        pool.shuffle(&mut rng);

        let mut gold = vec![Vec::new(); cfg.images];
        let mut images = Vec::with_capacity(cfg.images);
        let mut story = Vec::with_capacity(cfg.images);
        let mut used: BTreeSet<(usize, usize)> = BTreeSet::new();
        let mut next_gold = 0;
        for i in 0..cfg.images {
            let mut members: Vec<(usize, usize)> = Vec::new();
            let planted = gold_slots.contains(&i).then(|| {
                let g = (gold_topic, gold_words[next_gold]);
                next_gold += 1;
                g
            });
            members.extend(planted);
            while members.len() < cfg.k {
                let d = pool.pop().expect("pool sized by validate");
                if used.insert(d) {
                    members.push(d);
                }
            }
            let mut feature = vec![0.0; cfg.feature_dim];
            axpy(&mut feature, cfg.topic_strength, &topic_dirs[gold_topic]);
            if let Some((gt, gw)) = planted {
                axpy(&mut feature, cfg.concept_strength, &concept_dirs[gt][gw]);
            }
            let scale = cfg.distractor_strength / (cfg.k as f64).sqrt();
            for &(dt, dw) in members.iter().filter(|m| Some(**m) != planted) {
                axpy(&mut feature, scale, &concept_dirs[dt][dw]);
            }
            for v in &mut feature {
                *v += rng.gen_range(-cfg.noise..=cfg.noise);
            }
            members.shuffle(&mut rng);
            let seeds: Vec<String> = members.iter().map(|&(a, b)| concept_name(a, b)).collect();
            let sentence = match planted {
                Some((gt, gw)) => {
                    let name = concept_name(gt, gw);
                    gold[i].push(name.clone());
                    format!("it was the {name} .")
                }
                None => "we were there .".to_string(),
            };
            story.push(tokenize(&sentence));
            images.push(ImageEntry {
                image_id: format!("{id}-{i}"),
                feature,
                seed_concepts: seeds,
            });
        }
        let rec = SequenceRecord {
            sequence_id: id.clone(),
            images,
            gold_stories: vec![story],
        };
        manifest.push(ManifestEntry {
            sequence_id: id,
            split,
            topic: gold_topic,
            gold,
        });
        match split {
            Split::Train => train.push(rec),
            Split::Test => test.push(rec),
        }
    }
    Ok(SynthBenchmark {
        config: *cfg,
        train,
        test,
        kb,
        words,
        manifest,
    })
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const KB_FILE: &str = "kb.tsv";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl SynthBenchmark {
    /// Writes the dataset files, knowledge base, embeddings and manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let seed = self.config.seed;
        write_dataset(&dir.join(TRAIN_FILE), &self.train, seed)?;
        write_dataset(&dir.join(TEST_FILE), &self.test, seed)?;
        self.kb.save(&dir.join(KB_FILE), &Header::new("kb", seed))?;
        self.words.save(&dir.join(EMBEDDINGS_FILE), &Header::new("embeddings", seed))?;
        let header = Header::new("synth-manifest", seed).with("config", self.config);
        write_jsonl(&dir.join(MANIFEST_FILE), &header, &self.manifest)
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    Ok(read_jsonl(path)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gold_concepts, load_dataset};

    fn small() -> SynthConfig {
        SynthConfig {
            sequences: 20,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn planted_structure() {
        let b = generate(&small()).unwrap();
        assert_eq!(b.train.len(), 16);
        assert_eq!(b.test.len(), 4);
        for (rec, m) in b.train.iter().chain(&b.test).zip(&b.manifest) {
            assert_eq!(rec.sequence_id, m.sequence_id);
            let all: Vec<&String> = rec.images.iter().flat_map(|i| &i.seed_concepts).collect();
            assert_eq!(all.len(), 50);
            assert_eq!(all.iter().collect::<BTreeSet<_>>().len(), 50, "candidates are distinct");
            let gold: BTreeSet<String> = m.gold.iter().flatten().cloned().collect();
            assert_eq!(gold.len(), 3);
            assert_eq!(gold_concepts(&rec.gold_stories[0]), gold);
            let prefix = format!("t{:02}", m.topic);
            for (img, g) in rec.images.iter().zip(&m.gold) {
                let from_topic: Vec<_> = img.seed_concepts.iter().filter(|c| c.starts_with(&prefix)).collect();
                assert_eq!(from_topic.len(), g.len());
            }
        }
    }

    #[test]
    fn seeded_and_round_trips() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.train, b.train);
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        assert_eq!(load_dataset(&dir.path().join(TRAIN_FILE), Split::Train).unwrap(), a.train);
        assert_eq!(read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap(), a.manifest);
        let kb = KnowledgeEdgeList::load(&dir.path().join(KB_FILE)).unwrap();
        assert_eq!(kb.len(), a.kb.len());
    }

    #[test]
    fn impossible_configs_are_rejected() {
        let cfg = SynthConfig {
            topics: 3,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }
}
