//! Concept-to-story realization: per-image pooled concepts and image
//! features condition a GRU decoder; decoding by greedy, beam or nucleus
//! search; template and external fallbacks.

mod decode;
mod noise;
mod story;

pub use decode::{
    beam_decode, beam_sentence_ids, exhaustive_best, greedy_decode, nucleus_decode, nucleus_set, BeamOptions, NucleusOptions,
    NucleusStep, LENGTH_PENALTY,
};
pub use noise::{inject_noise, BlindSchedule, NoiseCounts, NoiseRates};
pub use story::{
    external_realize, external_realize_all, read_stories, validate_response, serialize_request, template_realize, template_sentence, write_stories,
    DecodeMeta, ExternalConfig, ExternalRequest, StoryDraft, StoryRecord, NEUTRAL_SENTENCE,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingTable, SpecialToken, Vocabulary};
use crate::error::{Error, Result};
use crate::neural::{GruCell, ImageEncoder, Linear, MultiHeadPool, ParamStore, Tape, Tensor, Var};
use crate::training::{fit, TrainOptions};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealizerDims {
    pub feature_dim: usize,
    pub word_dim: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_images: usize,
}

/// Per-image conditioning: encoded image rows and pooled concept rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RealizerInput {
    pub sequence_id: String,
    pub images: Tensor,
    pub pooled: Tensor,
    pub concepts: Vec<Vec<String>>,
}

impl RealizerInput {
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.images.rows() == 0
    }
}

#[derive(Clone, Debug)]
pub struct RealizerModel {
    encoder: ImageEncoder,
    tok_emb: String,
    concept_proj: Linear,
    pool: MultiHeadPool,
    empty_set: String,
    cell: GruCell,
    out: Linear,
    pub dims: RealizerDims,
}

impl RealizerModel {
    pub fn new(store: &mut ParamStore, dims: RealizerDims) -> Self {
        let encoder = ImageEncoder::new(store, "realizer.encoder", dims.feature_dim, dims.hidden_dim, dims.max_images);
        let tok_emb = "realizer.tok_emb".to_string();
        let e = Tensor::uniform(dims.vocab_size, dims.emb_dim, 0.1, store.rng());
        store.insert(&tok_emb, e);
        let concept_proj = Linear::new(store, "realizer.concept_proj", dims.word_dim, dims.emb_dim, true);
        let pool = MultiHeadPool::new(store, "realizer.pool", dims.emb_dim, dims.heads);
        let empty_set = "realizer.empty_set".to_string();
        let v = Tensor::uniform(1, dims.emb_dim, 0.1, store.rng());
        store.insert(&empty_set, v);
        let cell = GruCell::new(store, "realizer.gru", 2 * dims.emb_dim + dims.hidden_dim, dims.hidden_dim);
        let out = Linear::new(store, "realizer.out", dims.hidden_dim, dims.vocab_size, true);
        RealizerModel {
            encoder,
            tok_emb,
            concept_proj,
            pool,
            empty_set,
            cell,
            out,
            dims,
        }
    }

    /// Encoded image rows and one pooled concept row per image, on the tape.
    /// Rows listed in `blind` have their raw features zeroed first.
    pub fn condition(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        features: &Tensor,
        concepts: &[Vec<String>],
        vocab: &Vocabulary,
        words: &EmbeddingTable,
        blind: &[usize],
    ) -> Result<(Var, Var)> {
        if concepts.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} concept groups for {} images",
                concepts.len(),
                features.rows()
            )));
        }
        if words.dim() != self.dims.word_dim && !concepts.iter().all(Vec::is_empty) {
            return Err(Error::Shape(format!(
                "word vectors have dimension {}, realizer expects {}",
                words.dim(),
                self.dims.word_dim
            )));
        }
        let mut feats = features.clone();
        for &b in blind {
            feats.row_slice_mut(b).fill(0.0);
        }
        let f = t.leaf(feats);
        let images = self.encoder.forward(t, s, f)?;
        let table = t.param(s, &self.tok_emb);
        let mut pooled = Vec::with_capacity(concepts.len());
        for group in concepts {
            if group.is_empty() {
                pooled.push(t.param(s, &self.empty_set));
                continue;
            }
            let ids: Vec<usize> = group.iter().map(|c| vocab.id(c)).collect();
            let tok = t.gather(table, &ids);
            let vecs = t.leaf(words.lookup(group));
            let proj = self.concept_proj.forward(t, s, vecs);
            let rows = t.add(tok, proj);
            pooled.push(self.pool.forward(t, s, rows).0);
        }
        let pooled = t.concat_rows(&pooled);
        Ok((images, pooled))
    }

    pub fn input(
        &self,
        s: &ParamStore,
        sequence_id: &str,
        features: &Tensor,
        concepts: &[Vec<String>],
        vocab: &Vocabulary,
        words: &EmbeddingTable,
    ) -> Result<RealizerInput> {
        let mut t = Tape::new();
        let (img, pooled) = self.condition(&mut t, s, features, concepts, vocab, words, &[])?;
        let images = t.value(img).clone();
        let pooled = t.value(pooled).clone();
        images.ensure_finite("encoded images")?;
        pooled.ensure_finite("pooled concepts")?;
        Ok(RealizerInput {
            sequence_id: sequence_id.to_string(),
            images,
            pooled,
            concepts: concepts.to_vec(),
        })
    }

    /// One decoder step on the tape: GRU over `[w_{t-1}; I_i; v_i]` and the
    /// vocabulary logits of the new state.
    pub fn step(&self, t: &mut Tape, s: &ParamStore, h_prev: Var, prev_token: usize, image: Var, pooled: Var) -> (Var, Var) {
        let table = t.param(s, &self.tok_emb);
        let w = t.gather(table, &[prev_token]);
        let x = t.concat_cols(&[w, image, pooled]);
        let h = self.cell.step(t, s, h_prev, x);
        (self.out.forward(t, s, h), h)
    }

    /// Value-level step: `(π over the vocabulary, next hidden state)`.
    pub fn decode_step(
        &self,
        s: &ParamStore,
        h_prev: &Tensor,
        prev_token: usize,
        image: &Tensor,
        pooled: &Tensor,
    ) -> Result<(Vec<f64>, Tensor)> {
        let mut t = Tape::new();
        let h = t.leaf(h_prev.clone());
        let i = t.leaf(image.clone());
        let v = t.leaf(pooled.clone());
        let (logits, h) = self.step(&mut t, s, h, prev_token, i, v);
        let logits = t.value(logits);
        logits.ensure_finite("decoder logits")?;
        Ok((crate::neural::softmax(logits.data()), t.value(h).clone()))
    }

    pub fn initial_state(&self) -> Tensor {
        Tensor::zeros(1, self.dims.hidden_dim)
    }

    /// Teacher-forced negative log-likelihood of `sentences` (token ids
    /// without start/end markers), averaged over predicted tokens. The hidden
    /// state carries over from one sentence to the next.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        features: &Tensor,
        concepts: &[Vec<String>],
        sentences: &[Vec<usize>],
        vocab: &Vocabulary,
        words: &EmbeddingTable,
        blind: &[usize],
    ) -> Result<Var> {
        let (images, pooled) = self.condition(t, s, features, concepts, vocab, words, blind)?;
        let sos = SpecialToken::Start.id();
        let eos = SpecialToken::End.id();
        let mut h = t.leaf(self.initial_state());
        let mut total: Option<Var> = None;
        let mut count = 0usize;
        for (i, sentence) in sentences.iter().enumerate() {
            let img = t.slice_rows(images, i, 1);
            let v = t.slice_rows(pooled, i, 1);
            let mut prev = sos;
            for &target in sentence.iter().chain(std::iter::once(&eos)) {
                let (logits, next) = self.step(t, s, h, prev, img, v);
                h = next;
                let mut y = vec![0.0; self.dims.vocab_size];
                y[target] = 1.0;
                let l = t.softmax_xent(logits, None, &y);
                total = Some(match total {
                    Some(acc) => t.add(acc, l),
                    None => l,
                });
                count += 1;
                prev = target;
            }
        }
        let total = total.ok_or_else(|| Error::Shape("no sentences to score".into()))?;
        Ok(t.scale(total, 1.0 / count as f64))
    }
}

/// One training story: raw features, per-image concepts and sentences per gold story.
#[derive(Clone, Debug)]
pub struct RealizerSample {
    pub features: Tensor,
    /// `[gold story][image] -> concepts`
    pub concepts: Vec<Vec<Vec<String>>>,
    /// `[gold story][image] -> token ids`
    pub sentences: Vec<Vec<Vec<usize>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RealizerTraining {
    pub noise: NoiseRates,
    pub blinding: BlindSchedule,
    /// Sentences longer than this many tokens are truncated for training.
    pub max_sentence_len: usize,
}

impl Default for RealizerTraining {
    fn default() -> Self {
        RealizerTraining {
            noise: NoiseRates::default(),
            blinding: BlindSchedule::default(),
            max_sentence_len: 30,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RealizerReport {
    pub losses: Vec<f64>,
    /// Blinded image count applied to every sample of each epoch.
    pub blinded_per_epoch: Vec<usize>,
}

/// Teacher-forced training with concept noise and optional blinding. Gold
/// stories are visited round-robin across epochs.
pub fn train_realizer(
    store: &mut ParamStore,
    model: &RealizerModel,
    samples: &[RealizerSample],
    vocab: &Vocabulary,
    words: &EmbeddingTable,
    opts: &TrainOptions,
    cfg: &RealizerTraining,
) -> Result<RealizerReport> {
    let mut blinded = vec![None; opts.epochs];
    let losses = fit(store, samples.len(), opts, |t, s, step| {
        let sample = &samples[step.sample];
        if sample.sentences.is_empty() {
            return Ok(None);
        }
        let g = step.epoch % sample.sentences.len();
        let mut rng = ChaCha8Rng::seed_from_u64(
            opts.seed ^ ((step.epoch as u64) << 32) ^ (step.sample as u64).wrapping_mul(0x2545_f491_4f6c_dd1d),
        );
        let (concepts, _) = inject_noise(&sample.concepts[g], cfg.noise, words, &mut rng);
        let blind = cfg.blinding.positions(step.epoch, sample.features.rows(), &mut rng);
        let expected = cfg.blinding.count(step.epoch).min(sample.features.rows());
        assert_eq!(blind.len(), expected, "blinding count");
        blinded[step.epoch] = Some(blind.len());
        let sentences: Vec<Vec<usize>> = sample.sentences[g]
            .iter()
            .map(|s| s.iter().copied().take(cfg.max_sentence_len).collect())
            .collect();
        model
            .loss(t, s, &sample.features, &concepts, &sentences, vocab, words, &blind)
            .map(Some)
    })?;
    Ok(RealizerReport {
        losses,
        blinded_per_epoch: blinded.into_iter().map(|b| b.unwrap_or(0)).collect(),
    })
}
