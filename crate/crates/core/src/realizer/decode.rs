//! Greedy, beam and nucleus decoding of one sentence per image.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::story::{DecodeMeta, StoryDraft};
use super::{RealizerInput, RealizerModel};
use crate::data::{SpecialToken, Vocabulary};
use crate::error::{Error, Result};
use crate::neural::{softmax, ParamStore, Tensor};

/// Exponent of the hypothesis length in beam scores.
pub const LENGTH_PENALTY: f64 = 0.7;

fn normalized(logp: f64, len: usize) -> f64 {
    logp / (len.max(1) as f64).powf(LENGTH_PENALTY)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamOptions {
    pub width: usize,
    pub max_len: usize,
}

impl Default for BeamOptions {
    fn default() -> Self {
        BeamOptions { width: 5, max_len: 25 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NucleusOptions {
    pub temperature: f64,
    pub p: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for NucleusOptions {
    fn default() -> Self {
        NucleusOptions {
            temperature: 0.9,
            p: 0.9,
            max_len: 25,
            seed: 0,
        }
    }
}

/// Conditioning rows of image `i`.
struct Slot<'a> {
    model: &'a RealizerModel,
    store: &'a ParamStore,
    image: Tensor,
    pooled: Tensor,
}

impl Slot<'_> {
    fn step(&self, h: &Tensor, prev: usize) -> Result<(Vec<f64>, Tensor)> {
        self.model.decode_step(self.store, h, prev, &self.image, &self.pooled)
    }
}

fn slots<'a>(model: &'a RealizerModel, store: &'a ParamStore, input: &RealizerInput) -> Vec<Slot<'a>> {
    (0..input.len())
        .map(|i| Slot {
            model,
            store,
            image: input.images.select_rows(&[i]),
            pooled: input.pooled.select_rows(&[i]),
        })
        .collect()
}

fn first_argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn render(ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .filter(|&&id| !vocab.is_special(id) || id == SpecialToken::Unk.id())
        .map(|&id| vocab.token(id).to_string())
        .collect()
}

fn draft(input: &RealizerInput, sentences: &[Vec<usize>], vocab: &Vocabulary, meta: DecodeMeta) -> StoryDraft {
    let words: Vec<Vec<String>> = sentences.iter().map(|s| render(s, vocab)).collect();
    StoryDraft::new(&input.sequence_id, words, meta)
}

fn greedy_sentence(slot: &Slot, h0: &Tensor, max_len: usize) -> Result<(Vec<usize>, Tensor)> {
    let eos = SpecialToken::End.id();
    let (mut h, mut prev, mut out) = (h0.clone(), SpecialToken::Start.id(), Vec::new());
    for _ in 0..max_len {
        let (p, next) = slot.step(&h, prev)?;
        h = next;
        prev = first_argmax(&p);
        out.push(prev);
        if prev == eos {
            break;
        }
    }
    Ok((out, h))
}

pub fn greedy_decode(
    model: &RealizerModel,
    store: &ParamStore,
    input: &RealizerInput,
    max_len: usize,
    vocab: &Vocabulary,
) -> Result<StoryDraft> {
    let mut h = model.initial_state();
    let mut sentences = Vec::new();
    for slot in slots(model, store, input) {
        let (s, next) = greedy_sentence(&slot, &h, max_len)?;
        h = next;
        sentences.push(s);
    }
    Ok(draft(input, &sentences, vocab, DecodeMeta::greedy()))
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    logp: f64,
    h: Tensor,
}

impl Hyp {
    fn score(&self) -> f64 {
        normalized(self.logp, self.tokens.len())
    }
}

/// Higher score first; equal scores go to the lexicographically smaller sequence.
fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.tokens.cmp(&b.tokens))
}

fn beam_sentence(slot: &Slot, h0: &Tensor, opts: &BeamOptions) -> Result<(Vec<usize>, Tensor)> {
    let eos = SpecialToken::End.id();
    let width = opts.width.max(1);
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        logp: 0.0,
        h: h0.clone(),
    }];
    let mut done: Vec<Hyp> = Vec::new();
    for _ in 0..opts.max_len {
        let mut cands = Vec::new();
        for hyp in &live {
            let prev = hyp.tokens.last().copied().unwrap_or(SpecialToken::Start.id());
            let (p, h) = slot.step(&hyp.h, prev)?;
            for (tok, &pt) in p.iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                cands.push(Hyp {
                    tokens,
                    logp: hyp.logp + pt.ln(),
                    h: h.clone(),
                });
            }
        }
        cands.sort_by(rank);
        cands.truncate(width);
        live.clear();
        for c in cands {
            if c.tokens.last() == Some(&eos) || c.tokens.len() == opts.max_len {
                done.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    done.extend(live);
    done.sort_by(rank);
    let best = done.into_iter().next().ok_or_else(|| Error::Realization("empty beam".into()))?;
    Ok((best.tokens, best.h))
}

/// Length-normalised beam search per sentence; the best hypothesis's final
/// state seeds the next sentence.
pub fn beam_decode(
    model: &RealizerModel,
    store: &ParamStore,
    input: &RealizerInput,
    opts: &BeamOptions,
    vocab: &Vocabulary,
) -> Result<StoryDraft> {
    let mut h = model.initial_state();
    let mut sentences = Vec::new();
    for slot in slots(model, store, input) {
        let (s, next) = beam_sentence(&slot, &h, opts)?;
        h = next;
        sentences.push(s);
    }
    Ok(draft(input, &sentences, vocab, DecodeMeta::beam(opts.width)))
}

/// Beam search for one image's sentence from the zero state, returning token
/// ids (end token included) and the normalised score.
pub fn beam_sentence_ids(
    model: &RealizerModel,
    store: &ParamStore,
    input: &RealizerInput,
    image: usize,
    opts: &BeamOptions,
) -> Result<(Vec<usize>, f64)> {
    let slot = slots(model, store, input).swap_remove(image);
    let (tokens, _) = beam_sentence(&slot, &model.initial_state(), opts)?;
    let logp = sentence_logp(&slot, &model.initial_state(), &tokens)?;
    Ok((tokens.clone(), normalized(logp, tokens.len())))
}

fn sentence_logp(slot: &Slot, h0: &Tensor, tokens: &[usize]) -> Result<f64> {
    let mut h = h0.clone();
    let mut prev = SpecialToken::Start.id();
    let mut logp = 0.0;
    for &tok in tokens {
        let (p, next) = slot.step(&h, prev)?;
        logp += p[tok].ln();
        h = next;
        prev = tok;
    }
    Ok(logp)
}

/// Best complete sentence for image `image` from the zero state by
/// enumerating every sequence that ends in the end token or reaches
/// `max_len`. Exponential; for checking beam search on tiny vocabularies.
pub fn exhaustive_best(
    model: &RealizerModel,
    store: &ParamStore,
    input: &RealizerInput,
    image: usize,
    max_len: usize,
) -> Result<(Vec<usize>, f64)> {
    fn walk(
        slot: &Slot,
        hyp: Hyp,
        max_len: usize,
        best: &mut Option<Hyp>,
    ) -> Result<()> {
        let prev = hyp.tokens.last().copied().unwrap_or(SpecialToken::Start.id());
        let (p, h) = slot.step(&hyp.h, prev)?;
        for (tok, &pt) in p.iter().enumerate() {
            let mut tokens = hyp.tokens.clone();
            tokens.push(tok);
            let next = Hyp {
                tokens,
                logp: hyp.logp + pt.ln(),
                h: h.clone(),
            };
            if tok == SpecialToken::End.id() || next.tokens.len() == max_len {
                if best.as_ref().map_or(true, |b| rank(&next, b) == Ordering::Less) {
                    *best = Some(next);
                }
            } else {
                walk(slot, next, max_len, best)?;
            }
        }
        Ok(())
    }
    let slot = slots(model, store, input).swap_remove(image);
    let mut best = None;
    let root = Hyp {
        tokens: Vec::new(),
        logp: 0.0,
        h: model.initial_state(),
    };
    walk(&slot, root, max_len, &mut best)?;
    let b = best.expect("at least one sequence");
    let score = b.score();
    Ok((b.tokens, score))
}

/// Indices of the smallest highest-probability prefix whose mass reaches `p`
/// (descending probability, lower index first on ties).
pub fn nucleus_set(probs: &[f64], p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut keep = Vec::new();
    for i in order {
        keep.push(i);
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    keep
}

/// One sampled position: the retained set and the drawn token.
#[derive(Clone, Debug, PartialEq)]
pub struct NucleusStep {
    pub retained: Vec<usize>,
    pub token: usize,
}

fn sample_nucleus<R: Rng>(logits_probs: &[f64], opts: &NucleusOptions, rng: &mut R) -> NucleusStep {
    // Temperature applies to log-probabilities, which equal logits up to a constant.
    let scaled: Vec<f64> = logits_probs.iter().map(|p| p.max(1e-300).ln() / opts.temperature).collect();
    let probs = softmax(&scaled);
    let retained = nucleus_set(&probs, opts.p);
    let mass: f64 = retained.iter().map(|&i| probs[i]).sum();
    let mut u = rng.gen::<f64>() * mass;
    let mut token = *retained.last().expect("non-empty nucleus");
    for &i in &retained {
        if u < probs[i] {
            token = i;
            break;
        }
        u -= probs[i];
    }
    NucleusStep { retained, token }
}

/// Temperature-scaled top-p sampling. Returns the draft and every step's
/// retained set alongside the sampled token.
pub fn nucleus_decode(
    model: &RealizerModel,
    store: &ParamStore,
    input: &RealizerInput,
    opts: &NucleusOptions,
    vocab: &Vocabulary,
) -> Result<(StoryDraft, Vec<NucleusStep>)> {
    if opts.temperature <= 0.0 || !(opts.p > 0.0 && opts.p <= 1.0) {
        return Err(Error::Config(format!(
            "nucleus sampling needs temperature > 0 and p in (0, 1], got {} and {}",
            opts.temperature, opts.p
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eos = SpecialToken::End.id();
    let mut h = model.initial_state();
    let mut sentences = Vec::new();
    let mut trace = Vec::new();
    for slot in slots(model, store, input) {
        let mut prev = SpecialToken::Start.id();
        let mut out = Vec::new();
        for _ in 0..opts.max_len {
            let (p, next) = slot.step(&h, prev)?;
            h = next;
            let step = sample_nucleus(&p, opts, &mut rng);
            debug_assert!(step.retained.contains(&step.token));
            prev = step.token;
            out.push(prev);
            trace.push(step);
            if prev == eos {
                break;
            }
        }
        sentences.push(out);
    }
    let meta = DecodeMeta::nucleus(opts.temperature, opts.p, opts.seed);
    Ok((draft(input, &sentences, vocab, meta), trace))
}

#[cfg(test)]
mod tests {
    use super::super::tests::{toy_model, toy_vocab, words};
    use super::*;
    use proptest::prelude::*;

    fn setup(seed: u64, vocab_size: usize) -> (ParamStore, RealizerModel, RealizerInput) {
        let mut store = ParamStore::new(seed);
        let m = toy_model(&mut store, vocab_size);
        // Larger output weights make the distributions peaked and varied.
        let w = store.value_mut("realizer.out.w").unwrap();
        *w = w.map(|x| 3.0 * x);
        let vocab = toy_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::uniform(2, 3, 1.0, &mut rng);
        // Concept rows index the token table, so tiny vocabularies get empty groups.
        let concepts = if vocab_size >= vocab.len() {
            vec![vec!["dog".to_string()], vec!["park".to_string(), "cat".into()]]
        } else {
            vec![Vec::new(), Vec::new()]
        };
        let input = m.input(&store, "s", &f, &concepts, &vocab, &words()).unwrap();
        (store, m, input)
    }

    #[test]
    fn width_one_equals_greedy() {
        let vocab = toy_vocab();
        for seed in 0..100 {
            let (store, m, input) = setup(seed, vocab.len());
            let g = greedy_decode(&m, &store, &input, 8, &vocab).unwrap();
            let b = beam_decode(&m, &store, &input, &BeamOptions { width: 1, max_len: 8 }, &vocab).unwrap();
            assert_eq!(g.sentences, b.sentences, "seed {seed}");
        }
    }

    #[test]
    fn wide_beam_finds_exhaustive_optimum() {
        for seed in 0..10 {
            let (store, m, input) = setup(seed, 4);
            let slot = &slots(&m, &store, &input)[0];
            let (beam, _) = beam_sentence(slot, &m.initial_state(), &BeamOptions { width: 64, max_len: 3 }).unwrap();
            let (best, _) = exhaustive_best(&m, &store, &input, 0, 3).unwrap();
            assert_eq!(beam, best, "seed {seed}");
        }
    }

    #[test]
    fn decoding_is_deterministic_and_has_one_sentence_per_image() {
        let vocab = toy_vocab();
        let (store, m, input) = setup(3, vocab.len());
        let opts = BeamOptions { width: 3, max_len: 6 };
        let a = beam_decode(&m, &store, &input, &opts, &vocab).unwrap();
        let b = beam_decode(&m, &store, &input, &opts, &vocab).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sentences.len(), 2);
        let n = NucleusOptions { seed: 5, ..NucleusOptions::default() };
        let (x, _) = nucleus_decode(&m, &store, &input, &n, &vocab).unwrap();
        let (y, _) = nucleus_decode(&m, &store, &input, &n, &vocab).unwrap();
        assert_eq!(x, y);
        assert!(x.sentences.iter().all(|s| s.last().map(String::as_str) == Some("<eos>")));
    }

    #[test]
    fn nucleus_edge_cases() {
        let p = [0.5, 0.3, 0.2];
        assert_eq!(nucleus_set(&p, 1.0), vec![0, 1, 2]);
        assert_eq!(nucleus_set(&p, 0.4), vec![0]);
        assert_eq!(nucleus_set(&p, 0.8), vec![0, 1]);
        // p below the top probability always picks the argmax.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = NucleusOptions { temperature: 1.0, p: 0.3, ..NucleusOptions::default() };
        for _ in 0..100 {
            assert_eq!(sample_nucleus(&p, &opts, &mut rng).token, 0);
        }
        // p = 1 and temperature 1 sample the raw distribution.
        let opts = NucleusOptions { temperature: 1.0, p: 1.0, ..NucleusOptions::default() };
        let mut counts = [0usize; 3];
        for _ in 0..20_000 {
            counts[sample_nucleus(&p, &opts, &mut rng).token] += 1;
        }
        for (c, q) in counts.iter().zip(p) {
            assert!((*c as f64 / 20_000.0 - q).abs() < 0.015);
        }
    }

    #[test]
    fn sampled_tokens_stay_in_the_nucleus() {
        let vocab = toy_vocab();
        let mut steps = 0;
        let mut seed = 0;
        while steps < 10_000 {
            let (store, m, input) = setup(seed % 7, vocab.len());
            let opts = NucleusOptions { seed, max_len: 12, ..NucleusOptions::default() };
            let (_, trace) = nucleus_decode(&m, &store, &input, &opts, &vocab).unwrap();
            for s in &trace {
                assert!(s.retained.contains(&s.token));
            }
            steps += trace.len();
            seed += 1;
        }
    }

    proptest! {
        #[test]
        fn nucleus_mass_is_minimal(raw in proptest::collection::vec(0.001f64..1.0, 1..12), p in 0.05f64..1.0) {
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let keep = nucleus_set(&probs, p);
            let mass: f64 = keep.iter().map(|&i| probs[i]).sum();
            prop_assert!(mass >= p - 1e-12 || keep.len() == probs.len());
            let without_last: f64 = keep[..keep.len() - 1].iter().map(|&i| probs[i]).sum();
            prop_assert!(without_last < p);
        }
    }
}
