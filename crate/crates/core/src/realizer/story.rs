//! Story drafts, template and external realizers, and the story file.

use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::artifact::{read_jsonl, write_jsonl, Header};
use crate::data::SpecialToken;
use crate::error::{Error, Result};
use crate::neural::Tensor;

/// Filler for an image with no planned concepts.
pub const NEUTRAL_SENTENCE: &str = "it was a day to remember .";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeMeta {
    pub strategy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beam_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng_seed: Option<u64>,
}

impl DecodeMeta {
    fn named(strategy: &str) -> Self {
        DecodeMeta {
            strategy: strategy.to_string(),
            ..DecodeMeta::default()
        }
    }

    pub fn greedy() -> Self {
        Self::named("greedy")
    }

    pub fn beam(width: usize) -> Self {
        DecodeMeta {
            beam_width: Some(width),
            ..Self::named("beam")
        }
    }

    pub fn nucleus(temperature: f64, p: f64, seed: u64) -> Self {
        DecodeMeta {
            temperature: Some(temperature),
            p: Some(p),
            rng_seed: Some(seed),
            ..Self::named("nucleus")
        }
    }

    pub fn template() -> Self {
        Self::named("template")
    }

    pub fn external() -> Self {
        Self::named("external")
    }
}

/// One sentence per image, each terminated by the end token, plus the
/// merged story text.
#[derive(Clone, Debug, PartialEq)]
pub struct StoryDraft {
    pub sequence_id: String,
    pub sentences: Vec<Vec<String>>,
    pub story: String,
    pub meta: DecodeMeta,
}

impl StoryDraft {
    /// Builds a draft from word tokens; an end token is appended to any
    /// sentence that lacks one.
    pub fn new(sequence_id: &str, sentences: Vec<Vec<String>>, meta: DecodeMeta) -> Self {
        let end = SpecialToken::End.text();
        let sentences: Vec<Vec<String>> = sentences
            .into_iter()
            .map(|mut s| {
                if s.last().map(String::as_str) != Some(end) {
                    s.push(end.to_string());
                }
                s
            })
            .collect();
        let story = sentences
            .iter()
            .map(|s| sentence_text(s))
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        StoryDraft {
            sequence_id: sequence_id.to_string(),
            sentences,
            story,
            meta,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Sentence strings without the end token.
    pub fn texts(&self) -> Vec<String> {
        self.sentences.iter().map(|s| sentence_text(s)).collect()
    }

    pub fn record(&self) -> StoryRecord {
        StoryRecord {
            sequence_id: self.sequence_id.clone(),
            meta: self.meta.clone(),
            sentences: self.texts(),
            story: self.story.clone(),
        }
    }
}

fn sentence_text(tokens: &[String]) -> String {
    let end = SpecialToken::End.text();
    tokens
        .iter()
        .filter(|t| t.as_str() != end)
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(" ")
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Slot-filling sentence that mentions every concept verbatim.
pub fn template_sentence(concepts: &[String]) -> String {
    match concepts {
        [] => NEUTRAL_SENTENCE.to_string(),
        [a] => format!("there was a {a} ."),
        [a, b] => format!("there was a {a} at the {b} ."),
        [a, b, rest @ ..] => {
            let tail = match rest {
                [c] => format!("the {c}"),
                _ => {
                    let (last, init) = rest.split_last().expect("non-empty");
                    let init: Vec<String> = init.iter().map(|c| format!("the {c}")).collect();
                    format!("{} and the {last}", init.join(" , "))
                }
            };
            format!("there was a {a} at the {b} with {tail} .")
        }
    }
}

pub fn template_realize(sequence_id: &str, plan: &[Vec<String>]) -> StoryDraft {
    let sentences = plan.iter().map(|g| words(&template_sentence(g))).collect();
    StoryDraft::new(sequence_id, sentences, DecodeMeta::template())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExternalConfig {
    /// Program that reads one request line on stdin and answers with one
    /// response line on stdout. `None` means no endpoint is configured.
    pub command: Option<String>,
    pub args: Vec<String>,
    pub allow_fallback: bool,
    /// Maximum concurrently running requests in [`external_realize_all`].
    pub max_in_flight: usize,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        ExternalConfig {
            command: None,
            args: Vec::new(),
            allow_fallback: true,
            max_in_flight: 1,
        }
    }
}

/// Wire request. `tokens` lays out the input stream as
/// `<img_0> <sep> ... <img_{N-1}> <sep> group_0 <sep> ... group_{N-1} <sep>`,
/// where `<img_i>` stands for row `i` of `image_vectors`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalRequest {
    pub sequence_id: String,
    pub image_vectors: Vec<Vec<f64>>,
    pub concept_groups: Vec<Vec<String>>,
    pub separators: usize,
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ExternalResponse {
    sentences: Vec<String>,
}

pub fn serialize_request(sequence_id: &str, images: &Tensor, plan: &[Vec<String>]) -> ExternalRequest {
    let sep = SpecialToken::Sep.text();
    let mut tokens = Vec::new();
    for i in 0..images.rows() {
        tokens.push(format!("<img_{i}>"));
        tokens.push(sep.to_string());
    }
    for group in plan {
        tokens.extend(group.iter().cloned());
        tokens.push(sep.to_string());
    }
    let separators = tokens.iter().filter(|t| t.as_str() == sep).count();
    ExternalRequest {
        sequence_id: sequence_id.to_string(),
        image_vectors: images.to_rows(),
        concept_groups: plan.to_vec(),
        separators,
        tokens,
    }
}

fn call_endpoint(command: &str, args: &[String], request: &ExternalRequest) -> Result<Vec<String>> {
    let fail = |m: String| Error::Realization(format!("{}: {m}", request.sequence_id));
    let mut child = Command::new(command)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| fail(format!("cannot start `{command}`: {e}")))?;
    let line = serde_json::to_string(request).map_err(|e| fail(e.to_string()))?;
    {
        let mut stdin = child.stdin.take().expect("piped stdin");
        writeln!(stdin, "{line}").map_err(|e| fail(format!("write failed: {e}")))?;
    }
    let out = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
    if !out.status.success() {
        return Err(fail(format!("endpoint exited with {}", out.status)));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| fail("empty response".into()))?;
    let resp: ExternalResponse =
        serde_json::from_str(first).map_err(|e| fail(format!("malformed response: {e}")))?;
    Ok(resp.sentences)
}

/// Checks that the response holds one sentence per image.
pub fn validate_response(sequence_id: &str, sentences: &[String], images: usize) -> Result<()> {
    if sentences.len() != images {
        return Err(Error::Realization(format!(
            "{sequence_id}: endpoint returned {} sentences for {images} images",
            sentences.len()
        )));
    }
    Ok(())
}

/// Sends the plan to the configured endpoint. Failures fall back to the
/// template realizer when the config allows it.
pub fn external_realize(
    sequence_id: &str,
    images: &Tensor,
    plan: &[Vec<String>],
    cfg: &ExternalConfig,
) -> Result<StoryDraft> {
    let request = serialize_request(sequence_id, images, plan);
    let attempt = match &cfg.command {
        None => Err(Error::Realization(format!("{sequence_id}: no external realizer configured"))),
        Some(cmd) => call_endpoint(cmd, &cfg.args, &request).and_then(|s| {
            validate_response(sequence_id, &s, plan.len())?;
            Ok(s)
        }),
    };
    match attempt {
        Ok(sentences) => Ok(StoryDraft::new(
            sequence_id,
            sentences.iter().map(|s| words(s)).collect(),
            DecodeMeta::external(),
        )),
        Err(e) if cfg.allow_fallback => {
            log::warn!("{e}; using template realizer");
            Ok(template_realize(sequence_id, plan))
        }
        Err(e) => Err(e),
    }
}

/// Realizes many sequences with at most `cfg.max_in_flight` endpoint calls
/// running at once. Output order follows input order.
pub fn external_realize_all(jobs: &[(String, Tensor, Vec<Vec<String>>)], cfg: &ExternalConfig) -> Result<Vec<StoryDraft>> {
    let cap = cfg.max_in_flight.max(1);
    let mut out = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(cap) {
        let results: Vec<Result<StoryDraft>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(id, img, plan)| scope.spawn(move || external_realize(id, img, plan, cfg)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("realizer thread panicked"))
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

/// One line of a story file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoryRecord {
    pub sequence_id: String,
    pub meta: DecodeMeta,
    pub sentences: Vec<String>,
    pub story: String,
}

pub fn write_stories(path: &Path, header: &Header, drafts: &[StoryDraft]) -> Result<()> {
    let records: Vec<StoryRecord> = drafts.iter().map(StoryDraft::record).collect();
    write_jsonl(path, header, &records)
}

pub fn read_stories(path: &Path) -> Result<Vec<StoryRecord>> {
    Ok(read_jsonl(path)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn templates() {
        assert_eq!(template_sentence(&s(&["dog", "park"])), "there was a dog at the park .");
        assert_eq!(template_sentence(&[]), NEUTRAL_SENTENCE);
        assert_eq!(
            template_sentence(&s(&["a", "b", "c", "d", "e"])),
            "there was a a at the b with the c , the d and the e ."
        );
        let plan = vec![s(&["dog"]), vec![], s(&["x", "y", "z"])];
        let d = template_realize("q", &plan);
        assert_eq!(d.len(), 3);
        for (sent, group) in d.sentences.iter().zip(&plan) {
            assert_eq!(sent.last().unwrap(), "<eos>");
            for c in group {
                assert!(sent.contains(c));
            }
        }
        assert!(!d.story.contains("<eos>"));
    }

    #[test]
    fn separator_count_is_images_plus_groups() {
        let plan = vec![s(&["a", "b"]), s(&["c"]), vec![], s(&["d"]), s(&["e", "f", "g"])];
        let req = serialize_request("q", &Tensor::zeros(5, 3), &plan);
        let sep = req.tokens.iter().filter(|t| t.as_str() == "<sep>").count();
        assert_eq!(sep, 5 + plan.len());
        assert_eq!(req.separators, sep);
        assert_eq!(req.tokens.len(), 10 + 7 + 5);
    }

    #[test]
    fn absent_endpoint_falls_back() {
        let plan = vec![s(&["dog"]), s(&["park"])];
        let d = external_realize("q", &Tensor::zeros(2, 2), &plan, &ExternalConfig::default()).unwrap();
        assert_eq!(d, template_realize("q", &plan));
        let strict = ExternalConfig {
            allow_fallback: false,
            ..ExternalConfig::default()
        };
        assert!(matches!(
            external_realize("q", &Tensor::zeros(2, 2), &plan, &strict),
            Err(Error::Realization(_))
        ));
    }

    #[test]
    fn short_response_is_a_realization_error() {
        assert!(validate_response("q", &s(&["a .", "b .", "c .", "d ."]), 5).is_err());
        let cfg = ExternalConfig {
            command: Some("sh".into()),
            args: s(&["-c", r#"cat >/dev/null; echo '{"sentences":["a .","b .","c .","d ."]}'"#]),
            allow_fallback: false,
            max_in_flight: 1,
        };
        let plan = vec![vec![]; 5];
        assert!(matches!(
            external_realize("q", &Tensor::zeros(5, 2), &plan, &cfg),
            Err(Error::Realization(_))
        ));
    }

    #[test]
    fn subprocess_endpoint_round_trip() {
        let cfg = ExternalConfig {
            command: Some("sh".into()),
            args: s(&["-c", r#"cat >/dev/null; echo '{"sentences":["one .","two ."]}'"#]),
            allow_fallback: false,
            max_in_flight: 2,
        };
        let jobs: Vec<_> = (0..3)
            .map(|i| (format!("q{i}"), Tensor::zeros(2, 2), vec![s(&["a"]), s(&["b"])]))
            .collect();
        let out = external_realize_all(&jobs, &cfg).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[2].sequence_id, "q2");
        assert_eq!(out[0].texts(), s(&["one .", "two ."]));
    }

    #[test]
    fn story_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let d = template_realize("q", &[s(&["dog"]), vec![]]);
        write_stories(&p, &Header::new("stories", 3), &[d.clone()]).unwrap();
        let back = read_stories(&p).unwrap();
        assert_eq!(back, vec![d.record()]);
    }
}
