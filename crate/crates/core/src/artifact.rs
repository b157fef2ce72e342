//! Line-delimited JSON artifacts. Every artifact this crate writes starts
//! with a header line carrying the producing version and seed.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub artifact: String,
    pub version: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl Header {
    pub fn new(artifact: &str, seed: u64) -> Self {
        Header {
            artifact: artifact.to_string(),
            version: VERSION.to_string(),
            seed,
            meta: serde_json::Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.meta.insert(
            key.to_string(),
            serde_json::to_value(value).expect("header metadata serializes"),
        );
        self
    }

    /// `# storyplan <version> artifact=<kind> seed=<seed>` for plain-text formats.
    pub fn comment_line(&self) -> String {
        format!(
            "# storyplan {} artifact={} seed={}",
            self.version, self.artifact, self.seed
        )
    }
}

fn is_header(line: &str) -> Option<Header> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    let obj = v.as_object()?;
    if obj.contains_key("artifact") && obj.contains_key("version") {
        serde_json::from_value(v).ok()
    } else {
        None
    }
}

pub fn ensure_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

/// Reads records from a JSON-lines file, skipping blank lines and an optional
/// leading header. Parse failures name the 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Option<Header>, Vec<T>)> {
    ensure_exists(path)?;
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = None;
    let mut out = Vec::new();
    let mut seen_content = false;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if !seen_content {
            seen_content = true;
            if let Some(h) = is_header(trimmed) {
                header = Some(h);
                continue;
            }
        }
        let rec = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok((header, out))
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: &Header, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, header).map_err(|e| Error::io(path, e.into()))?;
    w.write_all(b"\n").map_err(io)?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    ensure_exists(path)?;
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_skipped_and_returned() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        write_jsonl(&p, &Header::new("demo", 7).with("k", 3), &[1u32, 2, 3]).unwrap();
        let (h, v): (_, Vec<u32>) = read_jsonl(&p).unwrap();
        assert_eq!(v, vec![1, 2, 3]);
        let h = h.unwrap();
        assert_eq!(h.seed, 7);
        assert_eq!(h.meta["k"], 3);
    }

    #[test]
    fn parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, "1\n\n2\n{oops\n").unwrap();
        match read_jsonl::<u32>(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }
}
