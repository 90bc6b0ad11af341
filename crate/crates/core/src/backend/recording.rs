//! Content-addressed record/replay of completions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{finalize, CompletionRequest, LmBackend, RawCompletion};
use crate::error::{Error, Result};
use crate::io::{read_jsonl, sha256_hex, write_jsonl};

/// SHA-256 over the prompt and decoding parameters. The request tag is not
/// part of the digest.
pub fn request_digest(req: &CompletionRequest) -> String {
    let canonical = serde_json::json!({
        "prompt": req.prompt_text,
        "max_new_tokens": req.max_new_tokens,
        "temperature": req.temperature,
        "stop": req.stop_sequences,
    });
    sha256_hex(canonical.to_string().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordingLine {
    pub digest: String,
    pub request_summary: String,
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

fn summary(req: &CompletionRequest) -> String {
    let head: String = req.prompt_text.chars().take(60).collect();
    format!("{} | {} chars | {head:?}", req.request_tag, req.prompt_text.chars().count())
}

fn load_lines(path: &Path) -> Result<BTreeMap<String, RecordingLine>> {
    let mut map = BTreeMap::new();
    for line in read_jsonl::<RecordingLine>(path)? {
        insert(&mut map, line)?;
    }
    Ok(map)
}

fn insert(map: &mut BTreeMap<String, RecordingLine>, line: RecordingLine) -> Result<()> {
    match map.get(&line.digest) {
        Some(prev) if prev.text != line.text => Err(Error::DigestCollision(line.digest)),
        Some(_) => Ok(()),
        None => {
            map.insert(line.digest.clone(), line);
            Ok(())
        }
    }
}

/// Serves completions from a recording file; never calls anything else.
pub struct ReplayBackend {
    path: PathBuf,
    lines: BTreeMap<String, RecordingLine>,
}

impl ReplayBackend {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            lines: load_lines(path)?,
        })
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}

impl LmBackend for ReplayBackend {
    fn id(&self) -> String {
        format!("replay:{}", self.path.display())
    }

    fn generate(&self, req: &CompletionRequest) -> Result<RawCompletion> {
        let digest = request_digest(req);
        let line = self
            .lines
            .get(&digest)
            .ok_or(Error::MissingRecording(digest))?;
        Ok(RawCompletion {
            text: line.text.clone(),
            prompt_tokens: Some(line.prompt_tokens),
            completion_tokens: Some(line.completion_tokens),
        })
    }
}

/// Responses recorded into one file, possibly by several backends.
/// Written sorted by digest on [`RecordingStore::flush`] and on drop.
pub struct RecordingStore {
    path: PathBuf,
    lines: Mutex<BTreeMap<String, RecordingLine>>,
}

impl RecordingStore {
    /// Existing entries at `path` are kept and extended.
    pub fn open(path: &Path) -> Result<Arc<Self>> {
        let lines = if path.exists() { load_lines(path)? } else { BTreeMap::new() };
        Ok(Arc::new(Self {
            path: path.to_path_buf(),
            lines: Mutex::new(lines),
        }))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn flush(&self) -> Result<()> {
        let lines = self.lines.lock().unwrap_or_else(|e| e.into_inner());
        let items: Vec<&RecordingLine> = lines.values().collect();
        write_jsonl(&self.path, &items)
    }

    fn insert(&self, line: RecordingLine) -> Result<()> {
        insert(&mut self.lines.lock().unwrap_or_else(|e| e.into_inner()), line)
    }
}

impl Drop for RecordingStore {
    fn drop(&mut self) {
        if let Err(e) = self.flush() {
            log::error!("could not write recording {}: {e}", self.path.display());
        }
    }
}

/// Forwards to `inner` and stores every response.
pub struct RecordBackend {
    inner: Arc<dyn LmBackend>,
    store: Arc<RecordingStore>,
}

impl RecordBackend {
    pub fn new(inner: Arc<dyn LmBackend>, store: Arc<RecordingStore>) -> Self {
        Self { inner, store }
    }
}

impl LmBackend for RecordBackend {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn generate(&self, req: &CompletionRequest) -> Result<RawCompletion> {
        let raw = self.inner.generate(req)?;
        let resp = finalize(req, raw, &self.inner.id());
        let line = RecordingLine {
            digest: request_digest(req),
            request_summary: summary(req),
            text: resp.text.clone(),
            prompt_tokens: resp.prompt_tokens,
            completion_tokens: resp.completion_tokens,
        };
        self.store.insert(line)?;
        Ok(RawCompletion {
            text: resp.text,
            prompt_tokens: Some(resp.prompt_tokens),
            completion_tokens: Some(resp.completion_tokens),
        })
    }
}
