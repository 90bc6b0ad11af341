//! Exemplar retrieval: turn serialization for embedding, an exhaustive cosine
//! index over training turns, and the similarity-labelled pairs used to tune
//! the embedding encoder.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSplit;
use crate::error::{Error, Result};
use crate::metrics::{set_f1, SynonymTable};
use crate::prompt::{render_state, EMPTY_UTTERANCE};
use crate::state::{context_window, example_id, ContextWindow, DialogueState, TurnBelief};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Unit-length copy; fails on empty, zero or non-finite vectors.
    pub fn normalized(&self) -> Result<EmbeddingVector> {
        if self.0.is_empty() || self.0.iter().any(|x| !x.is_finite()) {
            return Err(Error::Retrieval("vector is empty or has non-finite entries".into()));
        }
        let norm = self.norm();
        if norm == 0.0 {
            return Err(Error::Retrieval("cannot normalize a zero vector".into()));
        }
        Ok(EmbeddingVector(self.0.iter().map(|x| x / norm).collect()))
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// Text encoder contract. Must be deterministic for identical input.
pub trait EmbeddingBackend: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        self.embed_batch(&[text.to_string()])?
            .pop()
            .ok_or_else(|| Error::Backend("embedding backend returned no vectors".into()))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Local deterministic encoder: each lowercase alphanumeric token is hashed and
/// expanded into a seeded pseudo-random direction; the text vector is the sum.
#[derive(Debug, Clone)]
pub struct HashEmbedding {
    pub dim: usize,
    pub seed: u64,
}

impl HashEmbedding {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    fn embed_text(&self, text: &str) -> EmbeddingVector {
        let mut v = vec![0.0f64; self.dim];
        let lower = text.to_lowercase();
        for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let base = fnv1a(token.as_bytes()) ^ splitmix64(self.seed);
            for (j, x) in v.iter_mut().enumerate() {
                let r = splitmix64(base.wrapping_add((j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
                // uniform in [-1, 1)
                *x += (r >> 11) as f64 / (1u64 << 52) as f64 - 1.0;
            }
        }
        EmbeddingVector(v)
    }
}

impl EmbeddingBackend for HashEmbedding {
    fn id(&self) -> String {
        format!("hash-{}-{}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

/// Embedding server speaking `POST {"input": [...]} -> {"data": [{"embedding": [...]}]}`.
pub struct HttpEmbedding {
    url: String,
    model: Option<String>,
    api_key: Option<String>,
    dim: usize,
    batch_size: usize,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl HttpEmbedding {
    pub fn new(url: &str, model: Option<String>, api_key: Option<String>, dim: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Self {
            url: url.to_string(),
            model,
            api_key,
            dim,
            batch_size: 64,
            agent,
        }
    }
}

impl EmbeddingBackend for HttpEmbedding {
    fn id(&self) -> String {
        format!("http-embedding:{}", self.url)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            let mut body = serde_json::json!({ "input": chunk });
            if let Some(m) = &self.model {
                body["model"] = serde_json::Value::String(m.clone());
            }
            let mut req = self.agent.post(&self.url);
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let mut resp = req
                .send_json(&body)
                .map_err(|e| Error::Transport(e.to_string()))?;
            let status = resp.status().as_u16();
            let text = resp
                .body_mut()
                .read_to_string()
                .map_err(|e| Error::Transport(e.to_string()))?;
            if status >= 400 {
                return Err(Error::Server { status, body: text });
            }
            let parsed: EmbeddingResponse = serde_json::from_str(&text)
                .map_err(|e| Error::Backend(format!("bad embedding response: {e}")))?;
            if parsed.data.len() != chunk.len() {
                return Err(Error::Backend(format!(
                    "embedding server returned {} vectors for {} inputs",
                    parsed.data.len(),
                    chunk.len()
                )));
            }
            out.extend(parsed.data.into_iter().map(|d| EmbeddingVector(d.embedding)));
        }
        Ok(out)
    }
}

/// Canonical text of a turn: `[STATE] <pairs> [SYS] <a> [USER] <u> ...`.
pub fn serialize_for_embedding(prev_state: &DialogueState, ctx: &ContextWindow) -> String {
    let mut out = format!("[STATE] {}", render_state(prev_state));
    let last = ctx.exchanges.len().saturating_sub(1);
    for (i, ex) in ctx.exchanges.iter().enumerate() {
        if ex.is_padding() && i != last {
            continue;
        }
        let sys = if ex.system.is_empty() { EMPTY_UTTERANCE } else { &ex.system };
        out.push_str(" [SYS] ");
        out.push_str(sys);
        out.push_str(" [USER] ");
        out.push_str(&ex.user);
    }
    out
}

/// Everything an exemplar block needs, taken from gold training annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ExamplePayload {
    pub example_id: String,
    pub dialogue_id: String,
    pub turn: usize,
    pub domains: BTreeSet<String>,
    pub prev_state: DialogueState,
    pub ctx: ContextWindow,
    pub gold_tlb: TurnBelief,
    /// First-pass prediction collected on the training split.
    pub hypothesis: Option<TurnBelief>,
}

impl ExamplePayload {
    pub fn embedding_text(&self) -> String {
        serialize_for_embedding(&self.prev_state, &self.ctx)
    }
}

/// One payload per training turn, with gold previous states.
pub fn payloads_from_split(split: &DatasetSplit, width: usize) -> Result<Vec<ExamplePayload>> {
    let mut out = Vec::with_capacity(split.turn_count());
    for (d, t) in split.turns() {
        out.push(ExamplePayload {
            example_id: example_id(&d.dialogue_id, t.index),
            dialogue_id: d.dialogue_id.clone(),
            turn: t.index,
            domains: d.domains.clone(),
            prev_state: d.gold_prev_state(t.index)?,
            ctx: context_window(d, t.index, width)?,
            gold_tlb: t.gold_tlb.clone(),
            hypothesis: None,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub example_id: String,
    /// Unit length.
    pub vector: EmbeddingVector,
    pub payload: ExamplePayload,
}

/// Exhaustive-scan cosine index, entries ordered by example id.
#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    dim: usize,
    entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalHit<'a> {
    pub entry: &'a IndexEntry,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub id: String,
    pub score: f64,
}

impl Index {
    /// Entries from already-computed raw vectors. Vectors are normalized here.
    pub fn from_vectors(items: Vec<(ExamplePayload, EmbeddingVector)>) -> Result<Self> {
        Self::assemble(items, true)
    }

    fn assemble(items: Vec<(ExamplePayload, EmbeddingVector)>, normalize: bool) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Retrieval("cannot build an index from zero examples".into()));
        }
        let dim = items[0].1.dim();
        let mut entries = Vec::with_capacity(items.len());
        let mut seen = HashSet::new();
        for (payload, raw) in items {
            if !seen.insert(payload.example_id.clone()) {
                return Err(Error::Retrieval(format!(
                    "duplicate example id {}",
                    payload.example_id
                )));
            }
            if raw.dim() != dim {
                return Err(Error::Embedding {
                    example_id: payload.example_id,
                    msg: format!("dimension {} differs from {dim}", raw.dim()),
                });
            }
            let vector = if normalize {
                raw.normalized().map_err(|e| Error::Embedding {
                    example_id: payload.example_id.clone(),
                    msg: e.to_string(),
                })?
            } else if (raw.norm() - 1.0).abs() <= 1e-9 {
                raw
            } else {
                return Err(Error::Embedding {
                    example_id: payload.example_id,
                    msg: format!("stored vector has norm {}, expected 1", raw.norm()),
                });
            };
            entries.push(IndexEntry {
                example_id: payload.example_id.clone(),
                vector,
                payload,
            });
        }
        entries.sort_by(|a, b| a.example_id.cmp(&b.example_id));
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, example_id: &str) -> Option<&IndexEntry> {
        self.entries
            .binary_search_by(|e| e.example_id.as_str().cmp(example_id))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Attach collected first-pass hypotheses to their payloads.
    pub fn attach_hypotheses(&mut self, hyps: &HashMap<String, TurnBelief>) {
        for e in &mut self.entries {
            e.payload.hypothesis = hyps.get(&e.example_id).cloned();
        }
    }

    /// Persist `{example_id, vector, payload_ref}` lines; payloads are resolved
    /// again from the training split on load.
    pub fn save(&self, path: &Path) -> Result<()> {
        let lines: Vec<IndexLine> = self
            .entries
            .iter()
            .map(|e| IndexLine {
                example_id: e.example_id.clone(),
                vector: e.vector.clone(),
                payload_ref: PayloadRef {
                    dialogue_id: e.payload.dialogue_id.clone(),
                    turn: e.payload.turn,
                },
            })
            .collect();
        crate::io::write_jsonl(path, &lines)
    }

    pub fn load(path: &Path, split: &DatasetSplit, width: usize) -> Result<Self> {
        let lines: Vec<IndexLine> = crate::io::read_jsonl(path)?;
        let payloads: HashMap<String, ExamplePayload> = payloads_from_split(split, width)?
            .into_iter()
            .map(|p| (p.example_id.clone(), p))
            .collect();
        let mut items = Vec::with_capacity(lines.len());
        for line in lines {
            let key = example_id(&line.payload_ref.dialogue_id, line.payload_ref.turn);
            let payload = payloads.get(&key).cloned().ok_or_else(|| {
                Error::Retrieval(format!(
                    "{}: entry {} refers to {key}, which is not in the training split",
                    path.display(),
                    line.example_id
                ))
            })?;
            items.push((payload, line.vector));
        }
        Self::assemble(items, false)
    }
}

#[derive(Serialize, Deserialize)]
struct PayloadRef {
    dialogue_id: String,
    turn: usize,
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    example_id: String,
    vector: EmbeddingVector,
    payload_ref: PayloadRef,
}

/// Embed every payload (in example-id order) and build the index.
pub fn build_index(mut examples: Vec<ExamplePayload>, backend: &dyn EmbeddingBackend) -> Result<Index> {
    if examples.is_empty() {
        return Err(Error::Retrieval("cannot build an index from zero examples".into()));
    }
    examples.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let texts: Vec<String> = examples.iter().map(ExamplePayload::embedding_text).collect();
    let vectors = backend.embed_batch(&texts).map_err(|e| Error::Embedding {
        example_id: examples[0].example_id.clone(),
        msg: e.to_string(),
    })?;
    if vectors.len() != examples.len() {
        return Err(Error::Backend(format!(
            "embedding backend returned {} vectors for {} texts",
            vectors.len(),
            examples.len()
        )));
    }
    Index::from_vectors(examples.into_iter().zip(vectors).collect())
}

/// Top-`k` entries by cosine similarity, ties broken by ascending example id.
pub fn retrieve<'a>(
    index: &'a Index,
    query: &EmbeddingVector,
    k: usize,
    exclude: &HashSet<String>,
) -> Result<Vec<RetrievalHit<'a>>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if query.dim() != index.dim {
        return Err(Error::Retrieval(format!(
            "query dimension {} differs from index dimension {}",
            query.dim(),
            index.dim
        )));
    }
    let q = query.normalized()?;
    let mut hits: Vec<RetrievalHit<'a>> = index
        .entries
        .iter()
        .filter(|e| !exclude.contains(&e.example_id))
        .map(|e| RetrievalHit {
            entry: e,
            score: e.vector.dot(&q),
        })
        .collect();
    if hits.is_empty() {
        return Err(Error::Retrieval("index is empty after exclusion".into()));
    }
    // entries are already in id order, so a stable sort on score keeps the tie-break
    hits.sort_by(|a, b| b.score.total_cmp(&a.score));
    hits.truncate(k);
    Ok(hits)
}

/// Similarity label for two turns: slot-value F1 of their gold beliefs.
pub fn similarity_label(a: &TurnBelief, b: &TurnBelief) -> f64 {
    set_f1(a.as_map(), b.as_map(), &SynonymTable::new()).f1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverPair {
    pub anchor_id: String,
    pub candidate_id: String,
    pub anchor_text: String,
    pub candidate_text: String,
    pub label: f64,
}

/// Build `per_anchor` labelled candidates for every training turn.
///
/// Each anchor gets one candidate with label >= 0.5 and one with label 0 when
/// such candidates exist; the rest are sampled uniformly. Never pairs an anchor
/// with itself.
pub fn retriever_pairs(
    train: &DatasetSplit,
    width: usize,
    per_anchor: usize,
    seed: u64,
) -> Result<Vec<RetrieverPair>> {
    if per_anchor == 0 {
        return Err(Error::InvalidArgument("per_anchor must be >= 1".into()));
    }
    let mut payloads = payloads_from_split(train, width)?;
    if payloads.is_empty() {
        return Err(Error::InvalidArgument("training split has no turns".into()));
    }
    payloads.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let texts: Vec<String> = payloads.iter().map(ExamplePayload::embedding_text).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(payloads.len() * per_anchor);
    for (i, anchor) in payloads.iter().enumerate() {
        let labels: Vec<(usize, f64)> = payloads
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(j, c)| (j, similarity_label(&anchor.gold_tlb, &c.gold_tlb)))
            .collect();
        let mut chosen: Vec<usize> = Vec::with_capacity(per_anchor);
        let positives: Vec<usize> = labels.iter().filter(|(_, l)| *l >= 0.5).map(|(j, _)| *j).collect();
        if let Some(&j) = positives.choose(&mut rng) {
            chosen.push(j);
        }
        if chosen.len() < per_anchor {
            let zeros: Vec<usize> = labels.iter().filter(|(_, l)| *l == 0.0).map(|(j, _)| *j).collect();
            if let Some(&j) = zeros.choose(&mut rng) {
                chosen.push(j);
            }
        }
        let rest: Vec<usize> = labels
            .iter()
            .map(|(j, _)| *j)
            .filter(|j| !chosen.contains(j))
            .collect();
        let need = per_anchor.saturating_sub(chosen.len()).min(rest.len());
        chosen.extend(rest.choose_multiple(&mut rng, need).copied());
        chosen.sort_unstable();
        for j in chosen {
            let label = labels
                .iter()
                .find(|(c, _)| *c == j)
                .map(|(_, l)| *l)
                .unwrap_or_default();
            out.push(RetrieverPair {
                anchor_id: anchor.example_id.clone(),
                candidate_id: payloads[j].example_id.clone(),
                anchor_text: texts[i].clone(),
                candidate_text: texts[j].clone(),
                label,
            });
        }
    }
    Ok(out)
}

pub fn export_retriever_pairs(
    train: &DatasetSplit,
    width: usize,
    per_anchor: usize,
    seed: u64,
    path: &Path,
) -> Result<usize> {
    let pairs = retriever_pairs(train, width, per_anchor, seed)?;
    crate::io::write_jsonl(path, &pairs)?;
    Ok(pairs.len())
}
