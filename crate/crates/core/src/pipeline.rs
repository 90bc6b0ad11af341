//! First and second pass over dialogues, demonstration collection on the
//! training pool, and correction-tuning export.

use std::borrow::Cow;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::atomic::{AtomicBool, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Client, CompletionRequest};
use crate::config::RunConfig;
use crate::dataset::DatasetSplit;
use crate::error::{Error, ErrorClass, Result};
use crate::io::sha256_hex;
use crate::metrics::TurnRecord;
use crate::prompt::{
    build_correction_prompt, build_inference_prompt, parse_tlb, render_training_sequence, Exemplar,
    ParseMode, PromptFamily, PromptStyle,
};
use crate::retriever::{
    payloads_from_split, retrieve, serialize_for_embedding, EmbeddingBackend, ExamplePayload, Index,
    ScoredId,
};
use crate::schema::SchemaTable;
use crate::state::{aggregate_state, context_window, example_id, Dialogue, DialogueState, Turn, TurnBelief};

/// Number of fixed demonstrations used when collecting training hypotheses.
pub const DEMO_COUNT: usize = 5;

/// Prompting knobs shared by every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub family: PromptFamily,
    pub k: usize,
    pub width: usize,
    pub parse_mode: ParseMode,
    pub instruction: Option<String>,
}

impl Settings {
    pub fn new(family: PromptFamily) -> Self {
        Self {
            family,
            k: family.default_k(),
            width: family.default_width(),
            parse_mode: ParseMode::Lenient,
            instruction: None,
        }
    }

    pub fn inference_style(&self) -> PromptStyle {
        self.family.inference()
    }

    pub fn correction_style(&self) -> PromptStyle {
        self.family.correction()
    }
}

impl From<&RunConfig> for Settings {
    fn from(cfg: &RunConfig) -> Self {
        Self {
            family: cfg.style,
            k: cfg.k(),
            width: cfg.width(),
            parse_mode: cfg.parse_mode,
            instruction: cfg.instruction.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Per-turn output: the evaluation fields plus traces of both passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub dialogue_id: String,
    pub turn: usize,
    /// Gold turn belief.
    pub tlb: TurnBelief,
    /// Gold state.
    pub state: DialogueState,
    pub hyp_tlb_first: TurnBelief,
    pub hyp_state_first: DialogueState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyp_tlb_final: Option<TurnBelief>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyp_state_final: Option<DialogueState>,
    /// Exemplars of the first pass, best first. The second pass reuses them.
    #[serde(default)]
    pub retrieval: Vec<ScoredId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_digest_first: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_digest_final: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics_first: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics_final: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_first: Option<TokenCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_final: Option<TokenCounts>,
    /// Set when a backend failure cut this dialogue short.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredictionRecord {
    fn empty(d: &Dialogue, t: &Turn, state: &DialogueState) -> Self {
        Self {
            dialogue_id: d.dialogue_id.clone(),
            turn: t.index,
            tlb: t.gold_tlb.clone(),
            state: t.gold_state.clone(),
            hyp_tlb_first: TurnBelief::new(),
            hyp_state_first: state.clone(),
            hyp_tlb_final: None,
            hyp_state_final: None,
            retrieval: Vec::new(),
            prompt_digest_first: None,
            prompt_digest_final: None,
            diagnostics_first: Vec::new(),
            diagnostics_final: Vec::new(),
            tokens_first: None,
            tokens_final: None,
            error: None,
        }
    }

    pub fn example_id(&self) -> String {
        example_id(&self.dialogue_id, self.turn)
    }

    /// Evaluation view; without a second pass the final fields mirror the first.
    pub fn turn_record(&self) -> TurnRecord {
        TurnRecord {
            dialogue_id: self.dialogue_id.clone(),
            turn: self.turn,
            gold_tlb: self.tlb.clone(),
            gold_state: self.state.clone(),
            hyp_tlb_first: self.hyp_tlb_first.clone(),
            hyp_state_first: self.hyp_state_first.clone(),
            hyp_tlb_final: self.hyp_tlb_final.clone().unwrap_or_else(|| self.hyp_tlb_first.clone()),
            hyp_state_final: self
                .hyp_state_final
                .clone()
                .unwrap_or_else(|| self.hyp_state_first.clone()),
        }
    }
}

pub fn turn_records(records: &[PredictionRecord]) -> Vec<TurnRecord> {
    records.iter().map(PredictionRecord::turn_record).collect()
}

/// MultiWOZ styles see the whole schema; SGD styles see the target's domains.
pub fn target_schema<'a>(
    family: PromptFamily,
    schema: &'a SchemaTable,
    domains: &BTreeSet<String>,
) -> Result<Cow<'a, SchemaTable>> {
    match family {
        PromptFamily::Mwoz => Ok(Cow::Borrowed(schema)),
        PromptFamily::Sgd => Ok(Cow::Owned(schema.restrict(domains)?)),
    }
}

/// Exemplar block from a training payload; `with_hypothesis` requires the
/// stored first-pass prediction.
pub fn exemplar_from(
    payload: &ExamplePayload,
    family: PromptFamily,
    schema: &SchemaTable,
    with_hypothesis: bool,
) -> Result<Exemplar> {
    let hypothesis = if with_hypothesis {
        Some(
            payload
                .hypothesis
                .clone()
                .ok_or_else(|| Error::MissingHypothesis(payload.example_id.clone()))?,
        )
    } else {
        None
    };
    Ok(Exemplar {
        schema_local: match family {
            PromptFamily::Mwoz => None,
            PromptFamily::Sgd => Some(schema.restrict(&payload.domains)?),
        },
        prev_state: payload.prev_state.clone(),
        ctx: payload.ctx.clone(),
        hypothesis,
        gold_tlb: payload.gold_tlb.clone(),
    })
}

pub fn prompt_digest(text: &str) -> String {
    sha256_hex(text.as_bytes())
}

struct FirstTurn {
    hits: Vec<ScoredId>,
    digest: String,
    tlb: TurnBelief,
    diagnostics: Vec<String>,
    tokens: TokenCounts,
}

#[allow(clippy::too_many_arguments)]
fn first_pass_turn(
    d: &Dialogue,
    t: &Turn,
    prev: &DialogueState,
    index: &Index,
    embedder: &dyn EmbeddingBackend,
    client: &Client,
    schema: &SchemaTable,
    target: &SchemaTable,
    settings: &Settings,
) -> Result<FirstTurn> {
    let ctx = context_window(d, t.index, settings.width)?;
    let query = embedder.embed(&serialize_for_embedding(prev, &ctx))?;
    let exclude: HashSet<String> = [example_id(&d.dialogue_id, t.index)].into();
    let hits = retrieve(index, &query, settings.k, &exclude)?;
    let exemplars = hits
        .iter()
        .map(|h| exemplar_from(&h.entry.payload, settings.family, schema, false))
        .collect::<Result<Vec<_>>>()?;
    let prompt = build_inference_prompt(settings.inference_style(), target, &exemplars, prev, &ctx)?;
    let tag = format!("{}:1", example_id(&d.dialogue_id, t.index));
    let resp = client.complete(&CompletionRequest::new(prompt.text.clone(), tag))?;
    let parsed = parse_tlb(&resp.text, settings.parse_mode)?;
    Ok(FirstTurn {
        hits: hits
            .iter()
            .map(|h| ScoredId {
                id: h.entry.example_id.clone(),
                score: h.score,
            })
            .collect(),
        digest: prompt_digest(&prompt.text),
        tlb: parsed.tlb,
        diagnostics: parsed.diagnostics,
        tokens: TokenCounts {
            prompt_tokens: resp.prompt_tokens,
            completion_tokens: resp.completion_tokens,
        },
    })
}

/// Predict every turn in order, conditioning on the predicted state so far.
///
/// A runtime failure (backend, transport, embedding) stops calls for the rest
/// of the dialogue: the failing and all later turns keep empty hypotheses and
/// carry `error`. Validation failures are returned.
pub fn first_pass_dialogue(
    d: &Dialogue,
    index: &Index,
    embedder: &dyn EmbeddingBackend,
    client: &Client,
    schema: &SchemaTable,
    settings: &Settings,
) -> Result<Vec<PredictionRecord>> {
    let target = target_schema(settings.family, schema, &d.domains)?;
    let mut state = DialogueState::new();
    let mut failure: Option<String> = None;
    let mut out = Vec::with_capacity(d.turns.len());
    for t in &d.turns {
        let mut rec = PredictionRecord::empty(d, t, &state);
        if let Some(msg) = &failure {
            rec.error = Some(format!("not run after earlier failure: {msg}"));
            out.push(rec);
            continue;
        }
        match first_pass_turn(d, t, &state, index, embedder, client, schema, &target, settings) {
            Ok(ft) => {
                state = aggregate_state(&state, &ft.tlb);
                rec.hyp_tlb_first = ft.tlb;
                rec.hyp_state_first = state.clone();
                rec.retrieval = ft.hits;
                rec.prompt_digest_first = Some(ft.digest);
                rec.diagnostics_first = ft.diagnostics;
                rec.tokens_first = Some(ft.tokens);
            }
            Err(e) if e.class() == ErrorClass::Runtime => {
                log::warn!("{}: first pass failed: {e}", rec.example_id());
                rec.error = Some(e.to_string());
                failure = Some(e.to_string());
            }
            Err(e) => return Err(e),
        }
        out.push(rec);
    }
    Ok(out)
}

struct SecondTurn {
    digest: String,
    tlb: TurnBelief,
    diagnostics: Vec<String>,
    tokens: TokenCounts,
}

#[allow(clippy::too_many_arguments)]
fn second_pass_turn(
    d: &Dialogue,
    rec: &PredictionRecord,
    prev: &DialogueState,
    index: &Index,
    client: &Client,
    schema: &SchemaTable,
    target: &SchemaTable,
    settings: &Settings,
) -> Result<SecondTurn> {
    let ctx = context_window(d, rec.turn, settings.width)?;
    let exemplars = rec
        .retrieval
        .iter()
        .map(|hit| {
            let entry = index.get(&hit.id).ok_or_else(|| {
                Error::Retrieval(format!("exemplar {} is not in the index", hit.id))
            })?;
            exemplar_from(&entry.payload, settings.family, schema, true)
        })
        .collect::<Result<Vec<_>>>()?;
    let prompt = build_correction_prompt(
        settings.correction_style(),
        target,
        &exemplars,
        prev,
        &ctx,
        &rec.hyp_tlb_first,
        settings.instruction.as_deref(),
    )?;
    let tag = format!("{}:2", rec.example_id());
    let resp = client.complete(&CompletionRequest::new(prompt.text.clone(), tag))?;
    let parsed = parse_tlb(&resp.text, settings.parse_mode)?;
    Ok(SecondTurn {
        digest: prompt_digest(&prompt.text),
        tlb: parsed.tlb,
        diagnostics: parsed.diagnostics,
        tokens: TokenCounts {
            prompt_tokens: resp.prompt_tokens,
            completion_tokens: resp.completion_tokens,
        },
    })
}

/// Correct each first-pass hypothesis using the same exemplars, now with
/// their stored hypotheses, and re-accumulate the final states. The target's
/// previous state is the corrected state so far.
///
/// Turns flagged by the first pass, and turns after a runtime failure here,
/// keep their first-pass belief as the final one.
pub fn second_pass_dialogue(
    d: &Dialogue,
    mut records: Vec<PredictionRecord>,
    index: &Index,
    client: &Client,
    schema: &SchemaTable,
    settings: &Settings,
) -> Result<Vec<PredictionRecord>> {
    let target = target_schema(settings.family, schema, &d.domains)?;
    records.sort_by_key(|r| r.turn);
    let mut state = DialogueState::new();
    let mut failure: Option<String> = None;
    for rec in &mut records {
        if rec.dialogue_id != d.dialogue_id {
            return Err(Error::Inconsistent(format!(
                "record {} passed with dialogue {}",
                rec.example_id(),
                d.dialogue_id
            )));
        }
        let mut tlb = rec.hyp_tlb_first.clone();
        if rec.error.is_some() {
            // first pass already failed here
        } else if let Some(msg) = &failure {
            rec.error = Some(format!("second pass not run after earlier failure: {msg}"));
        } else {
            match second_pass_turn(d, rec, &state, index, client, schema, &target, settings) {
                Ok(st) => {
                    tlb = st.tlb;
                    rec.prompt_digest_final = Some(st.digest);
                    rec.diagnostics_final = st.diagnostics;
                    rec.tokens_final = Some(st.tokens);
                }
                Err(e) if e.class() == ErrorClass::Runtime => {
                    log::warn!("{}: second pass failed: {e}", rec.example_id());
                    rec.error = Some(e.to_string());
                    failure = Some(e.to_string());
                }
                Err(e) => return Err(e),
            }
        }
        state = aggregate_state(&state, &tlb);
        rec.hyp_tlb_final = Some(tlb);
        rec.hyp_state_final = Some(state.clone());
    }
    Ok(records)
}

/// Run `f` over dialogues on a pool of `threads` workers; output order is the
/// input order. Dialogues not started before `interrupt` is raised are `None`.
pub fn map_dialogues<T, F>(
    dialogues: &[&Dialogue],
    threads: usize,
    interrupt: &AtomicBool,
    f: F,
) -> Result<Vec<Option<T>>>
where
    T: Send,
    F: Fn(&Dialogue) -> Result<T> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Backend(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        dialogues
            .par_iter()
            .map(|d| {
                if interrupt.load(Ordering::SeqCst) {
                    Ok(None)
                } else {
                    f(d).map(Some)
                }
            })
            .collect()
    })
}

/// One training turn's collected prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectedTurn {
    pub example_id: String,
    /// Demonstrations shown in this turn's prompt.
    pub demo_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<TurnBelief>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Collection {
    /// The fixed demonstrations, in example-id order.
    pub demo_ids: Vec<String>,
    /// One entry per training turn, in example-id order.
    pub turns: Vec<CollectedTurn>,
}

impl Collection {
    /// Rebuild from stored lines; demo ids are the union over all prompts.
    pub fn from_turns(mut turns: Vec<CollectedTurn>) -> Self {
        turns.sort_by(|a, b| a.example_id.cmp(&b.example_id));
        let demo_ids: BTreeSet<String> = turns.iter().flat_map(|t| t.demo_ids.iter().cloned()).collect();
        Self {
            demo_ids: demo_ids.into_iter().collect(),
            turns,
        }
    }

    pub fn hypotheses(&self) -> HashMap<String, TurnBelief> {
        self.turns
            .iter()
            .filter_map(|t| t.hypothesis.clone().map(|h| (t.example_id.clone(), h)))
            .collect()
    }

    pub fn failures(&self) -> usize {
        self.turns.iter().filter(|t| t.error.is_some()).count()
    }
}

/// Pick the fixed demonstrations: `DEMO_COUNT` distinct example ids drawn with
/// `seed`, returned in id order.
pub fn sample_demo_ids(payloads: &[ExamplePayload], seed: u64) -> Result<Vec<String>> {
    if payloads.len() < DEMO_COUNT {
        return Err(Error::InvalidArgument(format!(
            "demonstration collection needs at least {DEMO_COUNT} training turns, found {}",
            payloads.len()
        )));
    }
    let mut ids: Vec<&str> = payloads.iter().map(|p| p.example_id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<String> = rand::seq::index::sample(&mut rng, ids.len(), DEMO_COUNT)
        .into_iter()
        .map(|i| ids[i].to_string())
        .collect();
    picked.sort();
    Ok(picked)
}

fn collect_turn(
    payload: &ExamplePayload,
    demos: &[&ExamplePayload],
    client: &Client,
    schema: &SchemaTable,
    settings: &Settings,
) -> Result<CollectedTurn> {
    let used: Vec<&ExamplePayload> = demos
        .iter()
        .copied()
        .filter(|d| d.example_id != payload.example_id)
        .collect();
    let exemplars = used
        .iter()
        .map(|p| exemplar_from(p, settings.family, schema, false))
        .collect::<Result<Vec<_>>>()?;
    let target = target_schema(settings.family, schema, &payload.domains)?;
    let prompt = build_inference_prompt(
        settings.inference_style(),
        &target,
        &exemplars,
        &payload.prev_state,
        &payload.ctx,
    )?;
    let mut turn = CollectedTurn {
        example_id: payload.example_id.clone(),
        demo_ids: used.iter().map(|p| p.example_id.clone()).collect(),
        hypothesis: None,
        diagnostics: Vec::new(),
        prompt_digest: Some(prompt_digest(&prompt.text)),
        error: None,
    };
    let tag = format!("{}:collect", payload.example_id);
    let outcome = client
        .complete(&CompletionRequest::new(prompt.text, tag))
        .and_then(|resp| parse_tlb(&resp.text, settings.parse_mode));
    match outcome {
        Ok(parsed) => {
            turn.hypothesis = Some(parsed.tlb);
            turn.diagnostics = parsed.diagnostics;
        }
        Err(e) if e.class() == ErrorClass::Runtime => {
            log::warn!("{}: collection failed: {e}", payload.example_id);
            turn.error = Some(e.to_string());
        }
        Err(e) => return Err(e),
    }
    Ok(turn)
}

/// Predict every training turn with the same fixed demonstrations (a demo's
/// own prompt leaves itself out). The target uses its gold previous state.
pub fn collect_demonstrations(
    train: &DatasetSplit,
    client: &Client,
    schema: &SchemaTable,
    settings: &Settings,
    seed: u64,
    threads: usize,
    interrupt: &AtomicBool,
) -> Result<Collection> {
    let mut payloads = payloads_from_split(train, settings.width)?;
    payloads.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let demo_ids = sample_demo_ids(&payloads, seed)?;
    let demos: Vec<&ExamplePayload> = payloads
        .iter()
        .filter(|p| demo_ids.binary_search(&p.example_id).is_ok())
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Backend(format!("cannot start worker pool: {e}")))?;
    let turns: Vec<Option<CollectedTurn>> = pool.install(|| {
        payloads
            .par_iter()
            .map(|p| {
                if interrupt.load(Ordering::SeqCst) {
                    Ok(None)
                } else {
                    collect_turn(p, &demos, client, schema, settings).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()
    })?;
    if turns.iter().any(Option::is_none) {
        return Err(Error::Interrupted);
    }
    Ok(Collection {
        demo_ids,
        turns: turns.into_iter().flatten().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub style: PromptStyle,
    pub dialogue_id: String,
    pub turn: usize,
    pub retrieved: Vec<ScoredId>,
}

/// One correction-tuning example. Offsets count characters, end exclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSequence {
    pub example_id: String,
    pub text: String,
    pub target_start: usize,
    pub target_end: usize,
    pub meta: SequenceMeta,
}

impl TrainingSequence {
    pub fn target(&self) -> String {
        self.text
            .chars()
            .skip(self.target_start)
            .take(self.target_end.saturating_sub(self.target_start))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub training_turns: usize,
    pub exported: usize,
    pub skipped: usize,
    pub skipped_ids: Vec<String>,
}

/// Render one sequence per training turn that has a stored hypothesis.
/// Exemplars are retrieved by the turn's own index vector, leaving out the
/// turn itself and turns without hypotheses. `index` must carry the
/// hypotheses (see [`Index::attach_hypotheses`]).
pub fn export_training_sequences(
    train: &DatasetSplit,
    index: &Index,
    schema: &SchemaTable,
    settings: &Settings,
) -> Result<(Vec<TrainingSequence>, ExportSummary)> {
    let mut payloads = payloads_from_split(train, settings.width)?;
    payloads.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let lacking: HashSet<String> = index
        .entries()
        .iter()
        .filter(|e| e.payload.hypothesis.is_none())
        .map(|e| e.example_id.clone())
        .collect();
    let style = settings.correction_style();
    let rendered: Vec<Option<TrainingSequence>> = payloads
        .par_iter()
        .map(|p| -> Result<Option<TrainingSequence>> {
            let entry = index.get(&p.example_id).ok_or_else(|| {
                Error::Retrieval(format!("training turn {} is not in the index", p.example_id))
            })?;
            let Some(hyp) = entry.payload.hypothesis.as_ref() else {
                return Ok(None);
            };
            let mut exclude = lacking.clone();
            exclude.insert(p.example_id.clone());
            let hits = if exclude.len() >= index.len() {
                Vec::new()
            } else {
                retrieve(index, &entry.vector, settings.k, &exclude)?
            };
            let exemplars = hits
                .iter()
                .map(|h| exemplar_from(&h.entry.payload, settings.family, schema, true))
                .collect::<Result<Vec<_>>>()?;
            let target = target_schema(settings.family, schema, &p.domains)?;
            let tt = render_training_sequence(
                style,
                &target,
                &exemplars,
                &p.prev_state,
                &p.ctx,
                hyp,
                &p.gold_tlb,
                settings.instruction.as_deref(),
            )?;
            Ok(Some(TrainingSequence {
                example_id: p.example_id.clone(),
                text: tt.text,
                target_start: tt.target_start,
                target_end: tt.target_end,
                meta: SequenceMeta {
                    style,
                    dialogue_id: p.dialogue_id.clone(),
                    turn: p.turn,
                    retrieved: hits
                        .iter()
                        .map(|h| ScoredId {
                            id: h.entry.example_id.clone(),
                            score: h.score,
                        })
                        .collect(),
                },
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut summary = ExportSummary {
        training_turns: payloads.len(),
        ..ExportSummary::default()
    };
    let mut out = Vec::new();
    for (p, seq) in payloads.iter().zip(rendered) {
        match seq {
            Some(s) => out.push(s),
            None => summary.skipped_ids.push(p.example_id.clone()),
        }
    }
    summary.exported = out.len();
    summary.skipped = summary.skipped_ids.len();
    Ok((out, summary))
}
