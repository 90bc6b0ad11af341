//! Prompt rendering for the four prompt styles, correction-tuning sequences,
//! and parsing of completions back into turn beliefs.
//!
//! Prompts are a single text block made of blank-line separated blocks:
//!
//! ```text
//! [SCHEMA]            global schema (MultiWOZ styles only, before the examples)
//! [EXAMPLE i]         one per exemplar, in retrieval order
//!   [SCHEMA] ...      exemplar's own domains (SGD styles only)
//!   [STATE] ...       previous dialogue state
//!   [SYS] / [USER]    context window, oldest first
//!   [HYP] ...         first-pass hypothesis (correction styles only)
//!   [TLB] ...         gold turn belief
//! [SCHEMA]            target-domain schema (SGD styles only, after the examples)
//! [TARGET]
//!   [STATE] / [SYS] / [USER] / [HYP]
//!   [TLB]             completion cue, always the last token of the prompt
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{render_schema, SchemaTable};
use crate::state::{ContextWindow, DialogueState, TurnBelief};

pub const NONE: &str = "NONE";
/// Printed for an empty system utterance (the first turn has none).
pub const EMPTY_UTTERANCE: &str = "[NONE]";
pub const CUE: &str = "[TLB]";

const STOP_MARKERS: [&str; 8] = [
    "[SCHEMA]", "[EXAMPLE", "[TARGET]", "[STATE]", "[SYS]", "[USER]", "[HYP]", "[TLB]",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStyle {
    MwozInference,
    MwozCorrection,
    SgdInference,
    SgdCorrection,
}

impl PromptStyle {
    pub const ALL: [PromptStyle; 4] = [
        PromptStyle::MwozInference,
        PromptStyle::MwozCorrection,
        PromptStyle::SgdInference,
        PromptStyle::SgdCorrection,
    ];

    pub fn is_correction(self) -> bool {
        matches!(self, PromptStyle::MwozCorrection | PromptStyle::SgdCorrection)
    }

    pub fn is_sgd(self) -> bool {
        matches!(self, PromptStyle::SgdInference | PromptStyle::SgdCorrection)
    }

    pub fn family(self) -> PromptFamily {
        if self.is_sgd() {
            PromptFamily::Sgd
        } else {
            PromptFamily::Mwoz
        }
    }

    /// Exemplars per prompt.
    pub fn default_k(self) -> usize {
        self.family().default_k()
    }

    /// Exchanges in the context window.
    pub fn default_width(self) -> usize {
        self.family().default_width()
    }

    pub fn name(self) -> &'static str {
        match self {
            PromptStyle::MwozInference => "mwoz-inference",
            PromptStyle::MwozCorrection => "mwoz-correction",
            PromptStyle::SgdInference => "sgd-inference",
            PromptStyle::SgdCorrection => "sgd-correction",
        }
    }
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Dataset flavour; picks the inference and correction styles together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptFamily {
    Mwoz,
    Sgd,
}

impl PromptFamily {
    pub fn inference(self) -> PromptStyle {
        match self {
            PromptFamily::Mwoz => PromptStyle::MwozInference,
            PromptFamily::Sgd => PromptStyle::SgdInference,
        }
    }

    pub fn correction(self) -> PromptStyle {
        match self {
            PromptFamily::Mwoz => PromptStyle::MwozCorrection,
            PromptFamily::Sgd => PromptStyle::SgdCorrection,
        }
    }

    pub fn default_k(self) -> usize {
        match self {
            PromptFamily::Mwoz => 10,
            PromptFamily::Sgd => 3,
        }
    }

    pub fn default_width(self) -> usize {
        match self {
            PromptFamily::Mwoz => 1,
            PromptFamily::Sgd => 3,
        }
    }
}

impl FromStr for PromptFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mwoz" => Ok(PromptFamily::Mwoz),
            "sgd" => Ok(PromptFamily::Sgd),
            other => Err(Error::InvalidArgument(format!(
                "unknown style {other:?} (expected mwoz or sgd)"
            ))),
        }
    }
}

/// One demonstration block.
#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    /// Schema of the exemplar's own domains; SGD styles only.
    pub schema_local: Option<SchemaTable>,
    pub prev_state: DialogueState,
    pub ctx: ContextWindow,
    /// First-pass prediction for the exemplar; correction styles only.
    pub hypothesis: Option<TurnBelief>,
    pub gold_tlb: TurnBelief,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub token_estimate: usize,
    pub style: PromptStyle,
}

/// Correction-tuning text: the correction prompt followed by the gold turn
/// belief. Offsets are in characters (Unicode scalar values), end exclusive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingText {
    pub text: String,
    pub target_start: usize,
    pub target_end: usize,
}

impl TrainingText {
    pub fn target(&self) -> String {
        self.text
            .chars()
            .skip(self.target_start)
            .take(self.target_end - self.target_start)
            .collect()
    }
}

/// `slot: value` pairs joined by `"; "` in slot order, or `NONE`.
pub fn render_tlb(tlb: &TurnBelief) -> String {
    render_pairs(tlb.iter())
}

pub fn render_state(state: &DialogueState) -> String {
    render_pairs(state.iter())
}

fn render_pairs<'a>(pairs: impl Iterator<Item = (&'a str, &'a str)>) -> String {
    let items: Vec<String> = pairs.map(|(s, v)| format!("{s}: {v}")).collect();
    if items.is_empty() {
        NONE.to_string()
    } else {
        items.join("; ")
    }
}

/// Whitespace/punctuation token count, floored at `ceil(chars / 4)`.
pub fn estimate_tokens(text: &str) -> usize {
    let mut count = 0usize;
    let mut in_word = false;
    let mut chars = 0usize;
    for c in text.chars() {
        chars += 1;
        if c.is_alphanumeric() {
            if !in_word {
                count += 1;
                in_word = true;
            }
        } else {
            in_word = false;
            if !c.is_whitespace() {
                count += 1;
            }
        }
    }
    count.max(chars.div_ceil(4))
}

fn push_context(out: &mut String, prev_state: &DialogueState, ctx: &ContextWindow) {
    out.push_str("[STATE] ");
    out.push_str(&render_state(prev_state));
    let last = ctx.exchanges.len().saturating_sub(1);
    for (i, ex) in ctx.exchanges.iter().enumerate() {
        if ex.is_padding() && i != last {
            continue;
        }
        out.push_str("\n[SYS] ");
        out.push_str(utterance(&ex.system));
        out.push_str("\n[USER] ");
        out.push_str(utterance(&ex.user));
    }
}

fn utterance(text: &str) -> &str {
    if text.is_empty() {
        EMPTY_UTTERANCE
    } else {
        text
    }
}

fn schema_block(schema: &SchemaTable) -> Result<String> {
    let body = render_schema(schema, &schema.domain_set())?;
    Ok(format!("[SCHEMA]\n{}", body.trim_end()))
}

fn exemplar_block(i: usize, ex: &Exemplar, style: PromptStyle) -> Result<String> {
    let mut out = format!("[EXAMPLE {}]\n", i + 1);
    if style.is_sgd() {
        let local = ex.schema_local.as_ref().ok_or_else(|| {
            Error::Prompt(format!("exemplar {} has no local schema ({style})", i + 1))
        })?;
        out.push_str(&schema_block(local)?);
        out.push('\n');
    } else if ex.schema_local.is_some() {
        return Err(Error::Prompt(format!(
            "exemplar {} carries a local schema but {style} uses a global one",
            i + 1
        )));
    }
    push_context(&mut out, &ex.prev_state, &ex.ctx);
    match (&ex.hypothesis, style.is_correction()) {
        (Some(h), true) => {
            out.push_str("\n[HYP] ");
            out.push_str(&render_tlb(h));
        }
        (None, true) => {
            return Err(Error::Prompt(format!(
                "exemplar {} has no hypothesis ({style})",
                i + 1
            )))
        }
        (Some(_), false) => {
            return Err(Error::Prompt(format!(
                "exemplar {} has a hypothesis but {style} is not a correction style",
                i + 1
            )))
        }
        (None, false) => {}
    }
    out.push_str("\n[TLB] ");
    out.push_str(&render_tlb(&ex.gold_tlb));
    Ok(out)
}

fn assemble(
    style: PromptStyle,
    schema: &SchemaTable,
    exemplars: &[Exemplar],
    prev_state: &DialogueState,
    ctx: &ContextWindow,
    hyp: Option<&TurnBelief>,
    instruction: Option<&str>,
) -> Result<RenderedPrompt> {
    let mut blocks = Vec::with_capacity(exemplars.len() + 3);
    if let Some(instr) = instruction.map(str::trim).filter(|s| !s.is_empty()) {
        blocks.push(instr.to_string());
    }
    let examples = exemplars
        .iter()
        .enumerate()
        .map(|(i, ex)| exemplar_block(i, ex, style))
        .collect::<Result<Vec<_>>>()?;
    if style.is_sgd() {
        blocks.extend(examples);
        blocks.push(schema_block(schema)?);
    } else {
        blocks.push(schema_block(schema)?);
        blocks.extend(examples);
    }
    let mut target = String::from("[TARGET]\n");
    push_context(&mut target, prev_state, ctx);
    if let Some(h) = hyp {
        target.push_str("\n[HYP] ");
        target.push_str(&render_tlb(h));
    }
    target.push('\n');
    target.push_str(CUE);
    blocks.push(target);

    let text = blocks.join("\n\n");
    Ok(RenderedPrompt {
        token_estimate: estimate_tokens(&text),
        text,
        style,
    })
}

/// First-pass prompt. For MultiWOZ styles `schema` is the global table and is
/// placed before the exemplars; for SGD styles it is the target-domain table
/// and follows them.
pub fn build_inference_prompt(
    style: PromptStyle,
    schema: &SchemaTable,
    exemplars: &[Exemplar],
    prev_state: &DialogueState,
    ctx: &ContextWindow,
) -> Result<RenderedPrompt> {
    if style.is_correction() {
        return Err(Error::Prompt(format!("{style} is not an inference style")));
    }
    assemble(style, schema, exemplars, prev_state, ctx, None, None)
}

/// Second-pass prompt: every exemplar shows its hypothesis before the gold
/// belief, and the target ends with its own hypothesis and the cue.
pub fn build_correction_prompt(
    style: PromptStyle,
    schema: &SchemaTable,
    exemplars: &[Exemplar],
    prev_state: &DialogueState,
    ctx: &ContextWindow,
    hyp: &TurnBelief,
    instruction: Option<&str>,
) -> Result<RenderedPrompt> {
    if !style.is_correction() {
        return Err(Error::Prompt(format!("{style} is not a correction style")));
    }
    assemble(style, schema, exemplars, prev_state, ctx, Some(hyp), instruction)
}

#[allow(clippy::too_many_arguments)]
pub fn render_training_sequence(
    style: PromptStyle,
    schema: &SchemaTable,
    exemplars: &[Exemplar],
    prev_state: &DialogueState,
    ctx: &ContextWindow,
    hyp: &TurnBelief,
    gold: &TurnBelief,
    instruction: Option<&str>,
) -> Result<TrainingText> {
    let prompt = build_correction_prompt(style, schema, exemplars, prev_state, ctx, hyp, instruction)?;
    let target = render_tlb(gold);
    let mut text = prompt.text;
    text.push(' ');
    let target_start = text.chars().count();
    text.push_str(&target);
    let target_end = target_start + target.chars().count();
    Ok(TrainingText {
        text,
        target_start,
        target_end,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    #[default]
    Lenient,
    Strict,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedTlb {
    pub tlb: TurnBelief,
    pub diagnostics: Vec<String>,
}

/// Parse the first line of a completion as `slot: value; ...`.
///
/// Lenient mode skips malformed items and records a diagnostic for each.
/// Strict mode fails on a malformed item unless nothing on the line parses,
/// in which case both modes return an empty belief and a diagnostic.
pub fn parse_tlb(completion: &str, mode: ParseMode) -> Result<ParsedTlb> {
    let mut line = completion.trim_start();
    line = line.strip_prefix(CUE).unwrap_or(line).trim_start();
    if let Some(end) = line.find('\n') {
        line = &line[..end];
    }
    if let Some(cut) = STOP_MARKERS.iter().filter_map(|m| line.find(m)).min() {
        line = &line[..cut];
    }
    let line = line.trim();
    let mut parsed = ParsedTlb::default();
    if line.is_empty() || line.eq_ignore_ascii_case(NONE) {
        return Ok(parsed);
    }

    let mut malformed = Vec::new();
    for item in line.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let ok = item
            .split_once(':')
            .ok_or_else(|| Error::MalformedItem { item: item.to_string() })
            .and_then(|(slot, value)| parsed.tlb.insert(slot.trim(), value.trim()));
        if let Err(e) = ok {
            malformed.push((item.to_string(), e));
        }
    }
    if parsed.tlb.is_empty() {
        parsed.diagnostics.push(format!("unparseable completion {line:?}"));
        return Ok(parsed);
    }
    if let Some((item, _)) = malformed.first() {
        if mode == ParseMode::Strict {
            return Err(Error::MalformedItem { item: item.clone() });
        }
    }
    parsed
        .diagnostics
        .extend(malformed.into_iter().map(|(item, e)| format!("skipped {item:?}: {e}")));
    Ok(parsed)
}
