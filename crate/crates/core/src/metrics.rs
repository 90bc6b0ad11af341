//! Joint goal accuracy and slot-value F1 at the dialogue-state and turn-belief
//! level, synonym-aware matching, and the in-domain / half-OOD / OOD breakdown.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSplit;
use crate::error::{Error, Result};
use crate::state::{
    aggregate_state, normalize_slot, normalize_value, DialogueState, SlotValuePair, TurnBelief,
};

/// Acceptable surface strings per `(slot, gold value)`.
///
/// The gold value itself always matches, so an empty table means exact match.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymTable {
    map: HashMap<(String, String), BTreeSet<String>>,
}

impl SynonymTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, slot: &str, gold: &str, synonym: &str) -> Result<()> {
        let key = (normalize_slot(slot)?, normalize_value(gold)?);
        let syn = normalize_value(synonym)?;
        let entry = self.map.entry(key.clone()).or_default();
        entry.insert(key.1);
        entry.insert(syn);
        Ok(())
    }

    pub fn accepts(&self, slot: &str, gold: &str, hyp: &str) -> bool {
        hyp == gold
            || self
                .map
                .get(&(slot.to_string(), gold.to_string()))
                .is_some_and(|set| set.contains(hyp))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// `{"slot": {"gold value": ["synonym", ...]}}`
    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, BTreeMap<String, Vec<String>>> = serde_json::from_str(text)?;
        let mut table = Self::new();
        for (slot, golds) in raw {
            for (gold, syns) in golds {
                if syns.is_empty() {
                    table.add(&slot, &gold, &gold)?;
                }
                for syn in syns {
                    table.add(&slot, &gold, &syn)?;
                }
            }
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }
}

pub fn pair_matches(hyp: &SlotValuePair, gold: &SlotValuePair, syn: &SynonymTable) -> bool {
    hyp.slot == gold.slot && syn.accepts(&gold.slot, &gold.value, &hyp.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Matched / hypothesised / gold pair counts for one comparison.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub matched: usize,
    pub hyp: usize,
    pub gold: usize,
}

impl MatchCounts {
    pub fn add(&mut self, other: MatchCounts) {
        self.matched += other.matched;
        self.hyp += other.hyp;
        self.gold += other.gold;
    }

    /// Empty versus empty scores (1, 1, 1); F1 is 0 when precision + recall is 0.
    pub fn scores(&self) -> PrecisionRecall {
        let ratio = |num: usize, den: usize, other: usize| {
            if den > 0 {
                num as f64 / den as f64
            } else if other == 0 {
                1.0
            } else {
                0.0
            }
        };
        let precision = ratio(self.matched, self.hyp, self.gold);
        let recall = ratio(self.matched, self.gold, self.hyp);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        PrecisionRecall {
            precision,
            recall,
            f1,
        }
    }
}

/// Slots are unique keys, so each hypothesis pair can only match the gold pair
/// with the same slot.
pub fn match_counts(
    hyp: &BTreeMap<String, String>,
    gold: &BTreeMap<String, String>,
    syn: &SynonymTable,
) -> MatchCounts {
    let matched = hyp
        .iter()
        .filter(|(slot, value)| {
            gold.get(*slot)
                .is_some_and(|g| syn.accepts(slot, g, value))
        })
        .count();
    MatchCounts {
        matched,
        hyp: hyp.len(),
        gold: gold.len(),
    }
}

pub fn set_f1(
    hyp: &BTreeMap<String, String>,
    gold: &BTreeMap<String, String>,
    syn: &SynonymTable,
) -> PrecisionRecall {
    match_counts(hyp, gold, syn).scores()
}

/// 1 when both sets have the same slots and every value matches, else 0.
pub fn joint_goal(
    hyp: &BTreeMap<String, String>,
    gold: &BTreeMap<String, String>,
    syn: &SynonymTable,
) -> u8 {
    let c = match_counts(hyp, gold, syn);
    u8::from(c.hyp == c.gold && c.matched == c.gold)
}

/// Per-turn evaluation inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnRecord {
    pub dialogue_id: String,
    pub turn: usize,
    pub gold_tlb: TurnBelief,
    pub gold_state: DialogueState,
    pub hyp_tlb_first: TurnBelief,
    pub hyp_state_first: DialogueState,
    pub hyp_tlb_final: TurnBelief,
    pub hyp_state_final: DialogueState,
}

/// Line shape accepted from a predictions file. Hypothesis states are optional
/// and recomputed by accumulation; a missing final belief falls back to the
/// first-pass one.
#[derive(Debug, Deserialize)]
struct RecordLine {
    dialogue_id: String,
    turn: usize,
    tlb: TurnBelief,
    state: DialogueState,
    hyp_tlb_first: TurnBelief,
    #[serde(default)]
    hyp_state_first: Option<DialogueState>,
    #[serde(default)]
    hyp_tlb_final: Option<TurnBelief>,
    #[serde(default)]
    hyp_state_final: Option<DialogueState>,
}

/// Per-turn beliefs before hypothesis states are accumulated.
#[derive(Debug, Clone)]
pub struct TurnHypotheses {
    pub dialogue_id: String,
    pub turn: usize,
    pub gold_tlb: TurnBelief,
    pub gold_state: DialogueState,
    pub hyp_tlb_first: TurnBelief,
    pub hyp_tlb_final: TurnBelief,
}

/// Build records from per-turn hypotheses, accumulating the hypothesis states
/// per dialogue in turn order. Output order follows input order.
pub fn records_with_states(rows: Vec<TurnHypotheses>) -> Vec<TurnRecord> {
    let mut first_state: HashMap<String, DialogueState> = HashMap::new();
    let mut final_state: HashMap<String, DialogueState> = HashMap::new();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        (&rows[a].dialogue_id, rows[a].turn).cmp(&(&rows[b].dialogue_id, rows[b].turn))
    });
    let mut out: Vec<Option<TurnRecord>> = vec![None; rows.len()];
    for i in order {
        let row = &rows[i];
        let fs = first_state.entry(row.dialogue_id.clone()).or_default();
        *fs = aggregate_state(fs, &row.hyp_tlb_first);
        let ls = final_state.entry(row.dialogue_id.clone()).or_default();
        *ls = aggregate_state(ls, &row.hyp_tlb_final);
        out[i] = Some(TurnRecord {
            dialogue_id: row.dialogue_id.clone(),
            turn: row.turn,
            gold_tlb: row.gold_tlb.clone(),
            gold_state: row.gold_state.clone(),
            hyp_tlb_first: row.hyp_tlb_first.clone(),
            hyp_state_first: fs.clone(),
            hyp_tlb_final: row.hyp_tlb_final.clone(),
            hyp_state_final: ls.clone(),
        });
    }
    out.into_iter().flatten().collect()
}

/// Load turn records from a predictions JSONL file.
///
/// Stored hypothesis states must equal the accumulation of the stored beliefs.
pub fn load_turn_records(path: &Path) -> Result<Vec<TurnRecord>> {
    let lines: Vec<RecordLine> = crate::io::read_jsonl(path)?;
    let stored: Vec<(Option<DialogueState>, Option<DialogueState>)> = lines
        .iter()
        .map(|l| (l.hyp_state_first.clone(), l.hyp_state_final.clone()))
        .collect();
    let rows = lines
        .into_iter()
        .map(|l| TurnHypotheses {
            dialogue_id: l.dialogue_id,
            turn: l.turn,
            gold_tlb: l.tlb,
            gold_state: l.state,
            hyp_tlb_final: l.hyp_tlb_final.unwrap_or_else(|| l.hyp_tlb_first.clone()),
            hyp_tlb_first: l.hyp_tlb_first,
        })
        .collect();
    let records = records_with_states(rows);
    for (rec, (first, fin)) in records.iter().zip(stored) {
        let bad = first.is_some_and(|s| s != rec.hyp_state_first)
            || fin.is_some_and(|s| s != rec.hyp_state_final);
        if bad {
            return Err(Error::Inconsistent(format!(
                "{}: dialogue {} turn {}: stored hypothesis state differs from accumulated beliefs",
                path.display(),
                rec.dialogue_id,
                rec.turn
            )));
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    First,
    Final,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::First => "first",
            EvalMode::Final => "final",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub dst_jga: f64,
    pub dst_f1: f64,
    pub tlb_jga: f64,
    pub tlb_f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DomainCategory {
    InDomain,
    HalfOOD,
    OOD,
}

impl DomainCategory {
    pub const ALL: [DomainCategory; 3] = [
        DomainCategory::InDomain,
        DomainCategory::HalfOOD,
        DomainCategory::OOD,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            DomainCategory::InDomain => "In-Domain",
            DomainCategory::HalfOOD => "Half-OOD",
            DomainCategory::OOD => "OOD",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: DomainCategory,
    pub turns: usize,
    /// Absent when the category has no turns.
    pub scores: Option<Scores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub turns: usize,
    #[serde(flatten)]
    pub scores: Scores,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<CategoryReport>,
}

fn check_complete(records: &[&TurnRecord]) -> Result<()> {
    let mut turns: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for r in records {
        turns.entry(&r.dialogue_id).or_default().push(r.turn);
    }
    for (id, mut ts) in turns {
        ts.sort_unstable();
        for (i, t) in ts.iter().enumerate() {
            if *t != i + 1 {
                return Err(Error::MissingTurn {
                    dialogue_id: id.to_string(),
                    expected: i + 1,
                });
            }
        }
    }
    Ok(())
}

fn score_records(records: &[&TurnRecord], syn: &SynonymTable, mode: EvalMode) -> Scores {
    let mut dst_hits = 0usize;
    let mut tlb_hits = 0usize;
    let mut dst_counts = MatchCounts::default();
    let mut tlb_counts = MatchCounts::default();
    for r in records {
        let (tlb, state) = match mode {
            EvalMode::First => (&r.hyp_tlb_first, &r.hyp_state_first),
            EvalMode::Final => (&r.hyp_tlb_final, &r.hyp_state_final),
        };
        dst_hits += usize::from(joint_goal(state.as_map(), r.gold_state.as_map(), syn));
        tlb_hits += usize::from(joint_goal(tlb.as_map(), r.gold_tlb.as_map(), syn));
        dst_counts.add(match_counts(state.as_map(), r.gold_state.as_map(), syn));
        tlb_counts.add(match_counts(tlb.as_map(), r.gold_tlb.as_map(), syn));
    }
    let n = records.len() as f64;
    Scores {
        dst_jga: dst_hits as f64 / n,
        dst_f1: dst_counts.scores().f1,
        tlb_jga: tlb_hits as f64 / n,
        tlb_f1: tlb_counts.scores().f1,
    }
}

/// Turn-averaged JGA and micro-averaged F1 for the chosen pass.
pub fn evaluate_run(records: &[TurnRecord], syn: &SynonymTable, mode: EvalMode) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no turn records to evaluate".into()));
    }
    let refs: Vec<&TurnRecord> = records.iter().collect();
    check_complete(&refs)?;
    Ok(MetricsReport {
        mode,
        turns: records.len(),
        scores: score_records(&refs, syn, mode),
        categories: Vec::new(),
    })
}

pub fn categorize_dialogue(
    dialogue_domains: &BTreeSet<String>,
    train_domains: &BTreeSet<String>,
) -> Result<DomainCategory> {
    if dialogue_domains.is_empty() {
        return Err(Error::InvalidArgument("dialogue has no domains".into()));
    }
    if dialogue_domains.is_subset(train_domains) {
        Ok(DomainCategory::InDomain)
    } else if dialogue_domains.is_disjoint(train_domains) {
        Ok(DomainCategory::OOD)
    } else {
        Ok(DomainCategory::HalfOOD)
    }
}

/// Overall report plus one sub-report per domain category. Each turn inherits
/// the category of its dialogue.
pub fn breakdown_by_category(
    records: &[TurnRecord],
    dialogues: &DatasetSplit,
    train_domains: &BTreeSet<String>,
    syn: &SynonymTable,
    mode: EvalMode,
) -> Result<MetricsReport> {
    let mut report = evaluate_run(records, syn, mode)?;
    let mut category_of: HashMap<&str, DomainCategory> = HashMap::new();
    for d in &dialogues.dialogues {
        category_of.insert(&d.dialogue_id, categorize_dialogue(&d.domains, train_domains)?);
    }
    let mut parts: BTreeMap<DomainCategory, Vec<&TurnRecord>> = BTreeMap::new();
    for r in records {
        let cat = category_of
            .get(r.dialogue_id.as_str())
            .ok_or_else(|| Error::UnknownDialogue(r.dialogue_id.clone()))?;
        parts.entry(*cat).or_default().push(r);
    }
    report.categories = DomainCategory::ALL
        .iter()
        .map(|cat| {
            let recs = parts.get(cat).map(Vec::as_slice).unwrap_or(&[]);
            CategoryReport {
                category: *cat,
                turns: recs.len(),
                scores: (!recs.is_empty()).then(|| score_records(recs, syn, mode)),
            }
        })
        .collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::accumulate;
    use proptest::prelude::*;

    fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(s, v)| (s.to_string(), v.to_string()))
            .collect()
    }

    fn pair(s: &str, v: &str) -> SlotValuePair {
        SlotValuePair::new(s, v).unwrap()
    }

    fn tlb(pairs: &[(&str, &str)]) -> TurnBelief {
        TurnBelief::from_pairs(pairs.iter().copied()).unwrap()
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn pair_matching() {
        let empty = SynonymTable::new();
        assert!(pair_matches(&pair("a-x", "east"), &pair("a-x", "east"), &empty));
        let mut syn = SynonymTable::new();
        syn.add("a-x", "east", "e").unwrap();
        assert!(pair_matches(&pair("a-x", "e"), &pair("a-x", "east"), &syn));
        assert!(!pair_matches(&pair("a-x", "e"), &pair("a-x", "east"), &empty));
        assert!(!pair_matches(&pair("a-x", "east"), &pair("a-y", "east"), &empty));
    }

    #[test]
    fn f1_examples() {
        let empty = SynonymTable::new();
        let a = map(&[("a-x", "1"), ("a-y", "2")]);
        assert_eq!(set_f1(&a, &a, &empty).f1, 1.0);
        // precision = 1/2, recall = 1/2, f1 = 2 * 0.25 / 1
        let r = set_f1(&a, &map(&[("a-x", "1"), ("a-z", "3")]), &empty);
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
        let e = set_f1(&map(&[]), &map(&[]), &empty);
        assert_eq!((e.precision, e.recall, e.f1), (1.0, 1.0, 1.0));
        let miss = set_f1(&map(&[]), &a, &empty);
        assert_eq!(miss.f1, 0.0);
        let wrong = set_f1(&map(&[("a-x", "9")]), &map(&[("a-x", "1")]), &empty);
        assert_eq!(wrong.f1, 0.0);
    }

    #[test]
    fn joint_goal_examples() {
        let empty = SynonymTable::new();
        let gold = map(&[("a-x", "1"), ("a-y", "2")]);
        assert_eq!(joint_goal(&gold, &gold, &empty), 1);
        assert_eq!(joint_goal(&map(&[("a-x", "1")]), &gold, &empty), 0);
        let extra = map(&[("a-x", "1"), ("a-y", "2"), ("a-z", "3")]);
        assert_eq!(joint_goal(&extra, &gold, &empty), 0);
        assert_eq!(joint_goal(&map(&[]), &map(&[]), &empty), 1);
    }

    fn record(id: &str, turn: usize, gold: TurnBelief, gold_state: DialogueState, hyp: TurnBelief) -> TurnHypotheses {
        TurnHypotheses {
            dialogue_id: id.to_string(),
            turn,
            gold_tlb: gold,
            gold_state,
            hyp_tlb_first: hyp.clone(),
            hyp_tlb_final: hyp,
        }
    }

    #[test]
    fn evaluate_all_correct() {
        let g1 = tlb(&[("a-x", "1")]);
        let g2 = tlb(&[("a-y", "2")]);
        let states = accumulate([&g1, &g2]);
        let recs = records_with_states(vec![
            record("d", 1, g1.clone(), states[0].clone(), g1.clone()),
            record("d", 2, g2.clone(), states[1].clone(), g2.clone()),
        ]);
        let r = evaluate_run(&recs, &SynonymTable::new(), EvalMode::Final).unwrap();
        assert_eq!(r.scores, Scores { dst_jga: 1.0, dst_f1: 1.0, tlb_jga: 1.0, tlb_f1: 1.0 });
        assert_eq!(r.turns, 2);
    }

    #[test]
    fn evaluate_recovered_state() {
        // Turn 1 predicts the wrong value; turn 2 overwrites the slot with the
        // gold value, so the turn-2 state is right although turn 1 was wrong.
        let g1 = tlb(&[("a-x", "1")]);
        let g2 = tlb(&[("a-x", "2")]);
        let states = accumulate([&g1, &g2]);
        let recs = records_with_states(vec![
            record("d", 1, g1, states[0].clone(), tlb(&[("a-x", "9")])),
            record("d", 2, g2.clone(), states[1].clone(), g2),
        ]);
        let r = evaluate_run(&recs, &SynonymTable::new(), EvalMode::First).unwrap();
        assert_eq!(r.scores.tlb_jga, 0.5);
        assert_eq!(r.scores.dst_jga, 0.5);
        // tlb: 1 matched of 2 hyp and 2 gold; dst: same pooled counts
        assert_eq!(r.scores.tlb_f1, 0.5);
        assert_eq!(r.scores.dst_f1, 0.5);
    }

    #[test]
    fn evaluate_errors() {
        assert!(evaluate_run(&[], &SynonymTable::new(), EvalMode::First).is_err());
        let g = tlb(&[("a-x", "1")]);
        let s = accumulate([&g]).remove(0);
        let recs = records_with_states(vec![record("d", 2, g.clone(), s, g)]);
        assert!(matches!(
            evaluate_run(&recs, &SynonymTable::new(), EvalMode::First),
            Err(Error::MissingTurn { expected: 1, .. })
        ));
    }

    #[test]
    fn categories() {
        let train = set(&["hotel", "taxi"]);
        assert_eq!(categorize_dialogue(&set(&["hotel"]), &train).unwrap(), DomainCategory::InDomain);
        assert_eq!(categorize_dialogue(&set(&["flights"]), &train).unwrap(), DomainCategory::OOD);
        assert_eq!(
            categorize_dialogue(&set(&["hotel", "flights"]), &train).unwrap(),
            DomainCategory::HalfOOD
        );
        assert!(categorize_dialogue(&BTreeSet::new(), &train).is_err());
    }

    #[test]
    fn synonym_json() {
        let t = SynonymTable::from_json_str(r#"{"hotel-area": {"centre": ["center", "Central"]}}"#).unwrap();
        assert!(t.accepts("hotel-area", "centre", "center"));
        assert!(t.accepts("hotel-area", "centre", "central"));
        assert!(!t.accepts("hotel-area", "east", "center"));
    }

    fn arb_map() -> impl Strategy<Value = BTreeMap<String, String>> {
        proptest::collection::btree_map("a-[u-z]", "[abc]", 0..6)
    }

    proptest! {
        #[test]
        fn jga_iff_f1_one(a in arb_map(), b in arb_map()) {
            let empty = SynonymTable::new();
            prop_assert_eq!(joint_goal(&a, &b, &empty) == 1, set_f1(&a, &b, &empty).f1 == 1.0);
        }

        #[test]
        fn f1_symmetric_under_swap(a in arb_map(), b in arb_map()) {
            let empty = SynonymTable::new();
            let ab = set_f1(&a, &b, &empty);
            let ba = set_f1(&b, &a, &empty);
            prop_assert_eq!(ab.precision, ba.recall);
            prop_assert_eq!(ab.recall, ba.precision);
            prop_assert_eq!(ab.f1, ba.f1);
        }

        #[test]
        fn synonyms_are_monotone(
            a in arb_map(),
            b in arb_map(),
            extra in proptest::collection::vec(("a-[u-z]", "[abc]", "[abc]"), 0..6),
        ) {
            let empty = SynonymTable::new();
            let mut grown = SynonymTable::new();
            for (slot, gold, syn) in &extra {
                grown.add(slot, gold, syn).unwrap();
            }
            prop_assert!(set_f1(&a, &b, &grown).f1 >= set_f1(&a, &b, &empty).f1);
            prop_assert!(joint_goal(&a, &b, &grown) >= joint_goal(&a, &b, &empty));
        }
    }
}
