//! Dataset JSONL loading, validation and low-resource sampling.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::SchemaTable;
use crate::state::{
    accumulate, normalize_slot, slot_domain, Dialogue, DialogueState, Turn, TurnBelief,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub dialogues: Vec<Dialogue>,
    pub domain_set: BTreeSet<String>,
}

impl DatasetSplit {
    pub fn new(name: SplitName, dialogues: Vec<Dialogue>) -> Result<Self> {
        let mut seen = HashSet::new();
        for d in &dialogues {
            if !seen.insert(d.dialogue_id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate dialogue id {:?}",
                    d.dialogue_id
                )));
            }
        }
        let domain_set = dialogues
            .iter()
            .flat_map(|d| d.domains.iter().cloned())
            .collect();
        Ok(Self {
            name,
            dialogues,
            domain_set,
        })
    }

    pub fn dialogue(&self, id: &str) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.dialogue_id == id)
    }

    pub fn turn_count(&self) -> usize {
        self.dialogues.iter().map(|d| d.turns.len()).sum()
    }

    /// All `(dialogue, turn)` pairs in file order.
    pub fn turns(&self) -> impl Iterator<Item = (&Dialogue, &Turn)> {
        self.dialogues
            .iter()
            .flat_map(|d| d.turns.iter().map(move |t| (d, t)))
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub name: SplitName,
    /// Treat state/turn-belief inconsistencies as hard errors instead of warnings.
    pub strict_consistency: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            name: SplitName::Train,
            strict_consistency: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub split: DatasetSplit,
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTurn {
    system: String,
    user: String,
    #[serde(default)]
    tlb: BTreeMap<String, String>,
    #[serde(default)]
    state: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDialogue {
    dialogue_id: String,
    #[serde(default)]
    domains: Vec<String>,
    turns: Vec<RawTurn>,
}

fn check_known<'a>(
    schema: &SchemaTable,
    keys: impl Iterator<Item = &'a String>,
    dialogue_id: &str,
    turn: usize,
) -> Result<()> {
    for key in keys {
        let slot = normalize_slot(key).map_err(|_| Error::UnknownSlot {
            slot: key.clone(),
            dialogue_id: dialogue_id.to_string(),
            turn,
        })?;
        if !schema.has_slot(&slot) {
            return Err(Error::UnknownSlot {
                slot,
                dialogue_id: dialogue_id.to_string(),
                turn,
            });
        }
    }
    Ok(())
}

fn convert(raw: RawDialogue, schema: &SchemaTable, warnings: &mut Vec<String>) -> Result<Dialogue> {
    let id = raw.dialogue_id;
    if id.trim().is_empty() {
        return Err(Error::InvalidArgument("empty dialogue_id".into()));
    }
    let mut turns = Vec::with_capacity(raw.turns.len());
    for (i, rt) in raw.turns.into_iter().enumerate() {
        let index = i + 1;
        check_known(schema, rt.tlb.keys().chain(rt.state.keys()), &id, index)?;
        let gold_tlb = TurnBelief::try_from(rt.tlb)?;
        let gold_state = DialogueState::try_from(rt.state)?;
        turns.push(Turn {
            index,
            system_utterance: rt.system,
            user_utterance: rt.user,
            gold_tlb,
            gold_state,
        });
    }
    if turns.is_empty() {
        return Err(Error::InvalidArgument(format!("dialogue {id} has no turns")));
    }

    let accumulated = accumulate(turns.iter().map(|t| &t.gold_tlb));
    for (turn, acc) in turns.iter().zip(&accumulated) {
        if &turn.gold_state != acc {
            warnings.push(format!(
                "dialogue {id} turn {}: stored state differs from accumulated turn beliefs",
                turn.index
            ));
        }
    }

    let state_domains: BTreeSet<String> = turns
        .iter()
        .flat_map(|t| t.gold_state.slots().chain(t.gold_tlb.slots()))
        .map(|s| slot_domain(s).to_string())
        .collect();
    let listed: BTreeSet<String> = raw.domains.iter().map(|d| d.trim().to_lowercase()).collect();
    for d in &listed {
        if schema.slots(d).is_none() {
            return Err(Error::UnknownDomain(d.clone()));
        }
    }
    let domains = if listed.is_empty() {
        state_domains
    } else {
        if listed != state_domains {
            warnings.push(format!(
                "dialogue {id}: listed domains {listed:?} differ from annotated domains {state_domains:?}"
            ));
        }
        listed
    };

    Ok(Dialogue {
        dialogue_id: id,
        domains,
        turns,
    })
}

/// Load one dataset split (one dialogue per JSONL line) and validate it against `schema`.
pub fn load_dataset(path: &Path, schema: &SchemaTable, opts: &LoadOptions) -> Result<LoadedSplit> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dialogues = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let raw: RawDialogue = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let mut local = Vec::new();
        let dialogue = convert(raw, schema, &mut local).map_err(|e| match e {
            e @ Error::UnknownSlot { .. } => e,
            other => parse_err(other.to_string()),
        })?;
        warnings.extend(local.into_iter().map(|w| format!("line {line_no}: {w}")));
        dialogues.push(dialogue);
    }
    if opts.strict_consistency && !warnings.is_empty() {
        return Err(Error::Inconsistent(warnings.join("; ")));
    }
    let split = DatasetSplit::new(opts.name, dialogues)?;
    Ok(LoadedSplit { split, warnings })
}

pub fn write_dataset(path: &Path, split: &DatasetSplit) -> Result<()> {
    let mut out = Vec::new();
    for d in &split.dialogues {
        let raw = RawDialogue {
            dialogue_id: d.dialogue_id.clone(),
            domains: d.domains.iter().cloned().collect(),
            turns: d
                .turns
                .iter()
                .map(|t| RawTurn {
                    system: t.system_utterance.clone(),
                    user: t.user_utterance.clone(),
                    tlb: t.gold_tlb.as_map().clone(),
                    state: t.gold_state.as_map().clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &raw)?;
        out.push(b'\n');
    }
    crate::io::write_atomic(path, &out)
}

/// Deterministically keep `ceil(fraction * N)` whole dialogues, sampled
/// uniformly without replacement. Selected dialogues keep their original order.
pub fn sample_low_resource(split: &DatasetSplit, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    let n = split.dialogues.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot sample from an empty split".into()));
    }
    let keep = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    chosen.sort_unstable();
    let dialogues = chosen
        .into_iter()
        .map(|i| split.dialogues[i].clone())
        .collect();
    DatasetSplit::new(split.name, dialogues)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn schema() -> SchemaTable {
        SchemaTable::from_json_str(
            r#"{"hotel": {"area": {"description": "area"}, "stars": {"description": "stars"}},
                "taxi": {"leaveat": {"description": "time"}}}"#,
        )
        .unwrap()
    }

    fn write_tmp(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    const D1: &str = r#"{"dialogue_id":"d1","domains":["hotel"],"turns":[{"system":"","user":"hotel in the east","tlb":{"hotel-area":"East"},"state":{"hotel-area":"east"}},{"system":"ok","user":"4 stars","tlb":{"hotel-stars":"4"},"state":{"hotel-area":"east","hotel-stars":"4"}}]}"#;
    const D2: &str = r#"{"dialogue_id":"d2","domains":["taxi"],"turns":[{"system":"","user":"taxi at 5","tlb":{"taxi-leaveat":"17:00"},"state":{"taxi-leaveat":"17:00"}}]}"#;

    fn split_of(n: usize) -> DatasetSplit {
        let dialogues = (0..n)
            .map(|i| Dialogue {
                dialogue_id: format!("d{i:03}"),
                domains: BTreeSet::new(),
                turns: vec![],
            })
            .collect();
        DatasetSplit::new(SplitName::Train, dialogues).unwrap()
    }

    #[test]
    fn loads_valid_file() {
        let f = write_tmp(&[D1, "", D2]);
        let loaded = load_dataset(f.path(), &schema(), &LoadOptions::default()).unwrap();
        assert_eq!(loaded.split.dialogues.len(), 2);
        assert!(loaded.warnings.is_empty(), "{:?}", loaded.warnings);
        let d1 = &loaded.split.dialogues[0];
        assert_eq!(d1.turns[0].gold_tlb.get("hotel-area"), Some("east"));
        assert_eq!(d1.turns[1].index, 2);
        assert_eq!(
            loaded.split.domain_set,
            ["hotel", "taxi"].iter().map(|s| s.to_string()).collect()
        );
    }

    #[test]
    fn unknown_slot_is_named() {
        let bad = r#"{"dialogue_id":"d","turns":[{"system":"","user":"x","tlb":{"hotel-unknownslot":"a"},"state":{"hotel-unknownslot":"a"}}]}"#;
        let f = write_tmp(&[bad]);
        let err = load_dataset(f.path(), &schema(), &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("hotel-unknownslot"), "{err}");
    }

    #[test]
    fn parse_error_has_line_number() {
        let f = write_tmp(&[D1, "{not json"]);
        match load_dataset(f.path(), &schema(), &LoadOptions::default()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn inconsistency_is_warning_or_error() {
        let bad = r#"{"dialogue_id":"d","domains":["hotel"],"turns":[{"system":"","user":"x","tlb":{"hotel-area":"east"},"state":{"hotel-area":"east"}},{"system":"","user":"y","tlb":{"hotel-stars":"4"},"state":{"hotel-stars":"4"}}]}"#;
        let f = write_tmp(&[bad]);
        let loaded = load_dataset(f.path(), &schema(), &LoadOptions::default()).unwrap();
        assert_eq!(loaded.warnings.len(), 1);
        assert!(loaded.warnings[0].contains("turn 2"));
        let strict = LoadOptions {
            strict_consistency: true,
            ..Default::default()
        };
        assert!(matches!(
            load_dataset(f.path(), &schema(), &strict),
            Err(Error::Inconsistent(_))
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = write_tmp(&[D1, D1]);
        assert!(load_dataset(f.path(), &schema(), &LoadOptions::default()).is_err());
    }

    #[test]
    fn write_then_load_is_identity() {
        let f = write_tmp(&[D1, D2]);
        let loaded = load_dataset(f.path(), &schema(), &LoadOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out.jsonl");
        write_dataset(&out, &loaded.split).unwrap();
        let again = load_dataset(&out, &schema(), &LoadOptions::default()).unwrap();
        assert_eq!(again.split, loaded.split);
    }

    #[test]
    fn low_resource_sampling() {
        let split = split_of(100);
        let a = sample_low_resource(&split, 0.05, 7).unwrap();
        let b = sample_low_resource(&split, 0.05, 7).unwrap();
        assert_eq!(a.dialogues.len(), 5);
        assert_eq!(a, b);
        let c = sample_low_resource(&split, 0.05, 8).unwrap();
        assert_ne!(a, c);
        assert_eq!(sample_low_resource(&split, 1.0, 3).unwrap().dialogues.len(), 100);
        assert_eq!(sample_low_resource(&split_of(3), 0.05, 0).unwrap().dialogues.len(), 1);
        assert!(sample_low_resource(&split, 0.0, 0).is_err());
        assert!(sample_low_resource(&split, 1.5, 0).is_err());
        assert!(sample_low_resource(&split_of(0), 0.5, 0).is_err());
    }
}
