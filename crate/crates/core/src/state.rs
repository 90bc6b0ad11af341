//! Slot-value beliefs, dialogue states and the dialogue/turn data model.
//!
//! A [`TurnBelief`] holds the slot-value pairs introduced or changed at one turn;
//! a [`DialogueState`] is the running aggregate of all beliefs so far. The value
//! [`DELETE`] is legal only inside a turn belief, where it clears a slot.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved turn-belief value that removes a slot from the state.
pub const DELETE: &str = "[DELETE]";

/// Lowercase, trim and collapse internal whitespace.
///
/// The reserved [`DELETE`] marker is recognised case-insensitively and kept in
/// its canonical upper-case spelling.
pub fn normalize_value(raw: &str) -> Result<String> {
    let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    if collapsed.is_empty() {
        return Err(Error::InvalidValue(format!(
            "{raw:?} is empty after normalization"
        )));
    }
    let lower = collapsed.to_lowercase();
    if lower == "[delete]" {
        return Ok(DELETE.to_string());
    }
    Ok(lower)
}

/// Normalize and validate a qualified slot name `domain-slotname`.
pub fn normalize_slot(raw: &str) -> Result<String> {
    let slot = raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let Some((domain, name)) = slot.split_once('-') else {
        return Err(Error::InvalidSlot(raw.to_string()));
    };
    let domain_ok = !domain.is_empty()
        && domain
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_');
    let name_ok = !name.is_empty()
        && !name.starts_with(' ')
        && !name.contains([':', ';', '[', ']', '\n']);
    if domain_ok && name_ok {
        Ok(slot)
    } else {
        Err(Error::InvalidSlot(raw.to_string()))
    }
}

/// Domain prefix of a qualified slot name.
pub fn slot_domain(slot: &str) -> &str {
    slot.split_once('-').map_or(slot, |(d, _)| d)
}

fn check_value(slot: &str, value: &str, allow_delete: bool) -> Result<()> {
    if value == DELETE {
        return if allow_delete {
            Ok(())
        } else {
            Err(Error::InvalidValue(format!(
                "{DELETE} is not allowed in a dialogue state (slot {slot})"
            )))
        };
    }
    if value.contains([';', '[', ']', '\n']) {
        return Err(Error::InvalidValue(format!(
            "value {value:?} for slot {slot} contains a reserved character"
        )));
    }
    Ok(())
}

/// A single qualified slot and its normalized value.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotValuePair {
    pub slot: String,
    pub value: String,
}

impl SlotValuePair {
    pub fn new(slot: &str, value: &str) -> Result<Self> {
        let slot = normalize_slot(slot)?;
        let value = normalize_value(value)?;
        check_value(&slot, &value, true)?;
        Ok(Self { slot, value })
    }
}

impl fmt::Display for SlotValuePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.slot, self.value)
    }
}

macro_rules! pair_set {
    ($name:ident, $allow_delete:expr) => {
        #[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(try_from = "BTreeMap<String, String>", into = "BTreeMap<String, String>")]
        pub struct $name(BTreeMap<String, String>);

        impl $name {
            pub fn new() -> Self {
                Self::default()
            }

            /// Insert or overwrite a slot after normalizing both parts.
            pub fn insert(&mut self, slot: &str, value: &str) -> Result<()> {
                let slot = normalize_slot(slot)?;
                let value = normalize_value(value)?;
                check_value(&slot, &value, $allow_delete)?;
                self.0.insert(slot, value);
                Ok(())
            }

            pub fn from_pairs<'a, I>(pairs: I) -> Result<Self>
            where
                I: IntoIterator<Item = (&'a str, &'a str)>,
            {
                let mut out = Self::new();
                for (slot, value) in pairs {
                    out.insert(slot, value)?;
                }
                Ok(out)
            }

            pub fn get(&self, slot: &str) -> Option<&str> {
                self.0.get(slot).map(String::as_str)
            }

            pub fn remove(&mut self, slot: &str) -> Option<String> {
                self.0.remove(slot)
            }

            pub fn contains_slot(&self, slot: &str) -> bool {
                self.0.contains_key(slot)
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            /// Pairs in canonical (lexicographic slot) order.
            pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
                self.0.iter().map(|(s, v)| (s.as_str(), v.as_str()))
            }

            pub fn pairs(&self) -> Vec<SlotValuePair> {
                self.iter()
                    .map(|(slot, value)| SlotValuePair {
                        slot: slot.to_string(),
                        value: value.to_string(),
                    })
                    .collect()
            }

            pub fn slots(&self) -> impl Iterator<Item = &str> {
                self.0.keys().map(String::as_str)
            }

            pub fn domains(&self) -> BTreeSet<String> {
                self.slots().map(|s| slot_domain(s).to_string()).collect()
            }

            pub fn as_map(&self) -> &BTreeMap<String, String> {
                &self.0
            }
        }

        impl TryFrom<BTreeMap<String, String>> for $name {
            type Error = Error;

            fn try_from(map: BTreeMap<String, String>) -> Result<Self> {
                let mut out = Self::new();
                for (slot, value) in &map {
                    out.insert(slot, value)?;
                }
                Ok(out)
            }
        }

        impl From<$name> for BTreeMap<String, String> {
            fn from(set: $name) -> Self {
                set.0
            }
        }
    };
}

pair_set!(TurnBelief, true);
pair_set!(DialogueState, false);

/// Apply one turn belief to the previous state.
///
/// `[DELETE]` removes the slot; any other value inserts or overwrites it.
pub fn aggregate_state(prev: &DialogueState, tlb: &TurnBelief) -> DialogueState {
    let mut next = prev.clone();
    for (slot, value) in tlb.iter() {
        if value == DELETE {
            next.0.remove(slot);
        } else {
            next.0.insert(slot.to_string(), value.to_string());
        }
    }
    next
}

/// Running states for a sequence of turn beliefs, starting from the empty state.
pub fn accumulate<'a, I>(tlbs: I) -> Vec<DialogueState>
where
    I: IntoIterator<Item = &'a TurnBelief>,
{
    let mut state = DialogueState::new();
    tlbs.into_iter()
        .map(|tlb| {
            state = aggregate_state(&state, tlb);
            state.clone()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    /// 1-based.
    pub index: usize,
    /// System reply preceding the user utterance; empty at turn 1.
    pub system_utterance: String,
    pub user_utterance: String,
    pub gold_tlb: TurnBelief,
    pub gold_state: DialogueState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub domains: BTreeSet<String>,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn turn(&self, t: usize) -> Result<&Turn> {
        if t == 0 || t > self.turns.len() {
            return Err(Error::TurnOutOfRange {
                dialogue_id: self.dialogue_id.clone(),
                turn: t,
                len: self.turns.len(),
            });
        }
        Ok(&self.turns[t - 1])
    }

    /// Gold state before turn `t` (empty for the first turn).
    pub fn gold_prev_state(&self, t: usize) -> Result<DialogueState> {
        self.turn(t)?;
        Ok(if t == 1 {
            DialogueState::new()
        } else {
            self.turns[t - 2].gold_state.clone()
        })
    }
}

/// Identifier of a turn within a corpus, `dialogue_id:turn`.
pub fn example_id(dialogue_id: &str, turn: usize) -> String {
    format!("{dialogue_id}:{turn}")
}

/// One (system, user) exchange.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub system: String,
    pub user: String,
}

impl Exchange {
    pub fn is_padding(&self) -> bool {
        self.system.is_empty() && self.user.is_empty()
    }
}

/// The last `w` exchanges up to and including the current user utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub exchanges: Vec<Exchange>,
}

impl ContextWindow {
    pub fn width(&self) -> usize {
        self.exchanges.len()
    }

    /// Exchanges that carry text, skipping start-of-dialogue padding.
    pub fn non_padding(&self) -> impl Iterator<Item = &Exchange> {
        self.exchanges.iter().filter(|e| !e.is_padding())
    }
}

pub fn context_window(dialogue: &Dialogue, t: usize, width: usize) -> Result<ContextWindow> {
    if width == 0 {
        return Err(Error::InvalidArgument("context width must be >= 1".into()));
    }
    dialogue.turn(t)?;
    let exchanges = (0..width)
        .rev()
        .map(|back| match t.checked_sub(back) {
            Some(idx) if idx >= 1 => {
                let turn = &dialogue.turns[idx - 1];
                Exchange {
                    system: turn.system_utterance.clone(),
                    user: turn.user_utterance.clone(),
                }
            }
            _ => Exchange::default(),
        })
        .collect();
    Ok(ContextWindow { exchanges })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tlb(pairs: &[(&str, &str)]) -> TurnBelief {
        TurnBelief::from_pairs(pairs.iter().copied()).unwrap()
    }

    fn state(pairs: &[(&str, &str)]) -> DialogueState {
        DialogueState::from_pairs(pairs.iter().copied()).unwrap()
    }

    fn dialogue(n: usize) -> Dialogue {
        let turns = (1..=n)
            .map(|i| Turn {
                index: i,
                system_utterance: if i == 1 { String::new() } else { format!("a{}", i - 1) },
                user_utterance: format!("u{i}"),
                gold_tlb: TurnBelief::new(),
                gold_state: DialogueState::new(),
            })
            .collect();
        Dialogue {
            dialogue_id: "d".into(),
            domains: BTreeSet::new(),
            turns,
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_value("  East ").unwrap(), "east");
        assert_eq!(normalize_value("GUEST HOUSE").unwrap(), "guest house");
        assert_eq!(normalize_value("4").unwrap(), "4");
        assert_eq!(normalize_value("guest \t  house").unwrap(), "guest house");
        assert_eq!(normalize_value("[delete]").unwrap(), DELETE);
        assert!(normalize_value("   ").is_err());
    }

    #[test]
    fn slot_validation() {
        assert_eq!(normalize_slot("Hotel-Area").unwrap(), "hotel-area");
        assert_eq!(normalize_slot("hotel-book day").unwrap(), "hotel-book day");
        assert!(normalize_slot("area").is_err());
        assert!(normalize_slot("-area").is_err());
        assert!(normalize_slot("hotel-").is_err());
        assert!(normalize_slot("ho tel-area").is_err());
    }

    #[test]
    fn delete_not_allowed_in_state() {
        let mut s = DialogueState::new();
        assert!(s.insert("hotel-area", "[DELETE]").is_err());
        let mut b = TurnBelief::new();
        b.insert("hotel-area", "[DELETE]").unwrap();
    }

    #[test]
    fn reserved_characters_rejected() {
        let mut b = TurnBelief::new();
        assert!(b.insert("hotel-name", "a; b").is_err());
        assert!(b.insert("hotel-name", "[x]").is_err());
    }

    #[test]
    fn aggregate_examples() {
        let empty = DialogueState::new();
        assert_eq!(
            aggregate_state(&empty, &tlb(&[("hotel-area", "east")])),
            state(&[("hotel-area", "east")])
        );
        let east = state(&[("hotel-area", "east")]);
        assert_eq!(
            aggregate_state(&east, &tlb(&[("hotel-area", "west")])),
            state(&[("hotel-area", "west")])
        );
        assert_eq!(
            aggregate_state(&east, &tlb(&[("hotel-area", DELETE)])),
            DialogueState::new()
        );
    }

    #[test]
    fn accumulate_examples() {
        let a = tlb(&[("a-x", "1")]);
        let b = tlb(&[("a-y", "2")]);
        let del = tlb(&[("a-x", DELETE)]);
        assert_eq!(accumulate([&a]), vec![state(&[("a-x", "1")])]);
        assert_eq!(
            accumulate([&a, &b]),
            vec![state(&[("a-x", "1")]), state(&[("a-x", "1"), ("a-y", "2")])]
        );
        assert_eq!(
            accumulate([&a, &del]),
            vec![state(&[("a-x", "1")]), DialogueState::new()]
        );
        assert!(accumulate(std::iter::empty()).is_empty());
    }

    #[test]
    fn context_window_examples() {
        let d = dialogue(3);
        let w1 = context_window(&d, 3, 1).unwrap();
        assert_eq!(
            w1.exchanges,
            vec![Exchange { system: "a2".into(), user: "u3".into() }]
        );
        let w3 = context_window(&d, 2, 3).unwrap();
        assert_eq!(
            w3.exchanges,
            vec![
                Exchange::default(),
                Exchange { system: String::new(), user: "u1".into() },
                Exchange { system: "a1".into(), user: "u2".into() },
            ]
        );
        let full = context_window(&d, 3, 3).unwrap();
        assert_eq!(full.exchanges.len(), 3);
        assert_eq!(full.exchanges[0].user, "u1");
        assert_eq!(full.exchanges[2].user, "u3");
        assert!(context_window(&d, 0, 1).is_err());
        assert!(context_window(&d, 4, 1).is_err());
        assert!(context_window(&d, 1, 0).is_err());
    }

    #[test]
    fn serde_normalizes() {
        let b: TurnBelief = serde_json::from_str(r#"{"Hotel-Area": " EAST "}"#).unwrap();
        assert_eq!(b.get("hotel-area"), Some("east"));
        assert!(serde_json::from_str::<DialogueState>(r#"{"hotel-area": "[DELETE]"}"#).is_err());
        assert_eq!(serde_json::to_string(&b).unwrap(), r#"{"hotel-area":"east"}"#);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(raw in "[ A-Za-z0-9\t]{0,20}") {
            if let Ok(once) = normalize_value(&raw) {
                prop_assert_eq!(normalize_value(&once).unwrap(), once);
            }
        }

        #[test]
        fn aggregate_idempotent_without_delete(
            prev in proptest::collection::btree_map("[a-c]-[x-z]", "[a-d]{1,3}", 0..5),
            b in proptest::collection::btree_map("[a-c]-[x-z]", "[a-d]{1,3}", 0..5),
        ) {
            let prev = DialogueState::try_from(prev).unwrap();
            let b = TurnBelief::try_from(b).unwrap();
            let once = aggregate_state(&prev, &b);
            prop_assert_eq!(aggregate_state(&once, &b), once);
        }
    }
}
