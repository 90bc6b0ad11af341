//! Seeded synthetic corpus: a small schema, templated dialogues with
//! overwrites and deletions, and a synonym table. Used for fixtures and tests.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::dataset::{write_dataset, DatasetSplit, SplitName};
use crate::error::Result;
use crate::io::write_atomic;
use crate::schema::SchemaTable;
use crate::state::{aggregate_state, Dialogue, DialogueState, Turn, TurnBelief, DELETE};

pub const IN_DOMAINS: [&str; 4] = ["hotel", "restaurant", "taxi", "train"];
pub const OOD_DOMAINS: [&str; 2] = ["flights", "music"];

const AREAS: &[&str] = &["centre", "east", "north", "south", "west"];
const PRICES: &[&str] = &["cheap", "expensive", "moderate"];
const PLACES: &[&str] = &["cambridge", "ely", "london", "norwich", "peterborough", "stevenage"];
const TIMES: &[&str] = &["08:15", "09:30", "11:00", "13:45", "17:20", "19:00"];
const DAYS: &[&str] = &["friday", "monday", "saturday", "sunday", "thursday", "tuesday", "wednesday"];
const NAMES: &[&str] = &["acorn house", "alpha lodge", "city stop", "golden wok", "the oak", "river bar"];

type SlotDef = (&'static str, &'static str, Option<&'static [&'static str]>, &'static [&'static str]);

/// (slot, description, categorical values, free-form value pool)
fn slot_defs(domain: &str) -> Vec<SlotDef> {
    match domain {
        "hotel" => vec![
            ("area", "area of the hotel", Some(AREAS), &[]),
            ("name", "name of the hotel", None, NAMES),
            ("parking", "whether parking is needed", Some(&["no", "yes"]), &[]),
            ("pricerange", "price budget", Some(PRICES), &[]),
            ("stars", "star rating", Some(&["2", "3", "4", "5"]), &[]),
        ],
        "restaurant" => vec![
            ("area", "area of the restaurant", Some(AREAS), &[]),
            ("food", "type of food", Some(&["british", "chinese", "indian", "italian"]), &[]),
            ("name", "name of the restaurant", None, NAMES),
            ("people", "number of people to book for", None, &["1", "2", "3", "4", "6"]),
            ("pricerange", "price budget", Some(PRICES), &[]),
        ],
        "taxi" => vec![
            ("departure", "pickup location", None, PLACES),
            ("destination", "drop-off location", None, PLACES),
            ("leaveat", "pickup time", None, TIMES),
        ],
        "train" => vec![
            ("day", "day of travel", Some(DAYS), &[]),
            ("departure", "departure station", None, PLACES),
            ("destination", "arrival station", None, PLACES),
            ("leaveat", "departure time", None, TIMES),
        ],
        "flights" => vec![
            ("airline", "preferred airline", Some(&["alaska", "delta", "united"]), &[]),
            ("destination", "destination city", None, &["denver", "portland", "seattle"]),
            ("origin", "origin city", None, &["boston", "chicago", "new york"]),
            ("seating_class", "cabin class", Some(&["business", "economy"]), &[]),
        ],
        "music" => vec![
            ("artist", "name of the artist", None, &["adele", "miles davis", "queen"]),
            ("device", "playback device", Some(&["bedroom speaker", "kitchen speaker", "tv"]), &[]),
            ("genre", "music genre", Some(&["jazz", "pop", "rock"]), &[]),
        ],
        _ => Vec::new(),
    }
}

/// Schema JSON for every synthetic domain.
pub fn schema_json() -> String {
    let mut root = serde_json::Map::new();
    for domain in IN_DOMAINS.iter().chain(&OOD_DOMAINS) {
        let mut slots = serde_json::Map::new();
        for (name, desc, values, _) in slot_defs(domain) {
            let mut s = json!({ "description": desc });
            if let Some(v) = values {
                s["values"] = json!(v);
            }
            slots.insert(name.to_string(), s);
        }
        root.insert(domain.to_string(), serde_json::Value::Object(slots));
    }
    let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(root)).unwrap_or_default();
    text.push('\n');
    text
}

pub fn schema() -> Result<SchemaTable> {
    SchemaTable::from_json_str(&schema_json())
}

pub fn synonyms_json() -> String {
    let v = json!({
        "hotel-area": { "centre": ["center", "city centre"] },
        "restaurant-area": { "centre": ["center", "city centre"] },
        "restaurant-food": { "british": ["english"] },
        "hotel-parking": { "yes": ["free"] }
    });
    let mut text = serde_json::to_string_pretty(&v).unwrap_or_default();
    text.push('\n');
    text
}

fn pick_value(domain: &str, slot: &str, rng: &mut ChaCha8Rng, avoid: Option<&str>) -> String {
    let def = slot_defs(domain).into_iter().find(|d| d.0 == slot);
    let pool: Vec<&str> = match def {
        Some((_, _, Some(values), _)) => values.to_vec(),
        Some((_, _, None, free)) => free.to_vec(),
        None => vec!["dontcare"],
    };
    let options: Vec<&str> = pool.iter().copied().filter(|v| Some(*v) != avoid).collect();
    options.choose(rng).copied().unwrap_or("dontcare").to_string()
}

fn mention(slot: &str, value: &str) -> String {
    let (domain, name) = slot.split_once('-').unwrap_or(("", slot));
    format!("the {domain} {} {value}", name.replace('_', " "))
}

struct Builder {
    rng: ChaCha8Rng,
}

impl Builder {
    fn dialogue(&mut self, id: String, domains: Vec<&'static str>) -> Result<Dialogue> {
        let n_turns = self.rng.gen_range(3..=8);
        let mut state = DialogueState::new();
        let mut turns = Vec::with_capacity(n_turns);
        let mut active = 0usize;
        let mut system = String::new();
        let switch_at = self.rng.gen_range(2..=n_turns);
        for index in 1..=n_turns {
            let switched = active + 1 < domains.len() && index == switch_at;
            if switched {
                active += 1;
            }
            let domain = domains[active];
            let mut tlb = TurnBelief::new();
            let mut phrases = Vec::new();
            let roll: f64 = self.rng.gen();
            let filled: Vec<String> = state
                .slots()
                .filter(|s| s.starts_with(&format!("{domain}-")))
                .map(str::to_string)
                .collect();
            let open: Vec<&str> = slot_defs(domain)
                .iter()
                .map(|d| d.0)
                .filter(|s| !state.contains_slot(&format!("{domain}-{s}")))
                .collect();
            if index == 1 || switched || (roll < 0.55 && !open.is_empty()) {
                let k = self.rng.gen_range(1..=2).min(open.len().max(1));
                let chosen: Vec<&str> = open.choose_multiple(&mut self.rng, k).copied().collect();
                for s in chosen {
                    let value = pick_value(domain, s, &mut self.rng, None);
                    let slot = format!("{domain}-{s}");
                    tlb.insert(&slot, &value)?;
                    phrases.push(mention(&slot, &value));
                }
                if phrases.is_empty() {
                    phrases.push(format!("i am looking for {domain} options"));
                }
            } else if roll < 0.75 && !filled.is_empty() {
                let slot = filled.choose(&mut self.rng).cloned().unwrap_or_default();
                let (_, s) = slot.split_once('-').unwrap_or(("", ""));
                let old = state.get(&slot).unwrap_or_default().to_string();
                let value = pick_value(domain, s, &mut self.rng, Some(&old));
                if value != old {
                    tlb.insert(&slot, &value)?;
                    phrases.push(format!("actually change {} instead", mention(&slot, &value)));
                }
            } else if roll < 0.87 && !filled.is_empty() {
                let slot = filled.choose(&mut self.rng).cloned().unwrap_or_default();
                tlb.insert(&slot, DELETE)?;
                let (d, s) = slot.split_once('-').unwrap_or(("", ""));
                phrases.push(format!("forget about the {d} {}", s.replace('_', " ")));
            }
            let user = if phrases.is_empty() {
                ["thank you", "that sounds fine", "ok great"].choose(&mut self.rng).copied().unwrap_or("ok").to_string()
            } else {
                format!("{}.", phrases.join(" and "))
            };
            state = aggregate_state(&state, &tlb);
            turns.push(Turn {
                index,
                system_utterance: system.clone(),
                user_utterance: user,
                gold_tlb: tlb,
                gold_state: state.clone(),
            });
            system = if state.is_empty() {
                "how can i help?".to_string()
            } else {
                format!("noted. anything else for the {domain}?")
            };
        }
        let domains: BTreeSet<String> = turns
            .iter()
            .flat_map(|t| t.gold_tlb.slots().map(|s| s.split('-').next().unwrap_or_default().to_string()))
            .collect();
        Ok(Dialogue {
            dialogue_id: id,
            domains,
            turns,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mix {
    In,
    Half,
    Out,
}

/// `n_train` in-domain training dialogues and `n_test` evaluation dialogues
/// split evenly across in-domain, half-OOD and OOD mixes.
pub fn corpus(seed: u64, n_train: usize, n_test: usize) -> Result<(DatasetSplit, DatasetSplit)> {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut train = Vec::with_capacity(n_train);
    for i in 0..n_train {
        let n = b.rng.gen_range(1..=2);
        let domains: Vec<&str> = IN_DOMAINS.choose_multiple(&mut b.rng, n).copied().collect();
        train.push(b.dialogue(format!("train-{i:04}"), domains)?);
    }
    let mut test = Vec::with_capacity(n_test);
    for i in 0..n_test {
        let mix = [Mix::In, Mix::Half, Mix::Out][i % 3];
        let domains: Vec<&str> = match mix {
            Mix::In => IN_DOMAINS.choose_multiple(&mut b.rng, 1).copied().collect(),
            Mix::Half => vec![
                IN_DOMAINS.choose(&mut b.rng).copied().unwrap_or("hotel"),
                OOD_DOMAINS.choose(&mut b.rng).copied().unwrap_or("music"),
            ],
            Mix::Out => OOD_DOMAINS.choose_multiple(&mut b.rng, 1).copied().collect(),
        };
        test.push(b.dialogue(format!("test-{i:04}"), domains)?);
    }
    Ok((
        DatasetSplit::new(SplitName::Train, train)?,
        DatasetSplit::new(SplitName::Test, test)?,
    ))
}

/// Seed and sizes of the checked-in fixture corpus.
pub const FIXTURE_SEED: u64 = 20240917;
pub const FIXTURE_TRAIN: usize = 200;
pub const FIXTURE_TEST: usize = 24;

/// Write `schema.json`, `synonyms.json`, `train.jsonl` and `test.jsonl`.
pub fn write_fixtures(dir: &Path) -> Result<()> {
    let (train, test) = corpus(FIXTURE_SEED, FIXTURE_TRAIN, FIXTURE_TEST)?;
    write_atomic(&dir.join("schema.json"), schema_json().as_bytes())?;
    write_atomic(&dir.join("synonyms.json"), synonyms_json().as_bytes())?;
    write_dataset(&dir.join("train.jsonl"), &train)?;
    write_dataset(&dir.join("test.jsonl"), &test)
}
