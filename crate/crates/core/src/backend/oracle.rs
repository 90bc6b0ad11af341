//! Deterministic stand-ins for a language model.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CompletionRequest, LmBackend, RawCompletion};
use crate::dataset::DatasetSplit;
use crate::error::{Error, Result};
use crate::prompt::render_tlb;
use crate::schema::SchemaTable;
use crate::state::{example_id, TurnBelief, DELETE};

/// Gold turn beliefs by example id, plus the schema used to invent spurious pairs.
#[derive(Debug, Clone, Default)]
pub struct GoldTable {
    pub tlbs: HashMap<String, TurnBelief>,
    pub schema: SchemaTable,
}

impl GoldTable {
    pub fn new(schema: SchemaTable) -> Self {
        Self {
            tlbs: HashMap::new(),
            schema,
        }
    }

    pub fn add_split(&mut self, split: &DatasetSplit) {
        for (d, t) in split.turns() {
            self.tlbs
                .insert(example_id(&d.dialogue_id, t.index), t.gold_tlb.clone());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corruption {
    Drop,
    Perturb,
    Inject,
}

fn turn_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn alternative_value(schema: &SchemaTable, slot: &str, current: &str, rng: &mut ChaCha8Rng) -> String {
    let options: Vec<&String> = schema
        .slot(slot)
        .and_then(|s| s.values.as_ref())
        .map(|vals| vals.iter().filter(|v| v.as_str() != current).collect())
        .unwrap_or_default();
    match options.choose(rng) {
        Some(v) => (*v).clone(),
        None if current == DELETE || current.is_empty() => "dontcare".to_string(),
        None => format!("{current} x"),
    }
}

/// Corrupt `gold` once; `None` when no corruption can change it.
fn corrupt(gold: &TurnBelief, schema: &SchemaTable, rng: &mut ChaCha8Rng) -> Option<(Corruption, TurnBelief)> {
    let free: Vec<&str> = schema
        .all_slots()
        .map(|s| s.name.as_str())
        .filter(|s| !gold.contains_slot(s))
        .collect();
    let mut options = Vec::new();
    if !gold.is_empty() {
        options.extend([Corruption::Drop, Corruption::Perturb]);
    }
    if !free.is_empty() {
        options.push(Corruption::Inject);
    }
    let choice = *options.choose(rng)?;
    let mut out = gold.clone();
    let slots: Vec<String> = gold.slots().map(str::to_string).collect();
    match choice {
        Corruption::Drop => {
            let slot = slots.choose(rng)?;
            out.remove(slot);
        }
        Corruption::Perturb => {
            let slot = slots.choose(rng)?;
            let current = gold.get(slot).unwrap_or_default();
            let value = alternative_value(schema, slot, current, rng);
            out.insert(slot, &value).ok()?;
        }
        Corruption::Inject => {
            let slot = *free.choose(rng)?;
            let value = alternative_value(schema, slot, "", rng);
            out.insert(slot, &value).ok()?;
        }
    }
    Some((choice, out))
}

/// With probability `1 - p` render the gold belief, otherwise a seeded
/// corruption of it. The draw depends only on `(seed, key)`.
pub fn oracle_noise_complete(gold: &TurnBelief, schema: &SchemaTable, p: f64, seed: u64, key: &str) -> String {
    let mut rng = turn_rng(seed, key);
    let u: f64 = rng.gen();
    if u < p {
        if let Some((_, corrupted)) = corrupt(gold, schema, &mut rng) {
            return render_tlb(&corrupted);
        }
    }
    render_tlb(gold)
}

/// Looks the gold belief up by the request tag's turn key.
pub struct OracleNoiseBackend {
    gold: Arc<GoldTable>,
    p: f64,
    seed: u64,
}

impl OracleNoiseBackend {
    pub fn new(gold: Arc<GoldTable>, p: f64, seed: u64) -> Self {
        Self { gold, p, seed }
    }
}

impl LmBackend for OracleNoiseBackend {
    fn id(&self) -> String {
        format!("oracle-noise(p={},seed={})", self.p, self.seed)
    }

    fn generate(&self, req: &CompletionRequest) -> Result<RawCompletion> {
        let key = req.turn_key();
        let gold = self
            .gold
            .tlbs
            .get(key)
            .ok_or_else(|| Error::Backend(format!("oracle has no gold turn for tag {:?}", req.request_tag)))?;
        Ok(RawCompletion::text(oracle_noise_complete(
            gold,
            &self.gold.schema,
            self.p,
            self.seed,
            key,
        )))
    }
}

/// Correction backend that returns the target hypothesis unchanged.
pub struct EchoBackend;

impl LmBackend for EchoBackend {
    fn id(&self) -> String {
        "echo".into()
    }

    fn generate(&self, req: &CompletionRequest) -> Result<RawCompletion> {
        let (_, rest) = req
            .prompt_text
            .rsplit_once("[HYP] ")
            .ok_or_else(|| Error::Backend("echo backend needs a prompt with a [HYP] block".into()))?;
        let line = rest.split('\n').next().unwrap_or_default();
        Ok(RawCompletion::text(line))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{parse_tlb, ParseMode};

    fn schema() -> SchemaTable {
        SchemaTable::from_json_str(
            r#"{"hotel": {"area": {"description": "area", "values": ["east", "west"]},
                          "name": {"description": "name"}},
                "taxi": {"leaveat": {"description": "time"}}}"#,
        )
        .unwrap()
    }

    fn tlb(pairs: &[(&str, &str)]) -> TurnBelief {
        TurnBelief::from_pairs(pairs.iter().copied()).unwrap()
    }

    #[test]
    fn p_zero_is_gold() {
        let g = tlb(&[("hotel-area", "east"), ("taxi-leaveat", "12:00")]);
        for seed in 0..20 {
            let out = oracle_noise_complete(&g, &schema(), 0.0, seed, "d:1");
            assert_eq!(out, render_tlb(&g));
            assert_eq!(parse_tlb(&out, ParseMode::Strict).unwrap().tlb, g);
        }
    }

    #[test]
    fn p_one_always_corrupts() {
        let s = schema();
        for g in [tlb(&[("hotel-area", "east")]), TurnBelief::new(), tlb(&[("hotel-name", DELETE)])] {
            for seed in 0..50 {
                let out = oracle_noise_complete(&g, &s, 1.0, seed, &format!("d:{seed}"));
                assert_ne!(out, render_tlb(&g), "seed {seed}");
                let parsed = parse_tlb(&out, ParseMode::Strict).unwrap();
                assert!(parsed.tlb.slots().all(|slot| s.has_slot(slot)));
            }
        }
    }

    #[test]
    fn deterministic_per_key() {
        let g = tlb(&[("hotel-area", "east"), ("hotel-name", "acorn")]);
        let a = oracle_noise_complete(&g, &schema(), 0.5, 3, "x:2");
        assert_eq!(a, oracle_noise_complete(&g, &schema(), 0.5, 3, "x:2"));
    }

    #[test]
    fn echo_returns_target_hypothesis() {
        let req = CompletionRequest::new("[HYP] a-x: 1\n[TLB] a-x: 2\n\n[HYP] b-y: 3\n[TLB]", "d:1:2");
        assert_eq!(EchoBackend.generate(&req).unwrap().text, "b-y: 3");
        assert!(EchoBackend.generate(&CompletionRequest::new("[TLB]", "d:1:2")).is_err());
    }

    #[test]
    fn oracle_backend_uses_tag() {
        let mut table = GoldTable::new(schema());
        table.tlbs.insert("d:1".into(), tlb(&[("hotel-area", "west")]));
        let b = OracleNoiseBackend::new(Arc::new(table), 0.0, 1);
        let r = b.generate(&CompletionRequest::new("p", "d:1:1")).unwrap();
        assert_eq!(r.text, "hotel-area: west");
        assert!(b.generate(&CompletionRequest::new("p", "d:2:1")).is_err());
    }
}
