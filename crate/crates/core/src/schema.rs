//! Schema table: the domains and slots that define the output space.
//!
//! File format: `{"domain": {"slot": {"description": str, "values": [str]?}}}`.
//! Slot keys may be bare (`area`) or already qualified (`hotel-area`).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::state::{normalize_slot, normalize_value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotSpec {
    /// Qualified `domain-slot` name.
    pub name: String,
    pub description: String,
    pub values: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SchemaTable {
    domains: BTreeMap<String, Vec<SlotSpec>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSlot {
    description: String,
    #[serde(default)]
    values: Option<Vec<String>>,
}

impl SchemaTable {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, BTreeMap<String, RawSlot>> = serde_json::from_str(text)?;
        let mut domains = BTreeMap::new();
        for (domain, slots) in raw {
            let domain = domain.trim().to_lowercase();
            let mut specs = Vec::with_capacity(slots.len());
            for (key, slot) in slots {
                let key = key.trim().to_lowercase();
                let qualified = if key.starts_with(&format!("{domain}-")) {
                    key
                } else {
                    format!("{domain}-{key}")
                };
                let name = normalize_slot(&qualified)?;
                let values = slot
                    .values
                    .map(|vs| vs.iter().map(|v| normalize_value(v)).collect::<Result<Vec<_>>>())
                    .transpose()?;
                specs.push(SlotSpec {
                    name,
                    description: slot.description.split_whitespace().collect::<Vec<_>>().join(" "),
                    values,
                });
            }
            specs.sort_by(|a, b| a.name.cmp(&b.name));
            if domains.insert(domain.clone(), specs).is_some() {
                return Err(Error::Config(format!("duplicate schema domain {domain:?}")));
            }
        }
        Ok(Self { domains })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Json(j) => Error::Parse {
                path: path.to_path_buf(),
                line: j.line(),
                msg: j.to_string(),
            },
            other => other,
        })
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.domains.keys().map(String::as_str)
    }

    pub fn domain_set(&self) -> BTreeSet<String> {
        self.domains.keys().cloned().collect()
    }

    pub fn slots(&self, domain: &str) -> Option<&[SlotSpec]> {
        self.domains.get(domain).map(Vec::as_slice)
    }

    pub fn all_slots(&self) -> impl Iterator<Item = &SlotSpec> {
        self.domains.values().flatten()
    }

    pub fn slot(&self, qualified: &str) -> Option<&SlotSpec> {
        let domain = crate::state::slot_domain(qualified);
        self.domains
            .get(domain)?
            .iter()
            .find(|s| s.name == qualified)
    }

    pub fn has_slot(&self, qualified: &str) -> bool {
        self.slot(qualified).is_some()
    }

    /// Sub-table containing only `domains`.
    pub fn restrict(&self, domains: &BTreeSet<String>) -> Result<Self> {
        let mut out = BTreeMap::new();
        for d in domains {
            let slots = self
                .domains
                .get(d)
                .ok_or_else(|| Error::UnknownDomain(d.clone()))?;
            out.insert(d.clone(), slots.clone());
        }
        Ok(Self { domains: out })
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }
}

/// Text listing of the slots of `domains`: a `[DOMAIN] name` header per domain
/// followed by one `domain-slot: description (values: ...)` line per slot.
pub fn render_schema(schema: &SchemaTable, domains: &BTreeSet<String>) -> Result<String> {
    if domains.is_empty() {
        return Err(Error::InvalidArgument("empty domain set".into()));
    }
    let mut out = String::new();
    for domain in domains {
        let slots = schema
            .slots(domain)
            .ok_or_else(|| Error::UnknownDomain(domain.clone()))?;
        out.push_str("[DOMAIN] ");
        out.push_str(domain);
        out.push('\n');
        for slot in slots {
            out.push_str(&slot.name);
            out.push_str(": ");
            out.push_str(&slot.description);
            if let Some(values) = &slot.values {
                out.push_str(" (values: ");
                out.push_str(&values.join(", "));
                out.push(')');
            }
            out.push('\n');
        }
    }
    Ok(out)
}
