//! Completion backends behind one contract, plus token and FLOP accounting.

mod http;
mod oracle;
mod recording;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::estimate_tokens;

pub use http::{ChatMode, HttpBackend, HttpConfig};
pub use oracle::{oracle_noise_complete, Corruption, EchoBackend, GoldTable, OracleNoiseBackend};
pub use recording::{request_digest, RecordBackend, RecordingLine, RecordingStore, ReplayBackend};

pub const DEFAULT_MAX_NEW_TOKENS: u32 = 256;
pub const DEFAULT_PARAMS: u64 = 8_000_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt_text: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub stop_sequences: Vec<String>,
    /// `dialogue_id:turn:pass`
    pub request_tag: String,
}

impl CompletionRequest {
    /// Greedy decoding, 256 new tokens, stop at the end of the first line.
    pub fn new(prompt_text: impl Into<String>, request_tag: impl Into<String>) -> Self {
        Self {
            prompt_text: prompt_text.into(),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            temperature: 0.0,
            stop_sequences: vec!["\n".to_string()],
            request_tag: request_tag.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidArgument("max_new_tokens must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Example id part of the tag (everything before the last `:`).
    pub fn turn_key(&self) -> &str {
        self.request_tag
            .rsplit_once(':')
            .map(|(k, _)| k)
            .unwrap_or(&self.request_tag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub backend_id: String,
}

/// What a backend hands back before stop truncation and token filling.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RawCompletion {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

impl RawCompletion {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Self::default()
        }
    }
}

/// Implemented by every backend. Must tolerate concurrent calls.
pub trait LmBackend: Send + Sync {
    fn id(&self) -> String;
    fn generate(&self, req: &CompletionRequest) -> Result<RawCompletion>;
}

/// Cut `text` at the first stop sequence that follows some non-whitespace content.
pub fn truncate_at_stop(text: &str, stops: &[String]) -> String {
    let start = text.len() - text.trim_start().len();
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text[start..].find(s.as_str()).map(|i| i + start))
        .min();
    match cut {
        Some(i) => text[..i].to_string(),
        None => text.to_string(),
    }
}

/// Truncate and fill missing token counts.
pub fn finalize(req: &CompletionRequest, raw: RawCompletion, backend_id: &str) -> CompletionResponse {
    let text = truncate_at_stop(&raw.text, &req.stop_sequences);
    CompletionResponse {
        prompt_tokens: raw
            .prompt_tokens
            .unwrap_or_else(|| estimate_tokens(&req.prompt_text) as u64),
        completion_tokens: raw
            .completion_tokens
            .unwrap_or_else(|| estimate_tokens(&text) as u64),
        text,
        backend_id: backend_id.to_string(),
    }
}

/// Forward-pass estimate `2 * params * (prompt + completion)`.
pub fn estimate_flops(params: u64, prompt_tokens: u64, completion_tokens: u64) -> u128 {
    2 * u128::from(params) * (u128::from(prompt_tokens) + u128::from(completion_tokens))
}

pub fn teraflops(flops: u128) -> f64 {
    flops as f64 / 1e12
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendTotals {
    pub backend_id: String,
    pub params: u64,
    pub calls: u64,
    pub errors: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub flops: u128,
}

impl BackendTotals {
    pub fn teraflops(&self) -> f64 {
        teraflops(self.flops)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub backend: String,
    pub request_tag: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub flops: u128,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub backends: BTreeMap<String, BackendTotals>,
    /// Sorted by backend, then tag.
    pub calls: Vec<CallRecord>,
}

impl LedgerSnapshot {
    pub fn total_flops(&self) -> u128 {
        self.backends.values().map(|b| b.flops).sum()
    }

    pub fn total_calls(&self) -> u64 {
        self.backends.values().map(|b| b.calls).sum()
    }

    pub fn total_teraflops(&self) -> f64 {
        teraflops(self.total_flops())
    }

    /// Totals per backend equal the sums over the call log.
    pub fn is_conserved(&self) -> bool {
        self.backends.iter().all(|(name, t)| {
            let calls: Vec<&CallRecord> = self.calls.iter().filter(|c| &c.backend == name).collect();
            calls.len() as u64 == t.calls
                && calls.iter().map(|c| c.prompt_tokens).sum::<u64>() == t.prompt_tokens
                && calls.iter().map(|c| c.completion_tokens).sum::<u64>() == t.completion_tokens
                && calls
                    .iter()
                    .map(|c| estimate_flops(t.params, c.prompt_tokens, c.completion_tokens))
                    .sum::<u128>()
                    == t.flops
        })
    }
}

/// Thread-safe cost accounting shared by all clients of a run.
#[derive(Debug, Default)]
pub struct CostLedger {
    inner: Mutex<LedgerSnapshot>,
}

impl CostLedger {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn register(&self, name: &str, backend_id: &str, params: u64) {
        let mut g = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        g.backends.entry(name.to_string()).or_insert_with(|| BackendTotals {
            backend_id: backend_id.to_string(),
            params,
            ..BackendTotals::default()
        });
    }

    pub fn record(&self, name: &str, request_tag: &str, prompt_tokens: u64, completion_tokens: u64) {
        let mut g = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let totals = g.backends.entry(name.to_string()).or_default();
        let flops = estimate_flops(totals.params, prompt_tokens, completion_tokens);
        totals.calls += 1;
        totals.prompt_tokens += prompt_tokens;
        totals.completion_tokens += completion_tokens;
        totals.flops += flops;
        g.calls.push(CallRecord {
            backend: name.to_string(),
            request_tag: request_tag.to_string(),
            prompt_tokens,
            completion_tokens,
            flops,
        });
    }

    pub fn record_error(&self, name: &str) {
        let mut g = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        g.backends.entry(name.to_string()).or_default().errors += 1;
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let mut snap = self.inner.lock().unwrap_or_else(|e| e.into_inner()).clone();
        snap.calls.sort_by(|a, b| {
            (&a.backend, &a.request_tag, a.prompt_tokens, a.completion_tokens)
                .cmp(&(&b.backend, &b.request_tag, b.prompt_tokens, b.completion_tokens))
        });
        snap
    }
}

/// A backend bound to a ledger entry. This is what the pipeline calls.
#[derive(Clone)]
pub struct Client {
    name: String,
    backend: Arc<dyn LmBackend>,
    ledger: Arc<CostLedger>,
}

impl Client {
    pub fn new(name: &str, backend: Arc<dyn LmBackend>, params: u64, ledger: Arc<CostLedger>) -> Self {
        ledger.register(name, &backend.id(), params);
        Self {
            name: name.to_string(),
            backend,
            ledger,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn ledger(&self) -> &Arc<CostLedger> {
        &self.ledger
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse> {
        req.validate()?;
        match self.backend.generate(req) {
            Ok(raw) => {
                let resp = finalize(req, raw, &self.backend.id());
                self.ledger
                    .record(&self.name, &req.request_tag, resp.prompt_tokens, resp.completion_tokens);
                Ok(resp)
            }
            Err(e) => {
                self.ledger.record_error(&self.name);
                Err(e)
            }
        }
    }
}

/// Declarative backend choice, resolved by [`instantiate`].
#[derive(Debug, Clone, PartialEq)]
pub enum BackendKind {
    Http(HttpConfig),
    OracleNoise { p: f64, seed: u64 },
    Echo,
    Replay(PathBuf),
    Record(Box<BackendKind>, PathBuf),
}

impl BackendKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            BackendKind::OracleNoise { p, .. } if !(0.0..=1.0).contains(p) => Err(
                Error::InvalidArgument(format!("oracle-noise p must be in [0, 1], got {p}")),
            ),
            BackendKind::Record(inner, _) => inner.validate(),
            _ => Ok(()),
        }
    }

    pub fn uses_network(&self) -> bool {
        match self {
            BackendKind::Http(_) => true,
            BackendKind::Record(inner, _) => inner.uses_network(),
            _ => false,
        }
    }
}

/// Builds backends for one run. Oracle kinds read the gold table; record
/// kinds writing to the same path share one store.
pub struct BackendFactory {
    gold: Arc<GoldTable>,
    stores: Mutex<HashMap<PathBuf, Arc<RecordingStore>>>,
}

impl BackendFactory {
    pub fn new(gold: Arc<GoldTable>) -> Self {
        Self {
            gold,
            stores: Mutex::new(HashMap::new()),
        }
    }

    pub fn build(&self, kind: &BackendKind) -> Result<Arc<dyn LmBackend>> {
        kind.validate()?;
        Ok(match kind {
            BackendKind::Http(cfg) => Arc::new(HttpBackend::new(cfg.clone())?),
            BackendKind::OracleNoise { p, seed } => {
                Arc::new(OracleNoiseBackend::new(Arc::clone(&self.gold), *p, *seed))
            }
            BackendKind::Echo => Arc::new(EchoBackend),
            BackendKind::Replay(path) => Arc::new(ReplayBackend::load(path)?),
            BackendKind::Record(inner, path) => {
                let inner = self.build(inner)?;
                let store = {
                    let mut stores = self.stores.lock().unwrap_or_else(|e| e.into_inner());
                    match stores.get(path) {
                        Some(s) => Arc::clone(s),
                        None => {
                            let s = RecordingStore::open(path)?;
                            stores.insert(path.clone(), Arc::clone(&s));
                            s
                        }
                    }
                };
                Arc::new(RecordBackend::new(inner, store))
            }
        })
    }

    /// Write every recording opened so far.
    pub fn flush(&self) -> Result<()> {
        let stores = self.stores.lock().unwrap_or_else(|e| e.into_inner());
        for s in stores.values() {
            s.flush()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(&'static str, Option<u64>);

    impl LmBackend for Fixed {
        fn id(&self) -> String {
            "fixed".into()
        }
        fn generate(&self, _req: &CompletionRequest) -> Result<RawCompletion> {
            Ok(RawCompletion {
                text: self.0.to_string(),
                prompt_tokens: self.1,
                completion_tokens: self.1,
            })
        }
    }

    #[test]
    fn flops_examples() {
        assert_eq!(estimate_flops(8_000_000_000, 900, 100), 16_000_000_000_000);
        assert_eq!(teraflops(estimate_flops(8_000_000_000, 900, 100)), 16.0);
        assert_eq!(estimate_flops(123, 0, 0), 0);
        assert_eq!(estimate_flops(7, 20, 10), 2 * estimate_flops(7, 10, 5));
    }

    #[test]
    fn truncation() {
        let stops = vec!["\n".to_string()];
        assert_eq!(truncate_at_stop("a-x: 1\nextra", &stops), "a-x: 1");
        assert_eq!(truncate_at_stop("\n a-x: 1\nmore", &stops), "\n a-x: 1");
        assert_eq!(truncate_at_stop("no stop", &stops), "no stop");
        assert_eq!(truncate_at_stop("a;b", &[";".into(), "b".into()]), "a");
    }

    #[test]
    fn client_records_and_fills() {
        let ledger = CostLedger::new();
        let c = Client::new("inference", Arc::new(Fixed("hotel-area: east\nx", None)), 10, ledger.clone());
        let r = c.complete(&CompletionRequest::new("one two three", "d:1:1")).unwrap();
        assert_eq!(r.text, "hotel-area: east");
        assert_eq!(r.prompt_tokens, 4);
        let c2 = Client::new("correction", Arc::new(Fixed("x", Some(4))), 1000, ledger.clone());
        c2.complete(&CompletionRequest::new("p", "d:1:2")).unwrap();
        let snap = ledger.snapshot();
        assert_eq!(snap.total_calls(), 2);
        assert_eq!(snap.backends["correction"].flops, 2 * 1000 * 8);
        assert!(snap.is_conserved());
    }

    #[test]
    fn request_validation() {
        let mut r = CompletionRequest::new("p", "a:b:1");
        assert_eq!(r.turn_key(), "a:b");
        r.max_new_tokens = 0;
        assert!(r.validate().is_err());
        r.max_new_tokens = 1;
        r.temperature = -1.0;
        assert!(r.validate().is_err());
        assert!(BackendKind::OracleNoise { p: 1.5, seed: 0 }.validate().is_err());
    }

    #[test]
    fn ledger_is_order_independent_under_threads() {
        let ledger = CostLedger::new();
        let c = Client::new("x", Arc::new(Fixed("t", Some(2))), 5, ledger.clone());
        std::thread::scope(|s| {
            for i in 0..8 {
                let c = c.clone();
                s.spawn(move || {
                    for j in 0..50 {
                        c.complete(&CompletionRequest::new("p", format!("d{i}:{j}:1"))).unwrap();
                    }
                });
            }
        });
        let snap = ledger.snapshot();
        assert_eq!(snap.backends["x"].calls, 400);
        assert_eq!(snap.backends["x"].flops, 400 * estimate_flops(5, 2, 2));
        assert!(snap.is_conserved());
    }
}
