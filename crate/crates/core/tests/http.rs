//! HTTP backend against an in-process mock server.

mod common;

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use correction_dst::backend::{
    ChatMode, Client, CompletionRequest, CostLedger, HttpBackend, HttpConfig, LmBackend,
};
use correction_dst::config::{LmKind, LmSpec};
use correction_dst::run::{run_experiment, Session};
use correction_dst::{Error, ErrorClass};

#[derive(Debug, Clone)]
struct Seen {
    headers: Vec<String>,
    body: serde_json::Value,
}

type Responder = dyn Fn(&serde_json::Value) -> (u16, String) + Send + Sync;

struct Mock {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
    max_in_flight: Arc<AtomicUsize>,
}

fn read_request(stream: &mut TcpStream) -> Option<Seen> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut headers = Vec::new();
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim_end().to_string();
        if line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().ok()?;
        }
        headers.push(line);
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).ok()?;
    Some(Seen {
        headers,
        body: serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null),
    })
}

fn serve(responder: Arc<Responder>, delay: Duration) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let in_flight = Arc::new(AtomicUsize::new(0));
    let max_in_flight = Arc::new(AtomicUsize::new(0));
    let (s, inf, mx) = (seen.clone(), in_flight.clone(), max_in_flight.clone());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (s, inf, mx, responder) = (s.clone(), inf.clone(), mx.clone(), responder.clone());
            std::thread::spawn(move || {
                let Some(req) = read_request(&mut stream) else { return };
                let now = inf.fetch_add(1, Ordering::SeqCst) + 1;
                mx.fetch_max(now, Ordering::SeqCst);
                let (status, body) = responder(&req.body);
                s.lock().unwrap().push(req);
                std::thread::sleep(delay);
                inf.fetch_sub(1, Ordering::SeqCst);
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(resp.as_bytes());
            });
        }
    });
    Mock {
        url,
        seen,
        max_in_flight,
    }
}

fn scripted(script: Vec<(u16, String)>) -> Arc<Responder> {
    let queue = Mutex::new(VecDeque::from(script));
    Arc::new(move |_| queue.lock().unwrap().pop_front().unwrap_or((500, "exhausted".into())))
}

fn completion(text: &str) -> String {
    serde_json::json!({
        "choices": [{"text": text}],
        "usage": {"prompt_tokens": 120, "completion_tokens": 7}
    })
    .to_string()
}

fn config(url: &str) -> HttpConfig {
    let mut cfg = HttpConfig::new(url, "test-model");
    cfg.backoff_ms = 1;
    cfg.timeout_secs = 10;
    cfg
}

#[test]
fn completion_request_and_usage() {
    let mock = serve(scripted(vec![(200, completion(" hotel-area: east\n[USER] junk"))]), Duration::ZERO);
    let backend = HttpBackend::new(config(&mock.url)).unwrap();
    let ledger = CostLedger::new();
    let client = Client::new("inference", Arc::new(backend), 1_000_000_000, ledger.clone());
    let resp = client.complete(&CompletionRequest::new("[TLB]", "d:1:1")).unwrap();
    assert_eq!(resp.text.trim(), "hotel-area: east");
    assert_eq!((resp.prompt_tokens, resp.completion_tokens), (120, 7));
    let snap = ledger.snapshot();
    assert_eq!(snap.total_flops(), 2 * 1_000_000_000 * 127);

    let seen = mock.seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    let body = &seen[0].body;
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["prompt"], "[TLB]");
    assert_eq!(body["max_tokens"], 256);
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["stop"], serde_json::json!(["\n"]));
}

#[test]
fn chat_mode_and_api_key() {
    let body = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": "NONE"}}]}).to_string();
    let mock = serve(scripted(vec![(200, body)]), Duration::ZERO);
    std::env::set_var("CDST_TEST_HTTP_KEY", "sekrit");
    let mut cfg = config(&mock.url);
    cfg.mode = ChatMode::Chat;
    cfg.api_key_env = Some("CDST_TEST_HTTP_KEY".into());
    let backend = HttpBackend::new(cfg).unwrap();
    let raw = backend.generate(&CompletionRequest::new("hello", "d:1:1")).unwrap();
    assert_eq!(raw.text, "NONE");
    assert_eq!(raw.prompt_tokens, None);
    let seen = mock.seen.lock().unwrap();
    assert_eq!(seen[0].body["messages"][0]["content"], "hello");
    assert!(seen[0].headers.iter().any(|h| h == "authorization: Bearer sekrit" || h == "Authorization: Bearer sekrit"));
}

#[test]
fn retries_server_errors_then_succeeds() {
    let mock = serve(
        scripted(vec![(500, "a".into()), (503, "b".into()), (200, completion("NONE"))]),
        Duration::ZERO,
    );
    let backend = HttpBackend::new(config(&mock.url)).unwrap();
    let raw = backend.generate(&CompletionRequest::new("p", "d:1:1")).unwrap();
    assert_eq!(raw.text, "NONE");
    assert_eq!(mock.seen.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_max_attempts() {
    let mock = serve(scripted(vec![]), Duration::ZERO);
    let backend = HttpBackend::new(config(&mock.url)).unwrap();
    let err = backend.generate(&CompletionRequest::new("p", "d:1:1")).unwrap_err();
    assert!(matches!(err, Error::Server { status: 500, .. }), "{err}");
    assert_eq!(err.class(), ErrorClass::Runtime);
    assert_eq!(mock.seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let mock = serve(scripted(vec![(400, "bad request".into()), (200, completion("x"))]), Duration::ZERO);
    let backend = HttpBackend::new(config(&mock.url)).unwrap();
    let err = backend.generate(&CompletionRequest::new("p", "d:1:1")).unwrap_err();
    assert!(matches!(err, Error::Server { status: 400, .. }), "{err}");
    assert_eq!(mock.seen.lock().unwrap().len(), 1);
}

#[test]
fn connection_refused_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut cfg = config(&format!("http://127.0.0.1:{port}/v1/completions"));
    cfg.max_attempts = 2;
    let backend = HttpBackend::new(cfg).unwrap();
    let err = backend.generate(&CompletionRequest::new("p", "d:1:1")).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
}

#[test]
fn malformed_response_is_a_backend_error() {
    let mock = serve(scripted(vec![(200, "{\"choices\": []}".into())]), Duration::ZERO);
    let backend = HttpBackend::new(config(&mock.url)).unwrap();
    let err = backend.generate(&CompletionRequest::new("p", "d:1:1")).unwrap_err();
    assert!(matches!(err, Error::Backend(_)), "{err}");
}

#[test]
fn concurrency_is_capped() {
    let mock = serve(Arc::new(|_| (200, completion("NONE"))), Duration::from_millis(30));
    let mut cfg = config(&mock.url);
    cfg.max_concurrency = 2;
    let backend = Arc::new(HttpBackend::new(cfg).unwrap());
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let b = backend.clone();
            std::thread::spawn(move || b.generate(&CompletionRequest::new(format!("p{i}"), "d:1:1")).unwrap())
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(mock.seen.lock().unwrap().len(), 8);
    assert!(mock.max_in_flight.load(Ordering::SeqCst) <= 2);
}

fn http_spec(url: &str) -> LmSpec {
    LmSpec {
        kind: LmKind::Http,
        url: Some(url.to_string()),
        model: Some("m".into()),
        backoff_ms: Some(1),
        ..LmSpec::oracle(0.0)
    }
}

/// Answers with the hypothesis line of a correction prompt, else NONE.
fn echo_server(prompt: &serde_json::Value) -> (u16, String) {
    let text = prompt["prompt"].as_str().unwrap_or_default();
    let hyp = text.rsplit_once("[HYP] ").map(|(_, h)| h.lines().next().unwrap_or_default());
    (200, completion(&format!(" {}", hyp.unwrap_or("NONE"))))
}

#[test]
fn full_run_over_http() {
    let mock = serve(Arc::new(echo_server), Duration::ZERO);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::config(dir.path(), "sgd", http_spec(&mock.url), http_spec(&mock.url));
    cfg.max_concurrency = 4;
    let outcome = run_experiment(&Session::new(cfg)).unwrap();
    assert!(outcome.manifest.complete);
    assert_eq!(outcome.manifest.failed_turns, 0);
    let turns = outcome.predictions.len();
    let seen = mock.seen.lock().unwrap().len();
    // collection over the pool, then two calls per evaluation turn
    let pool_turns = outcome.ledger.backends["collect"].calls as usize;
    assert_eq!(seen, pool_turns + 2 * turns);
    for r in &outcome.predictions {
        assert!(r.hyp_tlb_first.is_empty());
        assert_eq!(r.hyp_tlb_final.as_ref(), Some(&r.hyp_tlb_first));
    }
    let snap = &outcome.ledger;
    assert!(snap.is_conserved());
    assert_eq!(snap.backends["inference"].prompt_tokens, 120 * turns as u64);
}

#[test]
fn failing_server_flags_turns_and_keeps_partial_output() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    // the first-pass prompts of test-0000 fail, everything else answers NONE
    let responder: Arc<Responder> = Arc::new(move |body| {
        c.fetch_add(1, Ordering::SeqCst);
        let text = body["prompt"].as_str().unwrap_or_default();
        if text.contains("the train departure ely.") && !text.contains("[HYP]") {
            (500, "down".into())
        } else {
            (200, completion("NONE"))
        }
    });
    let mock = serve(responder, Duration::ZERO);
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::config(dir.path(), "mwoz", http_spec(&mock.url), http_spec(&mock.url));
    let outcome = run_experiment(&Session::new(cfg)).unwrap();
    assert!(outcome.manifest.failed_turns > 0);
    let flagged: Vec<_> = outcome.predictions.iter().filter(|r| r.error.is_some()).collect();
    assert!(flagged.iter().all(|r| r.dialogue_id == "test-0000"));
    assert_eq!(flagged.len(), outcome.predictions.iter().filter(|r| r.dialogue_id == "test-0000").count());
    assert!(outcome.ledger.backends["inference"].errors > 0);
    drop(mock);
}
