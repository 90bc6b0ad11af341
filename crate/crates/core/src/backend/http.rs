//! OpenAI-compatible completions / chat-completions client.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{CompletionRequest, LmBackend, RawCompletion};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatMode {
    #[default]
    Completions,
    Chat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Full endpoint, e.g. `http://host:8000/v1/completions`.
    pub url: String,
    pub model: String,
    pub mode: ChatMode,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub max_concurrency: usize,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl HttpConfig {
    pub fn new(url: &str, model: &str) -> Self {
        Self {
            url: url.to_string(),
            model: model.to_string(),
            mode: ChatMode::Completions,
            api_key_env: None,
            max_concurrency: 4,
            timeout_secs: 120,
            max_attempts: 3,
            backoff_ms: 500,
        }
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct HttpBackend {
    cfg: HttpConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    slots: Semaphore,
}

enum Attempt {
    Done(RawCompletion),
    Retry(Error),
    Fail(Error),
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self> {
        if cfg.max_concurrency == 0 || cfg.max_attempts == 0 {
            return Err(Error::Config(
                "http backend needs max_concurrency >= 1 and max_attempts >= 1".into(),
            ));
        }
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("environment variable {var} (API key) is not set"))
            })?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Ok(Self {
            slots: Semaphore {
                free: Mutex::new(cfg.max_concurrency),
                cv: Condvar::new(),
            },
            cfg,
            api_key,
            agent,
        })
    }

    fn body(&self, req: &CompletionRequest) -> Value {
        let mut body = json!({
            "model": self.cfg.model,
            "max_tokens": req.max_new_tokens,
            "temperature": req.temperature,
            "stop": req.stop_sequences,
        });
        match self.cfg.mode {
            ChatMode::Completions => body["prompt"] = json!(req.prompt_text),
            ChatMode::Chat => {
                body["messages"] = json!([{"role": "user", "content": req.prompt_text}])
            }
        }
        body
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let mut call = self.agent.post(&self.cfg.url);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match call.send_json(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(Error::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(Error::Transport(e.to_string())),
        };
        if status >= 500 {
            return Attempt::Retry(Error::Server { status, body: text });
        }
        if status >= 400 {
            return Attempt::Fail(Error::Server { status, body: text });
        }
        match parse_response(&text, self.cfg.mode) {
            Ok(raw) => Attempt::Done(raw),
            Err(e) => Attempt::Fail(e),
        }
    }
}

fn parse_response(text: &str, mode: ChatMode) -> Result<RawCompletion> {
    let v: Value = serde_json::from_str(text)
        .map_err(|e| Error::Backend(format!("response is not JSON: {e}")))?;
    let choice = &v["choices"][0];
    let content = match mode {
        ChatMode::Completions => choice["text"].as_str(),
        ChatMode::Chat => choice["message"]["content"].as_str(),
    }
    .ok_or_else(|| Error::Backend(format!("response has no completion text: {text}")))?;
    Ok(RawCompletion {
        text: content.to_string(),
        prompt_tokens: v["usage"]["prompt_tokens"].as_u64(),
        completion_tokens: v["usage"]["completion_tokens"].as_u64(),
    })
}

impl LmBackend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}:{}", self.cfg.url, self.cfg.model)
    }

    fn generate(&self, req: &CompletionRequest) -> Result<RawCompletion> {
        let body = self.body(req);
        let _permit = self.slots.acquire();
        let mut last = None;
        for attempt in 0..self.cfg.max_attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms << (attempt - 1)));
            }
            match self.attempt(&body) {
                Attempt::Done(raw) => return Ok(raw),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) => {
                    log::warn!("{} attempt {}: {e}", req.request_tag, attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(last.unwrap_or_else(|| Error::Transport("no attempts made".into())))
    }
}
