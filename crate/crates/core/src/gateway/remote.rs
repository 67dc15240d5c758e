use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Backend, Completion, GatewayError, GeneratorSpec, RequestContext, Usage};
use crate::protocol::RenderedPrompt;

pub const API_KEY_ENV: &str = "ATGEN_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff_s: f64,
    pub request_timeout_s: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff_s: 1.0,
            request_timeout_s: 300.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): doubles each time.
    pub fn backoff(&self, retry: u32) -> Duration {
        Duration::from_secs_f64(self.initial_backoff_s * f64::from(1u32 << (retry - 1).min(16)))
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

/// Chat-completions client: `POST {endpoint}` with
/// `{model, messages, temperature, n, max_tokens, seed}`.
pub struct RemoteBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    temperature: f64,
    max_tokens: u32,
    seed: Option<u64>,
    retry: RetryPolicy,
    api_key: Option<String>,
}

enum Failure {
    Transient(String),
    Fatal(GatewayError),
}

impl RemoteBackend {
    pub fn new(spec: &GeneratorSpec) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(spec.retry.request_timeout_s))
            .build()
            .map_err(|e| GatewayError::InvalidSpec(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: spec
                .endpoint
                .clone()
                .ok_or_else(|| GatewayError::InvalidSpec("missing endpoint".into()))?,
            model: spec
                .model_name
                .clone()
                .ok_or_else(|| GatewayError::InvalidSpec("missing model_name".into()))?,
            temperature: spec.sampling.temperature,
            max_tokens: spec.sampling.max_tokens,
            seed: spec.sampling.seed,
            retry: spec.retry.clone(),
            api_key: std::env::var(API_KEY_ENV).ok(),
        })
    }

    pub fn request_body(&self, prompt: &RenderedPrompt, n: usize, seed: Option<u64>) -> serde_json::Value {
        let mut messages = Vec::new();
        if !prompt.system_text.is_empty() {
            messages.push(json!({"role": "system", "content": prompt.system_text}));
        }
        messages.push(json!({"role": "user", "content": prompt.user_text}));
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
            "n": n,
            "max_tokens": self.max_tokens,
        });
        if let Some(s) = seed {
            body["seed"] = json!(s);
        }
        body
    }

    fn send_once(&self, body: &serde_json::Value) -> Result<(ChatResponse, f64), Failure> {
        let started = Instant::now();
        let mut req = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Failure::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Failure::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(Failure::Fatal(GatewayError::Http {
                status: status.as_u16(),
                body,
            }));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| Failure::Transient(format!("decoding response: {e}")))?;
        Ok((parsed, started.elapsed().as_secs_f64()))
    }

    fn send_with_retry(&self, body: &serde_json::Value) -> Result<(ChatResponse, f64), GatewayError> {
        let attempts = self.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.send_once(body) {
                Ok(r) => return Ok(r),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient(msg)) => {
                    log::warn!("chat request attempt {attempt}/{attempts} failed: {msg}");
                    last = msg;
                    if attempt < attempts {
                        std::thread::sleep(self.retry.backoff(attempt));
                    }
                }
            }
        }
        Err(GatewayError::Network {
            attempts,
            message: last,
        })
    }
}

impl Backend for RemoteBackend {
    fn complete(
        &self,
        prompt: &RenderedPrompt,
        ctx: &RequestContext<'_>,
        n: usize,
    ) -> Result<Vec<Completion>, GatewayError> {
        let seed = ctx.seed.or(self.seed);
        let mut out = Vec::with_capacity(n);
        // Providers may return fewer choices than asked; top up until n.
        while out.len() < n {
            let body = self.request_body(prompt, n - out.len(), seed);
            let (resp, latency) = self.send_with_retry(&body)?;
            if resp.choices.is_empty() {
                return Err(GatewayError::Network {
                    attempts: 1,
                    message: "response contained no choices".into(),
                });
            }
            let usage = resp.usage;
            for c in resp.choices.into_iter().take(n - out.len()) {
                out.push(Completion {
                    text: c.message.content.unwrap_or_default(),
                    usage,
                    latency,
                });
            }
        }
        Ok(out)
    }
}
