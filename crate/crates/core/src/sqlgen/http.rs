//! Chat-completion backend over HTTP.

use std::sync::{Condvar, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::sqlgen::backend::{BackendError, BackendIdentity, GenerationBackend};
use crate::sqlgen::prompt::Prompt;

pub const DEFAULT_API_KEY_ENV: &str = "KGNLQ_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig {
            base_url: "http://localhost:8000/v1".into(),
            model: "gpt-4".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            temperature: 0.0,
            timeout_secs: 60,
            max_in_flight: 4,
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpChatBackend {
    name: String,
    config: HttpBackendConfig,
    // Built on first use: a blocking client must not be created inside an
    // async runtime, and backends are often constructed there.
    client: OnceLock<Result<reqwest::blocking::Client, String>>,
    in_flight: InFlight,
}

impl HttpChatBackend {
    pub fn new(name: impl Into<String>, config: HttpBackendConfig) -> Self {
        HttpChatBackend {
            name: name.into(),
            in_flight: InFlight {
                limit: config.max_in_flight.max(1),
                active: Mutex::new(0),
                freed: Condvar::new(),
            },
            config,
            client: OnceLock::new(),
        }
    }

    pub fn config(&self) -> &HttpBackendConfig {
        &self.config
    }

    fn client(&self) -> Result<&reqwest::blocking::Client, BackendError> {
        self.client
            .get_or_init(|| {
                reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs(self.config.timeout_secs))
                    .build()
                    .map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(|e| BackendError::Transport(e.clone()))
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }
}

fn retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

impl GenerationBackend for HttpChatBackend {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            name: self.name.clone(),
            model: self.config.model.clone(),
        }
    }

    fn generate(&self, prompt: &Prompt) -> Result<String, BackendError> {
        let client = self.client()?;
        let body = json!({
            "model": self.config.model,
            "messages": prompt.messages(),
            "temperature": self.config.temperature,
        });
        let api_key = std::env::var(&self.config.api_key_env).ok();
        let _permit = self.in_flight.acquire();

        let mut attempt = 0u32;
        loop {
            let mut request = client.post(self.endpoint()).json(&body);
            if let Some(key) = &api_key {
                request = request.bearer_auth(key);
            }
            let response = request
                .send()
                .map_err(|e| BackendError::Transport(e.to_string()))?;
            let status = response.status().as_u16();
            if retryable(status) && attempt < self.config.max_retries {
                let delay = self.config.backoff_ms.saturating_mul(1 << attempt);
                log::warn!(
                    "backend {} answered HTTP {status}; retrying in {delay} ms",
                    self.name
                );
                std::thread::sleep(Duration::from_millis(delay));
                attempt += 1;
                continue;
            }
            let text = response
                .text()
                .map_err(|e| BackendError::Transport(e.to_string()))?;
            if !(200..300).contains(&status) {
                return Err(BackendError::Status { status, body: text });
            }
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| BackendError::Malformed(e.to_string()))?;
            return value
                .pointer("/choices/0/message/content")
                .and_then(|c| c.as_str())
                .map(str::to_string)
                .ok_or_else(|| {
                    BackendError::Malformed("missing choices[0].message.content".into())
                });
        }
    }
}
