//! Text-completion providers: an offline rule-based rewriter and a client
//! for OpenAI-compatible completion endpoints.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Prompt in, completion text out.
pub trait CompletionProvider: Sync {
    /// Stable identifier recorded with every result.
    fn id(&self) -> String;
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Deterministic offline provider. It takes the caption lines in front of
/// the request template and returns them as a numbered list, each with a
/// capital first letter and a closing period.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockProvider {
    pub template: String,
}

impl MockProvider {
    pub fn new(template: impl Into<String>) -> Self {
        Self {
            template: template.into(),
        }
    }

    pub fn rewrite_line(line: &str) -> String {
        let line = line.split_whitespace().collect::<Vec<_>>().join(" ");
        let mut chars = line.chars();
        let mut out: String = match chars.next() {
            Some(first) => first.to_uppercase().chain(chars).collect(),
            None => String::new(),
        };
        if !out.ends_with(['.', '!', '?']) {
            out.push('.');
        }
        out
    }
}

impl CompletionProvider for MockProvider {
    fn id(&self) -> String {
        "mock".to_string()
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let suffix = format!("\n{}", self.template);
        let captions = prompt.strip_suffix(&suffix).unwrap_or(prompt);
        let lines: Vec<String> = captions
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| format!("{}. {}", i + 1, Self::rewrite_line(l)))
            .collect();
        Ok(lines.join("\n"))
    }
}

/// Settings of the network provider. The key itself is read from the named
/// environment variable at call time and never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub requests_per_minute: u32,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub timeout_secs: u64,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/completions".into(),
            model: "gpt-3.5-turbo-instruct".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            requests_per_minute: 60,
            max_retries: 3,
            initial_backoff_ms: 500,
            timeout_secs: 60,
            max_tokens: 256,
            temperature: 0.0,
        }
    }
}

pub struct LiveProvider {
    pub config: LiveConfig,
    agent: ureq::Agent,
    next_slot: Mutex<Instant>,
}

impl LiveProvider {
    pub fn new(config: LiveConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            config,
            agent,
            next_slot: Mutex::new(Instant::now()),
        }
    }

    /// Blocks until the request-per-minute budget allows another call.
    fn throttle(&self) {
        if self.config.requests_per_minute == 0 {
            return;
        }
        let gap = Duration::from_secs_f64(60.0 / self.config.requests_per_minute as f64);
        let wait = {
            let mut slot = self.next_slot.lock().expect("throttle lock");
            let now = Instant::now();
            let start = (*slot).max(now);
            *slot = start + gap;
            start - now
        };
        std::thread::sleep(wait);
    }

    fn attempt(&self, key: &str, prompt: &str) -> std::result::Result<String, (bool, String)> {
        let body = serde_json::json!({
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": self.config.max_tokens,
            "temperature": self.config.temperature,
        });
        let mut resp = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", format!("Bearer {key}"))
            .send_json(&body)
            .map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| (true, e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err((true, format!("HTTP {status}: {text}")));
        }
        if status >= 400 {
            return Err((false, format!("HTTP {status}: {text}")));
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| (false, format!("bad JSON: {e}")))?;
        let choice = &value["choices"][0];
        choice["text"]
            .as_str()
            .or_else(|| choice["message"]["content"].as_str())
            .map(str::to_string)
            .ok_or_else(|| (false, "response has no completion text".to_string()))
    }
}

impl CompletionProvider for LiveProvider {
    fn id(&self) -> String {
        format!("live:{}@{}", self.config.model, self.config.endpoint)
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let key = std::env::var(&self.config.api_key_env).map_err(|_| {
            Error::Provider(format!(
                "environment variable {} is not set",
                self.config.api_key_env
            ))
        })?;
        let mut backoff = Duration::from_millis(self.config.initial_backoff_ms);
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            self.throttle();
            match self.attempt(&key, prompt) {
                Ok(text) => return Ok(text),
                Err((retry, msg)) => {
                    log::warn!("completion attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                    if !retry {
                        break;
                    }
                    if attempt < self.config.max_retries {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(Error::Provider(last))
    }
}
