//! OpenAI-compatible chat-completion client.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{BackendCall, BackendError, BackendReply, ChatBackend, TokenUsage};

/// Environment variable holding the provider API key.
pub const API_KEY_ENV: &str = "THEMATIC_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    300
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4".into(),
            timeout_secs: default_timeout_secs(),
        }
    }
}

#[derive(Debug)]
pub struct LiveBackend {
    config: LiveConfig,
    api_key: String,
    client: Client,
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    model: Option<String>,
    #[serde(default)]
    system_fingerprint: Option<String>,
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

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: usize,
    completion_tokens: usize,
}

impl LiveBackend {
    pub fn new(config: LiveConfig, api_key: String) -> Result<Self, String> {
        let client = Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| format!("cannot build HTTP client: {e}"))?;
        Ok(Self {
            config,
            api_key,
            client,
        })
    }

    /// Reads the key from [`API_KEY_ENV`].
    pub fn from_env(config: LiveConfig) -> Result<Self, String> {
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| format!("{API_KEY_ENV} is not set"))?;
        Self::new(config, key)
    }

    fn classify(status: StatusCode, body: &str, retry_after: Option<Duration>) -> BackendError {
        let message = format!("HTTP {status}: {}", body.chars().take(500).collect::<String>());
        if status == StatusCode::TOO_MANY_REQUESTS {
            BackendError::RateLimited {
                message,
                retry_after,
            }
        } else if status.is_server_error() || status == StatusCode::REQUEST_TIMEOUT {
            BackendError::Transport(message)
        } else if body.contains("context_length_exceeded") || body.contains("maximum context length") {
            BackendError::ContextOverflow(message)
        } else {
            BackendError::Fatal(message)
        }
    }
}

impl ChatBackend for LiveBackend {
    fn backend_id(&self) -> String {
        format!("live:{}", self.config.model)
    }

    fn send(&self, call: &BackendCall<'_>) -> Result<BackendReply, BackendError> {
        let p = call.params;
        let body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": call.system},
                {"role": "user", "content": call.user},
            ],
            "temperature": p.temperature,
            "top_p": p.top_p,
            "frequency_penalty": p.frequency_penalty,
            "presence_penalty": p.presence_penalty,
            "max_tokens": p.max_tokens,
        });
        let resp = self
            .client
            .post(&self.config.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let text = resp
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(Self::classify(status, &text, retry_after));
        }
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| BackendError::Fatal(format!("unexpected response body: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Fatal("response has no message content".into()))?;
        let usage = parsed.usage.map_or_else(
            || TokenUsage {
                prompt: call.counter.count(call.system) + call.counter.count(call.user),
                completion: call.counter.count(&content),
            },
            |u| TokenUsage {
                prompt: u.prompt_tokens,
                completion: u.completion_tokens,
            },
        );
        let mut backend_id = format!(
            "live:{}",
            parsed.model.as_deref().unwrap_or(&self.config.model)
        );
        if let Some(fp) = parsed.system_fingerprint {
            backend_id.push(':');
            backend_id.push_str(&fp);
        }
        Ok(BackendReply {
            text: content,
            usage,
            backend_id,
        })
    }
}
