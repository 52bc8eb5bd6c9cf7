//! OpenAI-compatible chat-completions and embeddings wire format.
//!
//! Request bodies and response parsing are plain functions so they can be
//! checked offline; the HTTP clients live behind the `live` feature.

use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendError, Completion, CompletionRequest};
use crate::embeddings::{EmbeddingError, EmbeddingVector};

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";
pub const DEFAULT_EMBEDDING_MODEL: &str = "text-embedding-3-small";

/// Reasoning models take `max_completion_tokens` instead of `max_tokens`.
fn uses_completion_token_limit(model: &str) -> bool {
    ["o1", "o3", "o4", "gpt-5"].iter().any(|p| model.starts_with(p))
}

/// Body of a chat-completions request.
pub fn chat_request_body(request: &CompletionRequest<'_>) -> Value {
    let cfg = request.config;
    let mut body = json!({
        "model": cfg.model_name,
        "messages": [{"role": "user", "content": request.prompt}],
    });
    let limit_key = if uses_completion_token_limit(&cfg.model_name) {
        "max_completion_tokens"
    } else {
        "max_tokens"
    };
    body[limit_key] = json!(cfg.max_output_tokens);
    if let Some(t) = cfg.temperature {
        body["temperature"] = json!(t);
    }
    if let (true, Some(schema)) = (cfg.structured_output, request.response_schema) {
        body["response_format"] = json!({
            "type": "json_schema",
            "json_schema": {"name": "grading_result", "strict": true, "schema": schema},
        });
    }
    body
}

/// Extracts the first choice's text and the reported token usage.
pub fn parse_chat_completion(body: &str, wall_time: Duration) -> Result<Completion, BackendError> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| BackendError::Transport(format!("malformed completion body: {e}")))?;
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Transport("completion body has no choices[0].message.content".into()))?;
    let usage = |field: &str| v.pointer(&format!("/usage/{field}")).and_then(Value::as_u64);
    let prompt_tokens = usage("prompt_tokens").unwrap_or(0);
    let completion_tokens = usage("completion_tokens").unwrap_or(0);
    Ok(Completion {
        text: text.to_owned(),
        prompt_tokens,
        completion_tokens,
        wall_time,
    })
}

/// Maps a non-success HTTP status to a backend error.
pub fn status_error(status: u16, body: &str, retry_after: Option<&str>) -> BackendError {
    let message = serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| v.pointer("/error/message").and_then(Value::as_str).map(str::to_owned))
        .unwrap_or_else(|| body.chars().take(500).collect());
    match status {
        401 | 403 => BackendError::Auth(message),
        408 => BackendError::Timeout,
        429 => BackendError::RateLimited {
            retry_after_ms: retry_after
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|s| s.is_finite() && *s >= 0.0)
                .map(|s| (s * 1000.0) as u64),
        },
        500..=599 => BackendError::Server { status, body: message },
        _ => BackendError::InvalidRequest(format!("HTTP {status}: {message}")),
    }
}

pub fn embedding_request_body(model: &str, text: &str) -> Value {
    json!({"model": model, "input": text})
}

pub fn parse_embedding_response(body: &str) -> Result<EmbeddingVector, EmbeddingError> {
    let bad = |message: String| EmbeddingError::Backend {
        message,
        retryable: false,
    };
    let v: Value = serde_json::from_str(body).map_err(|e| bad(format!("malformed embedding body: {e}")))?;
    let values = v
        .pointer("/data/0/embedding")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("embedding body has no data[0].embedding".into()))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| bad("non-numeric embedding component".into())))
        .collect::<Result<Vec<_>, _>>()?;
    EmbeddingVector::new(values)
}

#[cfg(feature = "live")]
pub use http::{api_key_from_env, MissingApiKey, OpenAiChatBackend, OpenAiEmbedder};

#[cfg(feature = "live")]
mod http {
    use std::time::{Duration, Instant};

    use serde_json::Value;

    use super::*;
    use crate::embeddings::EmbeddingBackend;
    use crate::llm::CompletionBackend;

    #[derive(Debug, thiserror::Error)]
    #[error("API key environment variable {0} is not set")]
    pub struct MissingApiKey(pub String);

    /// Reads the API key from `var`; the key is never taken from flags or files.
    pub fn api_key_from_env(var: &str) -> Result<String, MissingApiKey> {
        match std::env::var(var) {
            Ok(k) if !k.trim().is_empty() => Ok(k),
            _ => Err(MissingApiKey(var.to_owned())),
        }
    }

    fn agent() -> ureq::Agent {
        ureq::Agent::config_builder().http_status_as_error(false).build().into()
    }

    fn url(base: &str, path: &str) -> String {
        format!("{}/{path}", base.trim_end_matches('/'))
    }

    struct Reply {
        status: u16,
        retry_after: Option<String>,
        body: String,
    }

    fn post(agent: &ureq::Agent, url: &str, key: &str, body: &Value, timeout: Duration) -> Result<Reply, BackendError> {
        let result = agent
            .post(url)
            .config()
            .timeout_global(Some(timeout))
            .build()
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(body);
        let mut resp = match result {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(BackendError::Timeout),
            Err(ureq::Error::Io(e)) if e.kind() == std::io::ErrorKind::TimedOut => return Err(BackendError::Timeout),
            Err(e) => return Err(BackendError::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .map(str::to_owned);
        let body = match resp.body_mut().read_to_string() {
            Ok(b) => b,
            Err(ureq::Error::Timeout(_)) => return Err(BackendError::Timeout),
            Err(e) => return Err(BackendError::Transport(e.to_string())),
        };
        Ok(Reply {
            status,
            retry_after,
            body,
        })
    }

    pub struct OpenAiChatBackend {
        base_url: String,
        api_key: String,
        agent: ureq::Agent,
    }

    impl OpenAiChatBackend {
        pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
            Self {
                base_url: base_url.into(),
                api_key: api_key.into(),
                agent: agent(),
            }
        }
    }

    impl CompletionBackend for OpenAiChatBackend {
        fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, BackendError> {
            let start = Instant::now();
            let reply = post(
                &self.agent,
                &url(&self.base_url, "chat/completions"),
                &self.api_key,
                &chat_request_body(request),
                request.config.request_timeout(),
            )?;
            if !(200..300).contains(&reply.status) {
                return Err(status_error(reply.status, &reply.body, reply.retry_after.as_deref()));
            }
            parse_chat_completion(&reply.body, start.elapsed())
        }
    }

    pub struct OpenAiEmbedder {
        base_url: String,
        api_key: String,
        model: String,
        timeout: Duration,
        agent: ureq::Agent,
    }

    impl OpenAiEmbedder {
        pub fn new(
            base_url: impl Into<String>,
            api_key: impl Into<String>,
            model: impl Into<String>,
            timeout: Duration,
        ) -> Self {
            Self {
                base_url: base_url.into(),
                api_key: api_key.into(),
                model: model.into(),
                timeout,
                agent: agent(),
            }
        }
    }

    impl EmbeddingBackend for OpenAiEmbedder {
        fn tag(&self) -> String {
            format!("openai-{}", self.model)
        }

        fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
            if text.trim().is_empty() {
                return Err(EmbeddingError::EmptyText);
            }
            let to_embedding_err = |e: BackendError| EmbeddingError::Backend {
                retryable: e.is_retryable(),
                message: e.to_string(),
            };
            let reply = post(
                &self.agent,
                &url(&self.base_url, "embeddings"),
                &self.api_key,
                &embedding_request_body(&self.model, text),
                self.timeout,
            )
            .map_err(to_embedding_err)?;
            if !(200..300).contains(&reply.status) {
                return Err(to_embedding_err(status_error(
                    reply.status,
                    &reply.body,
                    reply.retry_after.as_deref(),
                )));
            }
            parse_embedding_response(&reply.body)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{grade_response_schema, ModelConfig};

    const REPLAY: &str = include_str!("../../tests/fixtures/chat_completion_replay.json");

    #[test]
    fn replayed_exchange_usage() {
        let c = parse_chat_completion(REPLAY, Duration::from_millis(1234)).unwrap();
        let v: Value = serde_json::from_str(REPLAY).unwrap();
        assert_eq!(c.prompt_tokens, v["usage"]["prompt_tokens"].as_u64().unwrap());
        assert_eq!(c.completion_tokens, v["usage"]["completion_tokens"].as_u64().unwrap());
        assert_eq!(c.text, v["choices"][0]["message"]["content"].as_str().unwrap());
        assert_eq!(c.wall_time, Duration::from_millis(1234));
        assert_eq!(crate::llm::parse_grade_response(&c.text).unwrap().grade, 85);
    }

    #[test]
    fn request_bodies() {
        let schema = grade_response_schema();
        let cfg = ModelConfig::default();
        let req = CompletionRequest {
            prompt: "hi",
            config: &cfg,
            response_schema: Some(&schema),
        };
        let body = chat_request_body(&req);
        assert_eq!(body["model"], "gpt-4o-2024-08-06");
        assert_eq!(body["max_tokens"], 1024);
        assert_eq!(body["temperature"], 0.0);
        assert!(body.get("response_format").is_none());

        let cfg = ModelConfig {
            model_name: "o1-preview".into(),
            temperature: None,
            structured_output: true,
            ..Default::default()
        };
        let req = CompletionRequest {
            prompt: "hi",
            config: &cfg,
            response_schema: Some(&schema),
        };
        let body = chat_request_body(&req);
        assert_eq!(body["max_completion_tokens"], 1024);
        assert!(body.get("max_tokens").is_none() && body.get("temperature").is_none());
        assert_eq!(body["response_format"]["json_schema"]["schema"], schema);
    }

    #[test]
    fn status_mapping() {
        assert!(
            matches!(status_error(401, r#"{"error":{"message":"bad key"}}"#, None), BackendError::Auth(m) if m == "bad key")
        );
        assert!(matches!(
            status_error(429, "", Some("2")),
            BackendError::RateLimited {
                retry_after_ms: Some(2000)
            }
        ));
        assert!(matches!(
            status_error(429, "", Some("soon")),
            BackendError::RateLimited { retry_after_ms: None }
        ));
        assert!(matches!(
            status_error(503, "down", None),
            BackendError::Server { status: 503, .. }
        ));
        assert!(matches!(status_error(408, "", None), BackendError::Timeout));
        assert!(status_error(400, "nope", None).is_fatal());
    }

    #[test]
    fn malformed_bodies() {
        assert!(matches!(
            parse_chat_completion("{}", Duration::ZERO),
            Err(BackendError::Transport(_))
        ));
        assert!(parse_chat_completion("<html>", Duration::ZERO).is_err());
        let e = parse_embedding_response(r#"{"data":[{"embedding":[0.5,0.25]}]}"#).unwrap();
        assert_eq!(e.values(), &[0.5, 0.25]);
        assert!(parse_embedding_response(r#"{"data":[]}"#).is_err());
    }
}
