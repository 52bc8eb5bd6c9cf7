//! Completion backends, response parsing and the regrade loop.

pub mod mock;
pub mod openai;
pub mod parse;
pub mod retry;

use std::collections::BTreeMap;
use std::ops::{Add, AddAssign};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::rubric::Rubric;

pub use mock::{MockCompletionBackend, MockFallback, MockReply, MockRule, MockScript};
pub use parse::{
    extract_first_json_object, parse_grade_response, parse_rubric_response, GradeResult, ParseFailure,
    ParseFailureReason, RubricResult,
};
pub use retry::{grade_with_retry, FailureCause, RetryOutcome};

pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_name: String,
    /// Sampling temperature; `None` leaves it to the provider.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub max_output_tokens: u32,
    #[serde(default)]
    pub structured_output: bool,
    pub request_timeout_ms: u64,
    pub max_attempts: u32,
    /// Base delay for exponential backoff after transport errors.
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
    /// Hard limit on prompt length in characters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_prompt_chars: Option<usize>,
}

fn default_backoff_ms() -> u64 {
    500
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_name: "gpt-4o-2024-08-06".into(),
            temperature: Some(0.0),
            max_output_tokens: 1024,
            structured_output: false,
            request_timeout_ms: 60_000,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            retry_backoff_ms: default_backoff_ms(),
            max_prompt_chars: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_attempts < 1 {
            return Err("max_attempts must be at least 1".into());
        }
        if self.max_output_tokens < 1 {
            return Err("max_output_tokens must be positive".into());
        }
        if let Some(t) = self.temperature {
            if !(t.is_finite() && t >= 0.0) {
                return Err(format!("temperature must be >= 0, got {t}"));
            }
        }
        Ok(())
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_millis(self.request_timeout_ms)
    }
}

/// Token and cost accounting for one or more backend calls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Backend-reported latency in milliseconds.
    pub wall_time_ms: u64,
    pub estimated_cost: f64,
}

impl Add for UsageRecord {
    type Output = UsageRecord;

    fn add(self, rhs: Self) -> Self {
        UsageRecord {
            prompt_tokens: self.prompt_tokens + rhs.prompt_tokens,
            completion_tokens: self.completion_tokens + rhs.completion_tokens,
            wall_time_ms: self.wall_time_ms + rhs.wall_time_ms,
            estimated_cost: self.estimated_cost + rhs.estimated_cost,
        }
    }
}

impl AddAssign for UsageRecord {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for UsageRecord {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(UsageRecord::default(), Add::add)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub prompt_per_1k: f64,
    pub completion_per_1k: f64,
}

/// Per-model prices in currency units per 1000 tokens.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceTable(pub BTreeMap<String, ModelPrice>);

impl PriceTable {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Cost of a call; unknown models cost 0.
    pub fn cost(&self, model: &str, prompt_tokens: u64, completion_tokens: u64) -> f64 {
        self.0.get(model).map_or(0.0, |p| {
            p.prompt_per_1k * prompt_tokens as f64 / 1000.0 + p.completion_per_1k * completion_tokens as f64 / 1000.0
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited")]
    RateLimited { retry_after_ms: Option<u64> },
    #[error("server error {status}: {body}")]
    Server { status: u16, body: String },
    #[error("authorization failed: {0}")]
    Auth(String),
    #[error("request rejected: {0}")]
    InvalidRequest(String),
    #[error("prompt has {chars} characters, limit is {limit}")]
    PromptTooLong { chars: usize, limit: usize },
}

impl BackendError {
    /// Worth retrying the same request after a pause.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Timeout
                | BackendError::Transport(_)
                | BackendError::RateLimited { .. }
                | BackendError::Server { .. }
        )
    }

    /// Stops the whole batch: the configuration or credentials are wrong.
    pub fn is_fatal(&self) -> bool {
        matches!(self, BackendError::Auth(_) | BackendError::InvalidRequest(_))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub prompt: &'a str,
    pub config: &'a ModelConfig,
    /// JSON schema of the expected answer. Backends apply it only when
    /// `config.structured_output` is set.
    pub response_schema: Option<&'a Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub wall_time: Duration,
}

/// A chat-completion style text generator.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, BackendError>;
}

/// One backend call with length check and cost accounting.
pub fn complete(
    request: &CompletionRequest<'_>,
    backend: &dyn CompletionBackend,
    prices: &PriceTable,
) -> Result<(String, UsageRecord), BackendError> {
    if let Some(limit) = request.config.max_prompt_chars {
        let chars = request.prompt.chars().count();
        if chars > limit {
            return Err(BackendError::PromptTooLong { chars, limit });
        }
    }
    let c = backend.complete(request)?;
    let usage = UsageRecord {
        prompt_tokens: c.prompt_tokens,
        completion_tokens: c.completion_tokens,
        wall_time_ms: c.wall_time.as_millis() as u64,
        estimated_cost: prices.cost(&request.config.model_name, c.prompt_tokens, c.completion_tokens),
    };
    Ok((c.text, usage))
}

/// JSON schema for the scalar grading answer.
pub fn grade_response_schema() -> Value {
    json!({
        "type": "object",
        "properties": {
            "grade": {"type": "integer", "minimum": 0, "maximum": 100},
            "feedback": {"type": "string"}
        },
        "required": ["grade", "feedback"],
        "additionalProperties": false
    })
}

/// JSON schema for the rubric answer; item names are restricted to the rubric.
pub fn rubric_response_schema(rubric: &Rubric) -> Value {
    let names: Vec<&str> = rubric.items.iter().map(|i| i.name.as_str()).collect();
    json!({
        "type": "object",
        "properties": {
            "feedback": {"type": "string"},
            "rubric_items": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "name": {"type": "string", "enum": names},
                        "selected": {"type": "boolean"}
                    },
                    "required": ["name", "selected"],
                    "additionalProperties": false
                }
            }
        },
        "required": ["feedback", "rubric_items"],
        "additionalProperties": false
    })
}

/// Item names listed in a rubric response schema.
pub fn schema_item_names(schema: &Value) -> Option<Vec<String>> {
    schema
        .pointer("/properties/rubric_items/items/properties/name/enum")?
        .as_array()?
        .iter()
        .map(|v| v.as_str().map(str::to_owned))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn price_table_costs() {
        let table: PriceTable =
            serde_json::from_str(r#"{"gpt-4o-2024-08-06": {"prompt_per_1k": 0.0025, "completion_per_1k": 0.01}}"#)
                .unwrap();
        let c = table.cost("gpt-4o-2024-08-06", 2000, 100);
        assert!((c - 0.006).abs() < 1e-15);
        assert_eq!(table.cost("unknown", 1000, 1000), 0.0);
    }

    #[test]
    fn usage_sums() {
        let a = UsageRecord {
            prompt_tokens: 1,
            completion_tokens: 2,
            wall_time_ms: 3,
            estimated_cost: 0.5,
        };
        let total: UsageRecord = [a, a, a].into_iter().sum();
        assert_eq!(total.prompt_tokens, 3);
        assert_eq!(total.completion_tokens, 6);
        assert_eq!(total.wall_time_ms, 9);
        assert_eq!(total.estimated_cost, 1.5);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            max_attempts: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            temperature: Some(-1.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let o1 = ModelConfig {
            temperature: None,
            ..Default::default()
        };
        assert!(o1.validate().is_ok());
        assert!(!serde_json::to_string(&o1).unwrap().contains("temperature"));
    }

    #[test]
    fn rubric_schema_lists_names() {
        let schema = rubric_response_schema(&Rubric::induction());
        let names = schema_item_names(&schema).unwrap();
        assert_eq!(names.len(), 7);
        assert_eq!(names[6], "Applying the inductive hypothesis");
        assert!(schema_item_names(&grade_response_schema()).is_none());
    }

    #[test]
    fn error_classes() {
        assert!(BackendError::Timeout.is_retryable());
        assert!(BackendError::RateLimited { retry_after_ms: None }.is_retryable());
        assert!(!BackendError::Auth("x".into()).is_retryable());
        assert!(BackendError::Auth("x".into()).is_fatal());
        let too_long = BackendError::PromptTooLong { chars: 2, limit: 1 };
        assert!(!too_long.is_retryable() && !too_long.is_fatal());
    }
}
