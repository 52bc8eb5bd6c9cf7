//! Deterministic offline completion backend.
//!
//! Replies come from a script. Rules match a prompt by SHA-256 hex digest
//! or by substring and hold a list of replies indexed by how many times
//! that exact prompt has been sent before (the last reply repeats), which
//! is how regrade sequences are scripted. A global `sequence` list is
//! consumed in call order before rules are consulted; it is only
//! deterministic with a single worker. Anything unmatched goes to the
//! fallback.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{schema_item_names, BackendError, Completion, CompletionBackend, CompletionRequest};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedError {
    Timeout,
    Transport,
    RateLimit,
    Server,
    Auth,
}

impl ScriptedError {
    fn to_error(&self) -> BackendError {
        match self {
            ScriptedError::Timeout => BackendError::Timeout,
            ScriptedError::Transport => BackendError::Transport("scripted transport failure".into()),
            ScriptedError::RateLimit => BackendError::RateLimited {
                retry_after_ms: Some(0),
            },
            ScriptedError::Server => BackendError::Server {
                status: 503,
                body: "scripted server error".into(),
            },
            ScriptedError::Auth => BackendError::Auth("scripted authorization failure".into()),
        }
    }
}

/// A scripted reply: response text, or an injected backend error.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockReply {
    Text(String),
    Error { error: ScriptedError },
}

impl MockReply {
    pub fn text(s: impl Into<String>) -> Self {
        MockReply::Text(s.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MockRule {
    /// Lowercase hex SHA-256 of the full prompt text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    /// Substring that must occur in the prompt's response-to-grade
    /// component (or anywhere, if the prompt has no such marker).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    pub responses: Vec<MockReply>,
}

impl MockRule {
    fn matches(&self, prompt: &str, digest: &str) -> bool {
        let hash_ok = self
            .prompt_sha256
            .as_deref()
            .is_none_or(|h| h.eq_ignore_ascii_case(digest));
        let contains_ok = self
            .contains
            .as_deref()
            .is_none_or(|needle| target_section(prompt).contains(needle));
        hash_ok && contains_ok && (self.prompt_sha256.is_some() || self.contains.is_some())
    }
}

/// What to answer when no rule matches.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockFallback {
    /// The same text for every prompt.
    Fixed { text: String },
    /// A valid grade answer whose grade is derived from the prompt hash.
    HashGrade,
    /// A valid rubric answer: item names come from the request's response
    /// schema, selections from the prompt hash.
    HashRubric,
    /// `hash_rubric` when the request carries a rubric schema, otherwise
    /// `hash_grade`.
    #[default]
    Hash,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sequence: Vec<MockReply>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub fallback: MockFallback,
    /// Latency reported (not slept) for every call.
    #[serde(default)]
    pub latency_ms: u64,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn fixed(text: impl Into<String>) -> Self {
        Self {
            fallback: MockFallback::Fixed { text: text.into() },
            ..Default::default()
        }
    }
}

/// Lowercase hex SHA-256 of a prompt.
pub fn prompt_digest(prompt: &str) -> String {
    Sha256::digest(prompt.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

const TARGET_OPEN: &str = "<student_response>\n";

fn target_section(prompt: &str) -> &str {
    match prompt.rfind(TARGET_OPEN) {
        Some(i) => &prompt[i + TARGET_OPEN.len()..],
        None => prompt,
    }
}

/// Rough token count used for mock usage accounting: one token per four
/// bytes, rounded up.
pub fn approx_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

#[derive(Debug)]
pub struct MockCompletionBackend {
    script: MockScript,
    calls: AtomicUsize,
    per_prompt: Mutex<HashMap<String, usize>>,
}

impl MockCompletionBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            calls: AtomicUsize::new(0),
            per_prompt: Mutex::new(HashMap::new()),
        }
    }

    /// Always answers with `text`.
    pub fn fixed(text: impl Into<String>) -> Self {
        Self::new(MockScript::fixed(text))
    }

    /// Total number of `complete` calls so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    fn fallback(&self, request: &CompletionRequest<'_>, digest: &str) -> String {
        let seed = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
        let has_rubric = request.response_schema.and_then(schema_item_names).is_some();
        let fallback = match &self.script.fallback {
            MockFallback::Hash if has_rubric => &MockFallback::HashRubric,
            MockFallback::Hash => &MockFallback::HashGrade,
            other => other,
        };
        match fallback {
            MockFallback::Fixed { text } => text.clone(),
            MockFallback::HashGrade => json!({
                "grade": seed % 101,
                "feedback": format!("mock feedback {}", &digest[..8]),
            })
            .to_string(),
            MockFallback::HashRubric => {
                let Some(names) = request.response_schema.and_then(schema_item_names) else {
                    return "mock: no rubric schema in request".into();
                };
                let items: Vec<_> = names
                    .iter()
                    .enumerate()
                    .map(|(i, n)| json!({"name": n, "selected": (seed >> (i % 64)) & 1 == 1}))
                    .collect();
                json!({"feedback": format!("mock feedback {}", &digest[..8]), "rubric_items": items}).to_string()
            }
            MockFallback::Hash => unreachable!("resolved above"),
        }
    }
}

impl CompletionBackend for MockCompletionBackend {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, BackendError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        let digest = prompt_digest(request.prompt);
        let nth = {
            let mut seen = self.per_prompt.lock().expect("mock counter poisoned");
            let n = seen.entry(digest.clone()).or_insert(0);
            *n += 1;
            *n - 1
        };

        let scripted = self.script.sequence.get(call).cloned().or_else(|| {
            self.script
                .rules
                .iter()
                .find(|r| r.matches(request.prompt, &digest))
                .and_then(|r| r.responses.get(nth).or(r.responses.last()).cloned())
        });
        let text = match scripted {
            Some(MockReply::Text(t)) => t,
            Some(MockReply::Error { error }) => return Err(error.to_error()),
            None => self.fallback(request, &digest),
        };
        Ok(Completion {
            prompt_tokens: approx_tokens(request.prompt),
            completion_tokens: approx_tokens(&text),
            wall_time: Duration::from_millis(self.script.latency_ms),
            text,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{parse_grade_response, parse_rubric_response, rubric_response_schema, ModelConfig};
    use crate::rubric::Rubric;

    fn req<'a>(prompt: &'a str, config: &'a ModelConfig) -> CompletionRequest<'a> {
        CompletionRequest {
            prompt,
            config,
            response_schema: None,
        }
    }

    #[test]
    fn fixed_body_returned_verbatim() {
        let body = r#"{"grade": 70, "feedback": "fine"}"#;
        let m = MockCompletionBackend::fixed(body);
        let cfg = ModelConfig::default();
        assert_eq!(m.complete(&req("anything", &cfg)).unwrap().text, body);
        assert_eq!(m.calls(), 1);
    }

    #[test]
    fn identical_prompts_identical_replies() {
        let m = MockCompletionBackend::new(MockScript::default());
        let cfg = ModelConfig::default();
        let a = m.complete(&req("prompt one", &cfg)).unwrap();
        let b = m.complete(&req("prompt one", &cfg)).unwrap();
        let c = m.complete(&req("prompt two", &cfg)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.text, c.text);
        assert!(parse_grade_response(&a.text).is_ok());
        assert_eq!(a.prompt_tokens, 3);
    }

    #[test]
    fn rules_index_by_attempt_and_repeat_last() {
        let script: MockScript = serde_json::from_value(json!({
            "rules": [{"contains": "needle", "responses": ["bad", {"error": "timeout"}, "good"]}],
            "fallback": {"kind": "fixed", "text": "other"}
        }))
        .unwrap();
        let m = MockCompletionBackend::new(script);
        let cfg = ModelConfig::default();
        let p = "<student_response>\nhay needle hay";
        assert_eq!(m.complete(&req(p, &cfg)).unwrap().text, "bad");
        assert_eq!(m.complete(&req(p, &cfg)).unwrap_err(), BackendError::Timeout);
        assert_eq!(m.complete(&req(p, &cfg)).unwrap().text, "good");
        assert_eq!(m.complete(&req(p, &cfg)).unwrap().text, "good");
        assert_eq!(m.complete(&req("no match", &cfg)).unwrap().text, "other");
    }

    #[test]
    fn contains_only_looks_at_target_section() {
        let rule = MockRule {
            contains: Some("needle".into()),
            responses: vec![MockReply::text("hit")],
            ..Default::default()
        };
        let m = MockCompletionBackend::new(MockScript {
            rules: vec![rule],
            ..MockScript::fixed("miss")
        });
        let cfg = ModelConfig::default();
        let in_example = "<student_response>\nneedle\n</student_response>\n<student_response>\nclean";
        assert_eq!(m.complete(&req(in_example, &cfg)).unwrap().text, "miss");
    }

    #[test]
    fn hash_rules_and_sequence() {
        let digest = prompt_digest("exact prompt");
        let script = MockScript {
            sequence: vec![MockReply::text("first call")],
            rules: vec![MockRule {
                prompt_sha256: Some(digest.to_uppercase()),
                responses: vec![MockReply::text("by hash")],
                ..Default::default()
            }],
            ..MockScript::fixed("fallback")
        };
        let m = MockCompletionBackend::new(script);
        let cfg = ModelConfig::default();
        assert_eq!(m.complete(&req("exact prompt", &cfg)).unwrap().text, "first call");
        assert_eq!(m.complete(&req("exact prompt", &cfg)).unwrap().text, "by hash");
        assert_eq!(m.complete(&req("exact prompt!", &cfg)).unwrap().text, "fallback");
    }

    #[test]
    fn hash_rubric_fallback_uses_schema_names() {
        let rubric = Rubric::induction();
        let schema = rubric_response_schema(&rubric);
        let m = MockCompletionBackend::new(MockScript {
            fallback: MockFallback::HashRubric,
            ..Default::default()
        });
        let cfg = ModelConfig::default();
        let r = CompletionRequest {
            prompt: "prove",
            config: &cfg,
            response_schema: Some(&schema),
        };
        let text = m.complete(&r).unwrap().text;
        assert!(parse_rubric_response(&text, &rubric).is_ok(), "{text}");
        let no_schema = m.complete(&req("prove", &cfg)).unwrap().text;
        assert!(parse_rubric_response(&no_schema, &rubric).is_err());

        let auto = MockCompletionBackend::new(MockScript::default());
        assert!(parse_rubric_response(&auto.complete(&r).unwrap().text, &rubric).is_ok());
        assert!(crate::llm::parse_grade_response(&auto.complete(&req("prove", &cfg)).unwrap().text).is_ok());
    }

    #[test]
    fn script_json_shape() {
        let script: MockScript = serde_json::from_str(
            r#"{"sequence": [{"error": "auth"}], "fallback": {"kind": "hash_grade"}, "latency_ms": 5}"#,
        )
        .unwrap();
        let m = MockCompletionBackend::new(script);
        let cfg = ModelConfig::default();
        assert!(m.complete(&req("x", &cfg)).unwrap_err().is_fatal());
        assert_eq!(m.complete(&req("x", &cfg)).unwrap().wall_time, Duration::from_millis(5));
    }
}
