//! In-browser demo over the grading core.
//!
//! Three operations: preview the few-shot prompt a submission would be
//! graded with (RAG or random examples), score a rubric selection, and
//! compute evaluation metrics from pasted prediction/gold pairs. Every
//! export takes and returns JSON strings; the plain-Rust halves are what
//! the tests exercise.

use std::collections::BTreeMap;

use asag_core::corpus::ScoreScale;
use asag_core::embeddings::{
    euclidean_distance, EmbeddingBackend, EmbeddingStore, HashedBagOfWords, SelectionStrategy,
};
use asag_core::engine::{self, rubric_score, GradingContext, RunConfig};
use asag_core::eval::{self, PairedScores};
use asag_core::llm::{MockCompletionBackend, MockScript, ModelConfig, PriceTable};
use asag_core::prompting::{PromptTemplate, COMPONENTS};
use asag_core::{Dataset, Rubric};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const EMBEDDING_DIMENSION: usize = 256;

const SHORT_ANSWERS: (&str, &str) = (
    include_str!("../../core/assets/synthetic/short_answers.jsonl"),
    include_str!("../../core/assets/synthetic/short_answers.descriptor.json"),
);
const INDUCTION_PROOFS: (&str, &str) = (
    include_str!("../../core/assets/synthetic/induction_proofs.jsonl"),
    include_str!("../../core/assets/synthetic/induction_proofs.descriptor.json"),
);

fn bundled(name: &str) -> Result<Dataset, String> {
    let (jsonl, descriptor) = match name {
        "short_answers" => SHORT_ANSWERS,
        "induction_proofs" => INDUCTION_PROOFS,
        other => return Err(format!("unknown dataset {other:?}")),
    };
    let d: Value = serde_json::from_str(descriptor).map_err(|e| e.to_string())?;
    let scale: ScoreScale = serde_json::from_value(d["scale"].clone()).map_err(|e| e.to_string())?;
    let name = d["name"].as_str().unwrap_or(name);
    Dataset::from_jsonl(name, jsonl, &scale).map_err(|e| e.to_string())
}

/// A bundled dataset with its embeddings, ready for prompt previews.
#[wasm_bindgen]
pub struct Explorer {
    dataset: Dataset,
    store: EmbeddingStore,
    template: PromptTemplate,
}

impl Explorer {
    pub fn open(name: &str) -> Result<Self, String> {
        let dataset = bundled(name)?;
        let embedder = HashedBagOfWords::new(EMBEDDING_DIMENSION);
        let mut store = EmbeddingStore::new(embedder.tag());
        engine::prepare_embeddings(&dataset, &embedder, &mut store).map_err(|e| e.to_string())?;
        let template = PromptTemplate::default();
        Ok(Self {
            dataset,
            store,
            template,
        })
    }

    pub fn submissions(&self) -> Value {
        let list: Vec<Value> = self
            .dataset
            .submissions
            .iter()
            .map(|s| {
                json!({
                    "id": s.submission_id,
                    "question_id": s.question_id,
                    "text": s.response_text,
                    "gold_percent": s.gold_percent,
                })
            })
            .collect();
        json!({"dataset": self.dataset.name, "has_rubric": self.has_rubric(), "submissions": list})
    }

    fn has_rubric(&self) -> bool {
        self.dataset.questions.iter().any(|q| q.rubric.is_some())
    }

    pub fn preview_prompt(
        &self,
        target_id: &str,
        strategy: &str,
        k: usize,
        seed: u64,
        rubric: bool,
    ) -> Result<Value, String> {
        let target = self
            .dataset
            .submission(target_id)
            .ok_or_else(|| format!("no submission {target_id:?}"))?;
        let question = self
            .dataset
            .question(&target.question_id)
            .ok_or("submission has no question")?;
        let strategy = match strategy {
            "rag" => SelectionStrategy::rag(k),
            "random" => SelectionStrategy::random(k, seed),
            "none" => SelectionStrategy::none(),
            other => return Err(format!("unknown strategy {other:?}")),
        };
        let mut config = RunConfig::new(self.dataset.name.clone(), strategy, ModelConfig::default());
        config.rubric_mode = rubric;
        config.validate().map_err(|e| e.to_string())?;

        let backend = MockCompletionBackend::new(MockScript::default());
        let prices = PriceTable::default();
        let ctx = GradingContext {
            dataset: &self.dataset,
            store: &self.store,
            backend: &backend,
            template: &self.template,
            prices: &prices,
        };
        let (prompt, short_pool) =
            engine::assemble_prompt(target, question, &config, &ctx).map_err(|e| e.to_string())?;

        let target_vec = self.store.get(&target.submission_id);
        let examples: Vec<Value> = prompt
            .example_ids
            .iter()
            .filter_map(|id| self.dataset.submission(id))
            .map(|s| {
                let distance = target_vec
                    .zip(self.store.get(&s.submission_id))
                    .and_then(|(a, b)| euclidean_distance(a, b).ok());
                json!({"id": s.submission_id, "gold_percent": s.gold_percent, "distance": distance, "text": s.response_text})
            })
            .collect();
        let spans: Vec<Value> = COMPONENTS
            .iter()
            .zip(&prompt.component_spans)
            .map(|(name, span)| {
                let start = prompt.text[..span.offset].chars().count();
                let len = span.slice(&prompt.text).chars().count();
                json!({"component": name, "start": start, "len": len})
            })
            .collect();
        Ok(json!({"prompt": prompt.text, "spans": spans, "examples": examples, "short_pool": short_pool}))
    }
}

#[wasm_bindgen]
impl Explorer {
    /// Opens `short_answers` or `induction_proofs`.
    #[wasm_bindgen(constructor)]
    pub fn new(dataset: &str) -> Result<Explorer, JsValue> {
        Self::open(dataset).map_err(|e| JsValue::from_str(&e))
    }

    #[wasm_bindgen(js_name = submissionsJson)]
    pub fn submissions_json(&self) -> String {
        self.submissions().to_string()
    }

    /// Character offsets in `spans` are in Unicode scalar values.
    #[wasm_bindgen(js_name = previewJson)]
    pub fn preview_json(
        &self,
        target_id: &str,
        strategy: &str,
        k: usize,
        seed: u32,
        rubric: bool,
    ) -> Result<String, JsValue> {
        self.preview_prompt(target_id, strategy, k, seed.into(), rubric)
            .map(|v| v.to_string())
            .map_err(|e| JsValue::from_str(&e))
    }
}

/// Scores a selection against the bundled rubric. `weights` may be empty
/// for the rubric's own weights.
pub fn score_selection(selected: &[bool], weights: &[f64]) -> Result<Value, String> {
    let mut rubric = Rubric::induction();
    if selected.len() != rubric.items.len() {
        return Err(format!(
            "expected {} selections, got {}",
            rubric.items.len(),
            selected.len()
        ));
    }
    if !weights.is_empty() {
        if weights.len() != rubric.items.len() {
            return Err(format!(
                "expected {} weights, got {}",
                rubric.items.len(),
                weights.len()
            ));
        }
        for (item, &w) in rubric.items.iter_mut().zip(weights) {
            item.weight = w;
        }
        rubric = Rubric::new(rubric.items).map_err(|e| e.to_string())?;
    }
    let selections: BTreeMap<u32, bool> = rubric.items.iter().zip(selected).map(|(i, &s)| (i.number, s)).collect();
    let score = rubric_score(&selections, &rubric).map_err(|e| e.to_string())?;
    let items: Vec<Value> = rubric
        .items
        .iter()
        .zip(selected)
        .map(|(i, s)| json!({"number": i.number, "name": i.name, "weight": i.weight, "selected": s}))
        .collect();
    Ok(json!({"score": score, "items": items}))
}

#[wasm_bindgen(js_name = rubricItemsJson)]
pub fn rubric_items_json() -> String {
    let items: Vec<Value> = Rubric::induction()
        .items
        .iter()
        .map(|i| json!({"number": i.number, "name": i.name, "explanation": i.explanation, "weight": i.weight}))
        .collect();
    Value::from(items).to_string()
}

#[wasm_bindgen(js_name = scoreRubricJson)]
pub fn score_rubric_json(selected: Vec<u8>, weights: Vec<f64>) -> Result<String, JsValue> {
    let selected: Vec<bool> = selected.iter().map(|&b| b != 0).collect();
    score_selection(&selected, &weights)
        .map(|v| v.to_string())
        .map_err(|e| JsValue::from_str(&e))
}

/// Parses one `predicted, gold` pair per line; blank lines and lines
/// starting with `#` are skipped. Commas, tabs and spaces all separate.
pub fn parse_pairs(text: &str) -> Result<Vec<(f64, f64)>, String> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let [p, g] = fields[..] else {
            return Err(format!("line {}: expected two numbers, got {:?}", n + 1, line));
        };
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| format!("line {}: {s:?} is not a number", n + 1))
        };
        pairs.push((num(p)?, num(g)?));
    }
    Ok(pairs)
}

pub fn metrics(text: &str) -> Result<Value, String> {
    let scores = PairedScores::new(parse_pairs(text)?).map_err(|e| e.to_string())?;
    let rmse = eval::rmse(&scores).map_err(|e| e.to_string())?;
    let (pearson, note) = match eval::pearson_r(&scores) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let quartiles = eval::abs_error_stats(&scores).map_err(|e| e.to_string())?;
    let errors = scores.abs_errors();
    let mean_abs_error = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok(json!({
        "n": scores.len(),
        "rmse": rmse,
        "pearson_r": pearson,
        "pearson_note": note,
        "mean_abs_error": mean_abs_error,
        "abs_error_quartiles": quartiles,
    }))
}

#[wasm_bindgen(js_name = metricsJson)]
pub fn metrics_json(text: &str) -> Result<String, JsValue> {
    metrics(text).map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}
