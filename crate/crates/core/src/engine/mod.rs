//! Grading runs.
//!
//! For every target submission: pick examples from its question's pool
//! (target excluded), build the prompt, call the backend and parse the
//! answer with regrading. Batches fan out over a bounded number of worker
//! threads and collect records back into dataset order, so the output does
//! not depend on scheduling.

mod run_dir;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{example_pool, CorpusError, Dataset, Question, Submission};
use crate::embeddings::{
    select_examples, EmbeddingBackend, EmbeddingError, EmbeddingStore, SelectionStrategy, StrategyKind,
};
use crate::llm::{
    grade_response_schema, grade_with_retry, parse_grade_response, parse_rubric_response, rubric_response_schema,
    BackendError, CompletionBackend, CompletionRequest, FailureCause, ModelConfig, PriceTable, RetryOutcome,
    UsageRecord,
};
use crate::prompting::{
    build_grading_prompt, build_rubric_prompt, AssembledPrompt, GradedExample, PromptError, PromptTemplate,
    RubricExample,
};
use crate::rubric::Rubric;

pub use run_dir::{load_run, save_run, RunStats, UsageFile, CONFIG_FILE, RECORDS_FILE, USAGE_FILE};

pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("fatal backend error: {0}")]
    Fatal(#[from] BackendError),
    #[error("example selection failed: {0}")]
    Selection(#[from] EmbeddingError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("cannot sample {requested} submissions from {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("rubric selections do not match rubric items: {0}")]
    RubricMismatch(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("incomplete run directory {path}: {message}")]
    IncompleteRun { path: String, message: String },
}

/// Choices recorded with every run so results can be interpreted later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    /// Order of retrieved examples in the prompt.
    pub example_order: String,
    /// Whether instructor feedback is shown next to example grades.
    pub example_feedback: String,
    /// What is sent when an answer fails validation.
    pub regrade_prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_backend: Option<String>,
}

impl Default for RunMetadata {
    fn default() -> Self {
        Self {
            example_order: "ascending-distance".into(),
            example_feedback: "when-available".into(),
            regrade_prompt: "identical".into(),
            embedding_backend: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset_name: String,
    pub strategy: SelectionStrategy,
    pub model: ModelConfig,
    pub rubric_mode: bool,
    pub parallelism: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_seed: Option<u64>,
    pub template_id: String,
    #[serde(default)]
    pub metadata: RunMetadata,
}

impl RunConfig {
    pub fn new(dataset_name: impl Into<String>, strategy: SelectionStrategy, model: ModelConfig) -> Self {
        Self {
            dataset_name: dataset_name.into(),
            strategy,
            model,
            rubric_mode: false,
            parallelism: DEFAULT_PARALLELISM,
            sample_size: None,
            sample_seed: None,
            template_id: crate::prompting::DEFAULT_TEMPLATE_ID.into(),
            metadata: RunMetadata::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        self.model.validate().map_err(EngineError::Config)?;
        if self.parallelism == 0 {
            return Err(EngineError::Config("parallelism must be positive".into()));
        }
        if self.sample_size == Some(0) {
            return Err(EngineError::Config("sample size must be positive".into()));
        }
        if self.strategy.kind == StrategyKind::Random && self.strategy.seed.is_none() {
            return Err(EngineError::Config("random selection requires a seed".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordStatus {
    Ok,
    Failed,
}

/// Outcome of grading one submission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradedRecord {
    pub submission_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_percent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_items: Option<BTreeMap<u32, bool>>,
    pub feedback: String,
    pub attempts: u32,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureCause>,
    /// Last raw backend answer (the accepted one, or the last rejected one).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    pub usage: UsageRecord,
    pub example_ids: Vec<String>,
    /// Fewer than `k` examples were available.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub short_pool: bool,
}

impl GradedRecord {
    pub fn is_ok(&self) -> bool {
        self.status == RecordStatus::Ok
    }

    fn failed(submission_id: &str, example_ids: Vec<String>, cause: FailureCause) -> Self {
        Self {
            submission_id: submission_id.to_owned(),
            predicted_percent: None,
            predicted_items: None,
            feedback: String::new(),
            attempts: 0,
            status: RecordStatus::Failed,
            failure: Some(cause),
            raw_response: None,
            usage: UsageRecord::default(),
            example_ids,
            short_pool: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: RunConfig,
    pub records: Vec<GradedRecord>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub totals: UsageRecord,
}

impl RunResult {
    pub fn stats(&self) -> RunStats {
        RunStats::from_records(&self.records)
    }
}

/// Shared, read-only dependencies of a run.
#[derive(Clone, Copy)]
pub struct GradingContext<'a> {
    /// Source of example pools (the full dataset, even when grading a sample).
    pub dataset: &'a Dataset,
    pub store: &'a EmbeddingStore,
    pub backend: &'a dyn CompletionBackend,
    pub template: &'a PromptTemplate,
    pub prices: &'a PriceTable,
}

/// Embeds every submission of the dataset that the store lacks.
pub fn prepare_embeddings(
    dataset: &Dataset,
    backend: &dyn EmbeddingBackend,
    store: &mut EmbeddingStore,
) -> Result<usize, EngineError> {
    Ok(store.fill(backend, dataset.submissions.iter())?)
}

/// Builds the prompt for one target. Exposed so callers can inspect exactly
/// what a run sends.
///
/// Blank submissions never serve as examples; in rubric mode neither do
/// submissions without item labels.
pub fn assemble_prompt(
    target: &Submission,
    question: &Question,
    config: &RunConfig,
    ctx: &GradingContext<'_>,
) -> Result<(AssembledPrompt, bool), EngineError> {
    let mut pool = example_pool(ctx.dataset, &question.question_id, &target.submission_id)?;
    pool.retain(|s| !s.response_text.trim().is_empty() && (!config.rubric_mode || s.gold_items.is_some()));
    let selection = select_examples(&config.strategy, &pool, target, ctx.store)?;
    let prompt = if config.rubric_mode {
        let rubric = question
            .rubric
            .as_ref()
            .ok_or_else(|| EngineError::Config(format!("question {} has no rubric", question.question_id)))?;
        let examples: Vec<RubricExample> = selection.examples.iter().map(|s| RubricExample::from_gold(s)).collect();
        build_rubric_prompt(ctx.template, question, rubric, &examples, target)
    } else {
        let examples: Vec<GradedExample> = selection.examples.iter().map(|s| GradedExample::from_gold(s)).collect();
        build_grading_prompt(ctx.template, question, &examples, target)
    };
    Ok((prompt?, selection.short_pool))
}

/// Grades one submission. Only fatal conditions (bad credentials, broken
/// configuration, missing embeddings) are errors; everything else ends up
/// in the record.
pub fn grade_submission(
    target: &Submission,
    question: &Question,
    config: &RunConfig,
    ctx: &GradingContext<'_>,
) -> Result<GradedRecord, EngineError> {
    if target.response_text.trim().is_empty() {
        let message = PromptError::EmptyTarget(target.submission_id.clone()).to_string();
        return Ok(GradedRecord::failed(
            &target.submission_id,
            Vec::new(),
            FailureCause::Input { message },
        ));
    }
    let (prompt, short_pool) = assemble_prompt(target, question, config, ctx)?;

    let mut record = if config.rubric_mode {
        let rubric = question.rubric.as_ref().expect("checked while assembling");
        let schema = rubric_response_schema(rubric);
        let request = CompletionRequest {
            prompt: &prompt.text,
            config: &config.model,
            response_schema: Some(&schema),
        };
        let outcome = grade_with_retry(&request, ctx.backend, ctx.prices, |raw| {
            parse_rubric_response(raw, rubric)
        })?;
        into_record(target, outcome, |r| {
            let score = rubric_score(&r.selections, rubric).ok();
            (score, Some(r.selections.clone()), r.feedback.clone())
        })
    } else {
        let schema = grade_response_schema();
        let request = CompletionRequest {
            prompt: &prompt.text,
            config: &config.model,
            response_schema: Some(&schema),
        };
        let outcome = grade_with_retry(&request, ctx.backend, ctx.prices, parse_grade_response)?;
        into_record(target, outcome, |g| {
            (Some(f64::from(g.grade)), None, g.feedback.clone())
        })
    };
    record.example_ids = prompt.example_ids;
    record.short_pool = short_pool;
    Ok(record)
}

type Prediction = (Option<f64>, Option<BTreeMap<u32, bool>>, String);

fn into_record<T>(target: &Submission, outcome: RetryOutcome<T>, extract: impl Fn(&T) -> Prediction) -> GradedRecord {
    match outcome {
        RetryOutcome::Parsed {
            value,
            raw_response,
            attempts,
            usage,
        } => {
            let (predicted_percent, predicted_items, feedback) = extract(&value);
            GradedRecord {
                submission_id: target.submission_id.clone(),
                predicted_percent,
                predicted_items,
                feedback,
                attempts,
                status: RecordStatus::Ok,
                failure: None,
                raw_response: Some(raw_response),
                usage,
                example_ids: Vec::new(),
                short_pool: false,
            }
        }
        RetryOutcome::Failed {
            cause,
            last_raw_response,
            attempts,
            usage,
        } => GradedRecord {
            attempts,
            usage,
            raw_response: last_raw_response,
            ..GradedRecord::failed(&target.submission_id, Vec::new(), cause)
        },
    }
}

/// Uniform sample of `n` submissions without replacement, kept in dataset
/// order; questions are restricted to the ones still referenced.
pub fn sample_subset(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset, EngineError> {
    let available = dataset.submissions.len();
    if n == 0 || n > available {
        return Err(EngineError::SampleTooLarge {
            requested: n,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, available, n).into_vec();
    picked.sort_unstable();
    let submissions: Vec<Submission> = picked.into_iter().map(|i| dataset.submissions[i].clone()).collect();
    let questions = dataset
        .questions
        .iter()
        .filter(|q| submissions.iter().any(|s| s.question_id == q.question_id))
        .cloned()
        .collect();
    Ok(Dataset {
        name: dataset.name.clone(),
        questions,
        submissions,
        scale: dataset.scale.clone(),
    })
}

/// Grades every submission of `dataset` (or a seeded sample of it).
///
/// Individual failures are recorded and the batch continues; fatal errors
/// stop all workers and are returned.
pub fn grade_batch(dataset: &Dataset, config: &RunConfig, ctx: &GradingContext<'_>) -> Result<RunResult, EngineError> {
    config.validate()?;
    let sampled;
    let targets: &Dataset = match config.sample_size {
        Some(n) => {
            sampled = sample_subset(dataset, n, config.sample_seed.unwrap_or(0))?;
            &sampled
        }
        None => dataset,
    };
    let questions: HashMap<&str, &Question> = ctx
        .dataset
        .questions
        .iter()
        .map(|q| (q.question_id.as_str(), q))
        .collect();
    let mut jobs = Vec::with_capacity(targets.submissions.len());
    for s in &targets.submissions {
        let q = questions
            .get(s.question_id.as_str())
            .ok_or_else(|| EngineError::Corpus(CorpusError::UnknownQuestion(s.question_id.clone())))?;
        if config.rubric_mode && q.rubric.is_none() {
            return Err(EngineError::Config(format!(
                "rubric mode needs a rubric on question {}",
                q.question_id
            )));
        }
        jobs.push((s, *q));
    }

    let started_at = Utc::now();
    let workers = config.parallelism.min(jobs.len()).max(1);
    let records = if workers == 1 {
        jobs.iter()
            .map(|(s, q)| grade_submission(s, q, config, ctx))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        run_parallel(&jobs, workers, config, ctx)?
    };
    let finished_at = Utc::now();
    let totals = records.iter().map(|r| r.usage).sum();
    Ok(RunResult {
        config: config.clone(),
        records,
        started_at,
        finished_at,
        totals,
    })
}

fn run_parallel(
    jobs: &[(&Submission, &Question)],
    workers: usize,
    config: &RunConfig,
    ctx: &GradingContext<'_>,
) -> Result<Vec<GradedRecord>, EngineError> {
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let slots: Vec<Mutex<Option<GradedRecord>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let fatal: Mutex<Option<(usize, EngineError)>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((s, q)) = jobs.get(i) else { break };
                match grade_submission(s, q, config, ctx) {
                    Ok(record) => *slots[i].lock().expect("slot poisoned") = Some(record),
                    Err(e) => {
                        abort.store(true, Ordering::SeqCst);
                        let mut slot = fatal.lock().expect("fatal slot poisoned");
                        // keep the error of the earliest job for a stable message
                        if slot.as_ref().is_none_or(|(j, _)| i < *j) {
                            *slot = Some((i, e));
                        }
                        break;
                    }
                }
            });
        }
    });

    if let Some((_, e)) = fatal.into_inner().expect("fatal slot poisoned") {
        return Err(e);
    }
    Ok(slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot poisoned").expect("every job ran"))
        .collect())
}

/// Weighted rubric score in percent: selected weight over total weight.
pub fn rubric_score(selections: &BTreeMap<u32, bool>, rubric: &Rubric) -> Result<f64, EngineError> {
    if selections.len() != rubric.len() || !rubric.numbers().all(|n| selections.contains_key(&n)) {
        return Err(EngineError::RubricMismatch(format!(
            "got items {:?}, rubric has {:?}",
            selections.keys().collect::<Vec<_>>(),
            rubric.numbers().collect::<Vec<_>>()
        )));
    }
    let total: f64 = rubric.items.iter().map(|i| i.weight).sum();
    let earned: f64 = rubric
        .items
        .iter()
        .filter(|i| selections[&i.number])
        .map(|i| i.weight)
        .sum();
    Ok(100.0 * earned / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ScoreScale;
    use crate::embeddings::MockEmbedder;
    use crate::llm::{MockCompletionBackend, MockReply, MockRule, MockScript};

    fn dataset(n: usize) -> Dataset {
        let mut text = String::from(r#"{"type":"question","question_id":"q","prompt_text":"Define a stack."}"#);
        text.push('\n');
        for i in 0..n {
            text.push_str(&format!(
                r#"{{"type":"submission","submission_id":"s{i:02}","question_id":"q","response_text":"answer {i}","gold_raw":{}}}"#,
                i % 6
            ));
            text.push('\n');
        }
        Dataset::from_jsonl("toy", &text, &ScoreScale::numeric(0.0, 5.0)).unwrap()
    }

    fn model() -> ModelConfig {
        ModelConfig {
            retry_backoff_ms: 0,
            ..Default::default()
        }
    }

    #[test]
    fn none_strategy_passes_grade_through() {
        let d = dataset(3);
        let backend = MockCompletionBackend::fixed(r#"{"grade": 70, "feedback": "ok"}"#);
        let template = PromptTemplate::default();
        let store = EmbeddingStore::new("none");
        let ctx = GradingContext {
            dataset: &d,
            store: &store,
            backend: &backend,
            template: &template,
            prices: &PriceTable::default(),
        };
        let cfg = RunConfig::new("toy", SelectionStrategy::none(), model());
        let r = grade_submission(&d.submissions[0], &d.questions[0], &cfg, &ctx).unwrap();
        assert_eq!(r.predicted_percent, Some(70.0));
        assert!(r.example_ids.is_empty());
        assert_eq!(r.status, RecordStatus::Ok);
        assert_eq!(r.attempts, 1);
    }

    #[test]
    fn batch_isolates_failures() {
        let d = dataset(10);
        let script = MockScript {
            rules: vec![MockRule {
                contains: Some("answer 4\n".into()),
                responses: vec![MockReply::text("garbage")],
                ..Default::default()
            }],
            ..MockScript::default()
        };
        let backend = MockCompletionBackend::new(script);
        let template = PromptTemplate::default();
        let store = EmbeddingStore::new("none");
        let ctx = GradingContext {
            dataset: &d,
            store: &store,
            backend: &backend,
            template: &template,
            prices: &PriceTable::default(),
        };
        let cfg = RunConfig::new("toy", SelectionStrategy::none(), model());
        let run = grade_batch(&d, &cfg, &ctx).unwrap();
        assert_eq!(run.records.len(), 10);
        let failed: Vec<_> = run.records.iter().filter(|r| !r.is_ok()).collect();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].submission_id, "s04");
        assert_eq!(failed[0].attempts, 3);
        assert_eq!(failed[0].raw_response.as_deref(), Some("garbage"));
        assert!(failed[0].predicted_percent.is_none());
        let ids: Vec<_> = run.records.iter().map(|r| r.submission_id.clone()).collect();
        let expected: Vec<_> = d.submissions.iter().map(|s| s.submission_id.clone()).collect();
        assert_eq!(ids, expected);
        assert_eq!(
            run.totals.prompt_tokens,
            run.records.iter().map(|r| r.usage.prompt_tokens).sum::<u64>()
        );
    }

    #[test]
    fn fatal_error_aborts_batch() {
        let d = dataset(8);
        let script: MockScript =
            serde_json::from_str(r#"{"rules": [{"contains": "answer 5", "responses": [{"error": "auth"}]}]}"#).unwrap();
        let backend = MockCompletionBackend::new(script);
        let template = PromptTemplate::default();
        let store = EmbeddingStore::new("none");
        let ctx = GradingContext {
            dataset: &d,
            store: &store,
            backend: &backend,
            template: &template,
            prices: &PriceTable::default(),
        };
        for parallelism in [1, 4] {
            let cfg = RunConfig {
                parallelism,
                ..RunConfig::new("toy", SelectionStrategy::none(), model())
            };
            assert!(matches!(
                grade_batch(&d, &cfg, &ctx),
                Err(EngineError::Fatal(BackendError::Auth(_)))
            ));
        }
    }

    #[test]
    fn rag_needs_embeddings() {
        let d = dataset(4);
        let backend = MockCompletionBackend::new(MockScript::default());
        let template = PromptTemplate::default();
        let mut store = EmbeddingStore::new("mock");
        let ctx_fn = |store: &EmbeddingStore| {
            let ctx = GradingContext {
                dataset: &d,
                store,
                backend: &backend,
                template: &template,
                prices: &PriceTable::default(),
            };
            grade_batch(&d, &RunConfig::new("toy", SelectionStrategy::rag(2), model()), &ctx).map(|r| r.records.len())
        };
        assert!(matches!(
            ctx_fn(&store),
            Err(EngineError::Selection(EmbeddingError::Missing(_)))
        ));
        prepare_embeddings(&d, &MockEmbedder::default(), &mut store).unwrap();
        assert_eq!(ctx_fn(&store).unwrap(), 4);
    }

    #[test]
    fn sample_subset_properties() {
        let d = dataset(20);
        assert_eq!(sample_subset(&d, 20, 3).unwrap(), d);
        let a = sample_subset(&d, 7, 11).unwrap();
        assert_eq!(a, sample_subset(&d, 7, 11).unwrap());
        assert_eq!(a.submissions.len(), 7);
        let mut ids: Vec<_> = a.submissions.iter().map(|s| &s.submission_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 7);
        assert!(a.submissions.iter().all(|s| d.submission(&s.submission_id) == Some(s)));
        assert!(matches!(
            sample_subset(&d, 21, 0),
            Err(EngineError::SampleTooLarge { .. })
        ));
        assert!(matches!(
            sample_subset(&d, 0, 0),
            Err(EngineError::SampleTooLarge { .. })
        ));
    }

    #[test]
    fn rubric_scores() {
        let rubric = Rubric::induction();
        let all: BTreeMap<u32, bool> = (1..=7).map(|n| (n, true)).collect();
        let none: BTreeMap<u32, bool> = (1..=7).map(|n| (n, false)).collect();
        let four: BTreeMap<u32, bool> = (1..=7).map(|n| (n, n <= 4)).collect();
        assert_eq!(rubric_score(&all, &rubric).unwrap(), 100.0);
        assert_eq!(rubric_score(&none, &rubric).unwrap(), 0.0);
        assert!((rubric_score(&four, &rubric).unwrap() - 400.0 / 7.0).abs() < 1e-12);
        let partial: BTreeMap<u32, bool> = (1..=6).map(|n| (n, true)).collect();
        assert!(matches!(
            rubric_score(&partial, &rubric),
            Err(EngineError::RubricMismatch(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = RunConfig::new("x", SelectionStrategy::none(), model());
        cfg.parallelism = 0;
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::new(
            "x",
            SelectionStrategy {
                seed: None,
                ..SelectionStrategy::random(5, 0)
            },
            model(),
        );
        assert!(cfg.validate().is_err());
    }
}
