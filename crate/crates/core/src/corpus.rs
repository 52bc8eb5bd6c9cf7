//! Normalized graded-answer datasets.
//!
//! Every dataset, whatever its origin, is stored as JSONL with one question or
//! submission per line, plus a small descriptor file that names the dataset
//! and declares how its gold scores map onto percentages.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rubric::{Rubric, RubricError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("submissions reference unknown questions: {}", submission_ids.join(", "))]
    DanglingQuestion { submission_ids: Vec<String> },
    #[error("duplicate question_id {0}")]
    DuplicateQuestion(String),
    #[error("duplicate submission_id {0}")]
    DuplicateSubmission(String),
    #[error("question {0} has an empty prompt_text")]
    EmptyPrompt(String),
    #[error("question {question_id}: {source}")]
    Rubric {
        question_id: String,
        #[source]
        source: RubricError,
    },
    #[error("submission {submission_id}: {source}")]
    Score {
        submission_id: String,
        #[source]
        source: ScoreError,
    },
    #[error("submission {submission_id}: {message}")]
    GoldItems { submission_id: String, message: String },
    #[error("invalid descriptor: {0}")]
    Descriptor(String),
    #[error("unknown question {0}")]
    UnknownQuestion(String),
}

impl CorpusError {
    /// Stable machine-readable code for error listings.
    pub fn code(&self) -> &'static str {
        match self {
            CorpusError::Io { .. } => "io",
            CorpusError::Malformed { .. } => "malformed-record",
            CorpusError::DanglingQuestion { .. } => "dangling-question",
            CorpusError::DuplicateQuestion(_) => "duplicate-question",
            CorpusError::DuplicateSubmission(_) => "duplicate-submission",
            CorpusError::EmptyPrompt(_) => "empty-prompt",
            CorpusError::Rubric { .. } => "invalid-rubric",
            CorpusError::Score { .. } => "invalid-score",
            CorpusError::GoldItems { .. } => "invalid-gold-items",
            CorpusError::Descriptor(_) => "invalid-descriptor",
            CorpusError::UnknownQuestion(_) => "unknown-question",
        }
    }

    /// Identifiers the error is about, if any.
    pub fn ids(&self) -> Vec<String> {
        match self {
            CorpusError::DanglingQuestion { submission_ids } => submission_ids.clone(),
            CorpusError::DuplicateQuestion(id)
            | CorpusError::DuplicateSubmission(id)
            | CorpusError::EmptyPrompt(id)
            | CorpusError::UnknownQuestion(id) => vec![id.clone()],
            CorpusError::Rubric { question_id, .. } => vec![question_id.clone()],
            CorpusError::Score { submission_id, .. } | CorpusError::GoldItems { submission_id, .. } => {
                vec![submission_id.clone()]
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("score {raw} outside [{min}, {max}]")]
    OutOfRange { raw: f64, min: f64, max: f64 },
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("numeric score {0} given for a label-map scale")]
    NumberForLabelScale(f64),
    #[error("label {0:?} given for a numeric scale")]
    LabelForNumericScale(String),
    #[error("score is not finite")]
    NotFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleKind {
    NumericRange,
    LabelMap,
}

/// How a dataset's native gold scores map to percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreScale {
    pub kind: ScaleKind,
    #[serde(default)]
    pub min: f64,
    #[serde(default = "hundred")]
    pub max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<BTreeMap<String, f64>>,
}

fn hundred() -> f64 {
    100.0
}

impl ScoreScale {
    pub fn numeric(min: f64, max: f64) -> Self {
        Self {
            kind: ScaleKind::NumericRange,
            min,
            max,
            labels: None,
        }
    }

    pub fn labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        Self {
            kind: ScaleKind::LabelMap,
            min: 0.0,
            max: 100.0,
            labels: Some(labels.into_iter().map(|(k, v)| (k.into(), v)).collect()),
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        match self.kind {
            ScaleKind::NumericRange => {
                if !(self.min.is_finite() && self.max.is_finite() && self.min < self.max) {
                    return Err(CorpusError::Descriptor(format!(
                        "numeric-range scale needs finite min < max, got [{}, {}]",
                        self.min, self.max
                    )));
                }
            }
            ScaleKind::LabelMap => {
                let labels =
                    self.labels.as_ref().filter(|l| !l.is_empty()).ok_or_else(|| {
                        CorpusError::Descriptor("label-map scale needs a non-empty labels map".into())
                    })?;
                if let Some((label, value)) = labels.iter().find(|(_, v)| !(0.0..=100.0).contains(*v)) {
                    return Err(CorpusError::Descriptor(format!(
                        "label {label:?} maps to {value}, outside [0, 100]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A gold score as it appears in the source data: a number or a category label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawScore {
    Number(f64),
    Label(String),
}

impl From<f64> for RawScore {
    fn from(v: f64) -> Self {
        RawScore::Number(v)
    }
}

impl From<&str> for RawScore {
    fn from(v: &str) -> Self {
        RawScore::Label(v.to_owned())
    }
}

/// Maps a raw score to a percentage in `[0, 100]`.
///
/// Numeric scales interpolate linearly (`min` to 0, `max` to 100); label
/// scales look the label up. Results are not rounded.
pub fn normalize_score(raw: &RawScore, scale: &ScoreScale) -> Result<f64, ScoreError> {
    match (scale.kind, raw) {
        (ScaleKind::NumericRange, RawScore::Number(x)) => {
            let x = *x;
            if !x.is_finite() {
                return Err(ScoreError::NotFinite);
            }
            if x < scale.min || x > scale.max {
                return Err(ScoreError::OutOfRange {
                    raw: x,
                    min: scale.min,
                    max: scale.max,
                });
            }
            if x == scale.max {
                return Ok(100.0);
            }
            Ok(100.0 * (x - scale.min) / (scale.max - scale.min))
        }
        (ScaleKind::LabelMap, RawScore::Label(label)) => scale
            .labels
            .as_ref()
            .and_then(|l| l.get(label))
            .copied()
            .ok_or_else(|| ScoreError::UnknownLabel(label.clone())),
        (ScaleKind::NumericRange, RawScore::Label(label)) => Err(ScoreError::LabelForNumericScale(label.clone())),
        (ScaleKind::LabelMap, RawScore::Number(x)) => Err(ScoreError::NumberForLabelScale(*x)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub prompt_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_solution: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rubric: Option<Rubric>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub submission_id: String,
    pub question_id: String,
    pub response_text: String,
    pub gold_raw: RawScore,
    pub gold_percent: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_items: Option<BTreeMap<u32, bool>>,
    /// Instructor feedback, shown alongside the grade when used as an example.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
}

/// Name and scale of a dataset, stored next to the JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    pub scale: ScoreScale,
}

impl DatasetDescriptor {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = read_to_string(path)?;
        let descriptor: DatasetDescriptor =
            serde_json::from_str(&text).map_err(|e| CorpusError::Descriptor(format!("{}: {e}", path.display())))?;
        descriptor.scale.validate()?;
        Ok(descriptor)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("descriptor serializes");
        s.push('\n');
        s
    }
}

/// Default sidecar location for a dataset file: `foo.jsonl` -> `foo.descriptor.json`.
pub fn descriptor_path_for(dataset: &Path) -> PathBuf {
    dataset.with_extension("descriptor.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub questions: Vec<Question>,
    pub submissions: Vec<Submission>,
    pub scale: ScoreScale,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Line {
    Question(QuestionLine),
    Submission(SubmissionLine),
}

#[derive(Serialize, Deserialize)]
struct QuestionLine {
    question_id: String,
    prompt_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference_solution: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rubric: Option<Rubric>,
}

#[derive(Serialize, Deserialize)]
struct SubmissionLine {
    submission_id: String,
    question_id: String,
    response_text: String,
    gold_raw: RawScore,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "item_keys")]
    gold_items: Option<BTreeMap<u32, bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feedback: Option<String>,
}

// Tagged-enum deserialization buffers map keys as strings, so integer
// keys are converted by hand.
mod item_keys {
    use std::collections::BTreeMap;

    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(items: &Option<BTreeMap<u32, bool>>, ser: S) -> Result<S::Ok, S::Error> {
        match items {
            Some(map) => ser.collect_map(map.iter().map(|(k, v)| (k.to_string(), v))),
            None => ser.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Option<BTreeMap<u32, bool>>, D::Error> {
        let raw: Option<BTreeMap<String, bool>> = Option::deserialize(de)?;
        raw.map(|m| {
            m.into_iter()
                .map(|(k, v)| {
                    k.parse::<u32>()
                        .map(|n| (n, v))
                        .map_err(|_| D::Error::custom(format!("gold_items key {k:?} is not an item number")))
                })
                .collect()
        })
        .transpose()
    }
}

/// Loads a normalized JSONL dataset, naming it after the file stem.
pub fn load_dataset(path: &Path, scale: &ScoreScale) -> Result<Dataset, CorpusError> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let text = read_to_string(path)?;
    Dataset::from_jsonl(&name, &text, scale)
}

/// Loads a dataset with an explicit descriptor (name + scale).
pub fn load_with_descriptor(path: &Path, descriptor: &DatasetDescriptor) -> Result<Dataset, CorpusError> {
    let text = read_to_string(path)?;
    Dataset::from_jsonl(&descriptor.name, &text, &descriptor.scale)
}

/// Writes the dataset as normalized JSONL: questions first, then submissions.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.to_owned(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(dataset.to_jsonl().as_bytes()).map_err(io)?;
    Ok(())
}

fn read_to_string(path: &Path) -> Result<String, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })?;
    Ok(text.strip_prefix('\u{feff}').map(str::to_owned).unwrap_or(text))
}

impl Dataset {
    /// Parses and validates JSONL text.
    pub fn from_jsonl(name: &str, text: &str, scale: &ScoreScale) -> Result<Self, CorpusError> {
        scale.validate()?;
        let mut questions = Vec::new();
        let mut submission_lines = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let line: Line = serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
            match line {
                Line::Question(q) => questions.push(Question {
                    question_id: q.question_id,
                    prompt_text: q.prompt_text,
                    reference_solution: q.reference_solution,
                    rubric: q.rubric,
                }),
                Line::Submission(s) => submission_lines.push(s),
            }
        }

        let submissions = submission_lines
            .into_iter()
            .map(|s| {
                let gold_percent = normalize_score(&s.gold_raw, scale).map_err(|source| CorpusError::Score {
                    submission_id: s.submission_id.clone(),
                    source,
                })?;
                Ok(Submission {
                    submission_id: s.submission_id,
                    question_id: s.question_id,
                    response_text: s.response_text,
                    gold_raw: s.gold_raw,
                    gold_percent,
                    gold_items: s.gold_items,
                    feedback: s.feedback,
                })
            })
            .collect::<Result<Vec<_>, CorpusError>>()?;

        let dataset = Dataset {
            name: name.to_owned(),
            questions,
            submissions,
            scale: scale.clone(),
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for q in &self.questions {
            let line = Line::Question(QuestionLine {
                question_id: q.question_id.clone(),
                prompt_text: q.prompt_text.clone(),
                reference_solution: q.reference_solution.clone(),
                rubric: q.rubric.clone(),
            });
            out.push_str(&serde_json::to_string(&line).expect("question serializes"));
            out.push('\n');
        }
        for s in &self.submissions {
            let line = Line::Submission(SubmissionLine {
                submission_id: s.submission_id.clone(),
                question_id: s.question_id.clone(),
                response_text: s.response_text.clone(),
                gold_raw: s.gold_raw.clone(),
                gold_items: s.gold_items.clone(),
                feedback: s.feedback.clone(),
            });
            out.push_str(&serde_json::to_string(&line).expect("submission serializes"));
            out.push('\n');
        }
        out
    }

    /// Checks every dataset invariant.
    pub fn validate(&self) -> Result<(), CorpusError> {
        self.scale.validate()?;
        let mut by_id: HashMap<&str, &Question> = HashMap::new();
        for q in &self.questions {
            if by_id.insert(&q.question_id, q).is_some() {
                return Err(CorpusError::DuplicateQuestion(q.question_id.clone()));
            }
            if q.prompt_text.trim().is_empty() {
                return Err(CorpusError::EmptyPrompt(q.question_id.clone()));
            }
            if let Some(rubric) = &q.rubric {
                rubric.validate().map_err(|source| CorpusError::Rubric {
                    question_id: q.question_id.clone(),
                    source,
                })?;
            }
        }

        let dangling: Vec<String> = self
            .submissions
            .iter()
            .filter(|s| !by_id.contains_key(s.question_id.as_str()))
            .map(|s| s.submission_id.clone())
            .collect();
        if !dangling.is_empty() {
            return Err(CorpusError::DanglingQuestion {
                submission_ids: dangling,
            });
        }

        let mut seen = HashSet::new();
        for s in &self.submissions {
            if !seen.insert(s.submission_id.as_str()) {
                return Err(CorpusError::DuplicateSubmission(s.submission_id.clone()));
            }
            if !(0.0..=100.0).contains(&s.gold_percent) {
                return Err(CorpusError::Score {
                    submission_id: s.submission_id.clone(),
                    source: ScoreError::OutOfRange {
                        raw: s.gold_percent,
                        min: 0.0,
                        max: 100.0,
                    },
                });
            }
            if let Some(items) = &s.gold_items {
                let question = by_id[s.question_id.as_str()];
                let Some(rubric) = &question.rubric else {
                    return Err(CorpusError::GoldItems {
                        submission_id: s.submission_id.clone(),
                        message: format!("question {} has no rubric", question.question_id),
                    });
                };
                let expected: Vec<u32> = (1..=rubric.len() as u32).collect();
                let got: Vec<u32> = items.keys().copied().collect();
                if expected != got {
                    return Err(CorpusError::GoldItems {
                        submission_id: s.submission_id.clone(),
                        message: format!("gold_items keys {got:?} do not match rubric items {expected:?}"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn question(&self, question_id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.question_id == question_id)
    }

    pub fn submission(&self, submission_id: &str) -> Option<&Submission> {
        self.submissions.iter().find(|s| s.submission_id == submission_id)
    }
}

/// All graded submissions for `question_id` except `exclude`, sorted by id.
pub fn example_pool<'a>(
    dataset: &'a Dataset,
    question_id: &str,
    exclude: &str,
) -> Result<Vec<&'a Submission>, CorpusError> {
    if dataset.question(question_id).is_none() {
        return Err(CorpusError::UnknownQuestion(question_id.to_owned()));
    }
    let mut pool: Vec<&Submission> = dataset
        .submissions
        .iter()
        .filter(|s| s.question_id == question_id && s.submission_id != exclude)
        .collect();
    pool.sort_by(|a, b| a.submission_id.cmp(&b.submission_id));
    Ok(pool)
}
