//! Accuracy statistics for grading runs.
//!
//! All scores are percentages. Quantiles use the midpoint rule: for
//! probability `q` over `n` sorted values the position is `q * (n - 1)` and
//! the result is the mean of the values at its floor and ceiling. t-tests
//! are two-sided; Welch's unequal-variance test is the default and the
//! pooled-variance test is available for sensitivity checks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::corpus::Dataset;
use crate::engine::{RunConfig, RunResult};
use crate::rubric::Rubric;

pub const REPORT_FILE: &str = "report.json";
pub const ERRORS_FILE: &str = "errors.csv";
pub const COMPARISON_FILE: &str = "comparison.json";
pub const REPORT_SCHEMA: &str = include_str!("../assets/schemas/report.schema.json");
pub const COMPARISON_SCHEMA: &str = include_str!("../assets/schemas/comparison.schema.json");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no scores to evaluate")]
    Empty,
    #[error("score {value} at pair {index} is outside [0, 100]")]
    OutOfRange { index: usize, value: f64 },
    #[error("correlation is undefined: {0} scores have zero variance")]
    UndefinedCorrelation(&'static str),
    #[error("t-test needs at least 2 values per sample, got {len_a} and {len_b}")]
    SampleTooSmall { len_a: usize, len_b: usize },
    #[error("t-test is undefined: both samples have zero variance")]
    ZeroVariance,
    #[error("item maps are misaligned: {0}")]
    Misaligned(String),
    #[error("run grades submission {0}, which is not in the dataset")]
    UnknownSubmission(String),
    #[error("the runs have no successfully graded submission in common")]
    EmptyIntersection,
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Pairs of (predicted, gold) percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedScores {
    pairs: Vec<(f64, f64)>,
}

impl PairedScores {
    pub fn new(pairs: Vec<(f64, f64)>) -> Result<Self, EvalError> {
        for (index, &(p, g)) in pairs.iter().enumerate() {
            for value in [p, g] {
                if !(0.0..=100.0).contains(&value) {
                    return Err(EvalError::OutOfRange { index, value });
                }
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(f64, f64)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn abs_errors(&self) -> Vec<f64> {
        self.pairs.iter().map(|(p, g)| (p - g).abs()).collect()
    }
}

pub fn rmse(scores: &PairedScores) -> Result<f64, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let sse: f64 = scores.pairs.iter().map(|(p, g)| (p - g) * (p - g)).sum();
    Ok((sse / scores.len() as f64).sqrt())
}

/// Sample Pearson correlation, accumulated in a single pass with running
/// means and co-moments.
pub fn pearson_r(scores: &PairedScores) -> Result<f64, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut mx, mut my, mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &(x, y)) in scores.pairs.iter().enumerate() {
        let n = (i + 1) as f64;
        let dx = x - mx;
        let dy = y - my;
        mx += dx / n;
        my += dy / n;
        cxx += dx * (x - mx);
        cyy += dy * (y - my);
        cxy += dx * (y - my);
    }
    if cxx <= 0.0 {
        return Err(EvalError::UndefinedCorrelation("predicted"));
    }
    if cyy <= 0.0 {
        return Err(EvalError::UndefinedCorrelation("gold"));
    }
    Ok((cxy / (cxx * cyy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Midpoint-rule quantile of ascending `sorted` values.
pub fn midpoint_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    (sorted[pos.floor() as usize] + sorted[pos.ceil() as usize]) / 2.0
}

pub fn quartiles(values: &[f64]) -> Result<Quartiles, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(Quartiles {
        min: v[0],
        q1: midpoint_quantile(&v, 0.25),
        median: midpoint_quantile(&v, 0.5),
        q3: midpoint_quantile(&v, 0.75),
        max: v[v.len() - 1],
    })
}

pub fn abs_error_stats(scores: &PairedScores) -> Result<Quartiles, EvalError> {
    quartiles(&scores.abs_errors())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemAccuracy {
    pub per_item: BTreeMap<u32, f64>,
    pub overall: f64,
}

#[derive(Debug, Default, Clone)]
struct ItemTally {
    hits: BTreeMap<u32, (usize, usize)>,
}

impl ItemTally {
    fn add(
        &mut self,
        predicted: &BTreeMap<u32, bool>,
        gold: &BTreeMap<u32, bool>,
        rubric: &Rubric,
        row: usize,
    ) -> Result<(), EvalError> {
        for (side, map) in [("predicted", predicted), ("gold", gold)] {
            if map.len() != rubric.len() || !rubric.numbers().all(|n| map.contains_key(&n)) {
                return Err(EvalError::Misaligned(format!(
                    "{side} items of row {row} are {:?}, rubric has {:?}",
                    map.keys().collect::<Vec<_>>(),
                    rubric.numbers().collect::<Vec<_>>()
                )));
            }
        }
        for n in rubric.numbers() {
            let e = self.hits.entry(n).or_default();
            e.1 += 1;
            if predicted[&n] == gold[&n] {
                e.0 += 1;
            }
        }
        Ok(())
    }

    fn finish(self) -> Option<ItemAccuracy> {
        let (hit, total) = self.hits.values().fold((0, 0), |(h, t), (a, b)| (h + a, t + b));
        if total == 0 {
            return None;
        }
        Some(ItemAccuracy {
            per_item: self
                .hits
                .into_iter()
                .map(|(n, (h, t))| (n, h as f64 / t as f64))
                .collect(),
            overall: hit as f64 / total as f64,
        })
    }
}

/// Per-item and overall agreement between predicted and gold selections.
pub fn item_accuracy(
    predicted: &[BTreeMap<u32, bool>],
    gold: &[BTreeMap<u32, bool>],
    rubric: &Rubric,
) -> Result<ItemAccuracy, EvalError> {
    if predicted.len() != gold.len() {
        return Err(EvalError::Misaligned(format!(
            "{} predicted rows, {} gold rows",
            predicted.len(),
            gold.len()
        )));
    }
    let mut tally = ItemTally::default();
    for (row, (p, g)) in predicted.iter().zip(gold).enumerate() {
        tally.add(p, g, rubric, row)?;
    }
    tally.finish().ok_or(EvalError::Empty)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TTestVariant {
    Welch,
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub variant: TTestVariant,
    pub t: f64,
    pub degrees_of_freedom: f64,
    pub p_two_sided: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub n_a: usize,
    pub n_b: usize,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn two_sided_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("degrees of freedom are positive");
    (2.0 * dist.cdf(-t.abs())).clamp(f64::MIN_POSITIVE, 1.0)
}

fn t_test(a: &[f64], b: &[f64], variant: TTestVariant) -> Result<TTestResult, EvalError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EvalError::SampleTooSmall {
            len_a: a.len(),
            len_b: b.len(),
        });
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    let (se2, df) = match variant {
        TTestVariant::Welch => {
            let (sa, sb) = (va / na, vb / nb);
            let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
            (sa + sb, df)
        }
        TTestVariant::Pooled => {
            let df = na + nb - 2.0;
            let sp = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
            (sp * (1.0 / na + 1.0 / nb), df)
        }
    };
    let t = (ma - mb) / se2.sqrt();
    Ok(TTestResult {
        variant,
        t,
        degrees_of_freedom: df,
        p_two_sided: two_sided_p(t, df),
        mean_a: ma,
        mean_b: mb,
        n_a: a.len(),
        n_b: b.len(),
    })
}

pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult, EvalError> {
    t_test(a, b, TTestVariant::Welch)
}

pub fn pooled_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult, EvalError> {
    t_test(a, b, TTestVariant::Pooled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rmse: f64,
    /// `None` when either side has zero variance; see `pearson_note`.
    pub pearson_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pearson_note: Option<String>,
    pub mean_abs_error: f64,
    pub abs_error_quartiles: Quartiles,
    pub n_ok: usize,
    pub n_failed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_item_accuracy: Option<BTreeMap<u32, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall_item_accuracy: Option<f64>,
}

/// One evaluated submission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub submission_id: String,
    pub predicted_percent: f64,
    pub gold_percent: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub config: RunConfig,
    pub report: EvaluationReport,
    #[serde(skip)]
    pub errors: Vec<ErrorRow>,
}

fn rubric_for<'a>(gold: &'a Dataset, submission_id: &str) -> Option<&'a Rubric> {
    let s = gold.submission(submission_id)?;
    gold.question(&s.question_id)?.rubric.as_ref()
}

/// Evaluates the ok records of `run` whose ids pass `keep`. `n_failed`
/// always counts every failed record of the run.
fn evaluate_filtered(run: &RunResult, gold: &Dataset, keep: impl Fn(&str) -> bool) -> Result<RunEvaluation, EvalError> {
    let mut rows = Vec::new();
    let mut tally = ItemTally::default();
    let mut n_failed = 0;
    for r in &run.records {
        let Some(predicted) = r.predicted_percent.filter(|_| r.is_ok()) else {
            n_failed += usize::from(!r.is_ok());
            continue;
        };
        if !keep(&r.submission_id) {
            continue;
        }
        let s = gold
            .submission(&r.submission_id)
            .ok_or_else(|| EvalError::UnknownSubmission(r.submission_id.clone()))?;
        if let (Some(p), Some(g), Some(rubric)) =
            (&r.predicted_items, &s.gold_items, rubric_for(gold, &s.submission_id))
        {
            tally.add(p, g, rubric, rows.len())?;
        }
        rows.push(ErrorRow {
            submission_id: r.submission_id.clone(),
            predicted_percent: predicted,
            gold_percent: s.gold_percent,
            abs_error: (predicted - s.gold_percent).abs(),
        });
    }
    let scores = PairedScores::new(rows.iter().map(|e| (e.predicted_percent, e.gold_percent)).collect())?;
    let (pearson, pearson_note) = match pearson_r(&scores) {
        Ok(r) => (Some(r), None),
        Err(EvalError::Empty) => return Err(EvalError::Empty),
        Err(e) => (None, Some(e.to_string())),
    };
    let abs = scores.abs_errors();
    let items = tally.finish();
    let report = EvaluationReport {
        rmse: rmse(&scores)?,
        pearson_r: pearson,
        pearson_note,
        mean_abs_error: abs.iter().sum::<f64>() / abs.len() as f64,
        abs_error_quartiles: quartiles(&abs)?,
        n_ok: rows.len(),
        n_failed,
        per_item_accuracy: items.as_ref().map(|i| i.per_item.clone()),
        overall_item_accuracy: items.map(|i| i.overall),
    };
    Ok(RunEvaluation {
        config: run.config.clone(),
        report,
        errors: rows,
    })
}

/// Scores every successful record of a run against the dataset's gold
/// percentages. Failed records are counted, never scored.
pub fn evaluate_run(run: &RunResult, gold: &Dataset) -> Result<RunEvaluation, EvalError> {
    evaluate_filtered(run, gold, |_| true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub n_common: usize,
    pub run_a: RunEvaluation,
    pub run_b: RunEvaluation,
    /// Welch test over the absolute errors of the common submissions;
    /// `None` when it is undefined, with the reason in `t_test_note`.
    pub welch: Option<TTestResult>,
    pub pooled: Option<TTestResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_test_note: Option<String>,
}

/// Compares two runs on the submissions both graded successfully.
pub fn compare_runs(run_a: &RunResult, run_b: &RunResult, gold: &Dataset) -> Result<Comparison, EvalError> {
    let ok_ids = |run: &RunResult| -> std::collections::BTreeSet<String> {
        run.records
            .iter()
            .filter(|r| r.is_ok() && r.predicted_percent.is_some())
            .map(|r| r.submission_id.clone())
            .collect()
    };
    let (ids_a, ids_b) = (ok_ids(run_a), ok_ids(run_b));
    let common: std::collections::BTreeSet<String> = ids_a.intersection(&ids_b).cloned().collect();
    if common.is_empty() {
        return Err(EvalError::EmptyIntersection);
    }
    let a = evaluate_filtered(run_a, gold, |id| common.contains(id))?;
    let b = evaluate_filtered(run_b, gold, |id| common.contains(id))?;
    let errs_a: Vec<f64> = a.errors.iter().map(|e| e.abs_error).collect();
    let errs_b: Vec<f64> = b.errors.iter().map(|e| e.abs_error).collect();
    let (welch, pooled, t_test_note) = match (welch_t_test(&errs_a, &errs_b), pooled_t_test(&errs_a, &errs_b)) {
        (Ok(w), Ok(p)) => (Some(w), Some(p), None),
        (Err(e), _) | (_, Err(e)) => (None, None, Some(e.to_string())),
    };
    Ok(Comparison {
        n_common: common.len(),
        run_a: a,
        run_b: b,
        welch,
        pooled,
        t_test_note,
    })
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes `report.json` and `errors.csv` into `dir`.
pub fn write_report(dir: &Path, evaluation: &RunEvaluation) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(evaluation).map_err(|e| io_err(&path, e))?;
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
    write_errors_csv(&dir.join(ERRORS_FILE), &evaluation.errors)
}

pub fn write_errors_csv(path: &Path, rows: &[ErrorRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["submission_id", "abs_error"])
        .map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record([r.submission_id.as_str(), &r.abs_error.to_string()])
            .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_comparison(path: &Path, comparison: &Comparison) -> Result<(), EvalError> {
    let json = serde_json::to_string_pretty(comparison).map_err(|e| io_err(path, e))?;
    fs::write(path, json + "\n").map_err(|e| io_err(path, e))
}
