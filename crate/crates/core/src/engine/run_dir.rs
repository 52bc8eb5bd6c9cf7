//! On-disk run layout: `config.json`, `records.jsonl` and `usage.json`.
//!
//! `usage.json` is written last and marks the run as complete.

use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{EngineError, GradedRecord, RunConfig, RunResult};
use crate::llm::UsageRecord;

pub const CONFIG_FILE: &str = "config.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const USAGE_FILE: &str = "usage.json";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub records: usize,
    pub ok: usize,
    pub failed: usize,
    /// Records that needed more than one backend call.
    pub regraded: usize,
    /// Backend calls beyond the first, summed over records.
    pub extra_attempts: u64,
    pub short_pools: usize,
}

impl RunStats {
    pub fn from_records(records: &[GradedRecord]) -> Self {
        let mut s = RunStats {
            records: records.len(),
            ..Default::default()
        };
        for r in records {
            if r.is_ok() {
                s.ok += 1;
            } else {
                s.failed += 1;
            }
            if r.attempts > 1 {
                s.regraded += 1;
            }
            s.extra_attempts += u64::from(r.attempts.saturating_sub(1));
            if r.short_pool {
                s.short_pools += 1;
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageFile {
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub totals: UsageRecord,
    pub stats: RunStats,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> EngineError {
    EngineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn incomplete(dir: &Path, message: impl Into<String>) -> EngineError {
    EngineError::IncompleteRun {
        path: dir.display().to_string(),
        message: message.into(),
    }
}

pub fn save_run(dir: &Path, run: &RunResult) -> Result<(), EngineError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let usage_path = dir.join(USAGE_FILE);
    if usage_path.exists() {
        fs::remove_file(&usage_path).map_err(|e| io_err(&usage_path, e))?;
    }

    let config_path = dir.join(CONFIG_FILE);
    let config = serde_json::to_string_pretty(&run.config).map_err(|e| io_err(&config_path, e))?;
    fs::write(&config_path, config + "\n").map_err(|e| io_err(&config_path, e))?;

    let records_path = dir.join(RECORDS_FILE);
    let mut out = String::new();
    for r in &run.records {
        out.push_str(&serde_json::to_string(r).map_err(|e| io_err(&records_path, e))?);
        out.push('\n');
    }
    let mut f = fs::File::create(&records_path).map_err(|e| io_err(&records_path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| io_err(&records_path, e))?;
    f.sync_all().map_err(|e| io_err(&records_path, e))?;

    let usage = UsageFile {
        started_at: run.started_at,
        finished_at: run.finished_at,
        totals: run.totals,
        stats: run.stats(),
    };
    let text = serde_json::to_string_pretty(&usage).map_err(|e| io_err(&usage_path, e))?;
    fs::write(&usage_path, text + "\n").map_err(|e| io_err(&usage_path, e))
}

/// Loads a finished run. Missing files, unparseable content and totals that
/// disagree with the records are all reported as an incomplete run.
pub fn load_run(dir: &Path) -> Result<RunResult, EngineError> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| incomplete(dir, format!("{name}: {e}")))
    };
    let config: RunConfig =
        serde_json::from_str(&read(CONFIG_FILE)?).map_err(|e| incomplete(dir, format!("{CONFIG_FILE}: {e}")))?;
    let usage: UsageFile =
        serde_json::from_str(&read(USAGE_FILE)?).map_err(|e| incomplete(dir, format!("{USAGE_FILE}: {e}")))?;
    let mut records = Vec::new();
    for (i, line) in read(RECORDS_FILE)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: GradedRecord =
            serde_json::from_str(line).map_err(|e| incomplete(dir, format!("{RECORDS_FILE} line {}: {e}", i + 1)))?;
        records.push(r);
    }
    if records.len() != usage.stats.records {
        return Err(incomplete(
            dir,
            format!("{} records on disk, usage lists {}", records.len(), usage.stats.records),
        ));
    }
    let sum: UsageRecord = records.iter().map(|r| r.usage).sum();
    let cost_ok = (sum.estimated_cost - usage.totals.estimated_cost).abs() <= 1e-9 * sum.estimated_cost.abs().max(1.0);
    if sum.prompt_tokens != usage.totals.prompt_tokens
        || sum.completion_tokens != usage.totals.completion_tokens
        || sum.wall_time_ms != usage.totals.wall_time_ms
        || !cost_ok
    {
        return Err(incomplete(dir, "usage totals do not match the records"));
    }
    Ok(RunResult {
        config,
        records,
        started_at: usage.started_at,
        finished_at: usage.finished_at,
        totals: usage.totals,
    })
}
