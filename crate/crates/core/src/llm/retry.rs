//! Regrade loop: reissue the identical prompt until the answer parses.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{complete, BackendError, CompletionBackend, CompletionRequest, ParseFailure, PriceTable, UsageRecord};

const MAX_BACKOFF: Duration = Duration::from_secs(30);

/// Why a request ended without a usable answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FailureCause {
    Parse {
        failure: ParseFailure,
    },
    Backend {
        message: String,
    },
    /// The submission could not be turned into a request.
    Input {
        message: String,
    },
}

impl std::fmt::Display for FailureCause {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FailureCause::Parse { failure } => write!(f, "invalid response ({failure})"),
            FailureCause::Backend { message } => write!(f, "backend error ({message})"),
            FailureCause::Input { message } => write!(f, "unusable input ({message})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RetryOutcome<T> {
    Parsed {
        value: T,
        raw_response: String,
        attempts: u32,
        usage: UsageRecord,
    },
    /// The attempt budget ran out. `last_raw_response` is the last text the
    /// backend returned, if any call succeeded at the transport level.
    Failed {
        cause: FailureCause,
        last_raw_response: Option<String>,
        attempts: u32,
        usage: UsageRecord,
    },
}

impl<T> RetryOutcome<T> {
    pub fn attempts(&self) -> u32 {
        match self {
            RetryOutcome::Parsed { attempts, .. } | RetryOutcome::Failed { attempts, .. } => *attempts,
        }
    }

    pub fn usage(&self) -> UsageRecord {
        match self {
            RetryOutcome::Parsed { usage, .. } | RetryOutcome::Failed { usage, .. } => *usage,
        }
    }
}

fn backoff(base_ms: u64, failures: u32, err: &BackendError) -> Duration {
    if let BackendError::RateLimited {
        retry_after_ms: Some(ms),
    } = err
    {
        return Duration::from_millis(*ms).min(MAX_BACKOFF);
    }
    let factor = 1u64 << failures.saturating_sub(1).min(16);
    Duration::from_millis(base_ms.saturating_mul(factor)).min(MAX_BACKOFF)
}

/// Sends the request and parses the answer, making at most
/// `config.max_attempts` backend calls in total.
///
/// Unparseable answers are regraded immediately; retryable transport errors
/// wait with exponential backoff first. Errors that are neither retryable
/// nor parse failures end the loop: fatal ones (authorization, rejected
/// request) are returned as `Err` so the caller can abort the batch, and
/// the rest become a `Failed` outcome.
pub fn grade_with_retry<T, P>(
    request: &CompletionRequest<'_>,
    backend: &dyn CompletionBackend,
    prices: &PriceTable,
    parser: P,
) -> Result<RetryOutcome<T>, BackendError>
where
    P: Fn(&str) -> Result<T, ParseFailure>,
{
    let max_attempts = request.config.max_attempts.max(1);
    let mut usage = UsageRecord::default();
    let mut last_raw = None;
    let mut transport_failures = 0;
    let mut cause = None;

    for attempt in 1..=max_attempts {
        match complete(request, backend, prices) {
            Ok((raw, call_usage)) => {
                usage += call_usage;
                match parser(&raw) {
                    Ok(value) => {
                        return Ok(RetryOutcome::Parsed {
                            value,
                            raw_response: raw,
                            attempts: attempt,
                            usage,
                        })
                    }
                    Err(failure) => {
                        cause = Some(FailureCause::Parse { failure });
                        last_raw = Some(raw);
                    }
                }
            }
            Err(err) if err.is_fatal() => return Err(err),
            Err(err) if err.is_retryable() => {
                transport_failures += 1;
                cause = Some(FailureCause::Backend {
                    message: err.to_string(),
                });
                if attempt < max_attempts {
                    let wait = backoff(request.config.retry_backoff_ms, transport_failures, &err);
                    if !wait.is_zero() {
                        std::thread::sleep(wait);
                    }
                }
            }
            Err(err) => {
                return Ok(RetryOutcome::Failed {
                    cause: FailureCause::Backend {
                        message: err.to_string(),
                    },
                    last_raw_response: last_raw,
                    attempts: attempt,
                    usage,
                })
            }
        }
    }
    Ok(RetryOutcome::Failed {
        cause: cause.expect("at least one attempt was made"),
        last_raw_response: last_raw,
        attempts: max_attempts,
        usage,
    })
}
