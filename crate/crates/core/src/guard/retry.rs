//! Execute, verify, retry.
//!
//! The executor must be safe to invoke again after a failed verification;
//! that is the caller's responsibility.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::Verdict;
use crate::taxonomy::Kind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetryTarget {
    Replan,
    Reexecute,
}

impl RetryTarget {
    pub fn for_kind(kind: Kind) -> Self {
        match kind {
            Kind::Plan => RetryTarget::Replan,
            Kind::Execution => RetryTarget::Reexecute,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Re-executions allowed after the first attempt.
    pub max_retries: u32,
    /// Which host module to rerun. Advisory only.
    pub retry_target: RetryTarget,
}

impl RetryPolicy {
    pub fn for_kind(kind: Kind) -> Self {
        RetryPolicy {
            max_retries: 3,
            retry_target: RetryTarget::for_kind(kind),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt_index: u32,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardedOutcome {
    pub final_verdict: Verdict,
    pub attempts: u32,
    pub attempt_log: Vec<AttemptRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailedStage {
    Execute,
    Verify,
}

#[derive(Debug, Error)]
#[error("{stage:?} failed on attempt {attempt}: {source}")]
pub struct GuardedError<E: std::error::Error + 'static> {
    pub stage: FailedStage,
    pub attempt: u32,
    /// Verdicts recorded before the failure.
    pub attempt_log: Vec<AttemptRecord>,
    #[source]
    pub source: E,
}

enum State<T> {
    Execute(u32),
    Verify(u32, T),
    Done(Verdict),
}

/// Runs `executor` then `verifier` until a success verdict or until
/// `max_retries` re-executions have been spent. Both closures receive the
/// zero-based attempt index.
pub fn run_guarded_step<T, E, X, V>(
    mut executor: X,
    mut verifier: V,
    policy: &RetryPolicy,
) -> Result<GuardedOutcome, GuardedError<E>>
where
    E: std::error::Error + 'static,
    X: FnMut(u32) -> Result<T, E>,
    V: FnMut(u32, &T) -> Result<Verdict, E>,
{
    let mut log: Vec<AttemptRecord> = Vec::new();
    let mut state = State::Execute(0);
    loop {
        state = match state {
            State::Execute(attempt) => match executor(attempt) {
                Ok(output) => State::Verify(attempt, output),
                Err(source) => {
                    return Err(GuardedError {
                        stage: FailedStage::Execute,
                        attempt,
                        attempt_log: log,
                        source,
                    })
                }
            },
            State::Verify(attempt, output) => match verifier(attempt, &output) {
                Ok(verdict) => {
                    log.push(AttemptRecord {
                        attempt_index: attempt,
                        verdict: verdict.clone(),
                    });
                    if verdict.success || attempt >= policy.max_retries {
                        State::Done(verdict)
                    } else {
                        State::Execute(attempt + 1)
                    }
                }
                Err(source) => {
                    return Err(GuardedError {
                        stage: FailedStage::Verify,
                        attempt,
                        attempt_log: log,
                        source,
                    })
                }
            },
            State::Done(final_verdict) => {
                return Ok(GuardedOutcome {
                    final_verdict,
                    attempts: log.len() as u32,
                    attempt_log: log,
                })
            }
        };
    }
}
