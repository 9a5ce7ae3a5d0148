use std::path::PathBuf;

use thiserror::Error;

use crate::space::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid code: {}", format_violations(.0))]
    InvalidCode(Vec<Violation>),

    #[error("no feasible code found after {restarts} restarts")]
    InfeasibleSpace { restarts: usize },

    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },

    #[error("quadruplet violates the denominator floor")]
    DegenerateQuadruplet,

    #[error("invalid cluster count k={k} for {points} points")]
    InvalidK { k: usize, points: usize },

    #[error("training inputs {first} and {second} are identical")]
    DuplicateInput { first: usize, second: usize },

    #[error("matrix is not positive definite even with jitter {jitter:e}")]
    NonPositiveDefinite { jitter: f64 },

    #[error("need {needed} centers, only {available} available")]
    InsufficientCenters { needed: usize, available: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("evaluator failed")]
    Evaluator(#[from] EvalError),

    #[error("journal {path} diverges from the replayed search at line {line}")]
    JournalMismatch { path: PathBuf, line: usize },

    #[error("malformed journal line {line}: {reason}")]
    MalformedJournal { line: usize, reason: String },

    #[error("malformed candidate file line {line}: {reason}")]
    MalformedCandidates { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("timed out after {0:?} waiting for {1}")]
    Timeout(std::time::Duration, PathBuf),

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("command exited with {status}: {stderr}")]
    CommandFailed { status: String, stderr: String },

    #[error("code {0} is outside the oracle's candidate set statistics")]
    UnknownCode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
