//! Fork-aware execution monitoring for coverage-guided fuzzing.
//!
//! A fuzzer's monitor is *fork-aware* when it detects bugs, detects hangs and
//! measures coverage in child processes exactly as it does in the process it
//! launched. This crate provides:
//!
//! * [`process`]: the forked process tree and its lifecycle events;
//! * [`sim`]: a deterministic simulated backend driven by scripts;
//! * [`tracer`]: a ptrace backend that follows every fork of a real target;
//! * [`coverage`]: the shared 64 KiB edge map, hit-count buckets and novelty;
//! * [`detect`]: bug/hang/coverage detectors and monitor profiles;
//! * [`fuzz`]: a small coverage-guided mutational fuzzer;
//! * [`scorecard`]: the evaluation matrix over profiles, challenges and backends.

pub mod challenge;
pub mod coverage;
pub mod crash;
pub mod detect;
pub mod exec;
pub mod fuzz;
pub mod process;
pub mod scorecard;
pub mod sim;
pub mod tracer;

use thiserror::Error;

pub use challenge::{ChallengeKind, ChallengeParams};
pub use coverage::{ClassifiedBitmap, CoverageBitmap, EdgeId, Novelty};
pub use detect::{MonitorProfile, ProfileName, Verdicts};
pub use exec::{BackendKind, ExecutionReport, Executor};
pub use process::{ExecEvent, Pid, ProcessState, ProcessTree, SignalKind};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error(transparent)]
    Trace(#[from] tracer::TraceError),
    #[error(transparent)]
    Challenge(#[from] challenge::ChallengeError),
    #[error(transparent)]
    Process(#[from] process::ProcessError),
    #[error(transparent)]
    Score(#[from] detect::ScoreError),
    #[error(transparent)]
    Shm(#[from] coverage::ShmError),
    #[error(transparent)]
    CrashFile(#[from] crash::CrashFileError),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("{0}")]
    Precondition(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
