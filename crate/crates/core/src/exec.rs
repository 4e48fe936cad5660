//! The per-execution report shared by both backends, and the executor
//! abstraction the fuzzer and the evaluator drive.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coverage::CoverageBitmap;
use crate::crash::CrashRecord;
use crate::process::{ExecEvent, Millis, Pid, ProcessTree};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Sim,
    Real,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Sim => "sim",
            BackendKind::Real => "real",
        })
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(BackendKind::Sim),
            "real" => Ok(BackendKind::Real),
            other => Err(format!("unknown backend `{other}`")),
        }
    }
}

/// Outcome of whole-tree teardown.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeardownReport {
    /// Pids forcibly terminated, in kill order (deepest first).
    pub killed: Vec<Pid>,
    /// Pids still alive after teardown. Must be empty.
    pub leaked: Vec<Pid>,
    pub at: Millis,
}

/// Everything observed during one execution of one test case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub backend: BackendKind,
    pub tree: ProcessTree,
    /// The raw event stream, in delivery order.
    pub events: Vec<ExecEvent>,
    pub crash_records: Vec<CrashRecord>,
    pub bitmap: CoverageBitmap,
    /// Set when the budget expired with processes still live.
    pub deadline_at: Option<Millis>,
    /// End of observation: the last event or the deadline.
    pub ended_at: Millis,
    pub teardown: Option<TeardownReport>,
    /// Wall-clock duration; virtual time on the sim backend.
    pub wall_ms: u64,
}

impl ExecutionReport {
    /// Pids that are still Running in the recorded tree.
    pub fn live_pids(&self) -> BTreeSet<Pid> {
        self.tree.live()
    }

    /// Marks every Running process as killed by the monitor at `ended_at`,
    /// deepest first, and records the teardown.
    pub fn reap_remaining(&mut self) -> &TeardownReport {
        let mut live: Vec<_> = self
            .tree
            .nodes
            .values()
            .filter(|n| !n.state.is_terminal())
            .map(|n| (n.depth, n.pid))
            .collect();
        live.sort_by(|a, b| b.cmp(a));
        let at = self.ended_at;
        let killed: Vec<Pid> = live.into_iter().map(|(_, pid)| pid).collect();
        for &pid in &killed {
            self.tree.mark_killed(pid, at).expect("pid is live");
        }
        self.teardown.insert(TeardownReport {
            killed,
            leaked: Vec::new(),
            at,
        })
    }
}

/// Runs one test case against a target and returns a fully torn-down report.
pub trait Executor {
    fn backend(&self) -> BackendKind;

    fn execute(&mut self, input: &[u8]) -> Result<ExecutionReport, Error>;
}

impl<E: Executor + ?Sized> Executor for Box<E> {
    fn backend(&self) -> BackendKind {
        (**self).backend()
    }

    fn execute(&mut self, input: &[u8]) -> Result<ExecutionReport, Error> {
        (**self).execute(input)
    }
}
