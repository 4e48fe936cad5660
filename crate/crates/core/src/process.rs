//! Forked process tree and the lifecycle events that drive it.
//!
//! The same event vocabulary is produced by the simulated backend and by the
//! ptrace tracer, so everything downstream (detectors, scoring, the fuzzer)
//! is backend-agnostic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::EdgeId;

/// Milliseconds since the start of one execution.
pub type Millis = u64;

/// Process identifier: an OS pid or a simulated integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pid(pub u32);

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Terminating signal, classified for crash triage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SignalKind {
    #[serde(rename = "SEGV")]
    Segv,
    #[serde(rename = "ABRT")]
    Abrt,
    #[serde(rename = "BUS")]
    Bus,
    #[serde(rename = "FPE")]
    Fpe,
    #[serde(rename = "ILL")]
    Ill,
    #[serde(rename = "KILL")]
    Kill,
    #[serde(rename = "OTHER")]
    Other(i32),
}

impl SignalKind {
    pub const FATAL_BUGS: [SignalKind; 5] = [
        SignalKind::Segv,
        SignalKind::Abrt,
        SignalKind::Bus,
        SignalKind::Fpe,
        SignalKind::Ill,
    ];

    pub fn from_raw(signo: i32) -> Self {
        match signo {
            libc::SIGSEGV => SignalKind::Segv,
            libc::SIGABRT => SignalKind::Abrt,
            libc::SIGBUS => SignalKind::Bus,
            libc::SIGFPE => SignalKind::Fpe,
            libc::SIGILL => SignalKind::Ill,
            libc::SIGKILL => SignalKind::Kill,
            other => SignalKind::Other(other),
        }
    }

    pub fn raw(self) -> i32 {
        match self {
            SignalKind::Segv => libc::SIGSEGV,
            SignalKind::Abrt => libc::SIGABRT,
            SignalKind::Bus => libc::SIGBUS,
            SignalKind::Fpe => libc::SIGFPE,
            SignalKind::Ill => libc::SIGILL,
            SignalKind::Kill => libc::SIGKILL,
            SignalKind::Other(code) => code,
        }
    }

    /// SEGV/ABRT/BUS/FPE/ILL. Everything else, KILL included, is not a bug.
    pub fn is_fatal_bug(self) -> bool {
        Self::FATAL_BUGS.contains(&self)
    }
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignalKind::Segv => f.write_str("SIGSEGV"),
            SignalKind::Abrt => f.write_str("SIGABRT"),
            SignalKind::Bus => f.write_str("SIGBUS"),
            SignalKind::Fpe => f.write_str("SIGFPE"),
            SignalKind::Ill => f.write_str("SIGILL"),
            SignalKind::Kill => f.write_str("SIGKILL"),
            SignalKind::Other(code) => write!(f, "signal {code}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessState {
    Running,
    Exited(i32),
    FatalSignal(SignalKind),
    KilledByMonitor,
}

impl ProcessState {
    pub fn is_terminal(self) -> bool {
        !matches!(self, ProcessState::Running)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessNode {
    pub pid: Pid,
    pub parent: Option<Pid>,
    pub depth: u32,
    pub spawned_at: Millis,
    pub state: ProcessState,
    pub terminated_at: Option<Millis>,
}

impl ProcessNode {
    /// Whether the process was alive at time `t` (inclusive of its spawn
    /// instant, exclusive of its termination instant).
    pub fn running_at(&self, t: Millis) -> bool {
        self.spawned_at <= t && self.terminated_at.is_none_or(|end| t < end)
    }
}

/// One lifecycle notification, as delivered by a backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExecEvent {
    ForkObserved {
        parent: Pid,
        child: Pid,
        at: Millis,
    },
    Exited {
        pid: Pid,
        code: i32,
        at: Millis,
    },
    FatalSignal {
        pid: Pid,
        sig: SignalKind,
        at: Millis,
    },
    /// Emitted by the simulated backend only; real probes write the shared map directly.
    ProbeHit {
        pid: Pid,
        edge: EdgeId,
        at: Millis,
    },
    DeadlineReached {
        at: Millis,
    },
}

impl ExecEvent {
    pub fn at(&self) -> Millis {
        match *self {
            ExecEvent::ForkObserved { at, .. }
            | ExecEvent::Exited { at, .. }
            | ExecEvent::FatalSignal { at, .. }
            | ExecEvent::ProbeHit { at, .. }
            | ExecEvent::DeadlineReached { at } => at,
        }
    }

    /// The process the event is about. For a fork this is the new child.
    pub fn subject(&self) -> Option<Pid> {
        match *self {
            ExecEvent::ForkObserved { child, .. } => Some(child),
            ExecEvent::Exited { pid, .. }
            | ExecEvent::FatalSignal { pid, .. }
            | ExecEvent::ProbeHit { pid, .. } => Some(pid),
            ExecEvent::DeadlineReached { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProcessError {
    #[error("event references untracked pid {0}")]
    UnknownPid(Pid),
    #[error("illegal transition for pid {pid}: {state:?} cannot accept {event}")]
    IllegalTransition {
        pid: Pid,
        state: ProcessState,
        event: &'static str,
    },
    #[error("pid {0} reused within one execution")]
    PidReused(Pid),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessTree {
    pub root: Pid,
    pub nodes: BTreeMap<Pid, ProcessNode>,
}

impl ProcessTree {
    pub fn new(root: Pid, spawned_at: Millis) -> Self {
        let node = ProcessNode {
            pid: root,
            parent: None,
            depth: 0,
            spawned_at,
            state: ProcessState::Running,
            terminated_at: None,
        };
        ProcessTree {
            root,
            nodes: BTreeMap::from([(root, node)]),
        }
    }

    pub fn get(&self, pid: Pid) -> Result<&ProcessNode, ProcessError> {
        self.nodes.get(&pid).ok_or(ProcessError::UnknownPid(pid))
    }

    pub fn root_node(&self) -> &ProcessNode {
        &self.nodes[&self.root]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, pid: Pid) -> bool {
        self.nodes.contains_key(&pid)
    }

    /// Pure form of [`ProcessTree::apply`].
    pub fn apply_event(&self, ev: &ExecEvent) -> Result<ProcessTree, ProcessError> {
        let mut next = self.clone();
        next.apply(ev)?;
        Ok(next)
    }

    /// Applies one event in place. On error the tree is left untouched.
    pub fn apply(&mut self, ev: &ExecEvent) -> Result<(), ProcessError> {
        match *ev {
            ExecEvent::ForkObserved { parent, child, at } => {
                let p = self.running(parent, "fork")?;
                if self.nodes.contains_key(&child) {
                    return Err(ProcessError::PidReused(child));
                }
                let node = ProcessNode {
                    pid: child,
                    parent: Some(parent),
                    depth: p.depth + 1,
                    spawned_at: at.max(p.spawned_at),
                    state: ProcessState::Running,
                    terminated_at: None,
                };
                self.nodes.insert(child, node);
            }
            ExecEvent::Exited { pid, code, at } => {
                self.terminate(pid, ProcessState::Exited(code), at, "exit")?;
            }
            ExecEvent::FatalSignal { pid, sig, at } => {
                self.terminate(pid, ProcessState::FatalSignal(sig), at, "fatal signal")?;
            }
            ExecEvent::ProbeHit { pid, .. } => {
                self.get(pid)?;
            }
            ExecEvent::DeadlineReached { .. } => {}
        }
        Ok(())
    }

    /// Records a monitor-initiated kill.
    pub fn mark_killed(&mut self, pid: Pid, at: Millis) -> Result<(), ProcessError> {
        self.terminate(pid, ProcessState::KilledByMonitor, at, "kill")
    }

    fn running(&self, pid: Pid, event: &'static str) -> Result<&ProcessNode, ProcessError> {
        let node = self.get(pid)?;
        if node.state.is_terminal() {
            return Err(ProcessError::IllegalTransition {
                pid,
                state: node.state,
                event,
            });
        }
        Ok(node)
    }

    fn terminate(
        &mut self,
        pid: Pid,
        state: ProcessState,
        at: Millis,
        event: &'static str,
    ) -> Result<(), ProcessError> {
        self.running(pid, event)?;
        let node = self.nodes.get_mut(&pid).expect("checked above");
        node.state = state;
        node.terminated_at = Some(at.max(node.spawned_at));
        Ok(())
    }

    pub fn children(&self, of: Pid) -> impl Iterator<Item = &ProcessNode> + '_ {
        self.nodes.values().filter(move |n| n.parent == Some(of))
    }

    /// All Running pids strictly below `of`.
    pub fn live_descendants(&self, of: Pid) -> Result<BTreeSet<Pid>, ProcessError> {
        self.get(of)?;
        let mut live = BTreeSet::new();
        let mut stack = vec![of];
        while let Some(pid) = stack.pop() {
            for child in self.children(pid) {
                if !child.state.is_terminal() {
                    live.insert(child.pid);
                }
                stack.push(child.pid);
            }
        }
        Ok(live)
    }

    /// Every Running pid, root included.
    pub fn live(&self) -> BTreeSet<Pid> {
        self.nodes
            .values()
            .filter(|n| !n.state.is_terminal())
            .map(|n| n.pid)
            .collect()
    }

    /// Root-to-`pid` path, inclusive on both ends.
    pub fn tree_path(&self, pid: Pid) -> Result<Vec<Pid>, ProcessError> {
        let mut path = vec![pid];
        let mut cur = self.get(pid)?;
        while let Some(parent) = cur.parent {
            path.push(parent);
            cur = self.get(parent)?;
        }
        path.reverse();
        Ok(path)
    }

    /// Checks every structural invariant; returns a description of the
    /// first violation.
    pub fn validate(&self) -> Result<(), String> {
        let root = self
            .nodes
            .get(&self.root)
            .ok_or_else(|| format!("root {} missing", self.root))?;
        if root.parent.is_some() || root.depth != 0 {
            return Err("root must have no parent and depth 0".into());
        }
        for node in self.nodes.values() {
            if node.state.is_terminal() != node.terminated_at.is_some() {
                return Err(format!(
                    "pid {}: terminated_at inconsistent with state",
                    node.pid
                ));
            }
            if let Some(end) = node.terminated_at {
                if end < node.spawned_at {
                    return Err(format!("pid {}: terminated before spawned", node.pid));
                }
            }
            match node.parent {
                None if node.pid != self.root => {
                    return Err(format!("pid {}: second root", node.pid));
                }
                None => {}
                Some(parent) => {
                    let p = self
                        .nodes
                        .get(&parent)
                        .ok_or_else(|| format!("pid {}: parent {parent} missing", node.pid))?;
                    if node.depth != p.depth + 1 {
                        return Err(format!("pid {}: depth mismatch", node.pid));
                    }
                    if node.spawned_at < p.spawned_at {
                        return Err(format!("pid {}: spawned before parent", node.pid));
                    }
                }
            }
        }
        // depth strictly increases along parent links, so connectivity to the
        // root implies acyclicity
        for pid in self.nodes.keys() {
            let path = self.tree_path(*pid).map_err(|e| e.to_string())?;
            if path[0] != self.root {
                return Err(format!("pid {pid} not connected to root"));
            }
        }
        Ok(())
    }
}
