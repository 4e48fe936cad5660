//! Deterministic simulated target backend.
//!
//! A [`TargetScript`] describes what each process of a tree does; [`run_sim`]
//! steps it on a single virtual CPU and emits the same [`ExecEvent`] stream
//! the ptrace backend produces for a real binary.
//!
//! Scheduling: one action per turn, round-robin over runnable processes in
//! ascending pid order. The virtual clock advances by each executed action's
//! duration. When only busy-looping processes are runnable the clock jumps
//! straight to the next wake-up or the deadline, since loops are unobservable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::challenge::{self, ChallengeError, ChallengeKind, ChallengeParams};
use crate::coverage::{CoverageBitmap, EdgeId};
use crate::crash::CrashRecord;
use crate::exec::{BackendKind, ExecutionReport, Executor};
use crate::process::{ExecEvent, Millis, Pid, ProcessError, ProcessTree, SignalKind};

/// Maximum static fork nesting of a script.
pub const MAX_NESTING: usize = 16;

pub const ROOT_PID: Pid = Pid(1);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Fork(ProcessScript),
    HitEdge(EdgeId),
    /// Hits `if_odd` or `if_even` depending on the parity of input byte
    /// `input_byte` (missing bytes read as 0).
    Branch {
        input_byte: usize,
        if_even: EdgeId,
        if_odd: EdgeId,
    },
    RaiseFatal(SignalKind),
    BusyLoopForever,
    /// Blocks the process for the given number of ms after the step itself.
    Sleep(Millis),
    /// Blocks until every child forked so far has terminated.
    WaitChildren,
    Exit(i32),
}

impl Action {
    fn terminates(&self) -> bool {
        matches!(
            self,
            Action::BusyLoopForever | Action::Exit(_) | Action::RaiseFatal(_)
        )
    }
}

fn one_ms() -> Millis {
    1
}

fn is_one_ms(ms: &Millis) -> bool {
    *ms == 1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub action: Action,
    #[serde(default = "one_ms", skip_serializing_if = "is_one_ms")]
    pub duration_ms: Millis,
}

impl From<Action> for Step {
    fn from(action: Action) -> Self {
        Step {
            action,
            duration_ms: 1,
        }
    }
}

/// Actions of one process. Falling off the end is an implicit `Exit(0)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessScript {
    pub steps: Vec<Step>,
}

impl ProcessScript {
    pub fn new(actions: impl IntoIterator<Item = Action>) -> Self {
        ProcessScript {
            steps: actions.into_iter().map(Step::from).collect(),
        }
    }

    fn nesting(&self) -> usize {
        self.steps
            .iter()
            .filter_map(|s| match &s.action {
                Action::Fork(child) => Some(1 + child.nesting()),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    fn check(&self) -> Result<(), SimError> {
        for (i, step) in self.steps.iter().enumerate() {
            if step.duration_ms == 0 {
                return Err(SimError::InvalidScript(
                    "step durations must be ≥ 1 ms".into(),
                ));
            }
            if step.action.terminates() && i + 1 != self.steps.len() {
                return Err(SimError::InvalidScript(format!(
                    "unreachable actions after {:?}",
                    step.action
                )));
            }
            if let Action::Fork(child) = &step.action {
                child.check()?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetScript {
    pub root: ProcessScript,
}

impl TargetScript {
    pub fn validate(&self) -> Result<(), SimError> {
        let depth = self.root.nesting();
        if depth > MAX_NESTING {
            return Err(SimError::DepthExceeded(depth));
        }
        self.root.check()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scripts always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, SimError> {
        let script: TargetScript =
            serde_json::from_str(s).map_err(|e| SimError::InvalidScript(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimPolicy {
    pub deadline_ms: Millis,
}

impl Default for SimPolicy {
    fn default() -> Self {
        SimPolicy { deadline_ms: 1000 }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid script: {0}")]
    InvalidScript(String),
    #[error("fork nesting {0} exceeds {MAX_NESTING}")]
    DepthExceeded(usize),
    #[error("invalid policy: deadline must be positive")]
    InvalidPolicy,
    #[error(transparent)]
    Challenge(#[from] ChallengeError),
    #[error("simulator produced an inconsistent event: {0}")]
    Process(#[from] ProcessError),
}

/// Builds the script equivalent of a challenge program.
pub fn script_challenge(params: &ChallengeParams) -> Result<TargetScript, SimError> {
    params.validate()?;
    let depth = params.fault_depth();

    // innermost process first, then wrap it level by level
    let mut inner = match params.kind {
        ChallengeKind::A => ProcessScript::new([
            Action::HitEdge(challenge::child_entry(depth)),
            Action::RaiseFatal(SignalKind::Segv),
        ]),
        ChallengeKind::B => ProcessScript::new([
            Action::HitEdge(challenge::child_entry(depth)),
            Action::BusyLoopForever,
        ]),
        ChallengeKind::C => {
            let mut steps: Vec<Action> = Vec::new();
            if depth > 1 {
                steps.push(Action::HitEdge(challenge::child_entry(depth)));
            }
            steps.extend((0..params.conditionals).map(|i| Action::Branch {
                input_byte: i as usize,
                if_even: challenge::arm(i, false),
                if_odd: challenge::arm(i, true),
            }));
            steps.push(Action::Exit(0));
            ProcessScript::new(steps)
        }
    };
    for level in (1..depth).rev() {
        let mut steps = vec![
            Action::HitEdge(challenge::child_entry(level)),
            Action::Fork(inner),
        ];
        if params.kind != ChallengeKind::B {
            steps.push(Action::WaitChildren);
        }
        steps.push(Action::Exit(0));
        inner = ProcessScript::new(steps);
    }

    let mut root = vec![
        Action::HitEdge(challenge::ROOT_ENTRY),
        Action::Fork(inner),
        Action::HitEdge(challenge::PARENT_BRANCH),
    ];
    if params.kind != ChallengeKind::B {
        root.push(Action::WaitChildren);
    }
    root.push(Action::Exit(0));
    let script = TargetScript {
        root: ProcessScript::new(root),
    };
    script.validate()?;
    Ok(script)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Ready,
    Sleeping(Millis),
    Waiting,
    Done,
}

struct SimProc<'s> {
    steps: &'s [Step],
    pc: usize,
    status: Status,
    looping: bool,
    children: Vec<Pid>,
}

impl<'s> SimProc<'s> {
    fn new(script: &'s ProcessScript) -> Self {
        SimProc {
            steps: &script.steps,
            pc: 0,
            status: Status::Ready,
            looping: false,
            children: Vec::new(),
        }
    }
}

static IMPLICIT_EXIT: Step = Step {
    action: Action::Exit(0),
    duration_ms: 1,
};

struct Sim<'s> {
    input: &'s [u8],
    deadline: Millis,
    now: Millis,
    procs: BTreeMap<Pid, SimProc<'s>>,
    next_pid: u32,
    tree: ProcessTree,
    events: Vec<ExecEvent>,
    bitmap: CoverageBitmap,
    crash_records: Vec<CrashRecord>,
}

impl<'s> Sim<'s> {
    fn emit(&mut self, ev: ExecEvent) -> Result<(), SimError> {
        self.tree.apply(&ev)?;
        self.events.push(ev);
        Ok(())
    }

    fn unblock(&mut self) {
        let now = self.now;
        let done: Vec<Pid> = self
            .procs
            .iter()
            .filter(|(_, p)| p.status == Status::Done)
            .map(|(&pid, _)| pid)
            .collect();
        for proc in self.procs.values_mut() {
            match proc.status {
                Status::Sleeping(until) if until <= now => proc.status = Status::Ready,
                Status::Waiting if proc.children.iter().all(|c| done.contains(c)) => {
                    proc.status = Status::Ready
                }
                _ => {}
            }
        }
    }

    fn next_runnable(&self, cursor: Option<Pid>) -> Option<Pid> {
        let ready = |(pid, p): (&Pid, &SimProc)| (p.status == Status::Ready).then_some(*pid);
        let after = cursor.map_or(Pid(0), |c| Pid(c.0 + 1));
        self.procs
            .range(after..)
            .find_map(ready)
            .or_else(|| self.procs.iter().find_map(ready))
    }

    fn step(&mut self, pid: Pid) -> Result<(), SimError> {
        let now = self.now;
        let proc = self.procs.get_mut(&pid).expect("runnable pid exists");
        let steps: &'s [Step] = proc.steps;
        let step = steps.get(proc.pc).unwrap_or(&IMPLICIT_EXIT);
        match &step.action {
            Action::Fork(child) => {
                proc.pc += 1;
                let child_pid = Pid(self.next_pid);
                self.next_pid += 1;
                proc.children.push(child_pid);
                self.procs.insert(child_pid, SimProc::new(child));
                self.emit(ExecEvent::ForkObserved {
                    parent: pid,
                    child: child_pid,
                    at: now,
                })?;
            }
            Action::HitEdge(edge) => {
                let edge = *edge;
                proc.pc += 1;
                self.probe(pid, edge)?;
            }
            Action::Branch {
                input_byte,
                if_even,
                if_odd,
            } => {
                let odd = self.input.get(*input_byte).copied().unwrap_or(0) % 2 == 1;
                let edge = if odd { *if_odd } else { *if_even };
                proc.pc += 1;
                self.probe(pid, edge)?;
            }
            Action::RaiseFatal(sig) => {
                let sig = *sig;
                proc.status = Status::Done;
                self.emit(ExecEvent::FatalSignal { pid, sig, at: now })?;
                // the runtime's crash handler cannot catch non-bug signals
                if sig.is_fatal_bug() {
                    let path = self.tree.tree_path(pid)?;
                    self.crash_records.push(CrashRecord {
                        pid,
                        signal: sig,
                        depth: path.len() as u32 - 1,
                        path,
                    });
                }
            }
            Action::BusyLoopForever => proc.looping = true,
            Action::Sleep(ms) => {
                proc.pc += 1;
                proc.status = Status::Sleeping(now + ms);
            }
            Action::WaitChildren => {
                proc.pc += 1;
                proc.status = Status::Waiting;
            }
            Action::Exit(code) => {
                let code = *code;
                proc.status = Status::Done;
                self.emit(ExecEvent::Exited { pid, code, at: now })?;
            }
        }
        Ok(())
    }

    fn probe(&mut self, pid: Pid, edge: EdgeId) -> Result<(), SimError> {
        self.bitmap.hit(edge);
        self.emit(ExecEvent::ProbeHit {
            pid,
            edge,
            at: self.now,
        })
    }

    fn step_duration(&self, pid: Pid) -> Millis {
        let proc = &self.procs[&pid];
        proc.steps
            .get(proc.pc)
            .unwrap_or(&IMPLICIT_EXIT)
            .duration_ms
    }

    /// Runs until every process is done or the deadline is hit. Returns the
    /// deadline time in the latter case.
    fn run(&mut self) -> Result<Option<Millis>, SimError> {
        let mut cursor = None;
        loop {
            self.unblock();
            if self.procs.values().all(|p| p.status == Status::Done) {
                return Ok(None);
            }
            let only_loopers = self
                .procs
                .values()
                .filter(|p| p.status == Status::Ready)
                .all(|p| p.looping);
            if only_loopers {
                let wake = self
                    .procs
                    .values()
                    .filter_map(|p| match p.status {
                        Status::Sleeping(until) => Some(until),
                        _ => None,
                    })
                    .min();
                match wake {
                    Some(t) if t <= self.deadline => {
                        self.now = self.now.max(t);
                        continue;
                    }
                    _ => return Ok(Some(self.deadline)),
                }
            }
            let pid = self
                .next_runnable(cursor)
                .expect("a non-looping process is ready");
            let end = self.now + self.step_duration(pid);
            if end > self.deadline {
                return Ok(Some(self.deadline));
            }
            self.now = end;
            self.step(pid)?;
            cursor = Some(pid);
        }
    }
}

/// Executes `script` on `input`. Processes still running at the deadline are
/// left Running in the report.
pub fn run_sim(
    script: &TargetScript,
    input: &[u8],
    policy: &SimPolicy,
) -> Result<ExecutionReport, SimError> {
    if policy.deadline_ms == 0 {
        return Err(SimError::InvalidPolicy);
    }
    script.validate()?;
    let mut sim = Sim {
        input,
        deadline: policy.deadline_ms,
        now: 0,
        procs: BTreeMap::from([(ROOT_PID, SimProc::new(&script.root))]),
        next_pid: ROOT_PID.0 + 1,
        tree: ProcessTree::new(ROOT_PID, 0),
        events: Vec::new(),
        bitmap: CoverageBitmap::new(),
        crash_records: Vec::new(),
    };
    let deadline_at = sim.run()?;
    if let Some(at) = deadline_at {
        sim.now = at;
        sim.events.push(ExecEvent::DeadlineReached { at });
    }
    Ok(ExecutionReport {
        backend: BackendKind::Sim,
        tree: sim.tree,
        events: sim.events,
        crash_records: sim.crash_records,
        bitmap: sim.bitmap,
        deadline_at,
        ended_at: sim.now,
        teardown: None,
        wall_ms: sim.now,
    })
}

/// Simulated executor: runs the script, then plays the monitor's part and
/// reaps whatever is still running at the deadline.
#[derive(Debug, Clone)]
pub struct SimExecutor {
    pub script: TargetScript,
    pub policy: SimPolicy,
}

impl SimExecutor {
    pub fn new(script: TargetScript, policy: SimPolicy) -> Self {
        SimExecutor { script, policy }
    }

    pub fn challenge(params: &ChallengeParams, policy: SimPolicy) -> Result<Self, SimError> {
        Ok(SimExecutor::new(script_challenge(params)?, policy))
    }
}

impl Executor for SimExecutor {
    fn backend(&self) -> BackendKind {
        BackendKind::Sim
    }

    fn execute(&mut self, input: &[u8]) -> Result<ExecutionReport, crate::Error> {
        let mut report = run_sim(&self.script, input, &self.policy)?;
        report.reap_remaining();
        Ok(report)
    }
}
