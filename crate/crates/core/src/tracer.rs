//! ptrace backend: launches a target, follows every fork, and tears the
//! whole tree down at the end of the execution.
//!
//! The target is started with `PTRACE_TRACEME` and stops at exec. From there
//! `PTRACE_O_TRACEFORK | PTRACE_O_TRACEVFORK` auto-attach every descendant,
//! so exits and fatal signals of grandchildren reach the monitor exactly like
//! those of the root. Non-fatal signal stops are resumed with the original
//! signal re-injected.
//!
//! ptrace requests must come from the thread that started the tracee, so a
//! [`TraceHandle`] is neither `Send` nor `Sync`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::ffi::OsString;
use std::io::{self, Write};
use std::marker::PhantomData;
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use nix::errno::Errno;
use nix::sys::ptrace;
use nix::sys::signal::{self, Signal};
use nix::sys::wait::{waitpid, WaitPidFlag, WaitStatus};
use nix::unistd::Pid as NixPid;
use thiserror::Error;

use crate::coverage::{CoverageBitmap, SharedMap, SHM_ENV_VAR};
use crate::crash::{read_crash_file, CrashRecord, CRASHFILE_ENV_VAR};
use crate::exec::{BackendKind, ExecutionReport, Executor, TeardownReport};
use crate::process::{ExecEvent, Millis, Pid, ProcessError, ProcessTree, SignalKind};

pub const DEFAULT_BUDGET_MS: Millis = 1000;
pub const DEFAULT_GRACE_MS: Millis = 100;

/// How long teardown keeps reaping before declaring pids leaked.
const TEARDOWN_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InputMode {
    #[default]
    Stdin,
    /// Input written to a temp file whose path replaces `@@` in the
    /// arguments, or is appended when no `@@` is present.
    FileArg,
}

#[derive(Debug, Clone)]
pub struct SpawnSpec {
    pub program: PathBuf,
    pub args: Vec<OsString>,
    pub env: Vec<(OsString, OsString)>,
    pub input_mode: InputMode,
    pub input: Vec<u8>,
    pub budget_ms: Millis,
    pub grace_ms: Millis,
    /// Crash-record file handed to the target via `FORKAWARE_CRASHFILE`.
    pub crash_file: Option<PathBuf>,
}

impl SpawnSpec {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        SpawnSpec {
            program: program.into(),
            args: Vec::new(),
            env: Vec::new(),
            input_mode: InputMode::Stdin,
            input: Vec::new(),
            budget_ms: DEFAULT_BUDGET_MS,
            grace_ms: DEFAULT_GRACE_MS,
            crash_file: None,
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if self.budget_ms < 10 {
            return Err(TraceError::InvalidSpec("budget_ms must be ≥ 10".into()));
        }
        if self.grace_ms < 1 {
            return Err(TraceError::InvalidSpec("grace_ms must be ≥ 1".into()));
        }
        let meta = std::fs::metadata(&self.program).map_err(|e| TraceError::SpawnFailed {
            program: self.program.clone(),
            source: e,
        })?;
        if !meta.is_file() || meta.permissions().mode() & 0o111 == 0 {
            return Err(TraceError::SpawnFailed {
                program: self.program.clone(),
                source: io::Error::new(io::ErrorKind::PermissionDenied, "not an executable file"),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("invalid spawn spec: {0}")]
    InvalidSpec(String),
    #[error("failed to spawn {program}: {source}")]
    SpawnFailed {
        program: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("process tracing unavailable: {0}")]
    TraceUnsupported(String),
    #[error("tracer desync: {0}")]
    TraceDesync(String),
    #[error("ptrace/wait failed: {0}")]
    Os(#[from] Errno),
}

impl From<ProcessError> for TraceError {
    fn from(e: ProcessError) -> Self {
        TraceError::TraceDesync(e.to_string())
    }
}

fn nix_pid(pid: Pid) -> NixPid {
    NixPid::from_raw(pid.0 as i32)
}

fn our_pid(pid: NixPid) -> Pid {
    Pid(pid.as_raw() as u32)
}

/// Whether `pid` names a live, non-zombie process.
pub fn is_alive(pid: Pid) -> bool {
    if signal::kill(nix_pid(pid), None).is_err() {
        return false;
    }
    match std::fs::read_to_string(format!("/proc/{}/stat", pid.0)) {
        // state is the first field after the parenthesised command name
        Ok(stat) => !matches!(
            stat.rfind(')')
                .and_then(|i| stat[i + 1..].split_whitespace().next()),
            Some("Z" | "X" | "x")
        ),
        Err(_) => false,
    }
}

fn parent_from_proc(pid: Pid) -> Option<Pid> {
    let stat = std::fs::read_to_string(format!("/proc/{}/stat", pid.0)).ok()?;
    let rest = &stat[stat.rfind(')')? + 1..];
    rest.split_whitespace().nth(1)?.parse().ok().map(Pid)
}

/// A live traced execution.
pub struct TraceHandle<'m> {
    root: Pid,
    start: Instant,
    budget: Duration,
    map: Option<&'m SharedMap>,
    crash_file: Option<PathBuf>,
    parents: BTreeMap<Pid, Option<Pid>>,
    live: BTreeSet<Pid>,
    /// Forked children whose initial SIGSTOP has not been consumed yet.
    awaiting_stop: BTreeSet<Pid>,
    /// New children that stopped before their parent's fork event arrived.
    early_stops: BTreeSet<Pid>,
    pending: VecDeque<ExecEvent>,
    deadline_sent: bool,
    closed: bool,
    writer: Option<thread::JoinHandle<()>>,
    _input_file: Option<tempfile::NamedTempFile>,
    _not_send: PhantomData<*const ()>,
}

/// Launches `spec.program` under ptrace with fork following enabled.
/// `map`, when given, is advertised to the target via `FORKAWARE_SHM_ID`.
pub fn spawn_traced<'m>(
    spec: &SpawnSpec,
    map: Option<&'m SharedMap>,
) -> Result<TraceHandle<'m>, TraceError> {
    spec.validate()?;

    let mut input_file = None;
    let mut args = spec.args.clone();
    if spec.input_mode == InputMode::FileArg {
        let mut file = tempfile::NamedTempFile::new().map_err(|e| TraceError::SpawnFailed {
            program: spec.program.clone(),
            source: e,
        })?;
        file.write_all(&spec.input)
            .and_then(|_| file.flush())
            .map_err(|e| TraceError::SpawnFailed {
                program: spec.program.clone(),
                source: e,
            })?;
        let path: OsString = file.path().into();
        match args.iter_mut().find(|a| *a == "@@") {
            Some(slot) => *slot = path,
            None => args.push(path),
        }
        input_file = Some(file);
    }

    let mut cmd = Command::new(&spec.program);
    cmd.args(&args)
        .envs(spec.env.iter().map(|(k, v)| (k, v)))
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .stdin(match spec.input_mode {
            InputMode::Stdin => Stdio::piped(),
            InputMode::FileArg => Stdio::null(),
        });
    if let Some(map) = map {
        cmd.env(SHM_ENV_VAR, map.env_value());
    }
    if let Some(path) = &spec.crash_file {
        cmd.env(CRASHFILE_ENV_VAR, path);
    }
    // SAFETY: ptrace(TRACEME) is async-signal-safe.
    unsafe {
        cmd.pre_exec(|| {
            if libc::ptrace(libc::PTRACE_TRACEME, 0, 0, 0) == -1 {
                return Err(io::Error::last_os_error());
            }
            Ok(())
        });
    }

    let start = Instant::now();
    let mut child = cmd.spawn().map_err(|e| match e.raw_os_error() {
        Some(libc::EPERM) | Some(libc::ENOSYS) => TraceError::TraceUnsupported(e.to_string()),
        _ => TraceError::SpawnFailed {
            program: spec.program.clone(),
            source: e,
        },
    })?;
    let root = Pid(child.id());

    match waitpid(nix_pid(root), Some(WaitPidFlag::__WALL))? {
        WaitStatus::Stopped(_, Signal::SIGTRAP) => {}
        other => {
            return Err(TraceError::TraceDesync(format!(
                "expected exec stop of {root}, got {other:?}"
            )))
        }
    }
    ptrace::setoptions(
        nix_pid(root),
        ptrace::Options::PTRACE_O_TRACEFORK
            | ptrace::Options::PTRACE_O_TRACEVFORK
            | ptrace::Options::PTRACE_O_TRACEEXEC
            | ptrace::Options::PTRACE_O_EXITKILL,
    )?;

    let writer = child.stdin.take().map(|mut stdin| {
        let input = spec.input.clone();
        // a broken pipe just means the target did not read its input
        thread::spawn(move || {
            let _ = stdin.write_all(&input);
        })
    });

    ptrace::cont(nix_pid(root), None)?;
    debug!("traced {} as pid {root}", spec.program.display());

    Ok(TraceHandle {
        root,
        start,
        budget: Duration::from_millis(spec.budget_ms),
        map,
        crash_file: spec.crash_file.clone(),
        parents: BTreeMap::from([(root, None)]),
        live: BTreeSet::from([root]),
        awaiting_stop: BTreeSet::new(),
        early_stops: BTreeSet::new(),
        pending: VecDeque::new(),
        deadline_sent: false,
        closed: false,
        writer,
        _input_file: input_file,
        _not_send: PhantomData,
    })
}

fn wait_any(nohang: bool) -> Result<WaitStatus, Errno> {
    let mut flags = WaitPidFlag::__WALL | WaitPidFlag::__WNOTHREAD;
    if nohang {
        flags |= WaitPidFlag::WNOHANG;
    }
    waitpid(None, Some(flags))
}

fn resume(pid: NixPid, sig: Option<Signal>) {
    // ESRCH: the tracee died (e.g. SIGKILL) between the stop and now
    if let Err(e) = ptrace::cont(pid, sig) {
        if e != Errno::ESRCH {
            warn!("PTRACE_CONT {pid} failed: {e}");
        }
    }
}

impl<'m> TraceHandle<'m> {
    pub fn root(&self) -> Pid {
        self.root
    }

    /// Every pid this handle has ever tracked.
    pub fn tracked(&self) -> BTreeSet<Pid> {
        self.parents.keys().copied().collect()
    }

    pub fn live(&self) -> &BTreeSet<Pid> {
        &self.live
    }

    fn now_ms(&self) -> Millis {
        self.start.elapsed().as_millis() as Millis
    }

    fn track_fork(&mut self, parent: Pid, child: Pid) -> ExecEvent {
        self.parents.insert(child, Some(parent));
        self.live.insert(child);
        if self.early_stops.remove(&child) {
            resume(nix_pid(child), None);
        } else {
            self.awaiting_stop.insert(child);
        }
        ExecEvent::ForkObserved {
            parent,
            child,
            at: self.now_ms(),
        }
    }

    /// Translates one wait status. `Ok(None)` means the notification was
    /// consumed internally (resumed stop, exec, initial child stop).
    fn translate(&mut self, status: WaitStatus) -> Result<Option<ExecEvent>, TraceError> {
        let at = self.now_ms();
        match status {
            WaitStatus::Exited(pid, code) => {
                let pid = self.known(our_pid(pid))?;
                self.live.remove(&pid);
                Ok(Some(ExecEvent::Exited { pid, code, at }))
            }
            WaitStatus::Signaled(pid, sig, _) => {
                let pid = self.known(our_pid(pid))?;
                self.live.remove(&pid);
                Ok(Some(ExecEvent::FatalSignal {
                    pid,
                    sig: SignalKind::from_raw(sig as i32),
                    at,
                }))
            }
            WaitStatus::PtraceEvent(raw, _, event) => {
                let pid = self.known(our_pid(raw))?;
                let ev = if event == libc::PTRACE_EVENT_FORK || event == libc::PTRACE_EVENT_VFORK {
                    let child = Pid(ptrace::getevent(raw)? as u32);
                    Some(self.track_fork(pid, child))
                } else {
                    None
                };
                resume(raw, None);
                Ok(ev)
            }
            WaitStatus::Stopped(raw, sig) => {
                let pid = our_pid(raw);
                if !self.parents.contains_key(&pid) {
                    if sig == Signal::SIGSTOP {
                        self.early_stops.insert(pid);
                        return Ok(None);
                    }
                    return Err(TraceError::TraceDesync(format!(
                        "stop of untracked pid {pid}"
                    )));
                }
                if sig == Signal::SIGSTOP && self.awaiting_stop.remove(&pid) {
                    resume(raw, None);
                    return Ok(None);
                }
                // group-stop reports have no siginfo; re-injecting would loop
                let inject = match ptrace::getsiginfo(raw) {
                    Err(Errno::EINVAL) => None,
                    _ => Some(sig),
                };
                resume(raw, inject);
                Ok(None)
            }
            WaitStatus::PtraceSyscall(raw) => {
                resume(raw, None);
                Ok(None)
            }
            WaitStatus::Continued(_) | WaitStatus::StillAlive => Ok(None),
        }
    }

    fn known(&self, pid: Pid) -> Result<Pid, TraceError> {
        if self.parents.contains_key(&pid) {
            Ok(pid)
        } else {
            Err(TraceError::TraceDesync(format!(
                "notification for untracked pid {pid}"
            )))
        }
    }

    /// Next lifecycle event from any process in the tree. `Ok(None)` once
    /// every tracked process has terminated. Delivers `DeadlineReached` once
    /// when the budget expires with processes still live.
    pub fn next_event(&mut self) -> Result<Option<ExecEvent>, TraceError> {
        if let Some(ev) = self.pending.pop_front() {
            return Ok(Some(ev));
        }
        let mut backoff = Duration::from_micros(50);
        loop {
            if self.closed || self.live.is_empty() {
                return Ok(None);
            }
            match wait_any(true) {
                Ok(WaitStatus::StillAlive) => {
                    if !self.deadline_sent && self.start.elapsed() >= self.budget {
                        self.deadline_sent = true;
                        return Ok(Some(ExecEvent::DeadlineReached { at: self.now_ms() }));
                    }
                    thread::sleep(backoff);
                    backoff = (backoff * 2).min(Duration::from_millis(2));
                }
                Ok(status) => {
                    if let Some(ev) = self.translate(status)? {
                        return Ok(Some(ev));
                    }
                    backoff = Duration::from_micros(50);
                }
                Err(Errno::ECHILD) => {
                    warn!(
                        "no waitable tracees left; {} pid(s) unaccounted",
                        self.live.len()
                    );
                    return Ok(None);
                }
                Err(Errno::EINTR) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn depth(&self, mut pid: Pid) -> usize {
        let mut depth = 0;
        while let Some(Some(parent)) = self.parents.get(&pid) {
            depth += 1;
            pid = *parent;
        }
        depth
    }

    /// SIGKILLs every live tracked process, deepest first, reaps them, and
    /// verifies by polling that none survived. Lifecycle events that race
    /// with the teardown (late forks, natural exits) are queued and can be
    /// collected with [`TraceHandle::take_pending`].
    pub fn kill_tree(&mut self) -> TeardownReport {
        let at = self.now_ms();
        let mut killed = Vec::new();
        if !self.closed {
            let started = Instant::now();
            let mut signalled = BTreeSet::new();
            while !self.live.is_empty() && started.elapsed() < TEARDOWN_TIMEOUT {
                let mut order: Vec<Pid> = self.live.difference(&signalled).copied().collect();
                order.sort_by_key(|&p| std::cmp::Reverse(self.depth(p)));
                for pid in order {
                    match signal::kill(nix_pid(pid), Signal::SIGKILL) {
                        Ok(()) | Err(Errno::ESRCH) => {}
                        Err(e) => warn!("kill {pid}: {e}"),
                    }
                    signalled.insert(pid);
                }
                match wait_any(true) {
                    Ok(WaitStatus::StillAlive) => thread::sleep(Duration::from_micros(200)),
                    Ok(WaitStatus::Signaled(raw, Signal::SIGKILL, _))
                        if signalled.contains(&our_pid(raw)) =>
                    {
                        self.live.remove(&our_pid(raw));
                        killed.push(our_pid(raw));
                    }
                    Ok(WaitStatus::Stopped(raw, Signal::SIGSTOP))
                        if !self.parents.contains_key(&our_pid(raw)) =>
                    {
                        // a child forked during teardown whose parent's event
                        // may never be reported
                        let child = our_pid(raw);
                        match parent_from_proc(child).filter(|p| self.parents.contains_key(p)) {
                            Some(parent) => {
                                let ev = self.track_fork(parent, child);
                                self.pending.push_back(ev);
                            }
                            None => warn!("untracked pid {child} stopped during teardown"),
                        }
                    }
                    Ok(WaitStatus::PtraceEvent(raw, _, event))
                        if event == libc::PTRACE_EVENT_FORK
                            || event == libc::PTRACE_EVENT_VFORK =>
                    {
                        if let Ok(msg) = ptrace::getevent(raw) {
                            let child = Pid(msg as u32);
                            if !self.parents.contains_key(&child) {
                                let ev = self.track_fork(our_pid(raw), child);
                                self.pending.push_back(ev);
                            }
                        }
                        resume(raw, None);
                    }
                    Ok(status @ (WaitStatus::Exited(..) | WaitStatus::Signaled(..))) => {
                        match self.translate(status) {
                            Ok(Some(ev)) => self.pending.push_back(ev),
                            Ok(None) => {}
                            Err(e) => warn!("during teardown: {e}"),
                        }
                    }
                    Ok(_) => {}
                    Err(Errno::ECHILD) => break,
                    Err(e) => {
                        warn!("wait during teardown: {e}");
                        break;
                    }
                }
            }
            self.closed = true;
        }
        if let Some(writer) = self.writer.take() {
            let _ = writer.join();
        }
        let leaked: Vec<Pid> = self
            .tracked()
            .into_iter()
            .filter(|&p| is_alive(p))
            .collect();
        if !leaked.is_empty() {
            warn!("teardown leaked {leaked:?}");
        }
        TeardownReport { killed, leaked, at }
    }

    pub fn take_pending(&mut self) -> Vec<ExecEvent> {
        self.pending.drain(..).collect()
    }

    /// Runs the execution to completion or deadline, tears the tree down and
    /// assembles the report.
    pub fn drain(mut self) -> Result<ExecutionReport, TraceError> {
        let mut tree = ProcessTree::new(self.root, 0);
        let mut events = Vec::new();
        let mut deadline_at = None;
        let result = loop {
            match self.next_event() {
                Ok(Some(ev)) => {
                    if let Err(e) = tree.apply(&ev) {
                        break Err(e.into());
                    }
                    if let ExecEvent::DeadlineReached { at } = ev {
                        deadline_at = Some(at);
                        events.push(ev);
                        break Ok(());
                    }
                    events.push(ev);
                }
                Ok(None) => break Ok(()),
                Err(e) => break Err(e),
            }
        };
        let teardown = self.kill_tree();
        result?;

        for ev in self.take_pending() {
            tree.apply(&ev)?;
            events.push(ev);
        }
        for &pid in &teardown.killed {
            tree.mark_killed(pid, teardown.at)?;
        }
        // the shared map is read once every writer is gone
        let bitmap = self.map.map_or_else(CoverageBitmap::new, |m| m.snapshot());
        let crash_records = match &self.crash_file {
            Some(path) => read_crash_file(path)
                .map_err(|e| TraceError::TraceDesync(e.to_string()))?
                .into_iter()
                .map(|raw| CrashRecord::attribute(raw, &tree))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| TraceError::TraceDesync(e.to_string()))?,
            None => Vec::new(),
        };
        let ended_at = deadline_at
            .or_else(|| events.iter().map(ExecEvent::at).max())
            .unwrap_or(0);
        Ok(ExecutionReport {
            backend: BackendKind::Real,
            tree,
            events,
            crash_records,
            bitmap,
            deadline_at,
            ended_at,
            teardown: Some(teardown),
            wall_ms: self.now_ms(),
        })
    }
}

impl Drop for TraceHandle<'_> {
    fn drop(&mut self) {
        if !self.closed {
            self.kill_tree();
        }
    }
}

/// Checks that fork-following tracing works on this host by tracing
/// `/bin/sh -c :`.
pub fn probe_support() -> Result<(), TraceError> {
    let sh = Path::new("/bin/sh");
    let mut spec = SpawnSpec::new(sh);
    spec.args = vec!["-c".into(), ":".into()];
    let report = spawn_traced(&spec, None)?.drain()?;
    if report.tree.root_node().state.is_terminal() {
        Ok(())
    } else {
        Err(TraceError::TraceUnsupported(
            "probe target did not terminate".into(),
        ))
    }
}

/// Executes a real binary once per input: fresh spawn, zeroed shared map,
/// fresh crash file.
pub struct RealExecutor {
    template: SpawnSpec,
    map: SharedMap,
    crash_dir: tempfile::TempDir,
}

impl RealExecutor {
    pub fn new(template: SpawnSpec) -> Result<Self, crate::Error> {
        template.validate()?;
        Ok(RealExecutor {
            template,
            map: SharedMap::create()?,
            crash_dir: tempfile::tempdir()?,
        })
    }

    pub fn spec(&self) -> &SpawnSpec {
        &self.template
    }
}

impl Executor for RealExecutor {
    fn backend(&self) -> BackendKind {
        BackendKind::Real
    }

    fn execute(&mut self, input: &[u8]) -> Result<ExecutionReport, crate::Error> {
        self.map.clear();
        let crash_file = self.crash_dir.path().join("crashes");
        match std::fs::remove_file(&crash_file) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        let mut spec = self.template.clone();
        spec.input = input.to_vec();
        spec.crash_file = Some(crash_file);
        Ok(spawn_traced(&spec, Some(&self.map))?.drain()?)
    }
}
