mod common;

use std::io::Write;
use std::os::unix::process::CommandExt;
use std::process::{Command, Stdio};
use std::time::Duration;

use forkaware::challenge::{
    arm, child_entry, parent_edges, ChallengeParams, PARENT_BRANCH, ROOT_ENTRY,
};
use forkaware::coverage::{SharedMap, SHM_ENV_VAR};
use forkaware::crash::{parse_records, CRASHFILE_ENV_VAR, RECORD_LEN};
use forkaware::detect::{detect_bugs, detect_hangs, HangReason};
use forkaware::exec::Executor;
use forkaware::tracer::{spawn_traced, RealExecutor, SpawnSpec};
use forkaware::{ChallengeKind, ProcessState, SignalKind};

use common::challenges;

#[test]
fn interface_names() {
    assert_eq!(SHM_ENV_VAR, "FORKAWARE_SHM_ID");
    assert_eq!(CRASHFILE_ENV_VAR, "FORKAWARE_CRASHFILE");
    assert_eq!(RECORD_LEN, 16);
}

fn run_standalone(path: &std::path::Path, stdin: &[u8]) -> (std::process::ExitStatus, i32) {
    let mut cmd = Command::new(path);
    cmd.stdin(Stdio::piped())
        .env_remove(SHM_ENV_VAR)
        .env_remove(CRASHFILE_ENV_VAR)
        .process_group(0);
    let mut child = cmd.spawn().unwrap();
    child.stdin.take().unwrap().write_all(stdin).unwrap();
    let pgid = child.id() as i32;
    (child.wait().unwrap(), pgid)
}

/// Whether any process of group `pgid` is still running.
fn group_alive(pgid: i32) -> bool {
    unsafe { libc::kill(-pgid, 0) == 0 }
}

#[test]
fn standalone_runs() {
    let built = challenges();
    for kind in [ChallengeKind::A, ChallengeKind::C] {
        let (status, pgid) = run_standalone(&built.bins.path(kind), &[1, 2, 3, 4]);
        assert_eq!(status.code(), Some(0), "{kind}");
        std::thread::sleep(Duration::from_millis(50));
        assert!(!group_alive(pgid), "{kind} left processes behind");
    }

    let (status, pgid) = run_standalone(&built.bins.path(ChallengeKind::B), &[]);
    assert_eq!(status.code(), Some(0));
    std::thread::sleep(Duration::from_millis(100));
    assert!(
        group_alive(pgid),
        "challenge B child should still be spinning"
    );
    unsafe { libc::kill(-pgid, libc::SIGKILL) };
}

fn traced(kind: ChallengeKind, input: &[u8]) -> forkaware::ExecutionReport {
    let built = challenges();
    let mut spec = SpawnSpec::new(built.bins.path(kind));
    spec.budget_ms = 300;
    spec.grace_ms = 50;
    RealExecutor::new(spec).unwrap().execute(input).unwrap()
}

#[test]
fn challenge_a_under_tracer() {
    let report = traced(ChallengeKind::A, &[0]);
    let bugs = detect_bugs(&report);
    assert_eq!(bugs.len(), 1);
    assert_eq!(bugs[0].signal, SignalKind::Segv);
    assert_eq!(bugs[0].depth, 1);
    assert_eq!(report.crash_records.len(), 1);
    assert_eq!(report.crash_records[0].pid, bugs[0].pid);
    assert_eq!(report.tree.root_node().state, ProcessState::Exited(0));
    assert!(report.bitmap.get(ROOT_ENTRY) > 0);
    assert!(report.bitmap.get(PARENT_BRANCH) > 0);
    assert!(report.bitmap.get(child_entry(1)) > 0);
}

#[test]
fn challenge_b_under_tracer() {
    let report = traced(ChallengeKind::B, &[0]);
    let hangs = detect_hangs(&report, 300, 50);
    assert_eq!(hangs.len(), 1);
    assert_eq!(hangs[0].reason, HangReason::OutlivedRoot);
    assert_eq!(hangs[0].depth, 1);
    let teardown = report.teardown.unwrap();
    assert_eq!(teardown.killed, vec![hangs[0].pid]);
    assert!(teardown.leaked.is_empty());
}

#[test]
fn challenge_c_writes_four_child_edges() {
    let params = ChallengeParams::canonical(ChallengeKind::C);
    let built = challenges();
    let mut spec = SpawnSpec::new(built.bins.path(ChallengeKind::C));
    spec.budget_ms = 300;
    let mut exec = RealExecutor::new(spec).unwrap();
    for input in params.parity_inputs() {
        let report = exec.execute(&input).unwrap();
        let child: Vec<_> = report
            .bitmap
            .nonzero()
            .map(|(e, _)| e)
            .filter(|e| !parent_edges().contains(e))
            .collect();
        let expected: Vec<_> = (0..4).map(|i| arm(i, input[i as usize] % 2 == 1)).collect();
        assert_eq!(child, expected, "input {input:?}");
    }
}

#[test]
fn crash_file_holds_one_record() {
    let built = challenges();
    let dir = tempfile::tempdir().unwrap();
    let crash_file = dir.path().join("crashes");
    let mut spec = SpawnSpec::new(built.bins.path(ChallengeKind::A));
    spec.crash_file = Some(crash_file.clone());
    let map = SharedMap::create().unwrap();
    let report = spawn_traced(&spec, Some(&map)).unwrap().drain().unwrap();

    let bytes = std::fs::read(&crash_file).unwrap();
    assert_eq!(bytes.len(), 16);
    let records = parse_records(&bytes).unwrap();
    let child = report.tree.children(report.tree.root).next().unwrap().pid;
    assert_eq!(records[0].pid, child.0 as u64);
    assert_eq!(records[0].signo, libc::SIGSEGV as u64);
    assert_eq!(
        u64::from_le_bytes(bytes[..8].try_into().unwrap()),
        child.0 as u64
    );
}
