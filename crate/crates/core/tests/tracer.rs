mod common;

use std::collections::BTreeSet;

use forkaware::detect::{detect_bugs, detect_hangs, filter_view, HangReason, MonitorProfile};
use forkaware::exec::Executor;
use forkaware::tracer::{is_alive, spawn_traced, InputMode, RealExecutor, SpawnSpec};
use forkaware::{ExecEvent, ProcessState, SignalKind};

use common::fixture;

fn spec(path: &std::path::Path, budget_ms: u64) -> SpawnSpec {
    let mut spec = SpawnSpec::new(path);
    spec.budget_ms = budget_ms;
    spec.grace_ms = 50;
    spec
}

#[test]
fn exit_immediately() {
    let bin = fixture("exit_now");
    let report = spawn_traced(&spec(&bin.path, 1000), None)
        .unwrap()
        .drain()
        .unwrap();
    assert_eq!(report.tree.len(), 1);
    assert_eq!(report.tree.root_node().state, ProcessState::Exited(0));
    assert_eq!(report.deadline_at, None);
    let teardown = report.teardown.unwrap();
    assert!(teardown.killed.is_empty());
    assert!(teardown.leaked.is_empty());
}

#[test]
fn loop_chain_is_killed_deepest_first() {
    let bin = fixture("loop_chain");
    let handle = spawn_traced(&spec(&bin.path, 200), None).unwrap();
    let root = handle.root();
    let report = handle.drain().unwrap();

    assert_eq!(report.tree.len(), 4);
    assert_eq!(report.tree.root_node().state, ProcessState::Exited(0));
    assert!(report.deadline_at.is_some());
    let teardown = report.teardown.clone().unwrap();
    assert_eq!(teardown.killed.len(), 3);
    assert!(teardown.leaked.is_empty());
    let depths: Vec<u32> = teardown
        .killed
        .iter()
        .map(|p| report.tree.get(*p).unwrap().depth)
        .collect();
    assert!(
        depths.windows(2).all(|w| w[0] >= w[1]),
        "kill order {depths:?}"
    );
    for pid in report.tree.nodes.keys() {
        assert!(!is_alive(*pid), "{pid} survived");
    }
    assert!(report.tree.live().is_empty());
    report.tree.validate().unwrap();

    let hangs = detect_hangs(&report, 200, 50);
    assert_eq!(hangs.len(), 3);
    assert!(hangs
        .iter()
        .all(|h| h.reason == HangReason::OutlivedRoot && h.pid != root));
    assert!(detect_hangs(
        &filter_view(&MonitorProfile::parent_only(), &report),
        200,
        50
    )
    .is_empty());
}

#[test]
fn double_crash_reports_both_depths() {
    let bin = fixture("double_crash");
    let report = spawn_traced(&spec(&bin.path, 1000), None)
        .unwrap()
        .drain()
        .unwrap();
    assert_eq!(report.tree.len(), 3);
    assert_eq!(report.tree.root_node().state, ProcessState::Exited(0));
    let bugs = detect_bugs(&report);
    let found: BTreeSet<(u32, SignalKind)> = bugs.iter().map(|b| (b.depth, b.signal)).collect();
    assert_eq!(
        found,
        BTreeSet::from([(1, SignalKind::Abrt), (2, SignalKind::Segv)])
    );
    let deep = bugs.iter().find(|b| b.depth == 2).unwrap();
    assert_eq!(deep.path.len(), 3);
    assert_eq!(deep.path[0], report.tree.root);
    assert!(detect_bugs(&filter_view(&MonitorProfile::parent_only(), &report)).is_empty());
}

#[test]
fn nonfatal_signals_are_forwarded() {
    let bin = fixture("sigusr");
    let report = spawn_traced(&spec(&bin.path, 1000), None)
        .unwrap()
        .drain()
        .unwrap();
    assert_eq!(report.tree.root_node().state, ProcessState::Exited(7));
}

#[test]
fn file_argument_input() {
    let bin = fixture("echo_len");
    let mut s = spec(&bin.path, 1000);
    s.input_mode = InputMode::FileArg;
    s.args = vec!["@@".into()];
    s.input = vec![1; 42];
    let report = spawn_traced(&s, None).unwrap().drain().unwrap();
    assert_eq!(report.tree.root_node().state, ProcessState::Exited(42));

    s.args.clear();
    s.input = vec![1; 5];
    let report = spawn_traced(&s, None).unwrap().drain().unwrap();
    assert_eq!(report.tree.root_node().state, ProcessState::Exited(5));
}

#[test]
fn dropped_handle_leaves_no_processes() {
    let bin = fixture("loop_chain");
    let mut handle = spawn_traced(&spec(&bin.path, 5000), None).unwrap();
    let mut forks = 0;
    while forks < 3 {
        if let Some(ExecEvent::ForkObserved { .. }) = handle.next_event().unwrap() {
            forks += 1;
        }
    }
    let tracked = handle.tracked();
    assert_eq!(tracked.len(), 4);
    drop(handle);
    assert!(tracked.iter().all(|p| !is_alive(*p)));
}

#[test]
fn executor_reuse_is_isolated() {
    let bin = fixture("double_crash");
    let mut exec = RealExecutor::new(spec(&bin.path, 1000)).unwrap();
    for _ in 0..3 {
        let report = exec.execute(&[0]).unwrap();
        assert_eq!(detect_bugs(&report).len(), 2);
        assert!(report.teardown.unwrap().leaked.is_empty());
    }
}
