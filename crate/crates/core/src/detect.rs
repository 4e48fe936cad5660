//! Bug, hang and coverage detectors over whole process trees, and the
//! monitor profiles that model what a given monitoring technique can see.
//!
//! Detectors never look at a raw report directly: a report is first reduced
//! to a profile's view with [`filter_view`]. A parent-only monitor (POSIX
//! signals from the launched process) loses every child lifecycle event and
//! every crash record; a crash-record monitor (sanitizer reports, crash
//! files) loses child lifecycle but keeps the records; a fork-aware monitor
//! sees everything. All three keep the shared bitmap.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::challenge::{ChallengeKind, ChallengeParams};
use crate::coverage::{CoverageBitmap, EdgeId};
use crate::exec::ExecutionReport;
use crate::process::{Millis, Pid, ProcessNode, ProcessState, ProcessTree, SignalKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileName {
    ParentOnly,
    Crashfile,
    ForkAware,
}

impl ProfileName {
    pub const ALL: [ProfileName; 3] = [
        ProfileName::ParentOnly,
        ProfileName::Crashfile,
        ProfileName::ForkAware,
    ];

    pub fn profile(self) -> MonitorProfile {
        match self {
            ProfileName::ParentOnly => MonitorProfile::parent_only(),
            ProfileName::Crashfile => MonitorProfile::crashfile(),
            ProfileName::ForkAware => MonitorProfile::fork_aware(),
        }
    }

    /// Verdict pattern `(c1, c2, c3)` the profile is expected to produce on
    /// the canonical challenges: the AFL family, the sanitizer/ptrace
    /// fuzzers, and a fully fork-aware monitor respectively.
    pub fn expected(self) -> [bool; 3] {
        match self {
            ProfileName::ParentOnly => [false, false, true],
            ProfileName::Crashfile => [true, false, true],
            ProfileName::ForkAware => [true, true, true],
        }
    }
}

impl fmt::Display for ProfileName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProfileName::ParentOnly => "parent_only",
            ProfileName::Crashfile => "crashfile",
            ProfileName::ForkAware => "fork_aware",
        })
    }
}

impl FromStr for ProfileName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "parent_only" => Ok(ProfileName::ParentOnly),
            "crashfile" => Ok(ProfileName::Crashfile),
            "fork_aware" => Ok(ProfileName::ForkAware),
            other => Err(format!("unknown profile `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MonitorProfile {
    pub name: ProfileName,
    pub sees_child_lifecycle: bool,
    pub sees_crash_records: bool,
    pub sees_shared_bitmap: bool,
}

impl MonitorProfile {
    pub const fn parent_only() -> Self {
        MonitorProfile {
            name: ProfileName::ParentOnly,
            sees_child_lifecycle: false,
            sees_crash_records: false,
            sees_shared_bitmap: true,
        }
    }

    pub const fn crashfile() -> Self {
        MonitorProfile {
            name: ProfileName::Crashfile,
            sees_child_lifecycle: false,
            sees_crash_records: true,
            sees_shared_bitmap: true,
        }
    }

    pub const fn fork_aware() -> Self {
        MonitorProfile {
            name: ProfileName::ForkAware,
            sees_child_lifecycle: true,
            sees_crash_records: true,
            sees_shared_bitmap: true,
        }
    }
}

/// Reduces a report to what `profile` can observe.
pub fn filter_view(profile: &MonitorProfile, report: &ExecutionReport) -> ExecutionReport {
    let mut view = report.clone();
    let root = report.tree.root;
    if !profile.sees_child_lifecycle {
        view.tree = ProcessTree {
            root,
            nodes: BTreeMap::from([(root, report.tree.root_node().clone())]),
        };
        view.events
            .retain(|ev| ev.subject().is_none_or(|pid| pid == root));
        if let Some(teardown) = view.teardown.as_mut() {
            teardown.killed.retain(|&pid| pid == root);
            teardown.leaked.retain(|&pid| pid == root);
        }
    }
    if !profile.sees_crash_records {
        view.crash_records.clear();
    }
    if !profile.sees_shared_bitmap {
        view.bitmap = CoverageBitmap::new();
    }
    view
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BugFinding {
    pub pid: Pid,
    pub signal: SignalKind,
    pub depth: u32,
    pub path: Vec<Pid>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HangReason {
    OutlivedRoot,
    BudgetExceeded,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HangFinding {
    pub pid: Pid,
    pub depth: u32,
    pub reason: HangReason,
    pub observed_at: Millis,
}

/// One finding per fatal-bug signal or crash record visible in `view`,
/// ordered by pid.
pub fn detect_bugs(view: &ExecutionReport) -> Vec<BugFinding> {
    let mut found = BTreeMap::new();
    for node in view.tree.nodes.values() {
        if let ProcessState::FatalSignal(sig) = node.state {
            if sig.is_fatal_bug() {
                let path = view.tree.tree_path(node.pid).expect("node is in tree");
                found.insert(
                    node.pid,
                    BugFinding {
                        pid: node.pid,
                        signal: sig,
                        depth: node.depth,
                        path,
                    },
                );
            }
        }
    }
    for rec in &view.crash_records {
        if rec.signal.is_fatal_bug() {
            found.entry(rec.pid).or_insert_with(|| BugFinding {
                pid: rec.pid,
                signal: rec.signal,
                depth: rec.depth,
                path: rec.path.clone(),
            });
        }
    }
    found.into_values().collect()
}

/// Alive at `t`. A process killed by the monitor was still running at the
/// instant of the kill.
fn alive_at(node: &ProcessNode, t: Millis) -> bool {
    node.spawned_at <= t
        && match (node.state, node.terminated_at) {
            (_, None) => true,
            (ProcessState::KilledByMonitor, Some(end)) => t <= end,
            (_, Some(end)) => t < end,
        }
}

/// Hang findings for every visible process that was still running
/// `grace_ms` after the root terminated (OutlivedRoot) or when the budget
/// expired (BudgetExceeded). Only instants inside the observation window
/// count; one finding per pid, keeping the earlier observation.
pub fn detect_hangs(
    view: &ExecutionReport,
    budget_ms: Millis,
    grace_ms: Millis,
) -> Vec<HangFinding> {
    let tree = &view.tree;
    let root = tree.root_node();
    let outlive_at = match (root.state, root.terminated_at) {
        (ProcessState::KilledByMonitor, _) | (_, None) => None,
        (_, Some(end)) => Some(end + grace_ms),
    }
    .filter(|&t| t <= view.ended_at);
    let budget_at = Some(budget_ms).filter(|&t| t <= view.ended_at);

    let mut findings = Vec::new();
    for node in tree.nodes.values() {
        let outlived = outlive_at
            .filter(|&t| node.pid != tree.root && alive_at(node, t))
            .map(|t| (t, HangReason::OutlivedRoot));
        let exceeded = budget_at
            .filter(|&t| alive_at(node, t))
            .map(|t| (t, HangReason::BudgetExceeded));
        let earliest = match (outlived, exceeded) {
            (Some(o), Some(b)) => Some(if o.0 <= b.0 { o } else { b }),
            (o, b) => o.or(b),
        };
        if let Some((observed_at, reason)) = earliest {
            findings.push(HangFinding {
                pid: node.pid,
                depth: node.depth,
                reason,
                observed_at,
            });
        }
    }
    findings
}

pub fn coverage_achieved(view: &ExecutionReport, required_edges: &BTreeSet<EdgeId>) -> bool {
    required_edges.iter().all(|&e| view.bitmap.get(e) != 0)
}

/// Per-criterion verdicts. A criterion is `None` when the challenge that
/// produced the reports does not exercise it (A exercises C1, B exercises
/// C2, C exercises C3).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Verdicts {
    pub c1: Option<bool>,
    pub c2: Option<bool>,
    pub c3: Option<bool>,
}

impl Verdicts {
    /// Fills criteria missing here from `other`.
    pub fn combine(self, other: Verdicts) -> Verdicts {
        Verdicts {
            c1: self.c1.or(other.c1),
            c2: self.c2.or(other.c2),
            c3: self.c3.or(other.c3),
        }
    }

    pub fn as_array(&self) -> [Option<bool>; 3] {
        [self.c1, self.c2, self.c3]
    }

    /// Every exercised criterion matches `expected`.
    pub fn matches(&self, expected: [bool; 3]) -> bool {
        self.as_array()
            .iter()
            .zip(expected)
            .all(|(v, e)| v.is_none_or(|v| v == e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budgets {
    pub budget_ms: Millis,
    pub grace_ms: Millis,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            budget_ms: 1000,
            grace_ms: 100,
        }
    }
}

/// Raw reports from executing one challenge.
#[derive(Debug, Clone)]
pub struct ChallengeRun {
    pub params: ChallengeParams,
    pub reports: Vec<ExecutionReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoreError {
    #[error("reports come from challenge {actual}, expected {expected}")]
    WrongChallenge {
        expected: ChallengeKind,
        actual: ChallengeKind,
    },
    #[error("no reports to score")]
    NoReports,
}

/// Scores one challenge run under `profile`. Bugs and hangs are decided by
/// majority over the reports; coverage by the union of their bitmaps.
pub fn score(
    profile: &MonitorProfile,
    kind: ChallengeKind,
    run: &ChallengeRun,
    budgets: &Budgets,
) -> Result<Verdicts, ScoreError> {
    if run.params.kind != kind {
        return Err(ScoreError::WrongChallenge {
            expected: kind,
            actual: run.params.kind,
        });
    }
    if run.reports.is_empty() {
        return Err(ScoreError::NoReports);
    }
    let views: Vec<_> = run
        .reports
        .iter()
        .map(|r| filter_view(profile, r))
        .collect();
    let majority = |hits: usize| hits * 2 > views.len();
    let verdicts = match kind {
        ChallengeKind::A => Verdicts {
            c1: Some(majority(
                views.iter().filter(|v| !detect_bugs(v).is_empty()).count(),
            )),
            ..Verdicts::default()
        },
        ChallengeKind::B => Verdicts {
            c2: Some(majority(
                views
                    .iter()
                    .filter(|v| !detect_hangs(v, budgets.budget_ms, budgets.grace_ms).is_empty())
                    .count(),
            )),
            ..Verdicts::default()
        },
        ChallengeKind::C => {
            let mut union = views[0].clone();
            for v in &views[1..] {
                union.bitmap.absorb(&v.bitmap);
            }
            Verdicts {
                c3: Some(coverage_achieved(
                    &union,
                    &run.params.required_child_edges(),
                )),
                ..Verdicts::default()
            }
        }
    };
    Ok(verdicts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::challenge::ChallengeParams;
    use crate::exec::Executor;
    use crate::sim::{SimExecutor, SimPolicy};

    fn run(kind: ChallengeKind) -> ExecutionReport {
        SimExecutor::challenge(&ChallengeParams::canonical(kind), SimPolicy::default())
            .unwrap()
            .execute(&[0, 0, 0, 0])
            .unwrap()
    }

    #[test]
    fn fork_aware_view_is_identity() {
        for kind in ChallengeKind::ALL {
            let report = run(kind);
            assert_eq!(filter_view(&MonitorProfile::fork_aware(), &report), report);
        }
    }

    #[test]
    fn challenge_a_views() {
        let report = run(ChallengeKind::A);
        let aware = detect_bugs(&filter_view(&MonitorProfile::fork_aware(), &report));
        assert_eq!(aware.len(), 1);
        assert_eq!(aware[0].depth, 1);
        assert_eq!(aware[0].signal, SignalKind::Segv);
        assert_eq!(aware[0].path.len(), 2);

        let parent = filter_view(&MonitorProfile::parent_only(), &report);
        assert!(!parent
            .events
            .iter()
            .any(|e| matches!(e, crate::process::ExecEvent::FatalSignal { .. })));
        assert!(detect_bugs(&parent).is_empty());

        let crashfile = filter_view(&MonitorProfile::crashfile(), &report);
        assert_eq!(crashfile.crash_records.len(), 1);
        assert_eq!(crashfile.tree.len(), 1);
        assert_eq!(detect_bugs(&crashfile).len(), 1);
    }

    #[test]
    fn no_fork_target_has_no_findings() {
        let report = SimExecutor::new(
            crate::sim::TargetScript {
                root: crate::sim::ProcessScript::new([crate::sim::Action::Exit(0)]),
            },
            SimPolicy::default(),
        )
        .execute(&[])
        .unwrap();
        assert!(detect_bugs(&report).is_empty());
        assert!(detect_hangs(&report, 1000, 100).is_empty());
    }

    #[test]
    fn challenge_b_hangs() {
        let report = run(ChallengeKind::B);
        let hangs = detect_hangs(&report, 1000, 100);
        assert_eq!(hangs.len(), 1);
        assert_eq!(hangs[0].depth, 1);
        assert_eq!(hangs[0].reason, HangReason::OutlivedRoot);
        // root exits at t=6 in the simulated schedule
        assert_eq!(hangs[0].observed_at, 106);
        for profile in [MonitorProfile::parent_only(), MonitorProfile::crashfile()] {
            assert!(detect_hangs(&filter_view(&profile, &report), 1000, 100).is_empty());
        }
    }

    #[test]
    fn budget_exceeded_when_root_hangs() {
        let report = SimExecutor::new(
            crate::sim::TargetScript {
                root: crate::sim::ProcessScript::new([crate::sim::Action::BusyLoopForever]),
            },
            SimPolicy { deadline_ms: 50 },
        )
        .execute(&[])
        .unwrap();
        let hangs = detect_hangs(&report, 50, 10);
        assert_eq!(hangs.len(), 1);
        assert_eq!(hangs[0].reason, HangReason::BudgetExceeded);
        assert_eq!(hangs[0].observed_at, 50);
        assert!(
            detect_bugs(&report).is_empty(),
            "monitor kills are not bugs"
        );
    }

    #[test]
    fn coverage_checks() {
        let report = run(ChallengeKind::C);
        assert!(coverage_achieved(&report, &BTreeSet::new()));
        let all = ChallengeParams::canonical(ChallengeKind::C).required_child_edges();
        assert!(!coverage_achieved(&report, &all));
    }

    #[test]
    fn score_patterns() {
        let budgets = Budgets::default();
        for name in ProfileName::ALL {
            let mut verdicts = Verdicts::default();
            for kind in ChallengeKind::ALL {
                let params = ChallengeParams::canonical(kind);
                let mut exec = SimExecutor::challenge(&params, SimPolicy::default()).unwrap();
                let reports = params
                    .parity_inputs()
                    .iter()
                    .map(|i| exec.execute(i).unwrap())
                    .collect();
                let run = ChallengeRun { params, reports };
                verdicts = verdicts.combine(score(&name.profile(), kind, &run, &budgets).unwrap());
            }
            let expected = name.expected().map(Some);
            assert_eq!(verdicts.as_array(), expected, "{name}");
        }
    }

    #[test]
    fn score_rejects_mismatch() {
        let params = ChallengeParams::canonical(ChallengeKind::A);
        let run = ChallengeRun {
            params,
            reports: vec![run(ChallengeKind::A)],
        };
        assert_eq!(
            score(
                &MonitorProfile::fork_aware(),
                ChallengeKind::B,
                &run,
                &Budgets::default()
            ),
            Err(ScoreError::WrongChallenge {
                expected: ChallengeKind::B,
                actual: ChallengeKind::A
            })
        );
        let empty = ChallengeRun {
            params,
            reports: vec![],
        };
        assert_eq!(
            score(
                &MonitorProfile::fork_aware(),
                ChallengeKind::A,
                &empty,
                &Budgets::default()
            ),
            Err(ScoreError::NoReports)
        );
    }
}
