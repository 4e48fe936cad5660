//! Random process-tree scripts plus an oracle that derives, straight from the
//! script text, which processes run, crash, or never terminate.

use std::collections::{BTreeMap, BTreeSet};

use forkaware::sim::{Action, ProcessScript, Step, TargetScript};
use forkaware::{EdgeId, ExecEvent, ExecutionReport, Pid, SignalKind};
use rand::Rng;

/// Every process starts by hitting `TAG_BASE + node`.
pub const TAG_BASE: u16 = 1000;
pub const MAX_DEPTH: u32 = 8;
pub const MAX_NODES: usize = 50;
const MAX_STEP_MS: u64 = 3;
const MAX_SLEEP_MS: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminator {
    FallOff,
    Exit(i32),
    Fatal(SignalKind),
    Loop,
}

#[derive(Debug, Clone)]
pub struct Truth {
    pub node: u16,
    pub depth: u32,
    pub reached: bool,
    pub terminates: bool,
    /// Signal raised, if the process gets to raise it.
    pub raises: Option<SignalKind>,
    pub edges: BTreeSet<EdgeId>,
}

pub struct Generated {
    pub script: TargetScript,
    pub truth: Vec<Truth>,
    /// Upper bound on the simulated time by which every terminating process
    /// has terminated.
    pub time_bound: u64,
}

impl Generated {
    pub fn expected_bugs(&self) -> BTreeSet<u16> {
        self.truth
            .iter()
            .filter(|t| t.reached && t.raises.is_some_and(|s| s.is_fatal_bug()))
            .map(|t| t.node)
            .collect()
    }

    pub fn expected_hangs(&self) -> BTreeSet<u16> {
        self.truth
            .iter()
            .filter(|t| t.reached && !t.terminates)
            .map(|t| t.node)
            .collect()
    }

    pub fn expected_edges(&self) -> BTreeSet<EdgeId> {
        self.truth
            .iter()
            .filter(|t| t.reached)
            .flat_map(|t| t.edges.iter().copied())
            .collect()
    }
}

struct Builder<'r, R> {
    rng: &'r mut R,
    nodes: usize,
    steps: u64,
    sleep_total: u64,
}

impl<R: Rng> Builder<'_, R> {
    fn step(&mut self, action: Action) -> Step {
        self.steps += 1;
        Step {
            action,
            duration_ms: self.rng.gen_range(1..=MAX_STEP_MS),
        }
    }

    fn process(&mut self, depth: u32) -> ProcessScript {
        let node = self.nodes as u16;
        self.nodes += 1;
        let mut steps = vec![self.step(Action::HitEdge(EdgeId(TAG_BASE + node)))];
        let body = self.rng.gen_range(0..=6);
        for _ in 0..body {
            let roll = self.rng.gen_range(0..100);
            let action = if roll < 40 && depth < MAX_DEPTH && self.nodes < MAX_NODES {
                Action::Fork(self.process(depth + 1))
            } else if roll < 65 {
                Action::HitEdge(EdgeId(self.rng.gen_range(1..=200)))
            } else if roll < 80 {
                let ms = self.rng.gen_range(1..=MAX_SLEEP_MS);
                self.sleep_total += ms;
                Action::Sleep(ms)
            } else {
                Action::WaitChildren
            };
            steps.push(self.step(action));
        }
        let terminator = match self.rng.gen_range(0..100) {
            0..=24 => Terminator::FallOff,
            25..=44 => Terminator::Exit(self.rng.gen_range(0..4)),
            45..=69 => {
                let bugs = SignalKind::FATAL_BUGS;
                Terminator::Fatal(bugs[self.rng.gen_range(0..bugs.len())])
            }
            70..=79 => Terminator::Fatal(SignalKind::Other(15)),
            _ => Terminator::Loop,
        };
        match terminator {
            Terminator::FallOff => self.steps += 1,
            Terminator::Exit(code) => steps.push(self.step(Action::Exit(code))),
            Terminator::Fatal(sig) => steps.push(self.step(Action::RaiseFatal(sig))),
            Terminator::Loop => steps.push(self.step(Action::BusyLoopForever)),
        }
        ProcessScript { steps }
    }
}

/// Random script with at most `MAX_NODES` processes and fork depth ≤ `MAX_DEPTH`.
pub fn random_script(rng: &mut impl Rng) -> Generated {
    let mut b = Builder {
        rng,
        nodes: 0,
        steps: 0,
        sleep_total: 0,
    };
    let root = b.process(0);
    let script = TargetScript { root };
    let mut truth = Vec::new();
    analyze(&script.root, 0, true, &mut truth);
    truth.sort_by_key(|t| t.node);
    let n = b.nodes as u64;
    // Every non-looping step costs ≤ MAX_STEP_MS and waits at most one turn
    // of every other process; idle stretches are covered by sleeps.
    let time_bound = (b.steps + n) * n * MAX_STEP_MS + b.sleep_total + 1;
    Generated {
        script,
        truth,
        time_bound,
    }
}

/// Returns whether the process terminates.
fn analyze(script: &ProcessScript, depth: u32, reached: bool, out: &mut Vec<Truth>) -> bool {
    let node = match script.steps.first().map(|s| &s.action) {
        Some(Action::HitEdge(EdgeId(tag))) if *tag >= TAG_BASE => tag - TAG_BASE,
        other => panic!("script node without tag: {other:?}"),
    };
    let mut live = reached;
    let mut children_terminate = true;
    let mut looping = false;
    let mut raises = None;
    let mut edges = BTreeSet::new();
    for step in &script.steps {
        match &step.action {
            Action::Fork(child) => {
                let t = analyze(child, depth + 1, live, out);
                if live {
                    children_terminate &= t;
                }
            }
            _ if !live => {}
            Action::HitEdge(e) => {
                edges.insert(*e);
            }
            Action::WaitChildren if !children_terminate => live = false,
            Action::BusyLoopForever => looping = true,
            Action::RaiseFatal(sig) => raises = Some(*sig),
            _ => {}
        }
    }
    let blocked = reached && !live;
    out.push(Truth {
        node,
        depth,
        reached,
        terminates: reached && !blocked && !looping,
        raises,
        edges,
    });
    !blocked && !looping
}

/// Maps each pid in a report to its script node via the tag probe.
pub fn pid_nodes(report: &ExecutionReport) -> BTreeMap<Pid, u16> {
    report
        .events
        .iter()
        .filter_map(|ev| match ev {
            ExecEvent::ProbeHit { pid, edge, .. } if edge.0 >= TAG_BASE => {
                Some((*pid, edge.0 - TAG_BASE))
            }
            _ => None,
        })
        .collect()
}

/// `MAX_DEPTH` deep chain: every process forks the next, the leaf crashes.
pub fn deep_chain() -> TargetScript {
    let mut inner = ProcessScript::new([
        Action::HitEdge(EdgeId(TAG_BASE + MAX_DEPTH as u16)),
        Action::RaiseFatal(SignalKind::Segv),
    ]);
    for level in (0..MAX_DEPTH).rev() {
        inner = ProcessScript::new([
            Action::HitEdge(EdgeId(TAG_BASE + level as u16)),
            Action::Fork(inner),
            Action::WaitChildren,
        ]);
    }
    TargetScript { root: inner }
}

impl Generated {
    /// Wraps a hand-written tagged script, computing its truth and bound.
    pub fn from_script(script: TargetScript) -> Self {
        fn count(
            p: &ProcessScript,
            nodes: &mut u64,
            steps: &mut u64,
            sleep: &mut u64,
            dmax: &mut u64,
        ) {
            *nodes += 1;
            *steps += p.steps.len() as u64 + 1;
            for s in &p.steps {
                *dmax = (*dmax).max(s.duration_ms);
                match &s.action {
                    Action::Fork(c) => count(c, nodes, steps, sleep, dmax),
                    Action::Sleep(ms) => *sleep += ms,
                    _ => {}
                }
            }
        }
        let (mut n, mut steps, mut sleep, mut dmax) = (0, 0, 0, 1);
        count(&script.root, &mut n, &mut steps, &mut sleep, &mut dmax);
        let mut truth = Vec::new();
        analyze(&script.root, 0, true, &mut truth);
        truth.sort_by_key(|t| t.node);
        Generated {
            script,
            truth,
            time_bound: steps * n * dmax + sleep + 1,
        }
    }
}
