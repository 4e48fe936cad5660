//! Loads a hand-written target script from JSON and runs the detectors on it.
//! A grandchild aborts, a second child spins forever, and the root exits
//! without waiting for it.
//!
//!     cargo run --example custom_script

use forkaware::detect::{detect_bugs, detect_hangs};
use forkaware::sim::{SimExecutor, SimPolicy, TargetScript};
use forkaware::Executor;

const SCRIPT: &str = r#"{
  "root": [
    { "action": { "hit_edge": 1 } },
    { "action": { "fork": [
        { "action": { "hit_edge": 10 } },
        { "action": { "fork": [
            { "action": { "hit_edge": 20 }, "duration_ms": 5 },
            { "action": { "raise_fatal": "ABRT" } }
        ] } },
        { "action": "wait_children" },
        { "action": { "exit": 3 } }
    ] } },
    { "action": { "fork": [ { "action": "busy_loop_forever" } ] } },
    { "action": { "sleep": 20 } },
    { "action": { "exit": 0 } }
  ]
}"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let script = TargetScript::from_json(SCRIPT)?;
    let report = SimExecutor::new(script, SimPolicy { deadline_ms: 500 }).execute(&[])?;

    for node in report.tree.nodes.values() {
        println!("{:>3} depth {} {:?}", node.pid.0, node.depth, node.state);
    }
    for bug in detect_bugs(&report) {
        println!(
            "bug: {:?} at depth {} via {:?}",
            bug.signal, bug.depth, bug.path
        );
    }
    for hang in detect_hangs(&report, 500, 50) {
        println!(
            "hang: pid {} {:?} at {} ms",
            hang.pid.0, hang.reason, hang.observed_at
        );
    }
    Ok(())
}
