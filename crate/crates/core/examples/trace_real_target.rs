//! Compiles the reference challenges and traces them with ptrace, following
//! every fork.
//!
//!     cargo run --example trace_real_target

use forkaware::challenge::ChallengeBinaries;
use forkaware::detect::{detect_bugs, detect_hangs};
use forkaware::tracer::{probe_support, RealExecutor, SpawnSpec};
use forkaware::{ChallengeKind, Executor};

fn main() -> Result<(), forkaware::Error> {
    if let Err(e) = probe_support() {
        eprintln!("tracing unavailable here: {e}");
        return Ok(());
    }
    let dir = tempfile::tempdir()?;
    let bins = ChallengeBinaries::build(dir.path())?;

    for kind in ChallengeKind::ALL {
        let mut spec = SpawnSpec::new(bins.path(kind));
        spec.budget_ms = 300;
        spec.grace_ms = 50;
        let report = RealExecutor::new(spec)?.execute(&[1, 1, 0, 0])?;

        println!(
            "challenge {kind}: {} processes, {} ms",
            report.tree.len(),
            report.wall_ms
        );
        for ev in &report.events {
            println!("  {ev:?}");
        }
        println!("  crash records: {:?}", report.crash_records);
        println!("  bugs: {:?}", detect_bugs(&report));
        println!("  hangs: {:?}", detect_hangs(&report, 300, 50));
        println!("  edges: {:?}", report.bitmap);
        if let Some(t) = &report.teardown {
            println!("  teardown killed {:?}, leaked {:?}", t.killed, t.leaked);
        }
    }
    Ok(())
}
