//! Runs the three canonical challenges on the simulated backend and shows
//! what each monitor profile can see.
//!
//!     cargo run --example sim_challenges

use forkaware::detect::{coverage_achieved, detect_bugs, detect_hangs, filter_view, Budgets};
use forkaware::sim::{SimExecutor, SimPolicy};
use forkaware::{ChallengeKind, ChallengeParams, Executor, ProfileName};

fn main() -> Result<(), forkaware::Error> {
    let budgets = Budgets::default();
    for kind in ChallengeKind::ALL {
        let params = ChallengeParams::canonical(kind);
        let mut exec = SimExecutor::challenge(
            &params,
            SimPolicy {
                deadline_ms: budgets.budget_ms,
            },
        )?;
        let report = exec.execute(&[1, 0, 1, 0])?;

        println!("challenge {kind} ({})", kind.describe());
        for ev in &report.events {
            println!("  {ev:?}");
        }
        for profile in ProfileName::ALL {
            let view = filter_view(&profile.profile(), &report);
            println!(
                "  {profile:<12} bugs={} hangs={} child coverage={}",
                detect_bugs(&view).len(),
                detect_hangs(&view, budgets.budget_ms, budgets.grace_ms).len(),
                coverage_achieved(&view, &params.required_child_edges()),
            );
        }
    }
    Ok(())
}
