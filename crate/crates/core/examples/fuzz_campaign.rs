//! Fuzzes challenge C under two monitor profiles and prints each corpus
//! admission. Pass `real` to drive the compiled binary instead of the
//! simulator.
//!
//!     cargo run --example fuzz_campaign [real]

use forkaware::challenge::ChallengeBinaries;
use forkaware::detect::{Budgets, MonitorProfile};
use forkaware::fuzz::{Campaign, CampaignConfig};
use forkaware::sim::{SimExecutor, SimPolicy};
use forkaware::tracer::{RealExecutor, SpawnSpec};
use forkaware::{ChallengeKind, ChallengeParams, Executor};

fn main() -> Result<(), forkaware::Error> {
    let real = std::env::args().nth(1).as_deref() == Some("real");
    let params = ChallengeParams::canonical(ChallengeKind::C);
    let dir = tempfile::tempdir()?;
    let bins = if real {
        Some(ChallengeBinaries::build(dir.path())?)
    } else {
        None
    };

    for profile in [MonitorProfile::parent_only(), MonitorProfile::fork_aware()] {
        let target: Box<dyn Executor> = match &bins {
            Some(bins) => Box::new(RealExecutor::new(SpawnSpec::new(
                bins.path(ChallengeKind::C),
            ))?),
            None => Box::new(SimExecutor::challenge(&params, SimPolicy::default())?),
        };
        let config = CampaignConfig {
            budget_execs: 300,
            rng_seed: 1,
            profile,
            budgets: Budgets::default(),
        };
        let mut campaign = Campaign::new(target, vec![vec![0, 0, 0, 0]], config)?;
        println!("profile {}", profile.name);
        let mut exec = 0;
        while let Some(outcome) = campaign.step()? {
            if outcome.admitted {
                let tc = campaign.corpus().last().unwrap();
                println!(
                    "  exec {exec:>3}: {:?} admitted {:?}",
                    outcome.novelty, tc.bytes
                );
            }
            exec += 1;
        }
        let stats = campaign.stats();
        println!(
            "  {} execs, corpus {}, {} edges\n",
            stats.execs,
            stats.corpus_size,
            stats.global_map.count_edges()
        );
    }
    Ok(())
}
