//! The evaluation matrix: every profile against every challenge, on the
//! simulator and, where ptrace works, on the compiled challenges.
//!
//!     cargo run --example scorecard

use forkaware::scorecard::{evaluate, render, EvalConfig, Format};
use forkaware::tracer::probe_support;
use forkaware::BackendKind;

fn main() -> Result<(), forkaware::Error> {
    let mut backends = vec![BackendKind::Sim];
    if probe_support().is_ok() {
        backends.push(BackendKind::Real);
    }
    let card = evaluate(&EvalConfig {
        backends,
        ..EvalConfig::default()
    })?;
    print!("{}", render(&card, Format::Markdown));
    for row in card.mismatches() {
        println!("unexpected: {row:?}");
    }
    Ok(())
}
