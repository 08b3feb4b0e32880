//! Full acceptance run: every check at full size with a fixed seed, one
//! line per check. Exits non-zero if any check fails.

use std::process::ExitCode;
use std::time::Instant;

use atlas_core::harness::{run_checks, HarnessConfig, Tier, CHECK_IDS};

const SEED: u64 = 1;

fn main() -> ExitCode {
    let cfg = HarnessConfig::new(Tier::Full, SEED);
    let started = Instant::now();
    println!("acceptance: full tier, seed {SEED}");
    let outcomes = match run_checks(&cfg, |o| println!("{}", o.summary_line())) {
        Ok(o) => o,
        Err(e) => {
            println!("acceptance: harness error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let ids: Vec<&str> = outcomes.iter().map(|o| o.id.as_str()).collect();
    assert_eq!(ids, CHECK_IDS, "every check must be reported exactly once");
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id.as_str()).collect();
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        outcomes.len() - failed.len(),
        outcomes.len(),
        started.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
