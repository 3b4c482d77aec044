//! Runs the twelve acceptance criteria and prints one verdict line for each.
//! Exits non-zero when any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use ccgeo_core::ode::IntegratorConfig;
use ccgeo_core::suite::{run_suite, SuiteOptions};

fn main() -> ExitCode {
    let cfg = IntegratorConfig::default();
    let opts = SuiteOptions::default();
    // the two ball-box criteria share their runs
    let groups: [&[usize]; 11] = [
        &[1],
        &[2],
        &[3],
        &[4],
        &[5],
        &[6, 7],
        &[8],
        &[9],
        &[10],
        &[11],
        &[12],
    ];
    let mut failed = 0;
    println!("acceptance: {} criteria, seeds {:?}", 12, opts.seeds);
    for ids in groups {
        let start = Instant::now();
        let reports = match run_suite(ids, &opts, &cfg) {
            Ok(r) => r,
            Err(e) => {
                println!("criteria {ids:?}: ERROR {e}");
                failed += ids.len();
                continue;
            }
        };
        let secs = start.elapsed().as_secs_f64();
        for rep in &reports {
            println!("{} ({secs:.1}s)", rep.line());
            if !rep.passed {
                failed += 1;
                for d in &rep.detail {
                    println!("    {d}");
                }
            }
        }
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
