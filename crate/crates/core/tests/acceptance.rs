//! Acceptance criteria at toy scale. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.
//!
//! `ACCEPTANCE_ONLY=3,6` runs a subset; `ACCEPTANCE_DIR` keeps the artifacts
//! instead of using a temporary directory.

use std::process::ExitCode;

use uncanny_core::selftest::{run, SelftestOptions};

fn main() -> ExitCode {
    let temp = tempfile::tempdir().expect("temporary directory");
    let dir = std::env::var_os("ACCEPTANCE_DIR").map_or_else(|| temp.path().to_path_buf(), Into::into);
    let mut opts = SelftestOptions::new(dir);
    if let Ok(list) = std::env::var("ACCEPTANCE_ONLY") {
        opts.only = list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse().expect("ACCEPTANCE_ONLY takes criterion numbers"))
            .collect();
    }
    let results = run(opts, |r| println!("{r}"));
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
