//! Pass/fail bookkeeping for the acceptance target.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

/// `Ok` carries the measured values, `Err` the reason for failure.
pub type Outcome = Result<String, String>;

/// Fails with `msg` unless `cond` holds.
pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Fails when `elapsed` exceeds `limit`.
pub fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || {
        format!("took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64())
    })
}

#[derive(Default)]
pub struct Report {
    results: Vec<(String, bool)>,
}

impl Report {
    /// Runs one check, turning panics into failures, and prints its line.
    pub fn run(&mut self, id: &str, name: &str, f: impl FnOnce() -> Outcome) -> bool {
        let t = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(p) => Err(panic_message(&p)),
        };
        let secs = t.elapsed().as_secs_f64();
        let (pass, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        let tag = if pass { "PASS" } else { "FAIL" };
        eprintln!("criterion {id:>2} {tag} {name}: {detail} [{secs:.1}s]");
        self.results.push((id.to_string(), pass));
        pass
    }

    pub fn failed(&self) -> Vec<&str> {
        self.results.iter().filter(|(_, p)| !p).map(|(id, _)| id.as_str()).collect()
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("panicked: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("panicked: {s}")
    } else {
        "panicked".to_string()
    }
}
