//! A tiny runner for acceptance criteria: each criterion runs once, under a
//! time budget, and reports a single PASS/FAIL line.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

/// What a criterion found. `detail` goes on the report line.
#[derive(Debug)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}

pub struct Criterion {
    pub id: &'static str,
    pub title: &'static str,
    pub budget: Duration,
    pub check: fn() -> Outcome,
}

/// Formats one report line.
pub fn line(c: &Criterion, o: &Outcome, elapsed: Duration) -> String {
    let verdict = if o.passed { "PASS" } else { "FAIL" };
    format!(
        "{verdict} {} {} [{:.2}s] {}",
        c.id,
        c.title,
        elapsed.as_secs_f64(),
        o.detail
    )
}

/// Runs one criterion. A panic counts as a failure, and so does overrunning
/// the time budget.
pub fn evaluate(c: &Criterion) -> (Outcome, Duration) {
    let start = Instant::now();
    let mut outcome = match catch_unwind(AssertUnwindSafe(c.check)) {
        Ok(o) => o,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Outcome::new(false, format!("panic: {msg}"))
        }
    };
    let elapsed = start.elapsed();
    if elapsed > c.budget {
        outcome.passed = false;
        outcome.detail = format!("{}; over the {}s budget", outcome.detail, c.budget.as_secs());
    }
    (outcome, elapsed)
}

/// Runs every criterion in order, printing a line for each, and returns the
/// number that failed.
pub fn run_all(criteria: &[Criterion]) -> usize {
    let mut failed = 0;
    for c in criteria {
        let (o, t) = evaluate(c);
        println!("{}", line(c, &o, t));
        failed += usize::from(!o.passed);
    }
    println!("acceptance: {} passed, {} failed", criteria.len() - failed, failed);
    failed
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ok() -> Outcome {
        Outcome::new(true, "fine")
    }

    fn boom() -> Outcome {
        panic!("broken")
    }

    #[test]
    fn panics_and_overruns_fail() {
        let c = |check, budget| Criterion {
            id: "X",
            title: "t",
            budget,
            check,
        };
        assert!(evaluate(&c(ok, Duration::from_secs(5))).0.passed);
        let (o, _) = evaluate(&c(boom, Duration::from_secs(5)));
        assert!(!o.passed && o.detail.contains("broken"));
        assert!(!evaluate(&c(ok, Duration::ZERO)).0.passed);
    }

    #[test]
    fn line_format() {
        let c = Criterion {
            id: "C9",
            title: "demo",
            budget: Duration::from_secs(1),
            check: ok,
        };
        let s = line(&c, &ok(), Duration::from_millis(1500));
        assert_eq!(s, "PASS C9 demo [1.50s] fine");
    }
}
