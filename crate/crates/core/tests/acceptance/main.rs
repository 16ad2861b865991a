//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.
//!
//! Positional arguments act as substring filters on criterion names;
//! `--skip NAME` drops criteria whose name contains NAME. Other libtest
//! flags are accepted and ignored.

mod desk;
mod determinism;
mod formats;
mod gradients;
mod mutation_distribution;
mod trace;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

/// Result detail on success, reason on failure.
pub type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    run: fn() -> Outcome,
    time_limit: Option<Duration>,
}

const CRITERIA: &[Criterion] = &[
    Criterion {
        name: "gradient_correctness",
        run: gradients::run,
        time_limit: Some(Duration::from_secs(60)),
    },
    Criterion {
        name: "mutation_distribution",
        run: mutation_distribution::run,
        time_limit: Some(Duration::from_secs(10)),
    },
    Criterion {
        name: "inheritance_locality",
        run: inheritance::run,
        time_limit: Some(Duration::from_secs(60)),
    },
    Criterion {
        name: "trace_oracle",
        run: trace::run,
        time_limit: None,
    },
    Criterion {
        name: "novelty_and_validity",
        run: novelty::run,
        time_limit: None,
    },
    Criterion {
        name: "utest_oracle",
        run: utest::run,
        time_limit: Some(Duration::from_secs(30)),
    },
    Criterion {
        name: "format_round_trips",
        run: formats::run,
        time_limit: None,
    },
    Criterion {
        name: "determinism",
        run: determinism::run,
        time_limit: None,
    },
    Criterion {
        name: "desk_fashion_mnist",
        run: desk::run,
        time_limit: None,
    },
];

/// libtest flags that take a separate value.
const VALUE_FLAGS: &[&str] = &["--test-threads", "--format", "--color", "--logfile", "-Z"];

/// (filters, skips) from the command line.
fn parse_args(args: impl IntoIterator<Item = String>) -> (Vec<String>, Vec<String>) {
    let (mut filters, mut skips) = (Vec::new(), Vec::new());
    let mut args = args.into_iter();
    while let Some(a) = args.next() {
        if a == "--skip" {
            skips.extend(args.next());
        } else if let Some(v) = a.strip_prefix("--skip=") {
            skips.push(v.to_owned());
        } else if VALUE_FLAGS.contains(&a.as_str()) {
            args.next();
        } else if !a.starts_with('-') {
            filters.push(a);
        }
    }
    (filters, skips)
}

fn main() -> ExitCode {
    let (filters, skips) = parse_args(std::env::args().skip(1));
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for c in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        if skips.iter().any(|s| c.name.contains(s.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = match panic::catch_unwind(AssertUnwindSafe(c.run)) {
            Ok(o) => o,
            Err(payload) => Err(panic_message(payload)),
        };
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.time_limit) {
            (Ok(_), Some(limit)) if elapsed > limit => Err(format!(
                "took {:.1}s, limit {:.0}s",
                elapsed.as_secs_f64(),
                limit.as_secs_f64()
            )),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {} [{:.1}s] {detail}", c.name, elapsed.as_secs_f64()),
            Err(reason) => {
                failed += 1;
                println!("FAIL {} [{:.1}s] {reason}", c.name, elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        format!("panicked: {s}")
    } else if let Some(s) = payload.downcast_ref::<String>() {
        format!("panicked: {s}")
    } else {
        "panicked".into()
    }
}
