//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! ```text
//! cargo test --release -p curistack --test acceptance            # everything
//! cargo test --release -p curistack --test acceptance -- 1 3 7   # a subset
//! ```

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

mod learning;
mod properties;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Outcome = Result<String, String>;

struct Criterion {
    id: u8,
    name: &'static str,
    run: fn() -> Outcome,
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, name: "popart output preservation", run: properties::popart_preservation },
    Criterion { id: 2, name: "gradient oracle", run: properties::gradient_oracle },
    Criterion { id: 3, name: "her consistency", run: properties::her_consistency },
    Criterion { id: 4, name: "reward closed forms", run: properties::reward_closed_forms },
    Criterion { id: 5, name: "worker averaging", run: properties::worker_averaging },
    Criterion { id: 6, name: "curriculum transition", run: properties::curriculum_transition },
    Criterion { id: 7, name: "explore pair goal-blindness", run: properties::goal_blindness },
    Criterion { id: 8, name: "single-block pick and place with/without her", run: learning::pick_and_place_her },
    Criterion { id: 9, name: "curriculum vs no curriculum on stack-2", run: learning::curriculum_ordering },
    Criterion { id: 10, name: "multi-criteria vs standard her on stack-2", run: learning::multi_criteria_ordering },
    Criterion { id: 11, name: "curiosity coverage on two-room toy", run: learning::curiosity_coverage },
];

fn main() {
    let selected: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for c in CRITERIA {
        if !selected.is_empty() && !selected.contains(&c.id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  criterion {:>2}  {}  [{secs:.1}s]  {detail}", c.id, c.name),
            Err(detail) => {
                println!("FAIL  criterion {:>2}  {}  [{secs:.1}s]  {detail}", c.id, c.name);
                failed.push(c.id);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
