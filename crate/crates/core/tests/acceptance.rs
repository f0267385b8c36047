//! One line per acceptance criterion; exits nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use gofar::harness::checks::{self, Criterion};
use gofar::harness::suite::{run_manifest, run_suite, ResultsTree};
use gofar::Result;

const TREND_SECONDS: f64 = 300.0;

fn or_fail(id: u32, name: &'static str, r: Result<Criterion>) -> Criterion {
    r.unwrap_or_else(|e| Criterion { id, name, passed: false, detail: format!("error: {e}") })
}

fn report(c: Criterion, all: &mut Vec<Criterion>) {
    println!("{c}");
    all.push(c);
}

fn main() -> ExitCode {
    let mut all = Vec::new();
    report(or_fail(1, "dual vs primal oracle", checks::duality_oracle(1)), &mut all);
    report(or_fail(2, "matching identity", checks::prop1_identity(2)), &mut all);
    report(or_fail(3, "offline lower bounds", checks::lower_bounds(3)), &mut all);
    report(or_fail(4, "optimal goal weighting", checks::goal_weighting(4)), &mut all);
    report(checks::fenchel_grid(), &mut all);
    report(or_fail(6, "neural gradient checks", checks::gradient_checks()), &mut all);
    report(or_fail(7, "neural vs tabular", checks::neural_vs_tabular(0)), &mut all);

    let manifest = checks::acceptance_manifest();
    let tree = run_manifest(&manifest).unwrap_or_else(|e| ResultsTree {
        failed_suites: manifest.suites.iter().map(|s| (s.name.clone(), e.to_string())).collect(),
        ..ResultsTree::default()
    });
    report(checks::suite_criterion(8, "relabeling ablation", &tree, &["grid-her", "pointreach-her"]), &mut all);
    report(checks::suite_criterion(9, "noise robustness", &tree, &["grid-noise"]), &mut all);

    let mut trend = checks::suite_criterion(10, "suboptimality trend", &tree, &["grid-trend"]);
    let (index, cfg) = manifest.suites.iter().enumerate().find(|(_, s)| s.name == "grid-trend").expect("trend suite");
    let start = Instant::now();
    let timed = run_suite(cfg, index, manifest.seed, 1);
    let secs = start.elapsed().as_secs_f64();
    trend.passed &= timed.is_ok() && secs < TREND_SECONDS;
    trend.detail += &format!("; {secs:.1}s");
    report(trend, &mut all);

    report(checks::suite_criterion(11, "planner transfer", &tree, &["two-room-transfer"]), &mut all);
    report(or_fail(12, "byte-identical reruns", checks::determinism(&checks::rerun_manifest())), &mut all);

    let failed: Vec<u32> = all.iter().filter(|c| !c.passed).map(|c| c.id).collect();
    println!("{} of {} criteria passed", all.len() - failed.len(), all.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {failed:?}");
        ExitCode::FAILURE
    }
}
