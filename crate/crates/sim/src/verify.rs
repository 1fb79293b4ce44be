//! `pagemig verify`: the oracle grid plus the engine and run invariants,
//! one verdict each.

use std::time::Instant;

use pagemig_core::engine::{Engine, MigrationMode, PageStatus, Variant};
use pagemig_core::topology::Topology;
use pagemig_core::workload::{BaseMix, MigLoad};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checks::{check_dominance, random_case, retries_for_held_page, single_round_shootdowns};
use crate::harness::{csv_string, run_plan, ExperimentPlan, Load};
use crate::reference::{check_grid, execute, Case, Layer, GRID};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<26} {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub grid: Vec<Layer>,
    pub dominance_cases: usize,
    pub seed: u64,
    /// Swap in a `move_pages2` that aborts like the native call, to show the
    /// dominance check can fail.
    pub break_dominance: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { grid: GRID.to_vec(), dominance_cases: 10_000, seed: 1, break_dominance: false }
    }
}

fn verdict(name: &'static str, passed: bool, detail: String) -> Verdict {
    Verdict { name, passed, detail }
}

/// Runs every check, reporting each verdict to `each` as it completes.
pub fn verify(opts: &VerifyOptions, mut each: impl FnMut(&Verdict)) -> Vec<Verdict> {
    let mut out = Vec::new();
    let mut push = |v: Verdict| {
        each(&v);
        out.push(v);
    };
    let engine = Engine::default();

    let t = Instant::now();
    let g = check_grid(&opts.grid, &engine);
    let mut detail = format!("{}/{} cases agree ({:.1} s)", g.cases - g.mismatches, g.cases, t.elapsed().as_secs_f64());
    if let Some(m) = g.examples.first() {
        detail.push_str(&format!("\n{m}"));
    }
    push(verdict("oracle-equivalence", g.mismatches == 0, detail));

    let d = if opts.break_dominance {
        check_dominance(opts.seed, opts.dominance_cases, 64, |c| {
            execute(&Case { variant: Variant::MovePages, ..c.clone() }, &engine)
        })
    } else {
        check_dominance(opts.seed, opts.dominance_cases, 64, |c| execute(c, &engine))
    };
    let mut detail = format!(
        "{} cases, {} below native, {} of {} required-strict cases not strict",
        d.cases, d.violations, d.strict_violations, d.strict_expected
    );
    if let Some(c) = &d.first_violation {
        detail.push_str(&format!("\nfirst violation: {c:?}"));
    }
    push(verdict("dominance", d.passed(), detail));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut unset = 0;
    let mut mismatched = 0;
    let n = 2_000;
    for _ in 0..n {
        let c = random_case(&mut rng, 64);
        if execute(&c, &engine).status.contains(&PageStatus::Unset) {
            unset += 1;
        }
        let clean = Case { faults: Vec::new(), mode: MigrationMode::Sync, cap: 512, ..c };
        let a = execute(&Case { variant: Variant::MovePages, ..clean.clone() }, &engine);
        let b = execute(&clean, &engine);
        if a.status != b.status || a.migrated() != b.migrated() || a.rounds != b.rounds {
            mismatched += 1;
        }
    }
    push(verdict("status-totality", unset == 0, format!("{unset} of {n} move_pages2 calls left UNSET entries")));
    push(verdict(
        "failure-free-equivalence",
        mismatched == 0,
        format!("{mismatched} of {n} fault-free requests differ between the pipelines"),
    ));

    let mut bad = Vec::new();
    let mut b = 32;
    while b <= 4096 {
        let got = single_round_shootdowns(4096, MigrationMode::Async, b);
        if got != 4096u64.div_ceil(b as u64) {
            bad.push(format!("cap {b}: {got}"));
        }
        b *= 2;
    }
    let sync = single_round_shootdowns(4096, MigrationMode::Sync, 512);
    if sync != 4096 {
        bad.push(format!("sync: {sync}"));
    }
    let detail = if bad.is_empty() { "4096 pages: ceil(P/B) async, P sync".to_string() } else { bad.join(", ") };
    push(verdict("shootdown-amortization", bad.is_empty(), detail));

    let r1 = retries_for_held_page(Variant::MovePages);
    let r2 = retries_for_held_page(Variant::MovePages2);
    push(verdict(
        "retry-bounds",
        r1 == (3, 7) && r2 == (3, 7),
        format!("move_pages {r1:?}, move_pages2 {r2:?} (async, sync)"),
    ));

    let mut failures = Vec::new();
    for base in [BaseMix::YcsbA, BaseMix::YcsbE] {
        let mut p = small_plan(base);
        p.threads = 4;
        p.loads = vec![Load::Preset(MigLoad::High)];
        match run_plan(&p, |_| {}) {
            Ok(outs) => {
                for o in outs.iter().filter(|o| !o.report.integrity.passed()) {
                    failures.push(format!("{} {}: {:?}", base, o.config.variant, o.report.integrity));
                }
            }
            Err(e) => failures.push(format!("{base}: {e}")),
        }
    }
    let detail = if failures.is_empty() {
        "no isolated pages, frames conserved, scans match the key set".to_string()
    } else {
        failures.join("\n")
    };
    push(verdict("run-integrity", failures.is_empty(), detail));

    let p = small_plan(BaseMix::YcsbA);
    let csv = |p: &ExperimentPlan| {
        run_plan(p, |_| {}).map(|o| csv_string(&o.into_iter().map(|o| o.row).collect::<Vec<_>>()))
    };
    let same = match (csv(&p), csv(&p)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    push(verdict("determinism", same, "threads=1 plan run twice".to_string()));
    out
}

fn small_plan(base: BaseMix) -> ExperimentPlan {
    let mut p = ExperimentPlan::new(Topology::dual_socket(4, 4096), base);
    p.records = 50_000;
    p.ops = 20_000;
    p.threads = 1;
    p.reps = 1;
    p.workload.pages_per_query = 64;
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(break_dominance: bool) -> Vec<Verdict> {
        let opts = VerifyOptions {
            grid: vec![Layer { max_pages: 3, faults: 1 }],
            dominance_cases: 300,
            seed: 9,
            break_dominance,
        };
        verify(&opts, |_| {})
    }

    #[test]
    fn fresh_build_passes() {
        let v = quick(false);
        for x in &v {
            assert!(x.passed, "{x}");
        }
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn broken_dominance_is_named() {
        let v = quick(true);
        let failed: Vec<&str> = v.iter().filter(|x| !x.passed).map(|x| x.name).collect();
        assert_eq!(failed, vec!["dominance"]);
    }
}
