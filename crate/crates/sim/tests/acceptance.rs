//! End-to-end acceptance suite. Runs sequentially (no libtest harness) so the
//! multi-threaded runs do not compete for cores, and prints one PASS/FAIL
//! line per criterion.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use pagemig_core::engine::{Engine, MigrationMode, Variant};
use pagemig_core::topology::Topology;
use pagemig_core::workload::{BaseMix, MigLoad};
use pagemig_sim::checks::{engine_dominance, retries_for_held_page, single_round_shootdowns};
use pagemig_sim::harness::{csv_string, run_plan, ExperimentPlan, Load, Outcome};
use pagemig_sim::reference::{check_grid, GRID};

struct Suite {
    failed: Vec<&'static str>,
    /// Integrity failures seen in any run, for the integrity criterion.
    broken: Vec<String>,
    runs: usize,
}

impl Suite {
    fn report(&mut self, name: &'static str, passed: bool, detail: String) {
        println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        if !passed {
            self.failed.push(name);
        }
    }

    fn run(&mut self, what: &str, plan: &ExperimentPlan) -> (Vec<Outcome>, Duration) {
        let mut slowest = Duration::ZERO;
        let mut t = Instant::now();
        let outs = run_plan(plan, |_| {
            slowest = slowest.max(t.elapsed());
            t = Instant::now();
        })
        .unwrap_or_else(|e| panic!("{what}: {e}"));
        for o in &outs {
            self.runs += 1;
            if !o.report.integrity.passed() {
                self.broken.push(format!("{what} {} rep {}: {:?}", o.config.variant, o.rep, o.report.integrity));
            }
        }
        (outs, slowest)
    }
}

fn plan(base: BaseMix, load: MigLoad) -> ExperimentPlan {
    let mut p = ExperimentPlan::new(Topology::dual_socket(4, 16_384), base);
    p.loads = vec![Load::Preset(load)];
    p.variants = vec![Variant::MovePages, Variant::MovePages2];
    p.reps = 3;
    p.threads = 8;
    p.records = 1_000_000;
    p
}

/// `(query ratio, migration ratio)` of move_pages2 over move_pages, per rep.
fn ratios(outs: &[Outcome]) -> Vec<(f64, f64)> {
    let of = |v: Variant| outs.iter().filter(move |o| o.config.variant == v).collect::<Vec<_>>();
    let (native, mp2) = (of(Variant::MovePages), of(Variant::MovePages2));
    native
        .iter()
        .zip(&mp2)
        .map(|(a, b)| {
            assert_eq!(a.rep, b.rep);
            (b.row.query_tput / a.row.query_tput, b.row.mig_tput / a.row.mig_tput)
        })
        .collect()
}

fn fmt_ratios(r: &[(f64, f64)]) -> String {
    r.iter().map(|(q, m)| format!("query {q:.2}x mig {m:.2}x")).collect::<Vec<_>>().join("; ")
}

fn main() -> ExitCode {
    let mut s = Suite { failed: Vec::new(), broken: Vec::new(), runs: 0 };
    let engine = Engine::default();

    // 1. Engine matches the reference interpreter on the whole small grid.
    let t = Instant::now();
    let g = check_grid(&GRID, &engine);
    let secs = t.elapsed().as_secs_f64();
    let mut detail = format!("{}/{} cases agree in {secs:.1} s", g.cases - g.mismatches, g.cases);
    if let Some(m) = g.examples.first() {
        detail.push_str(&format!("\n{m}"));
    }
    s.report("oracle-grid", g.mismatches == 0 && g.cases > 0 && secs < 60.0, detail);

    // 2. move_pages2 never migrates fewer pages, and strictly more when
    //    native stops at a failure ahead of a migratable page.
    let d = engine_dominance(1, 10_000, 64);
    s.report(
        "dominance",
        d.passed() && d.cases == 10_000 && d.strict_expected > 0,
        format!(
            "{} cases, {} below native, {}/{} strict cases held",
            d.cases,
            d.violations,
            d.strict_expected - d.strict_violations,
            d.strict_expected
        ),
    );

    // 3. Shootdowns for 4096 pages in one round.
    let mut bad = Vec::new();
    let mut b = 32;
    while b <= 4096 {
        let got = single_round_shootdowns(4096, MigrationMode::Async, b);
        if got != 4096u64.div_ceil(b as u64) {
            bad.push(format!("async cap {b}: {got}"));
        }
        b *= 2;
    }
    let sync = single_round_shootdowns(4096, MigrationMode::Sync, 512);
    if sync != 4096 {
        bad.push(format!("sync: {sync}"));
    }
    let detail = if bad.is_empty() { "ceil(4096/B) for B=32..4096 async, 4096 sync".into() } else { bad.join(", ") };
    s.report("shootdown-amortization", bad.is_empty(), detail);

    // 4. A page whose lock is never released.
    let r1 = retries_for_held_page(Variant::MovePages);
    let r2 = retries_for_held_page(Variant::MovePages2);
    s.report(
        "retry-bounds",
        r1 == (3, 7) && r2 == (3, 7),
        format!("(async, sync) move_pages {r1:?}, move_pages2 {r2:?}"),
    );

    // 5. YCSB-A at high migration load.
    let (outs, slowest) = s.run("ycsb-a high", &plan(BaseMix::YcsbA, MigLoad::High));
    let r = ratios(&outs);
    let ok = r.len() == 3 && r.iter().all(|&(q, m)| q >= 1.1 && m >= 1.3) && slowest < Duration::from_secs(300);
    s.report("ycsb-a-high", ok, format!("{}; slowest run {:.0} s", fmt_ratios(&r), slowest.as_secs_f64()));

    // 6. YCSB-C at low migration load.
    let mut p = plan(BaseMix::YcsbC, MigLoad::Low);
    p.ops = 10_000_000;
    let (outs, _) = s.run("ycsb-c low", &p);
    let r = ratios(&outs);
    let ok = r.len() == 3 && r.iter().all(|&(q, m)| q >= 1.1 && m >= 1.1);
    s.report("ycsb-c-low", ok, fmt_ratios(&r));

    // 8. Batch-cap sweep.
    let mut p = plan(BaseMix::YcsbC, MigLoad::Low);
    p.variants = vec![Variant::MovePages2];
    p.modes = vec![MigrationMode::Async];
    p.batches = (5..=14).map(|k| 1usize << k).collect();
    p.reps = 1;
    p.threads = 1;
    p.ops = 2_000_000;
    let (outs, _) = s.run("batch sweep", &p);
    let shootdowns: Vec<u64> = outs.iter().map(|o| o.row.shootdowns).collect();
    let latency: Vec<(usize, u64)> = outs.iter().map(|o| (o.config.batch, o.report.metrics.migration_ns)).collect();
    let at_512 = latency.iter().find(|&&(b, _)| b == 512).map(|&(_, ns)| ns);
    let best = latency.iter().min_by_key(|&&(_, ns)| ns).copied();
    let monotone = shootdowns.windows(2).all(|w| w[1] <= w[0]);
    let ok = monotone && outs.len() == 10 && matches!((at_512, best), (Some(x), Some((_, y))) if y < x);
    s.report(
        "batch-sweep",
        ok,
        format!(
            "shootdowns {shootdowns:?}; fastest cap {} ({} us) vs cap 512 ({} us)",
            best.map_or(0, |b| b.0),
            best.map_or(0, |b| b.1 / 1000),
            at_512.unwrap_or(0) / 1000
        ),
    );

    // 9. Determinism of the CSV with one thread: in process and through the CLI.
    let mut p = plan(BaseMix::YcsbA, MigLoad::High);
    p.threads = 1;
    p.reps = 2;
    p.ops = 200_000;
    p.seed = 17;
    let csv = |s: &mut Suite| csv_string(&s.run("determinism", &p).0.into_iter().map(|o| o.row).collect::<Vec<_>>());
    let (a, b) = (csv(&mut s), csv(&mut s));
    let dir = tempfile::tempdir().expect("temp dir");
    let cli = |name: &str| {
        let path = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_pagemig"))
            .args(["sweep", "--workload", "ycsb-e", "--mig-load", "medium", "--threads", "1"])
            .args(["--records", "200000", "--ops", "100000", "--seed", "5", "--reps", "2"])
            .arg("--csv")
            .arg(&path)
            .stderr(std::process::Stdio::null())
            .status()
            .expect("run pagemig");
        assert!(status.success());
        std::fs::read(path).expect("CSV written")
    };
    let (c, d) = (cli("a.csv"), cli("b.csv"));
    s.report(
        "determinism",
        a == b && c == d && !c.is_empty(),
        format!("in-process {} bytes identical: {}; CLI {} bytes identical: {}", a.len(), a == b, c.len(), c == d),
    );

    // 7. Integrity after every run above, plus YCSB-E which inserts.
    let mut p = plan(BaseMix::YcsbE, MigLoad::High);
    p.reps = 1;
    p.ops = 200_000;
    s.run("ycsb-e high", &p);
    let detail = if s.broken.is_empty() {
        format!("{} runs: no isolated pages, frames conserved, key sets intact", s.runs)
    } else {
        s.broken.join("\n")
    };
    s.report("integrity", s.broken.is_empty(), detail);

    if s.failed.is_empty() {
        println!("all 9 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", s.failed.join(", "));
        ExitCode::FAILURE
    }
}
