use std::fs::File;
use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pagemig_core::engine::{MigrationMode, Variant};
use pagemig_core::topology::Topology;
use pagemig_core::workload::{BaseMix, MigLoad};
use pagemig_sim::harness::{run_plan, summary, write_csv, ExperimentPlan, Load, Row};
use pagemig_sim::reference::Layer;
use pagemig_sim::topo_file::load_topology;
use pagemig_sim::verify::{verify, VerifyOptions};

#[derive(Parser)]
#[command(name = "pagemig", version, about = "Page-migration simulator: B+-tree workloads against move_pages and move_pages2")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one configuration.
    Run(PlanArgs),
    /// Run every combination of the listed values (comma-separated).
    Sweep(PlanArgs),
    /// Check the engine against the reference interpreter and the invariants.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// Topology file (TOML). Defaults to two sockets with 4 cores each.
    #[arg(long)]
    topology: Option<PathBuf>,
    #[arg(long, default_value = "ycsb-a")]
    workload: String,
    /// low, medium or high.
    #[arg(long, value_delimiter = ',', conflicts_with = "mig_share")]
    mig_load: Vec<String>,
    /// Explicit fraction of migration queries.
    #[arg(long, value_delimiter = ',')]
    mig_share: Vec<f64>,
    /// move_pages or move_pages2.
    #[arg(long, value_delimiter = ',')]
    engine: Vec<String>,
    /// async, sync, sync-light or sync-no-copy (move_pages2 only).
    #[arg(long, value_delimiter = ',')]
    mode: Vec<String>,
    /// Batch cap (move_pages2 only).
    #[arg(long, value_delimiter = ',')]
    batch: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    threads: u32,
    #[arg(long, default_value_t = pagemig_sim::harness::DEFAULT_RECORDS)]
    records: u64,
    /// Operations over all threads, migration queries included.
    #[arg(long, default_value_t = pagemig_sim::harness::DEFAULT_OPS)]
    ops: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Repetitions per configuration; rep r uses seed + r.
    #[arg(long)]
    reps: Option<u32>,
    /// Leaves per migration query.
    #[arg(long)]
    pages_per_query: Option<usize>,
    /// Chance that a page is pinned by someone else during one call.
    #[arg(long)]
    pin_prob: Option<f64>,
    /// Chance that a write puts its leaf under writeback.
    #[arg(long)]
    writeback_prob: Option<f64>,
    /// Write rows here instead of standard output.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Smaller oracle grid and fewer dominance cases.
    #[arg(long)]
    quick: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Replace move_pages2 with an aborting variant (checker self-test).
    #[arg(long, hide = true)]
    break_dominance: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run(a) => plan_cmd(a, false),
        Cmd::Sweep(a) => plan_cmd(a, true),
        Cmd::Verify(a) => return verify_cmd(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn parse_all<T>(xs: &[String], parse: impl Fn(&str) -> Option<T>, what: &str) -> Result<Vec<T>, String> {
    xs.iter().map(|s| parse(s).ok_or_else(|| format!("unknown {what} `{s}`"))).collect()
}

fn build_plan(a: &PlanArgs, sweep: bool) -> Result<ExperimentPlan, String> {
    let topology = match &a.topology {
        Some(p) => load_topology(p).map_err(|e| e.to_string())?,
        None => Topology::dual_socket(4, 16384),
    };
    let base = BaseMix::parse(&a.workload).map_err(|e| e.to_string())?;
    let mut plan = ExperimentPlan::new(topology, base);

    let mut loads: Vec<Load> = a.mig_share.iter().map(|&y| Load::Share(y)).collect();
    for s in &a.mig_load {
        loads.push(Load::Preset(MigLoad::parse(s).map_err(|e| e.to_string())?));
    }
    if !loads.is_empty() {
        plan.loads = loads;
    } else if !sweep {
        plan.loads = vec![Load::Preset(MigLoad::Low)];
    }
    let variants = parse_all(&a.engine, Variant::parse, "engine")?;
    if !variants.is_empty() {
        plan.variants = variants;
    } else if !sweep {
        plan.variants = vec![Variant::MovePages2];
    }
    let modes = parse_all(&a.mode, MigrationMode::parse, "mode")?;
    if !modes.is_empty() {
        plan.modes = modes;
    }
    if !a.batch.is_empty() {
        plan.batches = a.batch.clone();
    }
    if !sweep {
        for (name, n) in [
            ("--mig-load/--mig-share", plan.loads.len()),
            ("--engine", plan.variants.len()),
            ("--mode", plan.modes.len()),
            ("--batch", plan.batches.len()),
        ] {
            if n > 1 {
                return Err(format!("`run` takes a single value for {name}; use `sweep` for lists"));
            }
        }
    }
    plan.reps = a.reps.unwrap_or(if sweep { plan.reps } else { 1 });
    plan.threads = a.threads;
    plan.records = a.records;
    plan.ops = a.ops;
    plan.seed = a.seed;
    if let Some(n) = a.pages_per_query {
        plan.workload.pages_per_query = n;
    }
    if let Some(p) = a.pin_prob {
        plan.workload.pin_prob = p;
    }
    if let Some(p) = a.writeback_prob {
        plan.workload.writeback_prob = p;
    }
    Ok(plan)
}

fn plan_cmd(a: PlanArgs, sweep: bool) -> Result<(), String> {
    let plan = build_plan(&a, sweep)?;
    plan.validate().map_err(|e| e.to_string())?;
    let total = plan.configs().len() * plan.reps as usize;
    let mut done = 0;
    let outcomes = run_plan(&plan, |o| {
        done += 1;
        let i = &o.report.integrity;
        eprintln!(
            "[{done}/{total}] {} {} batch {} load {} rep {}: query {:.0} ops/s, migration {:.0} pages/s{}",
            o.config.variant,
            o.config.mode,
            o.config.batch,
            o.config.load.label(),
            o.rep,
            o.row.query_tput,
            o.row.mig_tput,
            if i.passed() { String::new() } else { format!(", INTEGRITY FAILURE {i:?}") }
        );
    })
    .map_err(|e| e.to_string())?;
    if plan.reps > 1 {
        for line in summary(&outcomes) {
            eprintln!("{line}");
        }
    }
    let rows: Vec<Row> = outcomes.iter().map(|o| o.row.clone()).collect();
    match &a.csv {
        Some(path) => {
            let f = File::create(path).map_err(|e| format!("cannot create {}: {e}", path.display()))?;
            write_csv(BufWriter::new(f), &rows).map_err(|e| e.to_string())?;
        }
        None => write_csv(io::stdout().lock(), &rows).map_err(|e| e.to_string())?,
    }
    if outcomes.iter().any(|o| !o.report.integrity.passed()) {
        return Err("integrity check failed after at least one run".into());
    }
    Ok(())
}

fn verify_cmd(a: VerifyArgs) -> ExitCode {
    let mut opts = VerifyOptions { seed: a.seed, break_dominance: a.break_dominance, ..VerifyOptions::default() };
    if a.quick {
        opts.grid = vec![Layer { max_pages: 5, faults: 1 }, Layer { max_pages: 3, faults: 2 }];
        opts.dominance_cases = 1_000;
    }
    let verdicts = verify(&opts, |v| println!("{v}"));
    let failed = verdicts.iter().filter(|v| !v.passed).count();
    if failed == 0 {
        println!("all {} checks passed", verdicts.len());
        ExitCode::SUCCESS
    } else {
        println!("{failed} of {} checks failed", verdicts.len());
        ExitCode::FAILURE
    }
}
