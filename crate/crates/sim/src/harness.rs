//! Experiment plans, CSV rows and the `verify` report.

use std::io::{Read, Write};

use pagemig_core::btree::Placement;
use pagemig_core::engine::{EngineConfig, MigrationMode, Variant, NR_MAX_BATCHED_MIGRATION};
use pagemig_core::topology::Topology;
use pagemig_core::workload::{BaseMix, MigLoad, WorkloadConfig, WorkloadMix};
use serde::{Deserialize, Serialize};

use crate::runner::{run, RunError, RunReport, RunSpec};

pub const DEFAULT_RECORDS: u64 = 1_000_000;
pub const DEFAULT_OPS: u64 = 1_000_000;
pub const DEFAULT_REPS: u32 = 3;
/// Leaves are laid out in runs of this many pages per node while loading.
pub const DEFAULT_PLACEMENT: Placement = Placement::Blocks(1024);

/// Column order of every CSV this crate writes.
pub const CSV_COLUMNS: [&str; 15] = [
    "variant",
    "mode",
    "batch",
    "mig_load",
    "threads",
    "seed",
    "rep",
    "query_tput",
    "mig_tput",
    "pages_migrated",
    "pages_failed",
    "rounds",
    "batches",
    "shootdowns",
    "aborted_calls",
];

/// A migration load: a named preset or an explicit share.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Load {
    Preset(MigLoad),
    Share(f64),
}

impl Load {
    pub fn share(self) -> f64 {
        match self {
            Load::Preset(l) => l.share(),
            Load::Share(y) => y,
        }
    }

    pub fn label(self) -> String {
        match self {
            Load::Preset(l) => l.as_str().to_string(),
            Load::Share(y) => y.to_string(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("the {0} axis of the plan is empty")]
    EmptyAxis(&'static str),
    #[error("repetitions must be at least 1")]
    NoReps,
    #[error("batch caps must be positive")]
    ZeroBatch,
    #[error("migration share {0} is outside [0, 1]")]
    Share(f64),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("CSV header {found:?} does not match the expected columns")]
    Header { found: Vec<String> },
}

/// What to run. Every combination of the axes is one configuration; each
/// configuration runs `reps` times.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub topology: Topology,
    pub base: BaseMix,
    pub loads: Vec<Load>,
    pub variants: Vec<Variant>,
    /// Only `move_pages2` is swept over modes and caps; native calls always
    /// run `MIGRATE_SYNC` with the kernel's cap.
    pub modes: Vec<MigrationMode>,
    pub batches: Vec<usize>,
    pub reps: u32,
    pub seed: u64,
    pub threads: u32,
    pub records: u64,
    pub ops: u64,
    pub placement: Placement,
    pub engine: EngineConfig,
    /// Template for knobs not swept (pin probability, query size, ...).
    pub workload: WorkloadConfig,
}

impl ExperimentPlan {
    pub fn new(topology: Topology, base: BaseMix) -> Self {
        let workload = WorkloadConfig::new(WorkloadMix::preset(base, MigLoad::Low), Variant::MovePages2);
        ExperimentPlan {
            topology,
            base,
            loads: vec![Load::Preset(MigLoad::Low), Load::Preset(MigLoad::Medium), Load::Preset(MigLoad::High)],
            variants: vec![Variant::MovePages, Variant::MovePages2],
            modes: vec![MigrationMode::Async],
            batches: vec![NR_MAX_BATCHED_MIGRATION],
            reps: DEFAULT_REPS,
            seed: 1,
            threads: 8,
            records: DEFAULT_RECORDS,
            ops: DEFAULT_OPS,
            placement: DEFAULT_PLACEMENT,
            engine: EngineConfig::default(),
            workload,
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        for (name, empty) in [
            ("migration load", self.loads.is_empty()),
            ("engine", self.variants.is_empty()),
            ("mode", self.modes.is_empty()),
            ("batch", self.batches.is_empty()),
        ] {
            if empty {
                return Err(PlanError::EmptyAxis(name));
            }
        }
        if self.reps == 0 {
            return Err(PlanError::NoReps);
        }
        if self.batches.contains(&0) {
            return Err(PlanError::ZeroBatch);
        }
        if let Some(y) = self.loads.iter().map(|l| l.share()).find(|y| !(0.0..=1.0).contains(y)) {
            return Err(PlanError::Share(y));
        }
        Ok(())
    }

    /// Configurations in output order: load, variant, mode, batch.
    pub fn configs(&self) -> Vec<Config> {
        let mut out = Vec::new();
        for &load in &self.loads {
            for &variant in &self.variants {
                if variant == Variant::MovePages {
                    out.push(Config { load, variant, mode: MigrationMode::Sync, batch: self.engine.native_batch });
                    continue;
                }
                for &mode in &self.modes {
                    for &batch in &self.batches {
                        out.push(Config { load, variant, mode, batch });
                    }
                }
            }
        }
        out
    }

    /// The run behind one row. Repetition `rep` runs with seed `seed + rep`.
    pub fn spec(&self, c: &Config, rep: u32) -> RunSpec {
        let mut wl = self.workload;
        wl.mix = WorkloadMix { base: self.base, migration_share: c.load.share() };
        wl.variant = c.variant;
        wl.mode = c.mode;
        wl.batch = c.batch;
        wl.seed = self.seed.wrapping_add(rep as u64);
        RunSpec {
            topology: self.topology.clone(),
            records: self.records,
            threads: self.threads,
            ops: self.ops,
            workload: wl,
            engine: self.engine,
            placement: self.placement,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Config {
    pub load: Load,
    pub variant: Variant,
    pub mode: MigrationMode,
    pub batch: usize,
}

/// One CSV line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub variant: String,
    pub mode: String,
    pub batch: usize,
    pub mig_load: String,
    pub threads: u32,
    pub seed: u64,
    pub rep: u32,
    pub query_tput: f64,
    pub mig_tput: f64,
    pub pages_migrated: u64,
    pub pages_failed: u64,
    pub rounds: u64,
    pub batches: u64,
    pub shootdowns: u64,
    pub aborted_calls: u64,
}

impl Row {
    pub fn new(plan: &ExperimentPlan, c: &Config, rep: u32, r: &RunReport) -> Self {
        let m = &r.metrics;
        Row {
            variant: c.variant.as_str().to_string(),
            mode: c.mode.as_str().to_string(),
            batch: c.batch,
            mig_load: c.load.label(),
            threads: plan.threads,
            seed: plan.seed,
            rep,
            query_tput: m.query_throughput,
            mig_tput: m.migration_throughput,
            pages_migrated: m.engine.pages_migrated,
            pages_failed: m.engine.pages_failed,
            rounds: m.engine.rounds,
            batches: m.engine.batches,
            shootdowns: m.engine.tlb_shootdowns,
            aborted_calls: m.aborted_calls,
        }
    }
}

/// A row together with the full report it came from.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub config: Config,
    pub rep: u32,
    pub row: Row,
    pub report: RunReport,
}

/// Runs every configuration and repetition of `plan`. `progress` sees each
/// outcome as soon as it is available.
pub fn run_plan(plan: &ExperimentPlan, mut progress: impl FnMut(&Outcome)) -> Result<Vec<Outcome>, PlanError> {
    plan.validate()?;
    let mut out = Vec::new();
    for c in plan.configs() {
        for rep in 0..plan.reps {
            let report = run(&plan.spec(&c, rep))?;
            let row = Row::new(plan, &c, rep, &report);
            let o = Outcome { config: c, rep, row, report };
            progress(&o);
            out.push(o);
        }
    }
    Ok(out)
}

pub fn write_csv<W: Write>(w: W, rows: &[Row]) -> Result<(), PlanError> {
    let mut wr = csv::Writer::from_writer(w);
    if rows.is_empty() {
        wr.write_record(CSV_COLUMNS)?;
    }
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<Row>, PlanError> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return Err(PlanError::Header { found: header });
    }
    rd.deserialize().map(|r| r.map_err(PlanError::from)).collect()
}

pub fn csv_string(rows: &[Row]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows).expect("writing to memory");
    String::from_utf8(buf).expect("CSV is UTF-8")
}

/// Median of `xs`; the mean of the middle pair for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// One line per configuration with median throughputs over repetitions.
pub fn summary(outcomes: &[Outcome]) -> Vec<String> {
    let mut lines = Vec::new();
    let mut i = 0;
    while i < outcomes.len() {
        let c = outcomes[i].config;
        let mut j = i;
        while j < outcomes.len() && outcomes[j].config == c {
            j += 1;
        }
        let q: Vec<f64> = outcomes[i..j].iter().map(|o| o.row.query_tput).collect();
        let m: Vec<f64> = outcomes[i..j].iter().map(|o| o.row.mig_tput).collect();
        lines.push(format!(
            "{:<11} {:<12} batch {:>5}  load {:<6}  query {:>12.0} ops/s  migration {:>10.0} pages/s  (median of {})",
            c.variant.as_str(),
            c.mode.as_str(),
            c.batch,
            c.load.label(),
            median(&q),
            median(&m),
            j - i
        ));
        i = j;
    }
    lines
}
