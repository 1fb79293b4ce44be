//! YCSB-style operation streams with interleaved migration queries.
//!
//! Each worker owns a *window*: a run of consecutive loaded keys spanning
//! about `pages_per_query` leaves. Its lookups, updates, scans and inserts
//! draw keys from that window. A migration query first moves the window to a
//! fresh random position (the working set shifts) and then asks the engine
//! to bring the window's leaves to the worker's home node.

use alloc::collections::VecDeque;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::btree::{BTree, OpCtx, Selector, FANOUT};
use crate::engine::inject::mix64;
use crate::engine::{Caller, Engine, EngineStats, LockHold, MigrationMode, MigrationRequest, Variant};
use crate::ids::{CoreId, NodeId, OwnerId, PageId};

/// Migration share of the named loads.
pub const LOW_SHARE: f64 = 0.0001;
pub const MEDIUM_SHARE: f64 = 0.25;
pub const HIGH_SHARE: f64 = 0.50;
pub const DEFAULT_PAGES_PER_QUERY: usize = 512;
pub const DEFAULT_THETA: f64 = 0.99;
pub const MAX_SCAN: u32 = 100;

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    UnknownWorkload(alloc::string::String),
    UnknownLoad(alloc::string::String),
    /// A knob is outside its valid range.
    Invalid { knob: &'static str, reason: &'static str },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::UnknownWorkload(s) => write!(f, "unknown workload `{s}` (expected ycsb-a, ycsb-c or ycsb-e)"),
            ConfigError::UnknownLoad(s) => write!(f, "unknown migration load `{s}` (expected low, medium or high)"),
            ConfigError::Invalid { knob, reason } => write!(f, "invalid {knob}: {reason}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaseMix {
    /// 50% reads, 50% updates.
    YcsbA,
    /// Reads only.
    YcsbC,
    /// 95% scans, 5% inserts.
    YcsbE,
}

impl BaseMix {
    pub const ALL: [BaseMix; 3] = [BaseMix::YcsbA, BaseMix::YcsbC, BaseMix::YcsbE];

    pub fn as_str(self) -> &'static str {
        match self {
            BaseMix::YcsbA => "ycsb-a",
            BaseMix::YcsbC => "ycsb-c",
            BaseMix::YcsbE => "ycsb-e",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        BaseMix::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| ConfigError::UnknownWorkload(s.into()))
    }
}

impl fmt::Display for BaseMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MigLoad {
    Low,
    Medium,
    High,
}

impl MigLoad {
    pub const ALL: [MigLoad; 3] = [MigLoad::Low, MigLoad::Medium, MigLoad::High];

    pub fn share(self) -> f64 {
        match self {
            MigLoad::Low => LOW_SHARE,
            MigLoad::Medium => MEDIUM_SHARE,
            MigLoad::High => HIGH_SHARE,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MigLoad::Low => "low",
            MigLoad::Medium => "medium",
            MigLoad::High => "high",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        MigLoad::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| ConfigError::UnknownLoad(s.into()))
    }
}

/// A base mix diluted with a share `Y` of migration queries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkloadMix {
    pub base: BaseMix,
    pub migration_share: f64,
}

impl WorkloadMix {
    pub fn new(base: BaseMix, migration_share: f64) -> Result<Self, ConfigError> {
        if !(0.0..=1.0).contains(&migration_share) {
            return Err(ConfigError::Invalid { knob: "migration share", reason: "must lie in [0, 1]" });
        }
        Ok(WorkloadMix { base, migration_share })
    }

    pub fn preset(base: BaseMix, load: MigLoad) -> Self {
        WorkloadMix { base, migration_share: load.share() }
    }

    /// Share of base-workload operations, `X = 1 - Y`.
    pub fn base_share(&self) -> f64 {
        1.0 - self.migration_share
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyChoice {
    Zipfian(f64),
    Uniform,
}

/// One operation. Keys are given as ranks inside the worker's window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Read { rank: u64 },
    Update { rank: u64 },
    Scan { rank: u64, len: u32 },
    Insert,
    Migrate,
}

impl Op {
    pub fn is_migration(&self) -> bool {
        matches!(self, Op::Migrate)
    }
}

/// Draws operations for one mix over a window of `span` keys.
#[derive(Debug, Clone)]
pub struct OpGenerator {
    mix: WorkloadMix,
    span: u64,
    zipf: Option<Zipf<f64>>,
}

impl OpGenerator {
    pub fn new(mix: WorkloadMix, keys: KeyChoice, span: u64) -> Result<Self, ConfigError> {
        if span == 0 {
            return Err(ConfigError::Invalid { knob: "key span", reason: "must be positive" });
        }
        let zipf = match keys {
            KeyChoice::Uniform => None,
            KeyChoice::Zipfian(theta) => Some(
                Zipf::new(span as f64, theta)
                    .map_err(|_| ConfigError::Invalid { knob: "zipf theta", reason: "must be positive" })?,
            ),
        };
        Ok(OpGenerator { mix, span, zipf })
    }

    pub fn mix(&self) -> WorkloadMix {
        self.mix
    }

    /// Rank of a key in `0..span`. Zipf ranks are scrambled so hot keys
    /// scatter over the window instead of clustering at its start.
    pub fn rank<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match &self.zipf {
            None => rng.random_range(0..self.span),
            Some(z) => mix64(z.sample(rng) as u64 - 1) % self.span,
        }
    }

    pub fn next_op<R: Rng + ?Sized>(&self, rng: &mut R) -> Op {
        if rng.random::<f64>() < self.mix.migration_share {
            return Op::Migrate;
        }
        let u: f64 = rng.random();
        match self.mix.base {
            BaseMix::YcsbC => Op::Read { rank: self.rank(rng) },
            BaseMix::YcsbA if u < 0.5 => Op::Read { rank: self.rank(rng) },
            BaseMix::YcsbA => Op::Update { rank: self.rank(rng) },
            BaseMix::YcsbE if u < 0.95 => Op::Scan { rank: self.rank(rng), len: rng.random_range(1..=MAX_SCAN) },
            BaseMix::YcsbE => Op::Insert,
        }
    }
}

/// Which pages a migration query asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySelector {
    /// Shift the window, then take the leaves covering it.
    Window,
    RandomLeaf,
    HotLeaf,
}

/// Where a migration query sends its pages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetPolicy {
    /// The issuing worker's node.
    HomeNode,
    /// Rotate over the nodes other than the one holding the first page.
    RoundRobin,
}

/// A fully specified migration query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MigrationQuery {
    pub pages: Vec<PageId>,
    pub target: NodeId,
    pub variant: Variant,
    pub mode: MigrationMode,
    pub batch: usize,
}

impl MigrationQuery {
    pub fn request(&self) -> MigrationRequest {
        MigrationRequest::to_node(self.pages.clone(), self.target).with_mode(self.mode).with_batch(self.batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkloadConfig {
    pub mix: WorkloadMix,
    pub keys: KeyChoice,
    pub pages_per_query: usize,
    pub selector: QuerySelector,
    pub target: TargetPolicy,
    pub variant: Variant,
    /// Mode passed to `move_pages2`; native calls always run `MIGRATE_SYNC`.
    pub mode: MigrationMode,
    pub batch: usize,
    /// Per page and call: chance the page is pinned by someone else.
    pub pin_prob: f64,
    /// Chance that a write starts writeback of the written leaf.
    pub writeback_prob: f64,
    /// Own operations after which a started writeback completes.
    pub writeback_ops: u32,
    pub seed: u64,
}

impl WorkloadConfig {
    pub fn new(mix: WorkloadMix, variant: Variant) -> Self {
        WorkloadConfig {
            mix,
            keys: KeyChoice::Zipfian(DEFAULT_THETA),
            pages_per_query: DEFAULT_PAGES_PER_QUERY,
            selector: QuerySelector::Window,
            target: TargetPolicy::HomeNode,
            variant,
            mode: MigrationMode::Async,
            batch: crate::engine::NR_MAX_BATCHED_MIGRATION,
            pin_prob: 0.01,
            writeback_prob: 0.0,
            writeback_ops: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |knob, reason| Err(ConfigError::Invalid { knob, reason });
        if !(0.0..=1.0).contains(&self.mix.migration_share) {
            return bad("migration share", "must lie in [0, 1]");
        }
        if self.pages_per_query == 0 {
            return bad("pages per query", "must be positive");
        }
        if self.batch == 0 {
            return bad("batch", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.pin_prob) {
            return bad("pin probability", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.writeback_prob) {
            return bad("writeback probability", "must lie in [0, 1]");
        }
        if let KeyChoice::Zipfian(t) = self.keys {
            if !(t > 0.0) {
                return bad("zipf theta", "must be positive");
            }
        }
        Ok(())
    }
}

/// Counters of one worker.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorkerMetrics {
    pub query_ops: u64,
    pub reads: u64,
    pub read_misses: u64,
    pub updates: u64,
    pub scans: u64,
    pub inserts: u64,
    pub migration_queries: u64,
    pub aborted_calls: u64,
    pub engine: EngineStats,
    /// Simulated time inside migration calls.
    pub migration_ns: u64,
    /// Simulated time spent handling other cores' interrupts.
    pub irq_ns: u64,
    /// Simulated clock of the worker.
    pub clock_ns: u64,
    pub restarts: u64,
    /// Keys this worker inserted that were new.
    pub inserted: Vec<u64>,
}

/// Aggregate over all workers of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub threads: u32,
    pub query_ops: u64,
    pub migration_queries: u64,
    pub aborted_calls: u64,
    pub engine: EngineStats,
    /// Longest worker clock.
    pub makespan_ns: u64,
    /// Sum of simulated time spent inside migration calls.
    pub migration_ns: u64,
    pub irq_ns: u64,
    pub restarts: u64,
    /// Non-migration operations per simulated second.
    pub query_throughput: f64,
    /// Pages that changed node per simulated second.
    pub migration_throughput: f64,
}

impl RunMetrics {
    pub fn aggregate(workers: &[WorkerMetrics]) -> Self {
        let mut m = RunMetrics { threads: workers.len() as u32, ..RunMetrics::default() };
        for w in workers {
            m.query_ops += w.query_ops;
            m.migration_queries += w.migration_queries;
            m.aborted_calls += w.aborted_calls;
            m.engine.accumulate(&w.engine);
            m.makespan_ns = m.makespan_ns.max(w.clock_ns);
            m.migration_ns += w.migration_ns;
            m.irq_ns += w.irq_ns;
            m.restarts += w.restarts;
        }
        if m.makespan_ns > 0 {
            let secs = m.makespan_ns as f64 * 1e-9;
            m.query_throughput = m.query_ops as f64 / secs;
            m.migration_throughput = m.engine.pages_moved as f64 / secs;
        }
        m
    }
}

/// Seeded RNG of worker `index`: one ChaCha stream per worker.
pub fn worker_rng(seed: u64, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// One worker thread's state. It never blocks on other workers except
/// through page locks and migration entries.
pub struct Worker<'a, 'm> {
    index: u32,
    core: CoreId,
    home: NodeId,
    ctx: OpCtx,
    tree: &'a BTree<'m>,
    engine: &'a Engine,
    keys: &'a [u64],
    cfg: WorkloadConfig,
    gen: OpGenerator,
    rng: ChaCha8Rng,
    window: usize,
    span: usize,
    rr: usize,
    ops_done: u64,
    writebacks: VecDeque<(PageId, u64)>,
    pub metrics: WorkerMetrics,
}

impl<'a, 'm> Worker<'a, 'm> {
    /// `keys` are the loaded keys in ascending order.
    pub fn new(
        index: u32,
        core: CoreId,
        tree: &'a BTree<'m>,
        engine: &'a Engine,
        keys: &'a [u64],
        cfg: WorkloadConfig,
    ) -> Result<Self, ConfigError> {
        cfg.validate()?;
        if keys.is_empty() {
            return Err(ConfigError::Invalid { knob: "records", reason: "the tree must hold at least one key" });
        }
        let span = (cfg.pages_per_query * FANOUT).min(keys.len());
        let gen = OpGenerator::new(cfg.mix, cfg.keys, span as u64)?;
        let mut rng = worker_rng(cfg.seed, index);
        let window = rng.random_range(0..=keys.len() - span);
        let home = tree.memory().topology().core_node(core);
        Ok(Worker {
            index,
            core,
            home,
            ctx: OpCtx::new(core, OwnerId(index + 1)),
            tree,
            engine,
            keys,
            cfg,
            gen,
            rng,
            window,
            span,
            rr: 0,
            ops_done: 0,
            writebacks: VecDeque::new(),
            metrics: WorkerMetrics::default(),
        })
    }

    pub fn home(&self) -> NodeId {
        self.home
    }

    pub fn run(&mut self, ops: u64) {
        for _ in 0..ops {
            self.step();
        }
        self.finish();
    }

    /// Completes pending writebacks so the run ends in a clean state.
    pub fn finish(&mut self) {
        let mm = self.tree.memory();
        for (page, _) in self.writebacks.drain(..) {
            mm.set_writeback(page, false);
        }
    }

    pub fn step(&mut self) {
        let op = self.gen.next_op(&mut self.rng);
        match op {
            Op::Read { rank } => {
                let key = self.key(rank);
                self.metrics.reads += 1;
                if self.tree.lookup(&mut self.ctx, key).is_none() {
                    self.metrics.read_misses += 1;
                }
            }
            Op::Update { rank } => {
                let key = self.key(rank);
                let value = self.rng.random();
                self.metrics.updates += 1;
                self.tree.update(&mut self.ctx, key, value);
                self.maybe_writeback(key);
            }
            Op::Scan { rank, len } => {
                let key = self.key(rank);
                self.metrics.scans += 1;
                self.tree.scan(&mut self.ctx, key, len as usize);
            }
            Op::Insert => {
                let lo = self.keys[self.window];
                let hi = self.keys[self.window + self.span - 1];
                let key = self.rng.random_range(lo..=hi);
                let value = self.rng.random();
                self.metrics.inserts += 1;
                if let Ok(true) = self.tree.insert(&mut self.ctx, key, value) {
                    self.metrics.inserted.push(key);
                }
                self.maybe_writeback(key);
            }
            Op::Migrate => self.migrate(),
        }
        if !op.is_migration() {
            self.metrics.query_ops += 1;
        }
        self.metrics.restarts += core::mem::take(&mut self.ctx.restarts);
        let irq = self.tree.memory().take_interrupt_ns(self.core);
        self.metrics.irq_ns += irq;
        self.metrics.clock_ns += self.ctx.take_ns() + irq;
        self.ops_done += 1;
        self.complete_writebacks();
    }

    fn key(&self, rank: u64) -> u64 {
        self.keys[self.window + rank as usize]
    }

    fn maybe_writeback(&mut self, key: u64) {
        if self.cfg.writeback_prob <= 0.0 || self.rng.random::<f64>() >= self.cfg.writeback_prob {
            return;
        }
        let mut scratch = OpCtx::new(self.core, self.ctx.owner);
        let page = self.tree.locate(&mut scratch, key);
        self.tree.memory().set_writeback(page, true);
        self.writebacks.push_back((page, self.ops_done + self.cfg.writeback_ops as u64));
    }

    fn complete_writebacks(&mut self) {
        while let Some(&(page, due)) = self.writebacks.front() {
            if due > self.ops_done {
                break;
            }
            self.tree.memory().set_writeback(page, false);
            self.writebacks.pop_front();
        }
    }

    /// Builds the next migration query, shifting the window first.
    pub fn next_query(&mut self) -> MigrationQuery {
        let n = self.cfg.pages_per_query;
        let pages = match self.cfg.selector {
            QuerySelector::Window => {
                self.window = self.rng.random_range(0..=self.keys.len() - self.span);
                let lo = self.keys[self.window];
                let hi = self.keys[self.window + self.span - 1];
                self.tree.sample_pages(&mut self.rng, n, Selector::Subtree { lo, hi })
            }
            QuerySelector::RandomLeaf => self.tree.sample_pages(&mut self.rng, n, Selector::RandomLeaf),
            QuerySelector::HotLeaf => self.tree.sample_pages(&mut self.rng, n, Selector::HotLeaf),
        };
        let target = match self.cfg.target {
            TargetPolicy::HomeNode => self.home,
            TargetPolicy::RoundRobin => {
                let mm = self.tree.memory();
                let src = pages.first().and_then(|&p| mm.page_node(p));
                let others: Vec<NodeId> =
                    mm.topology().nodes().iter().map(|n| n.id).filter(|&id| Some(id) != src).collect();
                let t = if others.is_empty() { self.home } else { others[self.rr % others.len()] };
                self.rr += 1;
                t
            }
        };
        MigrationQuery { pages, target, variant: self.cfg.variant, mode: self.cfg.mode, batch: self.cfg.batch }
    }

    fn migrate(&mut self) {
        let q = self.next_query();
        self.metrics.migration_queries += 1;
        if q.pages.is_empty() {
            return;
        }
        let salt = ((self.index as u64) << 40) | self.metrics.migration_queries;
        let pins = LockHold::new(self.cfg.pin_prob, self.cfg.seed, salt);
        let caller = Caller::new(self.core, self.ctx.owner);
        let out = self
            .engine
            .call(q.variant, self.tree.memory(), caller, &q.request(), &pins)
            .expect("query requests are well formed");
        self.metrics.engine.accumulate(&out.stats);
        self.metrics.engine.aborted = false;
        self.metrics.aborted_calls += out.stats.aborted as u64;
        self.metrics.migration_ns += out.stats.sim_ns;
        self.ctx.ns += out.stats.sim_ns;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::btree::{KeyDist, Placement};
    use crate::memory::MemoryModel;
    use crate::topology::Topology;

    fn mix(base: BaseMix, y: f64) -> WorkloadMix {
        WorkloadMix::new(base, y).unwrap()
    }

    #[test]
    fn names_round_trip() {
        for b in BaseMix::ALL {
            assert_eq!(BaseMix::parse(b.as_str()), Ok(b));
        }
        for l in MigLoad::ALL {
            assert_eq!(MigLoad::parse(l.as_str()), Ok(l));
        }
        assert!(BaseMix::parse("ycsb-b").is_err());
        assert_eq!(MigLoad::High.share(), 0.5);
        assert_eq!(WorkloadMix::preset(BaseMix::YcsbA, MigLoad::Medium).base_share(), 0.75);
        assert!(WorkloadMix::new(BaseMix::YcsbA, 1.5).is_err());
    }

    #[test]
    fn ycsb_c_without_migration_only_reads() {
        let g = OpGenerator::new(mix(BaseMix::YcsbC, 0.0), KeyChoice::Zipfian(0.99), 1000).unwrap();
        let mut rng = worker_rng(1, 0);
        for _ in 0..10_000 {
            assert!(matches!(g.next_op(&mut rng), Op::Read { rank } if rank < 1000));
        }
    }

    #[test]
    fn ycsb_a_read_fraction() {
        let g = OpGenerator::new(mix(BaseMix::YcsbA, 0.0), KeyChoice::Zipfian(0.99), 1 << 20).unwrap();
        let mut rng = worker_rng(7, 0);
        let n = 1_000_000;
        let reads = (0..n).filter(|_| matches!(g.next_op(&mut rng), Op::Read { .. })).count();
        assert!((reads as f64 / n as f64 - 0.5).abs() <= 0.01);
    }

    #[test]
    fn migration_fraction_follows_share() {
        let g = OpGenerator::new(mix(BaseMix::YcsbA, 0.25), KeyChoice::Uniform, 1 << 20).unwrap();
        let mut rng = worker_rng(7, 0);
        let n = 1_000_000;
        let m = (0..n).filter(|_| g.next_op(&mut rng).is_migration()).count();
        assert!((m as f64 / n as f64 - 0.25).abs() <= 0.01);
    }

    #[test]
    fn ycsb_e_scans_and_inserts() {
        let g = OpGenerator::new(mix(BaseMix::YcsbE, 0.0), KeyChoice::Uniform, 100).unwrap();
        let mut rng = worker_rng(3, 0);
        let (mut scans, mut inserts) = (0, 0);
        for _ in 0..100_000 {
            match g.next_op(&mut rng) {
                Op::Scan { len, .. } => {
                    assert!((1..=MAX_SCAN).contains(&len));
                    scans += 1;
                }
                Op::Insert => inserts += 1,
                other => panic!("{other:?}"),
            }
        }
        assert!((inserts as f64 / 100_000.0 - 0.05).abs() < 0.005);
        assert_eq!(scans + inserts, 100_000);
    }

    #[test]
    fn zipf_ranks_are_skewed() {
        let g = OpGenerator::new(mix(BaseMix::YcsbC, 0.0), KeyChoice::Zipfian(0.99), 10_000).unwrap();
        let mut rng = worker_rng(5, 0);
        let mut counts = alloc::vec![0u32; 10_000];
        for _ in 0..100_000 {
            counts[g.rank(&mut rng) as usize] += 1;
        }
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let top: u32 = counts[..100].iter().sum();
        assert!(top > 30_000, "{top}");
    }

    fn setup(frames: u32) -> (MemoryModel, Vec<u64>) {
        let mm = MemoryModel::new(Topology::dual_socket(2, frames));
        let keys: Vec<u64> = (0..20_000).collect();
        (mm, keys)
    }

    #[test]
    fn no_migration_means_zero_migration_throughput() {
        let (mm, keys) = setup(1024);
        let tree = BTree::load(&mm, keys.len() as u64, KeyDist::Sequential, Placement::RoundRobin).unwrap();
        let engine = Engine::default();
        let cfg = WorkloadConfig::new(mix(BaseMix::YcsbA, 0.0), Variant::MovePages2);
        let mut w = Worker::new(0, CoreId(0), &tree, &engine, &keys, cfg).unwrap();
        w.run(10_000);
        let m = RunMetrics::aggregate(&[w.metrics.clone()]);
        assert_eq!(m.query_ops, 10_000);
        assert_eq!(m.migration_throughput, 0.0);
        assert!(m.query_throughput > 0.0);
        assert_eq!(w.metrics.read_misses, 0);
    }

    #[test]
    fn window_query_targets_home_and_covers_window() {
        let (mm, keys) = setup(1024);
        let tree = BTree::load(&mm, keys.len() as u64, KeyDist::Sequential, Placement::RoundRobin).unwrap();
        let engine = Engine::default();
        let mut cfg = WorkloadConfig::new(mix(BaseMix::YcsbC, 1.0), Variant::MovePages2);
        cfg.pages_per_query = 8;
        let mut w = Worker::new(0, CoreId(2), &tree, &engine, &keys, cfg).unwrap();
        let q = w.next_query();
        assert_eq!(q.target, NodeId(1));
        assert!((8..=8).contains(&q.pages.len()));
        let leaves = tree.leaf_pages();
        assert!(q.pages.iter().all(|p| leaves.contains(p)));
    }

    #[test]
    fn single_worker_runs_are_reproducible() {
        let run = || {
            let (mm, keys) = setup(2048);
            let tree = BTree::load(&mm, keys.len() as u64, KeyDist::Sequential, Placement::RoundRobin).unwrap();
            let engine = Engine::default();
            let mut cfg = WorkloadConfig::new(mix(BaseMix::YcsbE, 0.05), Variant::MovePages);
            cfg.pages_per_query = 16;
            cfg.writeback_prob = 0.1;
            cfg.seed = 11;
            let mut w = Worker::new(0, CoreId(0), &tree, &engine, &keys, cfg).unwrap();
            w.run(5_000);
            assert_eq!(mm.isolated_count(), 0);
            tree.check_invariants().unwrap();
            w.metrics
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.migration_queries > 0 && a.inserts > 0);
    }

    #[test]
    fn invalid_knobs_are_rejected() {
        let mut cfg = WorkloadConfig::new(mix(BaseMix::YcsbA, 0.1), Variant::MovePages2);
        cfg.batch = 0;
        assert!(cfg.validate().is_err());
        cfg.batch = 8;
        cfg.pin_prob = 2.0;
        assert!(cfg.validate().is_err());
    }
}
