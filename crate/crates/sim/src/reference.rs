//! Reference interpreter for both migration pipelines, plus the exhaustive
//! equivalence grid that checks the engine against it.
//!
//! The interpreter works on a plain description of the machine (page → node,
//! free frames per node, writeback bits) and never touches
//! [`MemoryModel`]. Each case is replayed on a fresh memory model through the
//! real engine and the two results are compared field by field.

use std::fmt;

use pagemig_core::engine::{
    AttemptSel, Caller, Engine, EngineConfig, Errno, FailurePlan, Injection, MigrationMode, MigrationRequest,
    PageOutcome, PageStatus, Phase, Variant,
};
use pagemig_core::memory::{MemoryConfig, MemoryModel};
use pagemig_core::topology::Topology;
use pagemig_core::{CoreId, NodeId, OwnerId, PageId};

/// A failure planted at one request index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fault {
    /// Reading the page pointer from user space fails.
    CopyIn,
    /// The caller may not use the target node.
    NodeCheck,
    /// The target node does not exist.
    BadNode,
    /// The page id was never handed out.
    BadPage,
    /// The page was freed before the call.
    Freed,
    /// LRU isolation fails.
    Isolate,
    /// Someone holds the page lock for the whole call.
    Pinned,
    /// The page lock is held for the first `n` unmap attempts.
    PinnedFor(u32),
    /// Destination allocation fails.
    NoMem,
    /// The page is under writeback when the call starts.
    Writeback,
}

impl Fault {
    pub const GRID: [Fault; 11] = [
        Fault::CopyIn,
        Fault::NodeCheck,
        Fault::BadNode,
        Fault::BadPage,
        Fault::Freed,
        Fault::Isolate,
        Fault::Pinned,
        Fault::PinnedFor(2),
        Fault::PinnedFor(3),
        Fault::NoMem,
        Fault::Writeback,
    ];
}

/// One request on a small machine. Node ids are `0..nodes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Case {
    pub nodes: u16,
    pub frames: u32,
    pub initial: Vec<u16>,
    pub targets: Vec<u16>,
    pub faults: Vec<(usize, Fault)>,
    pub variant: Variant,
    pub mode: MigrationMode,
    pub cap: usize,
}

impl Case {
    fn has(&self, i: usize, f: Fault) -> bool {
        self.faults.iter().any(|&(j, g)| j == i && g == f)
    }

    fn target(&self, i: usize) -> u16 {
        if self.has(i, Fault::BadNode) {
            self.nodes
        } else {
            self.targets[i]
        }
    }

    fn unmap_blocked(&self, i: usize, attempt: u32) -> bool {
        self.faults.iter().any(|&(j, f)| {
            j == i
                && match f {
                    Fault::Pinned => true,
                    Fault::PinnedFor(n) => attempt <= n,
                    _ => false,
                }
        })
    }
}

/// Everything the comparison looks at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observed {
    pub ret: i64,
    pub status: Vec<PageStatus>,
    pub outcomes: Vec<PageOutcome>,
    /// `(async, sync)` unmap attempts per index.
    pub attempts: Vec<(u32, u32)>,
    /// Node of each page after the call; `None` when unmapped.
    pub placement: Vec<Option<u16>>,
    pub rounds: u64,
    pub batches: u64,
    pub shootdowns: u64,
    pub moved: u64,
    pub copy_bytes: u64,
    pub aborted: bool,
}

impl Observed {
    pub fn migrated(&self) -> Vec<usize> {
        (0..self.outcomes.len()).filter(|&i| self.outcomes[i] == PageOutcome::Migrated).collect()
    }
}

const PAGE_BYTES: u64 = 4096;

enum Add {
    Queued,
    InPlace,
    Failed(Errno),
}

enum Unmap {
    Done,
    Again,
    Fail(Errno),
    NoMem,
}

struct Interp<'c> {
    case: &'c Case,
    cfg: EngineConfig,
    mode: MigrationMode,
    cap: usize,
    node: Vec<Option<u16>>,
    writeback: Vec<bool>,
    free: Vec<u32>,
    list: Vec<usize>,
    obs: Observed,
}

impl<'c> Interp<'c> {
    fn new(case: &'c Case, cfg: EngineConfig) -> Self {
        let n = case.initial.len();
        let mut free = vec![case.frames; case.nodes as usize];
        let mut node = Vec::with_capacity(n);
        for i in 0..n {
            let at = case.initial[i];
            if case.has(i, Fault::Freed) || case.has(i, Fault::BadPage) {
                node.push(None);
            } else {
                free[at as usize] -= 1;
                node.push(Some(at));
            }
        }
        let (mode, cap) = match case.variant {
            Variant::MovePages => (MigrationMode::Sync, cfg.native_batch),
            Variant::MovePages2 => (case.mode, case.cap),
        };
        Interp {
            case,
            cfg,
            mode,
            cap,
            node,
            writeback: (0..n).map(|i| case.has(i, Fault::Writeback)).collect(),
            free,
            list: Vec::new(),
            obs: Observed {
                ret: 0,
                status: vec![PageStatus::Unset; n],
                outcomes: vec![PageOutcome::Unattempted; n],
                attempts: vec![(0, 0); n],
                placement: Vec::new(),
                rounds: 0,
                batches: 0,
                shootdowns: 0,
                moved: 0,
                copy_bytes: 0,
                aborted: false,
            },
        }
    }

    fn hard_error(&self, i: usize) -> Option<Errno> {
        if self.case.has(i, Fault::CopyIn) {
            Some(Errno::Fault)
        } else if self.case.target(i) >= self.case.nodes {
            Some(Errno::InvalNode)
        } else if self.case.has(i, Fault::NodeCheck) {
            Some(Errno::Acces)
        } else {
            None
        }
    }

    fn add(&mut self, i: usize, target: u16) -> Add {
        if self.case.has(i, Fault::BadPage) {
            return Add::Failed(Errno::Fault);
        }
        match self.node[i] {
            None => Add::Failed(Errno::NoEnt),
            Some(n) if n == target => Add::InPlace,
            Some(_) if self.case.has(i, Fault::Isolate) => Add::Failed(Errno::Busy),
            Some(_) => {
                self.list.push(i);
                Add::Queued
            }
        }
    }

    fn unmap(&mut self, i: usize, target: u16, lock: MigrationMode) -> Unmap {
        let a = &mut self.obs.attempts[i];
        if lock == MigrationMode::Async {
            a.0 += 1;
        } else {
            a.1 += 1;
        }
        let attempt = a.0 + a.1;
        if self.case.unmap_blocked(i, attempt) {
            return Unmap::Again;
        }
        if self.writeback[i] {
            if matches!(lock, MigrationMode::Sync | MigrationMode::SyncNoCopy) {
                self.writeback[i] = false;
            } else {
                return Unmap::Fail(Errno::Busy);
            }
        }
        if self.case.has(i, Fault::NoMem) || self.free[target as usize] == 0 {
            return Unmap::NoMem;
        }
        self.free[target as usize] -= 1;
        Unmap::Done
    }

    /// One `migrate_pages_batch` call. Returns the failures and whether
    /// allocation ran dry.
    fn batch(&mut self, pages: &[usize], target: u16, lock: MigrationMode, passes: u32) -> (Vec<(usize, Errno)>, bool) {
        let deferred = self.mode == MigrationMode::Async;
        let mut todo = pages.to_vec();
        let mut done = Vec::new();
        let mut failed = Vec::new();
        let mut nomem = false;
        let mut pass = 0;
        while pass < passes && !todo.is_empty() && !nomem {
            pass += 1;
            let mut retry = Vec::new();
            let mut k = 0;
            while k < todo.len() {
                let i = todo[k];
                k += 1;
                match self.unmap(i, target, lock) {
                    Unmap::Done => {
                        if !deferred {
                            self.obs.shootdowns += 1;
                        }
                        done.push(i);
                    }
                    Unmap::Again => retry.push(i),
                    Unmap::Fail(e) => failed.push((i, e)),
                    Unmap::NoMem => {
                        nomem = true;
                        failed.push((i, Errno::NoMem));
                        for &j in &todo[k..] {
                            failed.push((j, Errno::NoMem));
                        }
                        for &j in &retry {
                            failed.push((j, Errno::Busy));
                        }
                        retry.clear();
                        break;
                    }
                }
            }
            todo = retry;
        }
        for i in todo {
            failed.push((i, Errno::Busy));
        }
        if deferred && !done.is_empty() {
            self.obs.shootdowns += 1;
        }
        for i in done {
            let old = self.node[i].expect("queued pages are mapped");
            self.free[old as usize] += 1;
            self.node[i] = Some(target);
            self.obs.moved += 1;
            if self.mode != MigrationMode::SyncNoCopy {
                self.obs.copy_bytes += PAGE_BYTES;
            }
            self.obs.outcomes[i] = PageOutcome::Migrated;
        }
        (failed, nomem)
    }

    /// Async pass over the group, then each leftover alone in sync mode.
    fn sync(&mut self, group: &[usize], target: u16) -> (Vec<(usize, Errno)>, bool) {
        let (first, nomem) = self.batch(group, target, MigrationMode::Async, self.cfg.async_retry);
        if nomem {
            return (first, true);
        }
        let mut failed = Vec::new();
        for (k, &(i, _)) in first.iter().enumerate() {
            let (f, nomem) = self.batch(&[i], target, MigrationMode::Sync, self.cfg.sync_retry);
            failed.extend(f);
            if nomem {
                failed.extend_from_slice(&first[k + 1..]);
                return (failed, true);
            }
        }
        (failed, false)
    }

    /// Migrates the collected list. Returns failures left behind, or a
    /// negative errno when allocation ran dry.
    fn migrate(&mut self, target: u16) -> i64 {
        let list = std::mem::take(&mut self.list);
        self.obs.rounds += 1;
        let groups: Vec<Vec<usize>> = list.chunks(self.cap).map(<[usize]>::to_vec).collect();
        let mut left = 0i64;
        for (g, group) in groups.iter().enumerate() {
            self.obs.batches += 1;
            let (failed, nomem) = if self.mode == MigrationMode::Sync {
                self.sync(group, target)
            } else {
                self.batch(group, target, self.mode, self.cfg.pages_retry)
            };
            left += failed.len() as i64;
            for (i, e) in failed {
                self.obs.outcomes[i] = PageOutcome::Failed(e);
            }
            if nomem {
                for rest in &groups[g + 1..] {
                    for &i in rest {
                        self.obs.outcomes[i] = PageOutcome::Failed(Errno::NoMem);
                    }
                }
                return Errno::NoMem.code();
            }
        }
        left
    }

    /// Native flush: statuses are written only when the whole round moved.
    fn flush(&mut self, current: Option<u16>, start: usize, i: usize) -> i64 {
        let Some(node) = current else { return 0 };
        if self.list.is_empty() {
            return 0;
        }
        let rc = self.migrate(node);
        if rc > 0 {
            return rc + (self.case.initial.len() - i) as i64;
        }
        if rc < 0 {
            return rc;
        }
        for k in start..i {
            self.obs.status[k] = PageStatus::Node(NodeId(node));
        }
        0
    }

    /// Partial flush: every member of the round gets its own status.
    fn flush2(&mut self, current: Option<u16>) {
        let Some(node) = current else { return };
        if self.list.is_empty() {
            return;
        }
        let round = self.list.clone();
        self.migrate(node);
        for i in round {
            self.obs.status[i] = match self.obs.outcomes[i] {
                PageOutcome::Failed(e) => PageStatus::Err(e),
                _ => PageStatus::Node(NodeId(node)),
            };
        }
    }

    fn native(&mut self) {
        let n = self.case.initial.len();
        let mut current: Option<u16> = None;
        let mut start = 0;
        let mut err: i64 = 0;
        let mut i = 0;
        let mut flush_at_end = true;
        self.obs.aborted = true;
        'walk: {
            while i < n {
                if let Some(e) = self.hard_error(i) {
                    self.obs.outcomes[i] = PageOutcome::Failed(e);
                    err = e.code();
                    break 'walk;
                }
                let node = self.case.target(i);
                match current {
                    None => {
                        current = Some(node);
                        start = i;
                    }
                    Some(c) if c != node => {
                        let e = self.flush(current, start, i);
                        if e != 0 {
                            err = e;
                            flush_at_end = false;
                            break 'walk;
                        }
                        current = Some(node);
                        start = i;
                    }
                    Some(_) => {}
                }
                let c = current.expect("round open");
                match self.add(i, c) {
                    Add::Queued => {
                        err = 1;
                        i += 1;
                        continue;
                    }
                    Add::InPlace => {
                        self.obs.outcomes[i] = PageOutcome::Migrated;
                        self.obs.status[i] = PageStatus::Node(NodeId(c));
                    }
                    Add::Failed(e) => {
                        self.obs.outcomes[i] = PageOutcome::Failed(e);
                        self.obs.status[i] = PageStatus::Err(e);
                    }
                }
                let e = self.flush(current, start, i);
                if e != 0 {
                    // Page i already has its status.
                    err = if e > 0 { e - 1 } else { e };
                    flush_at_end = false;
                    break 'walk;
                }
                current = None;
                err = 0;
                i += 1;
            }
            self.obs.aborted = false;
        }
        if flush_at_end {
            let e1 = self.flush(current, start, i);
            if err >= 0 {
                err = e1;
            }
        }
        self.obs.ret = err;
    }

    fn partial(&mut self) {
        let n = self.case.initial.len();
        let mut current: Option<u16> = None;
        for i in 0..n {
            if let Some(e) = self.hard_error(i) {
                self.obs.outcomes[i] = PageOutcome::Failed(e);
                self.obs.status[i] = PageStatus::Err(e);
                self.flush2(current);
                current = None;
                continue;
            }
            let node = self.case.target(i);
            match current {
                None => current = Some(node),
                Some(c) if c != node => {
                    self.flush2(current);
                    current = Some(node);
                }
                Some(_) => {}
            }
            let c = current.expect("round open");
            match self.add(i, c) {
                Add::Queued => continue,
                Add::InPlace => {
                    self.obs.outcomes[i] = PageOutcome::Migrated;
                    self.obs.status[i] = PageStatus::Node(NodeId(c));
                }
                Add::Failed(e) => {
                    self.obs.outcomes[i] = PageOutcome::Failed(e);
                    self.obs.status[i] = PageStatus::Err(e);
                }
            }
            self.flush2(current);
            current = None;
        }
        self.flush2(current);
        self.obs.ret = self.obs.outcomes.iter().filter(|o| **o != PageOutcome::Migrated).count() as i64;
    }
}

/// Runs `case` through the reference interpreter.
pub fn interpret(case: &Case, cfg: EngineConfig) -> Observed {
    let mut it = Interp::new(case, cfg);
    match case.variant {
        Variant::MovePages => it.native(),
        Variant::MovePages2 => it.partial(),
    }
    it.obs.placement = it.node.clone();
    it.obs
}

/// Runs `case` through the engine on a fresh memory model.
pub fn execute(case: &Case, engine: &Engine) -> Observed {
    let topo = Topology::chiplet(case.nodes, 1, case.frames);
    let mut cfg = MemoryConfig::for_topology(&topo);
    cfg.tlb_entries = 16;
    let mm = MemoryModel::with_config(topo, cfg);
    let n = case.initial.len();
    let mut pages: Vec<PageId> = case
        .initial
        .iter()
        .map(|&at| mm.alloc_page(NodeId(at)).expect("grid machine has room"))
        .collect();
    let mut injections = Vec::new();
    for &(i, f) in &case.faults {
        match f {
            Fault::CopyIn => injections.push(Injection::permanent(i, Phase::CopyIn)),
            Fault::NodeCheck => injections.push(Injection::permanent(i, Phase::NodeCheck)),
            Fault::Isolate => injections.push(Injection::permanent(i, Phase::Isolate)),
            Fault::Pinned => injections.push(Injection::permanent(i, Phase::Unmap)),
            Fault::PinnedFor(k) => injections.push(Injection { index: i, phase: Phase::Unmap, attempts: AttemptSel::FirstN(k) }),
            Fault::NoMem => injections.push(Injection::permanent(i, Phase::Alloc)),
            Fault::Writeback => mm.set_writeback(pages[i], true),
            Fault::Freed | Fault::BadPage | Fault::BadNode => {}
        }
    }
    for &(i, f) in &case.faults {
        match f {
            Fault::Freed if mm.page_node(pages[i]).is_some() => mm.free_page(pages[i]).expect("fresh page frees"),
            Fault::BadPage if mm.page_node(pages[i]).is_some() => {
                mm.free_page(pages[i]).expect("fresh page frees");
                pages[i] = PageId(u32::MAX);
            }
            _ => {}
        }
    }
    let targets: Vec<NodeId> = (0..n).map(|i| NodeId(case.target(i))).collect();
    let req = MigrationRequest::new(pages.clone(), targets).with_mode(case.mode).with_batch(case.cap);
    let plan = FailurePlan::new(injections);
    let caller = Caller::new(CoreId(0), OwnerId(1));
    let out = engine.call(case.variant, &mm, caller, &req, &plan).expect("grid requests are well formed");
    assert_eq!(mm.isolated_count(), 0, "pages left isolated by {case:?}");
    Observed {
        ret: out.ret,
        status: out.status,
        outcomes: out.outcomes,
        attempts: out.attempts.iter().map(|a| (a.async_attempts, a.sync_retries)).collect(),
        placement: pages.iter().map(|&p| mm.page_node(p).map(|n| n.0)).collect(),
        rounds: out.stats.rounds,
        batches: out.stats.batches,
        shootdowns: out.stats.tlb_shootdowns,
        moved: out.stats.pages_moved,
        copy_bytes: out.stats.copy_bytes,
        aborted: out.stats.aborted,
    }
}

/// Per-page `(initial node, target node)` shapes the grid is built from:
/// a move to node 1, a move to node 2, and a page already on its target.
pub const SHAPES: [(u16, u16); 3] = [(0, 1), (0, 2), (1, 1)];

/// Size of one grid layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layer {
    pub max_pages: usize,
    pub faults: usize,
}

/// Every request with up to 8 pages and one fault, and up to 5 pages with
/// two faults, over the shapes in [`SHAPES`] on a 3-node machine.
pub const GRID: [Layer; 2] = [Layer { max_pages: 8, faults: 1 }, Layer { max_pages: 5, faults: 2 }];

/// `move_pages2` knob settings cycled across grid cases.
const KNOBS: [(MigrationMode, usize); 8] = [
    (MigrationMode::Sync, 512),
    (MigrationMode::Async, 2),
    (MigrationMode::SyncLight, 3),
    (MigrationMode::SyncNoCopy, 1),
    (MigrationMode::Async, 512),
    (MigrationMode::Sync, 2),
    (MigrationMode::SyncLight, 512),
    (MigrationMode::SyncNoCopy, 4),
];

/// Calls `f` for every case of the grid; each request appears once per
/// variant. Fault sets are unordered and may stack two faults on one index.
pub fn for_each_case(layers: &[Layer], mut f: impl FnMut(Case)) {
    let mut serial = 0usize;
    for layer in layers {
        for n in 0..=layer.max_pages {
            let patterns = SHAPES.len().pow(n as u32);
            let sites: Vec<(usize, Fault)> =
                (0..n).flat_map(|i| Fault::GRID.into_iter().map(move |k| (i, k))).collect();
            let mut fault_sets: Vec<Vec<(usize, Fault)>> = Vec::new();
            if layer.faults == 1 {
                fault_sets.push(Vec::new());
                fault_sets.extend(sites.iter().map(|&s| vec![s]));
            } else {
                for a in 0..sites.len() {
                    for b in a + 1..sites.len() {
                        fault_sets.push(vec![sites[a], sites[b]]);
                    }
                }
            }
            for p in 0..patterns {
                let mut code = p;
                let mut initial = Vec::with_capacity(n);
                let mut targets = Vec::with_capacity(n);
                for _ in 0..n {
                    let (from, to) = SHAPES[code % SHAPES.len()];
                    code /= SHAPES.len();
                    initial.push(from);
                    targets.push(to);
                }
                for faults in &fault_sets {
                    for variant in [Variant::MovePages, Variant::MovePages2] {
                        let (mode, cap) = KNOBS[serial % KNOBS.len()];
                        serial += 1;
                        f(Case {
                            nodes: 3,
                            frames: 8,
                            initial: initial.clone(),
                            targets: targets.clone(),
                            faults: faults.clone(),
                            variant,
                            mode,
                            cap,
                        });
                    }
                }
            }
        }
    }
}

/// A case where the engine and the interpreter disagree.
#[derive(Debug, Clone)]
pub struct Mismatch {
    pub case: Case,
    pub expected: Observed,
    pub actual: Observed,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "case     {:?}", self.case)?;
        writeln!(f, "expected {:?}", self.expected)?;
        write!(f, "actual   {:?}", self.actual)
    }
}

#[derive(Debug, Clone, Default)]
pub struct GridReport {
    pub cases: usize,
    pub mismatches: usize,
    /// The first few disagreements.
    pub examples: Vec<Mismatch>,
}

impl GridReport {
    pub fn agreement(&self) -> f64 {
        if self.cases == 0 {
            1.0
        } else {
            (self.cases - self.mismatches) as f64 / self.cases as f64
        }
    }
}

/// Compares `engine` with the interpreter on every case of `layers`.
pub fn check_grid(layers: &[Layer], engine: &Engine) -> GridReport {
    let mut report = GridReport::default();
    for_each_case(layers, |case| {
        report.cases += 1;
        let expected = interpret(&case, engine.config);
        let actual = execute(&case, engine);
        if expected != actual {
            report.mismatches += 1;
            if report.examples.len() < 5 {
                report.examples.push(Mismatch { case, expected, actual });
            }
        }
    });
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(initial: &[u16], targets: &[u16], faults: &[(usize, Fault)], variant: Variant) -> Case {
        Case {
            nodes: 3,
            frames: 8,
            initial: initial.to_vec(),
            targets: targets.to_vec(),
            faults: faults.to_vec(),
            variant,
            mode: MigrationMode::Sync,
            cap: 512,
        }
    }

    #[test]
    fn held_page_aborts_native_after_its_round() {
        let c = case(&[0; 6], &[1, 1, 1, 2, 2, 2], &[(1, Fault::Pinned)], Variant::MovePages);
        let o = interpret(&c, EngineConfig::default());
        assert_eq!(o.migrated(), vec![0, 2]);
        assert!(o.status.iter().all(|s| *s == PageStatus::Unset));
        assert_eq!(o.ret, 4);
        assert!(o.aborted);
        assert_eq!(o.attempts[1], (3, 7));
    }

    #[test]
    fn held_page_is_skipped_by_move_pages2() {
        let c = case(&[0; 6], &[1, 1, 1, 2, 2, 2], &[(1, Fault::Pinned)], Variant::MovePages2);
        let o = interpret(&c, EngineConfig::default());
        assert_eq!(o.migrated(), vec![0, 2, 3, 4, 5]);
        assert_eq!(o.status[1], PageStatus::Err(Errno::Busy));
        assert_eq!(o.ret, 1);
        assert_eq!(o.rounds, 2);
    }

    #[test]
    fn invalid_node_mid_request() {
        let c = case(&[0; 3], &[1, 1, 1], &[(1, Fault::BadNode)], Variant::MovePages2);
        let o = interpret(&c, EngineConfig::default());
        assert_eq!(o.status, vec![PageStatus::Node(NodeId(1)), PageStatus::Err(Errno::InvalNode), PageStatus::Node(NodeId(1))]);
        assert_eq!(o.ret, 1);
        let c = Case { variant: Variant::MovePages, ..c };
        let o = interpret(&c, EngineConfig::default());
        assert_eq!(o.ret, Errno::InvalNode.code());
        assert_eq!(o.migrated(), vec![0]);
        assert_eq!(o.outcomes[2], PageOutcome::Unattempted);
    }

    #[test]
    fn grid_sizes() {
        let mut n = 0;
        for_each_case(&[Layer { max_pages: 1, faults: 1 }], |_| n += 1);
        // n = 0: one empty request; n = 1: 3 shapes x (1 + 11 faults); two variants.
        assert_eq!(n, 2 * (1 + 3 * 12));
    }

    #[test]
    fn small_grid_agrees() {
        let r = check_grid(&[Layer { max_pages: 3, faults: 1 }, Layer { max_pages: 2, faults: 2 }], &Engine::default());
        assert!(r.mismatches == 0, "{}", r.examples[0]);
    }
}
