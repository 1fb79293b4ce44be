//! The two page-migration pipelines.
//!
//! [`move_pages`] reproduces the native system call: fixed `MIGRATE_SYNC`,
//! a batch cap of 512 and abort-on-failure. [`move_pages2`] keeps the same
//! round formation but records every error per page and carries on, and takes
//! the migration mode and batch cap from the caller.
//!
//! Both run against a shared [`MemoryModel`] and are reentrant: any number of
//! calls may run concurrently with each other and with tree workers.

pub(crate) mod inject;
mod migrate;
mod pipeline;

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::ids::{CoreId, NodeId, OwnerId, PageId};
use crate::memory::MemoryModel;

pub use inject::{AttemptSel, FailureInjector, FailurePlan, Injection, LockHold, NoFailures, Phase};

pub const NR_MAX_BATCHED_MIGRATION: usize = 512;
pub const NR_MAX_MIGRATE_ASYNC_RETRY: u32 = 3;
pub const NR_MAX_MIGRATE_SYNC_RETRY: u32 = 7;
pub const NR_MAX_MIGRATE_PAGES_RETRY: u32 = 10;
/// `do_pages_stat` copies page addresses in chunks of this size.
pub const STAT_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MigrationMode {
    Async,
    Sync,
    SyncLight,
    SyncNoCopy,
}

impl MigrationMode {
    pub const ALL: [MigrationMode; 4] =
        [MigrationMode::Async, MigrationMode::Sync, MigrationMode::SyncLight, MigrationMode::SyncNoCopy];

    /// CLI spelling.
    pub fn as_str(self) -> &'static str {
        match self {
            MigrationMode::Async => "async",
            MigrationMode::Sync => "sync",
            MigrationMode::SyncLight => "sync-light",
            MigrationMode::SyncNoCopy => "sync-no-copy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// Everything except `Async` blocks on page locks.
    pub fn blocks(self) -> bool {
        self != MigrationMode::Async
    }
}

impl fmt::Display for MigrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    MovePages,
    MovePages2,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::MovePages => "move_pages",
            Variant::MovePages2 => "move_pages2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "move_pages" => Some(Variant::MovePages),
            "move_pages2" => Some(Variant::MovePages2),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-page error codes, with the Linux errno each one stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Errno {
    /// Bad page address or failed copy from user space.
    Fault,
    /// Target node does not exist.
    InvalNode,
    /// Target node not allowed for the caller.
    Acces,
    Busy,
    NoMem,
    /// Page not present.
    NoEnt,
}

impl Errno {
    pub fn code(self) -> i64 {
        match self {
            Errno::Fault => -14,
            Errno::InvalNode => -19,
            Errno::Acces => -13,
            Errno::Busy => -16,
            Errno::NoMem => -12,
            Errno::NoEnt => -2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Errno::Fault => "EFAULT",
            Errno::InvalNode => "ENODEV",
            Errno::Acces => "EACCES",
            Errno::Busy => "EBUSY",
            Errno::NoMem => "ENOMEM",
            Errno::NoEnt => "ENOENT",
        }
    }
}

impl fmt::Display for Errno {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One slot of the status array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PageStatus {
    /// The page now resides on this node.
    Node(NodeId),
    Err(Errno),
    /// Never written by the call.
    Unset,
}

impl fmt::Display for PageStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PageStatus::Node(n) => write!(f, "{}", n.0),
            PageStatus::Err(e) => write!(f, "{e}"),
            PageStatus::Unset => f.write_str("-"),
        }
    }
}

/// What finally happened to one request index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PageOutcome {
    /// Moved, or already on the target node.
    Migrated,
    Failed(Errno),
    /// Skipped because the call aborted earlier.
    Unattempted,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PageAttempts {
    /// Unmap attempts in the optimistic phase of `MIGRATE_SYNC`, or in the
    /// batch path under `MIGRATE_ASYNC`.
    pub async_attempts: u32,
    /// Single-page attempts in the blocking phase of `MIGRATE_SYNC`, or in
    /// the batch path under the other blocking modes.
    pub sync_retries: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub pages_requested: u64,
    /// Includes pages that were already on their target node.
    pub pages_migrated: u64,
    pub pages_failed: u64,
    /// Skipped after an abort.
    pub pages_unattempted: u64,
    /// Pages whose frame actually changed.
    pub pages_moved: u64,
    /// Non-empty flushes of the page list.
    pub rounds: u64,
    /// Sub-groups cut from a round by the batch cap.
    pub batches: u64,
    pub async_attempts: u64,
    pub sync_retries: u64,
    pub tlb_shootdowns: u64,
    pub aborted: bool,
    pub copy_bytes: u64,
    /// Simulated time spent inside the call.
    pub sim_ns: u64,
}

impl EngineStats {
    /// Adds `other` into `self`; `aborted` is or-ed.
    pub fn accumulate(&mut self, other: &EngineStats) {
        self.pages_requested += other.pages_requested;
        self.pages_migrated += other.pages_migrated;
        self.pages_failed += other.pages_failed;
        self.pages_unattempted += other.pages_unattempted;
        self.pages_moved += other.pages_moved;
        self.rounds += other.rounds;
        self.batches += other.batches;
        self.async_attempts += other.async_attempts;
        self.sync_retries += other.sync_retries;
        self.tlb_shootdowns += other.tlb_shootdowns;
        self.aborted |= other.aborted;
        self.copy_bytes += other.copy_bytes;
        self.sim_ns += other.sim_ns;
    }
}

/// Simulated costs charged by the engine, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    /// Kernel entry and exit, LRU drain on disable and re-enable.
    pub syscall_ns: u64,
    /// Page walk plus LRU isolation inside `add_page_for_migration`.
    pub add_page_ns: u64,
    /// One unmap attempt, successful or not.
    pub unmap_attempt_ns: u64,
    /// Blocking wait before a sync attempt gives up on a held lock.
    pub lock_wait_ns: u64,
    /// Waiting for writeback to finish in `MIGRATE_SYNC`.
    pub writeback_wait_ns: u64,
    /// Initiator side of one shootdown broadcast.
    pub shootdown_ns: u64,
    /// Interrupt handling charged to every other core per broadcast.
    pub ipi_receive_ns: u64,
    /// Remap, unlock and LRU admission of one moved page.
    pub remap_ns: u64,
    /// Cache lines copied in parallel during a page copy.
    pub copy_parallelism: u64,
    /// Per-core cache available to the unmap/move sweep of one sub-group.
    pub cache_bytes: u64,
    /// Extra cost for each page of a sub-group that no longer fits the cache.
    pub cache_miss_page_ns: u64,
    /// Store of one status entry to user space.
    pub store_status_ns: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            syscall_ns: 2_000,
            add_page_ns: 150,
            unmap_attempt_ns: 250,
            lock_wait_ns: 2_000,
            writeback_wait_ns: 20_000,
            shootdown_ns: 4_000,
            ipi_receive_ns: 1_000,
            remap_ns: 200,
            copy_parallelism: 8,
            cache_bytes: 1 << 20,
            cache_miss_page_ns: 1_000,
            store_status_ns: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineConfig {
    pub async_retry: u32,
    pub sync_retry: u32,
    pub pages_retry: u32,
    /// Batch cap used by native `move_pages`.
    pub native_batch: usize,
    /// Real-time spins a blocking lock attempt makes before giving up.
    pub lock_spins: u32,
    pub cost: CostModel,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            async_retry: NR_MAX_MIGRATE_ASYNC_RETRY,
            sync_retry: NR_MAX_MIGRATE_SYNC_RETRY,
            pages_retry: NR_MAX_MIGRATE_PAGES_RETRY,
            native_batch: NR_MAX_BATCHED_MIGRATION,
            lock_spins: 16,
            cost: CostModel::default(),
        }
    }
}

/// Arguments of one call. `nodes == None` turns the call into a status query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MigrationRequest {
    pub pages: Vec<PageId>,
    pub nodes: Option<Vec<NodeId>>,
    pub mode: MigrationMode,
    pub nr_max_batched_migration: usize,
}

impl MigrationRequest {
    pub fn new(pages: Vec<PageId>, nodes: Vec<NodeId>) -> Self {
        MigrationRequest {
            pages,
            nodes: Some(nodes),
            mode: MigrationMode::Sync,
            nr_max_batched_migration: NR_MAX_BATCHED_MIGRATION,
        }
    }

    /// Every page to the same node.
    pub fn to_node(pages: Vec<PageId>, node: NodeId) -> Self {
        let nodes = vec![node; pages.len()];
        Self::new(pages, nodes)
    }

    pub fn query(pages: Vec<PageId>) -> Self {
        MigrationRequest {
            pages,
            nodes: None,
            mode: MigrationMode::Sync,
            nr_max_batched_migration: NR_MAX_BATCHED_MIGRATION,
        }
    }

    pub fn with_mode(mut self, mode: MigrationMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_batch(mut self, cap: usize) -> Self {
        self.nr_max_batched_migration = cap;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestError {
    LengthMismatch { pages: usize, nodes: usize },
    ZeroBatch,
}

impl fmt::Display for RequestError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RequestError::LengthMismatch { pages, nodes } => {
                write!(f, "{pages} pages but {nodes} target nodes")
            }
            RequestError::ZeroBatch => f.write_str("nr_max_batched_migration must be positive"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for RequestError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MigrationOutcome {
    /// 0 on full success, positive for pages left behind, negative errno on a
    /// hard error (native only).
    pub ret: i64,
    pub status: Vec<PageStatus>,
    pub outcomes: Vec<PageOutcome>,
    pub attempts: Vec<PageAttempts>,
    pub stats: EngineStats,
}

impl MigrationOutcome {
    /// Request indices whose page ended up migrated.
    pub fn migrated_indices(&self) -> Vec<usize> {
        self.outcomes
            .iter()
            .enumerate()
            .filter(|(_, o)| **o == PageOutcome::Migrated)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn unset_count(&self) -> usize {
        self.status.iter().filter(|s| **s == PageStatus::Unset).count()
    }
}

/// Calling context: which core issues the call and under which lock owner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Caller {
    pub core: CoreId,
    pub owner: OwnerId,
}

impl Caller {
    pub fn new(core: CoreId, owner: OwnerId) -> Self {
        Caller { core, owner }
    }
}

/// A configured migration engine. Cheap to share across threads.
#[derive(Debug, Clone, Copy, Default)]
pub struct Engine {
    pub config: EngineConfig,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Self {
        Engine { config }
    }

    /// Native `move_pages`: mode and batch cap in `req` are ignored.
    pub fn move_pages(
        &self,
        mm: &MemoryModel,
        caller: Caller,
        req: &MigrationRequest,
        inject: &dyn FailureInjector,
    ) -> Result<MigrationOutcome, RequestError> {
        self.dispatch(Variant::MovePages, mm, caller, req, inject)
    }

    pub fn move_pages2(
        &self,
        mm: &MemoryModel,
        caller: Caller,
        req: &MigrationRequest,
        inject: &dyn FailureInjector,
    ) -> Result<MigrationOutcome, RequestError> {
        self.dispatch(Variant::MovePages2, mm, caller, req, inject)
    }

    pub fn call(
        &self,
        variant: Variant,
        mm: &MemoryModel,
        caller: Caller,
        req: &MigrationRequest,
        inject: &dyn FailureInjector,
    ) -> Result<MigrationOutcome, RequestError> {
        self.dispatch(variant, mm, caller, req, inject)
    }

    fn dispatch(
        &self,
        variant: Variant,
        mm: &MemoryModel,
        caller: Caller,
        req: &MigrationRequest,
        inject: &dyn FailureInjector,
    ) -> Result<MigrationOutcome, RequestError> {
        let Some(nodes) = &req.nodes else {
            return Ok(self.stat_outcome(mm, &req.pages));
        };
        if nodes.len() != req.pages.len() {
            return Err(RequestError::LengthMismatch { pages: req.pages.len(), nodes: nodes.len() });
        }
        let (mode, cap) = match variant {
            Variant::MovePages => (MigrationMode::Sync, self.config.native_batch),
            Variant::MovePages2 => (req.mode, req.nr_max_batched_migration),
        };
        if cap == 0 {
            return Err(RequestError::ZeroBatch);
        }
        let mut run = pipeline::Call::new(&self.config, mm, caller, &req.pages, nodes, mode, cap, inject);
        match variant {
            Variant::MovePages => run.do_pages_move(),
            Variant::MovePages2 => run.do_pages_move2(),
        }
        Ok(run.finish())
    }

    fn stat_outcome(&self, mm: &MemoryModel, pages: &[PageId]) -> MigrationOutcome {
        let status = do_pages_stat(mm, pages);
        let n = pages.len();
        MigrationOutcome {
            ret: 0,
            status,
            outcomes: vec![PageOutcome::Unattempted; n],
            attempts: vec![PageAttempts::default(); n],
            stats: EngineStats {
                pages_requested: n as u64,
                pages_unattempted: n as u64,
                sim_ns: self.config.cost.syscall_ns + n as u64 * self.config.cost.add_page_ns,
                ..EngineStats::default()
            },
        }
    }
}

/// Current node of each page, looked up in chunks of [`STAT_CHUNK`].
/// Mutates nothing.
pub fn do_pages_stat(mm: &MemoryModel, pages: &[PageId]) -> Vec<PageStatus> {
    let mut out = Vec::with_capacity(pages.len());
    for chunk in pages.chunks(STAT_CHUNK) {
        for &p in chunk {
            out.push(if !mm.is_valid_page(p) {
                PageStatus::Err(Errno::Fault)
            } else {
                match mm.page_node(p) {
                    Some(n) => PageStatus::Node(n),
                    // A migration entry is a non-present entry, like a freed page.
                    None => PageStatus::Err(Errno::NoEnt),
                }
            });
        }
    }
    out
}

/// Number of internal chunks `do_pages_stat` processes for `n` pages.
pub fn stat_chunks(n: usize) -> usize {
    n.div_ceil(STAT_CHUNK)
}

/// Convenience wrapper around [`Engine::move_pages`] with default settings.
pub fn move_pages(
    mm: &MemoryModel,
    caller: Caller,
    req: &MigrationRequest,
    inject: &dyn FailureInjector,
) -> Result<MigrationOutcome, RequestError> {
    Engine::default().move_pages(mm, caller, req, inject)
}

/// Convenience wrapper around [`Engine::move_pages2`] with default settings.
pub fn move_pages2(
    mm: &MemoryModel,
    caller: Caller,
    req: &MigrationRequest,
    inject: &dyn FailureInjector,
) -> Result<MigrationOutcome, RequestError> {
    Engine::default().move_pages2(mm, caller, req, inject)
}
