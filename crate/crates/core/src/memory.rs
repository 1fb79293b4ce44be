//! The simulated memory system.
//!
//! Every virtual page owns one page-table entry packed into a single atomic
//! word (frame location, lock bit and version), so optimistic readers and the
//! migration engine validate against the same state. Frames carry real
//! payload words, which makes "contents survive migration" checkable.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{fence, AtomicBool, AtomicU32, AtomicU64, AtomicU8, Ordering};

use spin::Mutex;

use crate::ids::{CoreId, FrameId, NodeId, OwnerId, PageId};
use crate::topology::Topology;

pub const PAGE_SIZE: usize = 4096;
/// Payload words per frame (4 KB of `u64`).
pub const PAGE_WORDS: usize = PAGE_SIZE / 8;
/// Per-frame metadata words kept beside the payload, like `struct page`.
pub const META_WORDS: usize = 8;
pub const FRAME_WORDS: usize = PAGE_WORDS + META_WORDS;
/// Cache lines per page.
pub const LINES_PER_PAGE: u64 = (PAGE_SIZE / 64) as u64;

const LOC_MASK: u64 = 0xffff_ffff;
const LOC_UNMAPPED: u32 = u32::MAX;
const LOC_MIGRATING: u32 = u32::MAX - 1;
const LOCK_BIT: u64 = 1 << 32;
const VERSION_SHIFT: u32 = 33;
const VERSION_ONE: u64 = 1 << VERSION_SHIFT;

const FLAG_ON_LRU: u8 = 1;
const FLAG_ISOLATED: u8 = 1 << 1;
const FLAG_WRITEBACK: u8 = 1 << 2;
const FLAG_DIRTY: u8 = 1 << 3;
const FLAG_LRU_PENDING: u8 = 1 << 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
}

/// Where a page currently points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mapping {
    Frame(FrameId),
    /// Sentinel installed while the page is in flight between frames.
    MigrationEntry,
    Unmapped,
}

/// Snapshot of a page-table entry word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PteWord(u64);

impl PteWord {
    fn loc(self) -> u32 {
        (self.0 & LOC_MASK) as u32
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn version(self) -> u64 {
        self.0 >> VERSION_SHIFT
    }

    pub fn is_locked(self) -> bool {
        self.0 & LOCK_BIT != 0
    }

    pub fn is_migrating(self) -> bool {
        self.loc() == LOC_MIGRATING
    }

    pub fn mapping(self) -> Mapping {
        match self.loc() {
            LOC_UNMAPPED => Mapping::Unmapped,
            LOC_MIGRATING => Mapping::MigrationEntry,
            loc => Mapping::Frame(decode_frame(loc)),
        }
    }

    pub fn frame(self) -> Option<FrameId> {
        match self.mapping() {
            Mapping::Frame(f) => Some(f),
            _ => None,
        }
    }

    /// Unlocked and pointing at a frame.
    pub fn is_stable(self) -> bool {
        !self.is_locked() && self.frame().is_some()
    }

    fn with_loc(self, loc: u32) -> Self {
        PteWord((self.0 & !LOC_MASK) | loc as u64)
    }

    fn bumped(self) -> Self {
        PteWord(self.0.wrapping_add(VERSION_ONE))
    }

    fn locked(self) -> Self {
        PteWord(self.0 | LOCK_BIT)
    }

    fn unlocked(self) -> Self {
        PteWord(self.0 & !LOCK_BIT)
    }
}

fn encode_frame(frame: FrameId) -> u32 {
    ((frame.node.0 as u32) << 24) | frame.index
}

fn decode_frame(loc: u32) -> FrameId {
    FrameId {
        node: NodeId((loc >> 24) as u16),
        index: loc & 0x00ff_ffff,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemError {
    /// No free frame on the requested node.
    NodeExhausted(NodeId),
    /// Page id space exhausted.
    OutOfPageIds,
    /// Freed or never allocated.
    UnmappedPage(PageId),
    UnknownNode(NodeId),
    UnlockNotOwner { page: PageId, owner: OwnerId },
}

impl fmt::Display for MemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemError::NodeExhausted(n) => write!(f, "{n} has no free frame"),
            MemError::OutOfPageIds => write!(f, "virtual page id space exhausted"),
            MemError::UnmappedPage(p) => write!(f, "{p} is not mapped"),
            MemError::UnknownNode(n) => write!(f, "{n} is not part of the topology"),
            MemError::UnlockNotOwner { page, owner } => {
                write!(f, "{page} unlocked by {} which does not hold it", owner.0)
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MemError {}

/// Tunables of the memory model that are not part of the topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryConfig {
    /// Size of the virtual page-id space. Ids are never reused.
    pub max_pages: u32,
    /// Direct-mapped TLB slots per core.
    pub tlb_entries: usize,
    /// Simulated cost of one back-off round while waiting on a migration entry.
    pub migration_wait_ns: u64,
}

impl MemoryConfig {
    pub fn for_topology(topo: &Topology) -> Self {
        MemoryConfig {
            max_pages: (topo.total_frames() * 2).min(u32::MAX as u64 - 1) as u32,
            tlb_entries: 1024,
            migration_wait_ns: 100,
        }
    }
}

struct PageEntry {
    pte: AtomicU64,
    owner: AtomicU32,
    flags: AtomicU8,
    /// LRU list key: `node << 48 | sequence`, 0 when not listed.
    lru_key: AtomicU64,
}

impl PageEntry {
    fn new() -> Self {
        PageEntry {
            pte: AtomicU64::new(LOC_UNMAPPED as u64),
            owner: AtomicU32::new(0),
            flags: AtomicU8::new(0),
            lru_key: AtomicU64::new(0),
        }
    }
}

struct NodeFrames {
    capacity: u32,
    storage: Box<[AtomicU64]>,
    free: Mutex<BTreeSet<u32>>,
    in_use: AtomicU32,
}

impl NodeFrames {
    fn new(capacity: u32) -> Self {
        NodeFrames {
            capacity,
            storage: (0..capacity as usize * FRAME_WORDS).map(|_| AtomicU64::new(0)).collect(),
            free: Mutex::new((0..capacity).collect()),
            in_use: AtomicU32::new(0),
        }
    }
}

struct Tlb {
    slots: Box<[AtomicU64]>,
}

impl Tlb {
    fn new(entries: usize) -> Self {
        Tlb {
            slots: (0..entries).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    fn slot(&self, page: PageId) -> &AtomicU64 {
        &self.slots[page.0 as usize % self.slots.len()]
    }

    fn lookup(&self, page: PageId) -> Option<u32> {
        let v = self.slot(page).load(Ordering::Acquire);
        if v != 0 && (v >> 32) as u32 == page.0 + 1 {
            Some(v as u32)
        } else {
            None
        }
    }

    fn entry(page: PageId, loc: u32) -> u64 {
        ((page.0 as u64 + 1) << 32) | loc as u64
    }

    fn install(&self, page: PageId, loc: u32) -> u64 {
        let e = Self::entry(page, loc);
        self.slot(page).store(e, Ordering::Release);
        e
    }

    /// Drops the translation for `page`, if cached. Returns whether one was dropped.
    fn invalidate(&self, page: PageId) -> bool {
        let slot = self.slot(page);
        let v = slot.load(Ordering::Acquire);
        if v != 0 && (v >> 32) as u32 == page.0 + 1 {
            slot.compare_exchange(v, 0, Ordering::AcqRel, Ordering::Acquire).is_ok()
        } else {
            false
        }
    }
}

/// Global counters. Per-call counters live in the engine's stats.
#[derive(Default)]
struct Counters {
    accesses: AtomicU64,
    tlb_hits: AtomicU64,
    tlb_misses: AtomicU64,
    shootdowns: AtomicU64,
    ipis: AtomicU64,
    invalidations: AtomicU64,
    migration_waits: AtomicU64,
}

/// Point-in-time copy of the global counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemoryCounters {
    pub accesses: u64,
    pub tlb_hits: u64,
    pub tlb_misses: u64,
    pub shootdowns: u64,
    pub ipis: u64,
    pub invalidations: u64,
    pub migration_waits: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PageFlags {
    pub on_lru: bool,
    pub isolated: bool,
    pub under_writeback: bool,
    pub dirty: bool,
    /// Admitted while the LRU was disabled; listed once re-enabled.
    pub lru_pending: bool,
}

impl PageFlags {
    fn from_bits(b: u8) -> Self {
        PageFlags {
            on_lru: b & FLAG_ON_LRU != 0,
            isolated: b & FLAG_ISOLATED != 0,
            under_writeback: b & FLAG_WRITEBACK != 0,
            dirty: b & FLAG_DIRTY != 0,
            lru_pending: b & FLAG_LRU_PENDING != 0,
        }
    }
}

/// Frame accounting for one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameUsage {
    pub capacity: u32,
    pub in_use: u32,
    pub free: u32,
}

/// The simulated machine's memory: frames, page table, TLBs, locks and LRU.
pub struct MemoryModel {
    topo: Topology,
    cfg: MemoryConfig,
    nodes: Vec<NodeFrames>,
    pages: Box<[PageEntry]>,
    next_page: AtomicU32,
    tlbs: Box<[Tlb]>,
    lru_lists: Vec<Mutex<BTreeMap<u64, PageId>>>,
    lru_seq: AtomicU64,
    lru_enabled: AtomicBool,
    lru_pending: Mutex<Vec<PageId>>,
    /// Interrupt time delivered to each core but not yet charged to a clock.
    pending_irq_ns: Box<[AtomicU64]>,
    counters: Counters,
}

impl fmt::Debug for MemoryModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemoryModel")
            .field("nodes", &self.topo.node_count())
            .field("cores", &self.topo.core_count())
            .field("pages", &self.page_count())
            .finish()
    }
}

impl MemoryModel {
    pub fn new(topo: Topology) -> Self {
        let cfg = MemoryConfig::for_topology(&topo);
        Self::with_config(topo, cfg)
    }

    pub fn with_config(topo: Topology, cfg: MemoryConfig) -> Self {
        let nodes = topo.nodes().iter().map(|n| NodeFrames::new(n.frames)).collect();
        let pages = (0..cfg.max_pages).map(|_| PageEntry::new()).collect();
        let tlbs = (0..topo.core_count()).map(|_| Tlb::new(cfg.tlb_entries.max(1))).collect();
        let lru_lists = (0..topo.node_count()).map(|_| Mutex::new(BTreeMap::new())).collect();
        let pending_irq_ns = (0..topo.core_count()).map(|_| AtomicU64::new(0)).collect();
        MemoryModel {
            topo,
            cfg,
            nodes,
            pages,
            next_page: AtomicU32::new(0),
            tlbs,
            lru_lists,
            lru_seq: AtomicU64::new(1),
            lru_enabled: AtomicBool::new(true),
            lru_pending: Mutex::new(Vec::new()),
            pending_irq_ns,
            counters: Counters::default(),
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.cfg
    }

    /// Number of page ids handed out so far (mapped or freed).
    pub fn page_count(&self) -> u32 {
        self.next_page.load(Ordering::Acquire).min(self.cfg.max_pages)
    }

    fn entry(&self, page: PageId) -> Option<&PageEntry> {
        if page.0 < self.page_count() {
            self.pages.get(page.0 as usize)
        } else {
            None
        }
    }

    /// Whether `page` was ever handed out by [`alloc_page`](Self::alloc_page).
    pub fn is_valid_page(&self, page: PageId) -> bool {
        self.entry(page).is_some()
    }

    // ---------------------------------------------------------------- frames

    /// Takes the lowest free frame on `node`.
    pub fn alloc_frame(&self, node: NodeId) -> Result<FrameId, MemError> {
        let pool = self.nodes.get(node.0 as usize).ok_or(MemError::UnknownNode(node))?;
        let index = {
            let mut free = pool.free.lock();
            free.pop_first().ok_or(MemError::NodeExhausted(node))?
        };
        pool.in_use.fetch_add(1, Ordering::AcqRel);
        Ok(FrameId { node, index })
    }

    pub fn free_frame(&self, frame: FrameId) {
        let pool = &self.nodes[frame.node.0 as usize];
        for w in self.frame_words(frame) {
            w.store(0, Ordering::Relaxed);
        }
        let inserted = pool.free.lock().insert(frame.index);
        debug_assert!(inserted, "double free of {frame}");
        pool.in_use.fetch_sub(1, Ordering::AcqRel);
    }

    pub fn frame_usage(&self, node: NodeId) -> FrameUsage {
        let pool = &self.nodes[node.0 as usize];
        let free = pool.free.lock().len() as u32;
        FrameUsage {
            capacity: pool.capacity,
            in_use: pool.in_use.load(Ordering::Acquire),
            free,
        }
    }

    /// Frames mapped by live pages, per node, counted from the page table.
    pub fn mapped_frames_per_node(&self) -> Vec<u32> {
        let mut counts = alloc::vec![0u32; self.topo.node_count()];
        for p in 0..self.page_count() {
            if let Some(f) = self.pte(PageId(p)).frame() {
                counts[f.node.0 as usize] += 1;
            }
        }
        counts
    }

    fn frame_words(&self, frame: FrameId) -> &[AtomicU64] {
        let start = frame.index as usize * FRAME_WORDS;
        &self.nodes[frame.node.0 as usize].storage[start..start + FRAME_WORDS]
    }

    /// Payload word `idx` (0..PAGE_WORDS) of `frame`.
    pub fn payload(&self, frame: FrameId, idx: usize) -> &AtomicU64 {
        debug_assert!(idx < PAGE_WORDS);
        &self.frame_words(frame)[META_WORDS + idx]
    }

    /// Metadata word `idx` (0..META_WORDS) of `frame`.
    pub fn meta(&self, frame: FrameId, idx: usize) -> &AtomicU64 {
        debug_assert!(idx < META_WORDS);
        &self.frame_words(frame)[idx]
    }

    /// Copies metadata, and the payload too when `with_payload`.
    pub fn copy_frame(&self, from: FrameId, to: FrameId, with_payload: bool) {
        let src = self.frame_words(from);
        let dst = self.frame_words(to);
        let n = if with_payload { FRAME_WORDS } else { META_WORDS };
        for (d, s) in dst[..n].iter().zip(&src[..n]) {
            d.store(s.load(Ordering::Relaxed), Ordering::Relaxed);
        }
    }

    /// Moves the payload without it being accounted as a data copy.
    pub fn transfer_payload(&self, from: FrameId, to: FrameId) {
        let src = &self.frame_words(from)[META_WORDS..];
        let dst = &self.frame_words(to)[META_WORDS..];
        for (d, s) in dst.iter().zip(src) {
            d.store(s.load(Ordering::Relaxed), Ordering::Relaxed);
        }
    }

    // ----------------------------------------------------------------- pages

    /// Maps a fresh virtual page to the lowest free frame on `preferred_node`.
    pub fn alloc_page(&self, preferred_node: NodeId) -> Result<PageId, MemError> {
        let frame = self.alloc_frame(preferred_node)?;
        let id = self.next_page.fetch_add(1, Ordering::AcqRel);
        if id >= self.cfg.max_pages {
            self.next_page.fetch_sub(1, Ordering::AcqRel);
            self.free_frame(frame);
            return Err(MemError::OutOfPageIds);
        }
        let page = PageId(id);
        let e = &self.pages[id as usize];
        e.flags.store(0, Ordering::Relaxed);
        e.pte.store(encode_frame(frame) as u64, Ordering::Release);
        self.lru_admit(page);
        Ok(page)
    }

    /// Unmaps `page` and releases its frame. The page must be unlocked and not isolated.
    pub fn free_page(&self, page: PageId) -> Result<(), MemError> {
        let e = self.entry(page).ok_or(MemError::UnmappedPage(page))?;
        loop {
            let w = PteWord(e.pte.load(Ordering::Acquire));
            let frame = match w.mapping() {
                Mapping::Frame(f) if !w.is_locked() => f,
                Mapping::Unmapped => return Err(MemError::UnmappedPage(page)),
                _ => {
                    core::hint::spin_loop();
                    continue;
                }
            };
            let next = w.with_loc(LOC_UNMAPPED).bumped();
            if e.pte.compare_exchange(w.0, next.0, Ordering::AcqRel, Ordering::Acquire).is_ok() {
                self.lru_remove(page);
                e.flags.fetch_and(!(FLAG_ON_LRU | FLAG_LRU_PENDING), Ordering::AcqRel);
                self.tlb_shootdown(&[page]);
                self.free_frame(frame);
                return Ok(());
            }
        }
    }

    pub fn pte(&self, page: PageId) -> PteWord {
        match self.entry(page) {
            Some(e) => PteWord(e.pte.load(Ordering::Acquire)),
            None => PteWord(LOC_UNMAPPED as u64),
        }
    }

    pub fn mapping(&self, page: PageId) -> Mapping {
        self.pte(page).mapping()
    }

    /// Node currently backing `page`, if mapped.
    pub fn page_node(&self, page: PageId) -> Option<NodeId> {
        self.pte(page).frame().map(|f| f.node)
    }

    pub fn flags(&self, page: PageId) -> PageFlags {
        self.entry(page)
            .map(|e| PageFlags::from_bits(e.flags.load(Ordering::Acquire)))
            .unwrap_or_default()
    }

    pub fn set_writeback(&self, page: PageId, on: bool) {
        if let Some(e) = self.entry(page) {
            if on {
                e.flags.fetch_or(FLAG_WRITEBACK, Ordering::AcqRel);
            } else {
                e.flags.fetch_and(!FLAG_WRITEBACK, Ordering::AcqRel);
            }
        }
    }

    pub fn set_dirty(&self, page: PageId, on: bool) {
        if let Some(e) = self.entry(page) {
            if on {
                e.flags.fetch_or(FLAG_DIRTY, Ordering::AcqRel);
            } else {
                e.flags.fetch_and(!FLAG_DIRTY, Ordering::AcqRel);
            }
        }
    }

    // ---------------------------------------------------------------- access

    fn latency_to(&self, core: CoreId, loc: u32) -> u64 {
        let from = self.topo.core_node(core);
        self.topo.latency(from, decode_frame(loc).node) as u64
    }

    /// Translates `page` for `core`, filling the TLB on a miss. Returns the
    /// current entry word and the simulated latency of one 64-byte access.
    ///
    /// Waits (with simulated back-off) while the page is a migration entry.
    pub fn translate(&self, core: CoreId, page: PageId) -> Result<(PteWord, u64), MemError> {
        let e = self.entry(page).ok_or(MemError::UnmappedPage(page))?;
        let tlb = &self.tlbs[core.0 as usize];
        self.counters.accesses.fetch_add(1, Ordering::Relaxed);
        let mut waited = 0u64;
        loop {
            if let Some(loc) = tlb.lookup(page) {
                let w = PteWord(e.pte.load(Ordering::Acquire));
                if w.loc() == loc {
                    self.counters.tlb_hits.fetch_add(1, Ordering::Relaxed);
                    return Ok((w, waited + self.latency_to(core, loc)));
                }
                // The hardware would use the cached translation; the simulator
                // treats a translation that no longer matches as a miss.
                tlb.invalidate(page);
            }
            let w = PteWord(e.pte.load(Ordering::Acquire));
            match w.mapping() {
                Mapping::Unmapped => return Err(MemError::UnmappedPage(page)),
                Mapping::MigrationEntry => {
                    self.counters.migration_waits.fetch_add(1, Ordering::Relaxed);
                    waited += self.cfg.migration_wait_ns;
                    backoff();
                    continue;
                }
                Mapping::Frame(_) => {}
            }
            let installed = tlb.install(page, w.loc());
            // A shootdown may have run between the load and the install.
            let again = PteWord(e.pte.load(Ordering::Acquire));
            if again.loc() != w.loc() {
                let _ = tlb.slot(page).compare_exchange(installed, 0, Ordering::AcqRel, Ordering::Acquire);
                continue;
            }
            self.counters.tlb_misses.fetch_add(1, Ordering::Relaxed);
            let lat = self.latency_to(core, w.loc()) + self.topo.tlb_miss_ns() as u64;
            return Ok((again, waited + lat));
        }
    }

    /// One 64-byte access from `core` to `page`. Returns the simulated latency.
    pub fn access(&self, core: CoreId, page: PageId, kind: AccessKind) -> Result<u64, MemError> {
        let (_, lat) = self.translate(core, page)?;
        if kind == AccessKind::Write {
            self.set_dirty(page, true);
        }
        Ok(lat)
    }

    /// Whether `core` holds a cached translation for `page`.
    pub fn tlb_contains(&self, core: CoreId, page: PageId) -> bool {
        self.tlbs[core.0 as usize].lookup(page).is_some()
    }

    /// Cached translation of `page` on `core`, if any.
    pub fn tlb_entry(&self, core: CoreId, page: PageId) -> Option<Mapping> {
        self.tlbs[core.0 as usize].lookup(page).map(|loc| PteWord(loc as u64).mapping())
    }

    /// Invalidates the translations of `pages` on every core with one broadcast.
    /// An empty set is a no-op and is not counted.
    pub fn tlb_shootdown(&self, pages: &[PageId]) {
        if pages.is_empty() {
            return;
        }
        let mut dropped = 0;
        for tlb in self.tlbs.iter() {
            for &p in pages {
                if tlb.invalidate(p) {
                    dropped += 1;
                }
            }
        }
        self.counters.invalidations.fetch_add(dropped, Ordering::Relaxed);
        self.counters.ipis.fetch_add(1, Ordering::AcqRel);
        self.counters.shootdowns.fetch_add(1, Ordering::AcqRel);
    }

    /// Charges `ns` of interrupt handling to every core except `initiator`.
    pub fn broadcast_interrupt(&self, initiator: Option<CoreId>, ns: u64) {
        if ns == 0 {
            return;
        }
        for (i, slot) in self.pending_irq_ns.iter().enumerate() {
            if Some(CoreId(i as u16)) != initiator {
                slot.fetch_add(ns, Ordering::Relaxed);
            }
        }
    }

    /// Drains interrupt time delivered to `core` since the last call.
    pub fn take_interrupt_ns(&self, core: CoreId) -> u64 {
        self.pending_irq_ns[core.0 as usize].swap(0, Ordering::AcqRel)
    }

    pub fn counters(&self) -> MemoryCounters {
        let c = &self.counters;
        MemoryCounters {
            accesses: c.accesses.load(Ordering::Acquire),
            tlb_hits: c.tlb_hits.load(Ordering::Acquire),
            tlb_misses: c.tlb_misses.load(Ordering::Acquire),
            shootdowns: c.shootdowns.load(Ordering::Acquire),
            ipis: c.ipis.load(Ordering::Acquire),
            invalidations: c.invalidations.load(Ordering::Acquire),
            migration_waits: c.migration_waits.load(Ordering::Acquire),
        }
    }

    /// Pairs of (core, page) whose cached translation disagrees with the page
    /// table. Only meaningful at a quiescent point.
    pub fn incoherent_translations(&self) -> Vec<(CoreId, PageId)> {
        let mut bad = Vec::new();
        for (c, tlb) in self.tlbs.iter().enumerate() {
            for slot in tlb.slots.iter() {
                let v = slot.load(Ordering::Acquire);
                if v == 0 {
                    continue;
                }
                let page = PageId(((v >> 32) as u32) - 1);
                if self.pte(page).loc() != v as u32 {
                    bad.push((CoreId(c as u16), page));
                }
            }
        }
        bad
    }

    // ----------------------------------------------------------------- locks

    /// Takes the page lock if it is free and the page is mapped to a frame.
    pub fn try_lock_page(&self, page: PageId, owner: OwnerId) -> bool {
        debug_assert!(owner.0 != 0, "owner 0 is reserved");
        let Some(e) = self.entry(page) else { return false };
        let w = PteWord(e.pte.load(Ordering::Acquire));
        if w.is_locked() || w.frame().is_none() {
            return false;
        }
        if e.pte.compare_exchange(w.0, w.locked().0, Ordering::AcqRel, Ordering::Acquire).is_ok() {
            e.owner.store(owner.0, Ordering::Release);
            true
        } else {
            false
        }
    }

    /// Takes the page lock only if the entry still equals `seen` (an
    /// optimistic upgrade). Fails if anything changed in between.
    pub fn try_upgrade(&self, page: PageId, seen: PteWord, owner: OwnerId) -> bool {
        let Some(e) = self.entry(page) else { return false };
        if seen.is_locked() || seen.frame().is_none() {
            return false;
        }
        if e.pte.compare_exchange(seen.0, seen.locked().0, Ordering::AcqRel, Ordering::Acquire).is_ok() {
            e.owner.store(owner.0, Ordering::Release);
            // Payload stores must not become visible before the lock bit.
            fence(Ordering::Release);
            true
        } else {
            false
        }
    }

    /// Releases the page lock. `modified` bumps the version so optimistic
    /// readers that overlapped the critical section restart.
    pub fn unlock_page(&self, page: PageId, owner: OwnerId, modified: bool) -> Result<(), MemError> {
        let e = self.entry(page).ok_or(MemError::UnmappedPage(page))?;
        let w = PteWord(e.pte.load(Ordering::Acquire));
        if !w.is_locked() || e.owner.load(Ordering::Acquire) != owner.0 {
            debug_assert!(false, "unlock of {page} by non-owner {}", owner.0);
            return Err(MemError::UnlockNotOwner { page, owner });
        }
        e.owner.store(0, Ordering::Relaxed);
        let next = if modified { w.unlocked().bumped() } else { w.unlocked() };
        e.pte.store(next.0, Ordering::Release);
        Ok(())
    }

    /// Current lock holder, if any.
    pub fn lock_owner(&self, page: PageId) -> Option<OwnerId> {
        let e = self.entry(page)?;
        if PteWord(e.pte.load(Ordering::Acquire)).is_locked() {
            match e.owner.load(Ordering::Acquire) {
                0 => None,
                o => Some(OwnerId(o)),
            }
        } else {
            None
        }
    }

    /// Replaces the frame of a page locked by `owner` with the migration
    /// entry and releases the lock; the entry itself now keeps readers and
    /// writers out. Returns the frame that was mapped.
    pub fn install_migration_entry(&self, page: PageId, owner: OwnerId) -> Result<FrameId, MemError> {
        let e = self.entry(page).ok_or(MemError::UnmappedPage(page))?;
        let w = PteWord(e.pte.load(Ordering::Acquire));
        if !w.is_locked() || e.owner.load(Ordering::Acquire) != owner.0 {
            return Err(MemError::UnlockNotOwner { page, owner });
        }
        let frame = w.frame().ok_or(MemError::UnmappedPage(page))?;
        e.owner.store(0, Ordering::Relaxed);
        e.pte.store(w.with_loc(LOC_MIGRATING).unlocked().bumped().0, Ordering::Release);
        Ok(frame)
    }

    /// Points a page in the migration-entry state at `frame`.
    pub fn remap(&self, page: PageId, frame: FrameId) {
        let e = &self.pages[page.0 as usize];
        let w = PteWord(e.pte.load(Ordering::Acquire));
        debug_assert!(w.is_migrating(), "remap of {page} without a migration entry");
        e.pte.store(w.with_loc(encode_frame(frame)).bumped().0, Ordering::Release);
    }

    // ------------------------------------------------------------------- LRU

    pub fn lru_enabled(&self) -> bool {
        self.lru_enabled.load(Ordering::Acquire)
    }

    /// Toggles LRU admission. Enabling drains the pages admitted meanwhile.
    pub fn set_lru_enabled(&self, on: bool) {
        let mut pending = self.lru_pending.lock();
        self.lru_enabled.store(on, Ordering::Release);
        if on {
            for page in core::mem::take(&mut *pending) {
                let e = &self.pages[page.0 as usize];
                let prev = e.flags.fetch_and(!FLAG_LRU_PENDING, Ordering::AcqRel);
                if prev & FLAG_LRU_PENDING != 0 {
                    self.lru_insert(page);
                }
            }
        }
    }

    fn lru_admit(&self, page: PageId) {
        let mut pending = self.lru_pending.lock();
        if self.lru_enabled.load(Ordering::Acquire) {
            drop(pending);
            self.lru_insert(page);
        } else {
            self.pages[page.0 as usize].flags.fetch_or(FLAG_LRU_PENDING, Ordering::AcqRel);
            pending.push(page);
        }
    }

    fn lru_insert(&self, page: PageId) {
        let Some(node) = self.page_node(page) else { return };
        let e = &self.pages[page.0 as usize];
        let seq = self.lru_seq.fetch_add(1, Ordering::Relaxed);
        let key = ((node.0 as u64) << 48) | seq;
        let mut list = self.lru_lists[node.0 as usize].lock();
        list.insert(key, page);
        e.lru_key.store(key, Ordering::Release);
        e.flags.fetch_or(FLAG_ON_LRU, Ordering::AcqRel);
    }

    fn lru_remove(&self, page: PageId) {
        let e = &self.pages[page.0 as usize];
        let key = e.lru_key.swap(0, Ordering::AcqRel);
        if key != 0 {
            let node = (key >> 48) as usize;
            self.lru_lists[node].lock().remove(&key);
        }
    }

    /// Takes `page` off its LRU list. Succeeds iff it was listed and not
    /// already isolated.
    pub fn lru_isolate(&self, page: PageId) -> bool {
        let Some(e) = self.entry(page) else { return false };
        let cur = e.flags.load(Ordering::Acquire);
        if cur & FLAG_ON_LRU == 0 || cur & FLAG_ISOLATED != 0 {
            return false;
        }
        let next = (cur & !FLAG_ON_LRU) | FLAG_ISOLATED;
        if e.flags.compare_exchange(cur, next, Ordering::AcqRel, Ordering::Acquire).is_err() {
            return false;
        }
        self.lru_remove(page);
        true
    }

    /// Returns an isolated page to the LRU of the node that now backs it.
    pub fn lru_putback(&self, page: PageId) {
        let Some(e) = self.entry(page) else { return };
        let prev = e.flags.fetch_and(!FLAG_ISOLATED, Ordering::AcqRel);
        if prev & FLAG_ISOLATED != 0 {
            self.lru_admit(page);
        }
    }

    /// Listed pages on `node`, least recently admitted first.
    pub fn lru_pages(&self, node: NodeId) -> Vec<PageId> {
        self.lru_lists[node.0 as usize].lock().values().copied().collect()
    }

    pub fn isolated_count(&self) -> usize {
        (0..self.page_count()).filter(|&p| self.flags(PageId(p)).isolated).count()
    }
}

/// Bounded pause used while waiting on another thread.
pub fn backoff() {
    #[cfg(feature = "std")]
    std::thread::yield_now();
    #[cfg(not(feature = "std"))]
    for _ in 0..32 {
        core::hint::spin_loop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{NodeKind, NodeSpec, TopologySpec};
    use crate::ids::CoreId;
    use alloc::vec;

    fn numa(frames: u32) -> MemoryModel {
        MemoryModel::new(Topology::dual_socket(2, frames))
    }

    #[test]
    fn first_allocation_lands_on_preferred_node_and_lru() {
        let mm = numa(8);
        let p = mm.alloc_page(NodeId(0)).unwrap();
        assert_eq!(mm.page_node(p), Some(NodeId(0)));
        assert_eq!(mm.pte(p).version(), 0);
        assert!(mm.flags(p).on_lru);
        assert_eq!(mm.lru_pages(NodeId(0)), vec![p]);
    }

    #[test]
    fn full_node_reports_exhaustion() {
        let mm = numa(256);
        for _ in 0..256 {
            mm.alloc_page(NodeId(1)).unwrap();
        }
        assert_eq!(mm.alloc_page(NodeId(1)), Err(MemError::NodeExhausted(NodeId(1))));
        let u = mm.frame_usage(NodeId(1));
        assert_eq!((u.in_use, u.free, u.capacity), (256, 0, 256));
    }

    #[test]
    fn frames_are_taken_lowest_index_first() {
        let mm = numa(4);
        let a = mm.alloc_page(NodeId(0)).unwrap();
        let b = mm.alloc_page(NodeId(0)).unwrap();
        assert_eq!(mm.pte(b).frame().unwrap().index, 1);
        mm.free_page(a).unwrap();
        let c = mm.alloc_page(NodeId(0)).unwrap();
        assert_eq!(mm.pte(c).frame().unwrap().index, 0);
    }

    #[test]
    fn access_latency_follows_matrix_and_tlb() {
        let mm = numa(4);
        let local = mm.alloc_page(NodeId(0)).unwrap();
        let remote = mm.alloc_page(NodeId(1)).unwrap();
        let core = CoreId(0);
        assert_eq!(mm.access(core, local, AccessKind::Read).unwrap(), 150);
        let hits = mm.counters().tlb_hits;
        assert_eq!(mm.access(core, local, AccessKind::Read).unwrap(), 100);
        assert_eq!(mm.counters().tlb_hits, hits + 1);
        assert_eq!(mm.access(core, remote, AccessKind::Read).unwrap(), 450);
        assert_eq!(mm.access(core, remote, AccessKind::Read).unwrap(), 400);
    }

    #[test]
    fn access_to_freed_page_fails() {
        let mm = numa(4);
        let p = mm.alloc_page(NodeId(0)).unwrap();
        mm.free_page(p).unwrap();
        assert_eq!(mm.access(CoreId(0), p, AccessKind::Read), Err(MemError::UnmappedPage(p)));
        assert_eq!(mm.access(CoreId(0), PageId(77), AccessKind::Read), Err(MemError::UnmappedPage(PageId(77))));
    }

    #[test]
    fn page_lock_semantics() {
        let mm = numa(4);
        let p = mm.alloc_page(NodeId(0)).unwrap();
        assert!(mm.try_lock_page(p, OwnerId(1)));
        assert!(!mm.try_lock_page(p, OwnerId(2)));
        assert_eq!(mm.lock_owner(p), Some(OwnerId(1)));
        mm.unlock_page(p, OwnerId(1), false).unwrap();
        assert!(mm.try_lock_page(p, OwnerId(2)));
    }

    #[test]
    #[cfg_attr(debug_assertions, should_panic)]
    fn unlock_by_non_owner_is_rejected() {
        let mm = numa(4);
        let p = mm.alloc_page(NodeId(0)).unwrap();
        assert!(mm.try_lock_page(p, OwnerId(1)));
        assert!(matches!(mm.unlock_page(p, OwnerId(9), false), Err(MemError::UnlockNotOwner { .. })));
    }

    #[test]
    fn isolate_putback_walk() {
        let mm = numa(4);
        let p = mm.alloc_page(NodeId(0)).unwrap();
        assert!(mm.lru_isolate(p));
        let f = mm.flags(p);
        assert!(f.isolated && !f.on_lru);
        assert!(!mm.lru_isolate(p));
        mm.lru_putback(p);
        assert!(mm.flags(p).on_lru);
        assert!(mm.lru_isolate(p));
        mm.lru_putback(p);
        assert_eq!(mm.isolated_count(), 0);
    }

    #[test]
    fn disabled_lru_defers_admission() {
        let mm = numa(8);
        mm.set_lru_enabled(false);
        let p = mm.alloc_page(NodeId(0)).unwrap();
        assert!(!mm.flags(p).on_lru);
        assert!(mm.lru_pages(NodeId(0)).is_empty());
        mm.set_lru_enabled(false);
        mm.set_lru_enabled(true);
        assert!(mm.lru_enabled());
        assert!(mm.flags(p).on_lru);
        let q = mm.alloc_page(NodeId(0)).unwrap();
        assert!(mm.flags(q).on_lru);
    }

    #[test]
    fn shootdown_counts_broadcasts_not_pages() {
        let mm = numa(1024);
        let pages: Vec<_> = (0..512).map(|_| mm.alloc_page(NodeId(0)).unwrap()).collect();
        for core in 0..4 {
            for &p in &pages {
                mm.access(CoreId(core), p, AccessKind::Read).unwrap();
            }
        }
        let before = mm.counters();
        mm.tlb_shootdown(&[]);
        assert_eq!(mm.counters(), before);
        mm.tlb_shootdown(&pages);
        let after = mm.counters();
        assert_eq!(after.ipis, before.ipis + 1);
        assert_eq!(after.shootdowns, before.shootdowns + 1);
        for core in 0..4 {
            assert!(pages.iter().all(|&p| !mm.tlb_contains(CoreId(core), p)));
        }
        mm.tlb_shootdown(&pages[..1]);
        mm.tlb_shootdown(&pages[1..2]);
        assert_eq!(mm.counters().ipis, before.ipis + 3);
    }

    #[test]
    fn migration_entry_round_trip_keeps_id_and_bumps_version() {
        let mm = numa(4);
        let p = mm.alloc_page(NodeId(0)).unwrap();
        mm.payload(mm.pte(p).frame().unwrap(), 3).store(42, Ordering::Relaxed);
        let v0 = mm.pte(p).version();
        assert!(mm.try_lock_page(p, OwnerId(5)));
        let old = mm.install_migration_entry(p, OwnerId(5)).unwrap();
        assert_eq!(mm.mapping(p), Mapping::MigrationEntry);
        assert!(!mm.try_lock_page(p, OwnerId(6)));
        let new = mm.alloc_frame(NodeId(1)).unwrap();
        mm.copy_frame(old, new, true);
        mm.remap(p, new);
        mm.free_frame(old);
        assert_eq!(mm.page_node(p), Some(NodeId(1)));
        assert!(mm.pte(p).version() > v0);
        assert_eq!(mm.payload(new, 3).load(Ordering::Relaxed), 42);
        assert_eq!(mm.frame_usage(NodeId(0)).in_use, 0);
    }

    #[test]
    fn tiered_topology_backs_cxl_frames() {
        let topo = Topology::new(TopologySpec {
            nodes: vec![
                NodeSpec { id: NodeId(0), frames: 4, kind: NodeKind::Dram },
                NodeSpec { id: NodeId(1), frames: 4, kind: NodeKind::Cxl },
            ],
            cores: vec![crate::topology::CoreSpec { id: CoreId(0), node: NodeId(0) }],
            latency_ns: vec![vec![100, 500], vec![500, 100]],
            tlb_miss_ns: 0,
        })
        .unwrap();
        let mm = MemoryModel::new(topo);
        let p = mm.alloc_page(NodeId(1)).unwrap();
        assert_eq!(mm.access(CoreId(0), p, AccessKind::Read).unwrap(), 500);
    }

    #[test]
    fn translations_stay_coherent_after_shootdown() {
        let mm = numa(8);
        let p = mm.alloc_page(NodeId(0)).unwrap();
        mm.access(CoreId(1), p, AccessKind::Read).unwrap();
        assert!(mm.try_lock_page(p, OwnerId(1)));
        let old = mm.install_migration_entry(p, OwnerId(1)).unwrap();
        mm.tlb_shootdown(&[p]);
        let new = mm.alloc_frame(NodeId(1)).unwrap();
        mm.remap(p, new);
        mm.free_frame(old);
        assert!(mm.incoherent_translations().is_empty());
        assert_eq!(mm.tlb_entry(CoreId(1), p), None);
    }
}
