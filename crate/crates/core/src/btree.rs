//! Optimistic-lock-coupling B+-tree stored in simulated pages.
//!
//! Every node occupies one 4 KB page: 256 keys followed by 256 values (leaf)
//! or child page ids (inner). The node header (kind, count, next-leaf link)
//! sits in the frame's metadata words, so it travels with the page in every
//! migration mode.
//!
//! Readers never lock. They snapshot the page-table entry word of each node,
//! read, then check the word is unchanged; any lock, version bump or frame
//! change in between forces a restart. Writers upgrade that same snapshot to
//! the page lock, which is the lock the migration engine contends on.

use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{fence, AtomicU32, AtomicU64, Ordering};

use rand::Rng;
use spin::Mutex;

use crate::ids::{CoreId, FrameId, NodeId, OwnerId, PageId};
use crate::memory::{MemoryModel, PteWord, PAGE_WORDS};

/// Entries per node.
pub const FANOUT: usize = 256;
/// Cache lines touched by a binary search over one node.
pub const NODE_LINES: u64 = 4;
/// Inner nodes are few and hot, so they are served from the CPU cache.
pub const CACHED_LINE_NS: u64 = 10;

const HEADER: usize = 0;
const NEXT: usize = 1;
const LEAF_BIT: u64 = 1;
const HOT_RING: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeError {
    /// No node in the topology has a free frame.
    CapacityExceeded,
}

impl fmt::Display for TreeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeError::CapacityExceeded => f.write_str("no free frame left for a tree node"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TreeError {}

/// Where freshly loaded nodes go.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Node `k` (in creation order) goes to NUMA node `k mod nodes`.
    RoundRobin,
    /// Runs of `n` consecutive nodes share a NUMA node.
    Blocks(u32),
    Fixed(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyDist {
    /// Keys `0..n`.
    Sequential,
    /// `n` distinct keys spread over the whole 64-bit space.
    Scattered,
}

/// How [`BTree::sample_pages`] picks pages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    RandomLeaf,
    /// Most recently accessed leaves first.
    HotLeaf,
    /// Leaves covering keys `lo..=hi`.
    Subtree { lo: u64, hi: u64 },
}

/// Per-operation context: who runs it and the simulated time it took.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpCtx {
    pub core: CoreId,
    pub owner: OwnerId,
    pub ns: u64,
    pub restarts: u64,
}

impl OpCtx {
    pub fn new(core: CoreId, owner: OwnerId) -> Self {
        OpCtx { core, owner, ns: 0, restarts: 0 }
    }

    /// Returns the time accumulated so far and resets it.
    pub fn take_ns(&mut self) -> u64 {
        core::mem::take(&mut self.ns)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeStats {
    pub height: u32,
    pub leaves: usize,
    pub inner: usize,
    /// Tree nodes resident on each NUMA node.
    pub nodes_per_numa: Vec<u32>,
}

/// Value stored for `key` by [`BTree::load`].
pub fn value_for(key: u64) -> u64 {
    key.rotate_left(17) ^ 0x5bd1_e995_u64
}

/// Spreads `i` over the 64-bit key space; a bijection.
pub fn scatter_key(i: u64) -> u64 {
    let mut z = i.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z ^= z >> 29;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 32)
}

enum Step<T> {
    Done(T),
    Restart,
}

/// Snapshot of one node taken by an optimistic read.
#[derive(Clone, Copy)]
struct Snap {
    page: PageId,
    word: PteWord,
    frame: FrameId,
}

pub struct BTree<'m> {
    mm: &'m MemoryModel,
    root: AtomicU32,
    height: AtomicU32,
    leaves: Mutex<Vec<PageId>>,
    inner: Mutex<Vec<PageId>>,
    hot: Vec<AtomicU32>,
    hot_cursor: AtomicU64,
    len: AtomicU64,
}

impl fmt::Debug for BTree<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BTree")
            .field("root", &self.root.load(Ordering::Relaxed))
            .field("height", &self.height.load(Ordering::Relaxed))
            .field("len", &self.len.load(Ordering::Relaxed))
            .finish()
    }
}

impl<'m> BTree<'m> {
    /// An empty tree: one empty leaf as root.
    pub fn new(mm: &'m MemoryModel, node: NodeId) -> Result<Self, TreeError> {
        let tree = BTree {
            mm,
            root: AtomicU32::new(0),
            height: AtomicU32::new(1),
            leaves: Mutex::new(Vec::new()),
            inner: Mutex::new(Vec::new()),
            hot: (0..HOT_RING).map(|_| AtomicU32::new(0)).collect(),
            hot_cursor: AtomicU64::new(0),
            len: AtomicU64::new(0),
        };
        let root = tree.alloc_node(node, true)?;
        tree.root.store(root.0, Ordering::Release);
        Ok(tree)
    }

    /// Bulk-loads `n` records with full leaves, bottom-up.
    pub fn load(mm: &'m MemoryModel, n: u64, dist: KeyDist, placement: Placement) -> Result<Self, TreeError> {
        let mut keys: Vec<u64> = match dist {
            KeyDist::Sequential => (0..n).collect(),
            KeyDist::Scattered => (0..n).map(scatter_key).collect(),
        };
        keys.sort_unstable();
        let node_count = mm.topology().node_count() as u64;
        let mut created = 0u64;
        let mut place = move || {
            let k = created;
            created += 1;
            match placement {
                Placement::RoundRobin => NodeId((k % node_count) as u16),
                Placement::Blocks(b) => NodeId(((k / b.max(1) as u64) % node_count) as u16),
                Placement::Fixed(node) => node,
            }
        };
        let tree = BTree {
            mm,
            root: AtomicU32::new(0),
            height: AtomicU32::new(1),
            leaves: Mutex::new(Vec::new()),
            inner: Mutex::new(Vec::new()),
            hot: (0..HOT_RING).map(|_| AtomicU32::new(0)).collect(),
            hot_cursor: AtomicU64::new(0),
            len: AtomicU64::new(n),
        };
        if keys.is_empty() {
            let root = tree.alloc_node(place(), true)?;
            tree.root.store(root.0, Ordering::Release);
            return Ok(tree);
        }
        // (first key, page) of every node on the level being built.
        let mut level: Vec<(u64, PageId)> = Vec::new();
        let mut prev: Option<FrameId> = None;
        for chunk in keys.chunks(FANOUT) {
            let page = tree.alloc_node(place(), true)?;
            let f = tree.frame_of(page);
            for (i, &k) in chunk.iter().enumerate() {
                tree.set_key(f, i, k);
                tree.set_val(f, i, value_for(k));
            }
            tree.set_header(f, true, chunk.len());
            if let Some(p) = prev {
                tree.set_next(p, Some(page));
            }
            prev = Some(f);
            level.push((chunk[0], page));
        }
        let mut height = 1;
        while level.len() > 1 {
            let mut up = Vec::new();
            for chunk in level.chunks(FANOUT) {
                let page = tree.alloc_node(place(), false)?;
                let f = tree.frame_of(page);
                for (i, &(first, child)) in chunk.iter().enumerate() {
                    tree.set_val(f, i, child.0 as u64);
                    if i > 0 {
                        tree.set_key(f, i - 1, first);
                    }
                }
                tree.set_header(f, false, chunk.len());
                up.push((chunk[0].0, page));
            }
            level = up;
            height += 1;
        }
        tree.root.store(level[0].1 .0, Ordering::Release);
        tree.height.store(height, Ordering::Release);
        Ok(tree)
    }

    pub fn memory(&self) -> &'m MemoryModel {
        self.mm
    }

    pub fn root_page(&self) -> PageId {
        PageId(self.root.load(Ordering::Acquire))
    }

    pub fn height(&self) -> u32 {
        self.height.load(Ordering::Acquire)
    }

    /// Records inserted so far, counting the load.
    pub fn len(&self) -> u64 {
        self.len.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf_pages(&self) -> Vec<PageId> {
        self.leaves.lock().clone()
    }

    /// Every page backing a node of the tree.
    pub fn all_pages(&self) -> Vec<PageId> {
        let mut v = self.inner.lock().clone();
        v.extend(self.leaves.lock().iter().copied());
        v
    }

    // ------------------------------------------------------------ node words

    fn alloc_node(&self, preferred: NodeId, leaf: bool) -> Result<PageId, TreeError> {
        let mut page = self.mm.alloc_page(preferred);
        if page.is_err() {
            for n in self.mm.topology().nodes() {
                page = self.mm.alloc_page(n.id);
                if page.is_ok() {
                    break;
                }
            }
        }
        let page = page.map_err(|_| TreeError::CapacityExceeded)?;
        let f = self.frame_of(page);
        self.set_header(f, leaf, 0);
        self.set_next(f, None);
        if leaf {
            self.leaves.lock().push(page);
        } else {
            self.inner.lock().push(page);
        }
        Ok(page)
    }

    /// Frame of a page nobody else can move (fresh, or locked by us).
    fn frame_of(&self, page: PageId) -> FrameId {
        self.mm.pte(page).frame().expect("tree node must be mapped")
    }

    fn header(&self, f: FrameId) -> (bool, usize) {
        let h = self.mm.meta(f, HEADER).load(Ordering::Relaxed);
        (h & LEAF_BIT != 0, ((h >> 8) as usize).min(FANOUT))
    }

    fn set_header(&self, f: FrameId, leaf: bool, count: usize) {
        let h = ((count as u64) << 8) | if leaf { LEAF_BIT } else { 0 };
        self.mm.meta(f, HEADER).store(h, Ordering::Relaxed);
    }

    fn next(&self, f: FrameId) -> Option<PageId> {
        match self.mm.meta(f, NEXT).load(Ordering::Relaxed) {
            0 => None,
            v => Some(PageId((v - 1) as u32)),
        }
    }

    fn set_next(&self, f: FrameId, next: Option<PageId>) {
        let v = next.map_or(0, |p| p.0 as u64 + 1);
        self.mm.meta(f, NEXT).store(v, Ordering::Relaxed);
    }

    fn key(&self, f: FrameId, i: usize) -> u64 {
        self.mm.payload(f, i).load(Ordering::Relaxed)
    }

    fn set_key(&self, f: FrameId, i: usize, k: u64) {
        self.mm.payload(f, i).store(k, Ordering::Relaxed);
    }

    fn val(&self, f: FrameId, i: usize) -> u64 {
        self.mm.payload(f, FANOUT + i).load(Ordering::Relaxed)
    }

    fn set_val(&self, f: FrameId, i: usize, v: u64) {
        self.mm.payload(f, FANOUT + i).store(v, Ordering::Relaxed);
    }

    /// First slot whose key is `>= key` among `count` keys.
    fn lower_bound(&self, f: FrameId, count: usize, key: u64) -> usize {
        let (mut lo, mut hi) = (0, count);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.key(f, mid) < key {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Child slot of an inner node with `count` children that covers `key`.
    fn child_slot(&self, f: FrameId, count: usize, key: u64) -> usize {
        let seps = count.saturating_sub(1);
        let (mut lo, mut hi) = (0, seps);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.key(f, mid) <= key {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }

    // --------------------------------------------------------- optimistic I/O

    /// Starts an optimistic read of `page`, charging the access.
    fn read(&self, ctx: &mut OpCtx, page: PageId) -> Option<Snap> {
        let (word, lat) = self.mm.translate(ctx.core, page).ok()?;
        let topo = self.mm.topology();
        let frame = word.frame()?;
        if self.header(frame).0 {
            let line = topo.latency(topo.core_node(ctx.core), frame.node) as u64;
            ctx.ns += lat + (NODE_LINES - 1) * line;
        } else {
            let waited = lat.saturating_sub(topo.latency(topo.core_node(ctx.core), frame.node) as u64);
            ctx.ns += waited + NODE_LINES * CACHED_LINE_NS;
        }
        if word.is_locked() {
            return None;
        }
        Some(Snap { page, word, frame })
    }

    fn valid(&self, s: &Snap) -> bool {
        fence(Ordering::Acquire);
        self.mm.pte(s.page).raw() == s.word.raw()
    }

    fn upgrade(&self, ctx: &OpCtx, s: &Snap) -> bool {
        self.mm.try_upgrade(s.page, s.word, ctx.owner)
    }

    fn unlock(&self, ctx: &OpCtx, page: PageId, modified: bool) {
        let _ = self.mm.unlock_page(page, ctx.owner, modified);
    }

    fn touch(&self, leaf: PageId) {
        let slot = self.hot_cursor.fetch_add(1, Ordering::Relaxed) as usize % HOT_RING;
        self.hot[slot].store(leaf.0 + 1, Ordering::Relaxed);
    }

    fn root_snap(&self, ctx: &mut OpCtx) -> Option<Snap> {
        let root = self.root_page();
        let s = self.read(ctx, root)?;
        if self.root_page() != root {
            return None;
        }
        Some(s)
    }

    /// Descends to the leaf covering `key`. Returns the leaf and its parent.
    fn descend(&self, ctx: &mut OpCtx, key: u64) -> Option<(Snap, Option<Snap>)> {
        let mut node = self.root_snap(ctx)?;
        let mut parent: Option<Snap> = None;
        loop {
            let (leaf, count) = self.header(node.frame);
            if leaf {
                return Some((node, parent));
            }
            if count == 0 {
                return None;
            }
            let slot = self.child_slot(node.frame, count, key);
            let child = PageId(self.val(node.frame, slot) as u32);
            if !self.valid(&node) {
                return None;
            }
            let next = self.read(ctx, child)?;
            if !self.valid(&node) {
                return None;
            }
            parent = Some(node);
            node = next;
        }
    }

    fn retry<T>(&self, ctx: &mut OpCtx, mut f: impl FnMut(&Self, &mut OpCtx) -> Step<T>) -> T {
        loop {
            match f(self, ctx) {
                Step::Done(v) => return v,
                Step::Restart => {
                    ctx.restarts += 1;
                    crate::memory::backoff();
                }
            }
        }
    }

    // ------------------------------------------------------------ operations

    pub fn lookup(&self, ctx: &mut OpCtx, key: u64) -> Option<u64> {
        self.retry(ctx, |t, ctx| {
            let Some((leaf, _)) = t.descend(ctx, key) else { return Step::Restart };
            let (_, count) = t.header(leaf.frame);
            let i = t.lower_bound(leaf.frame, count, key);
            let hit = (i < count && t.key(leaf.frame, i) == key).then(|| t.val(leaf.frame, i));
            if !t.valid(&leaf) {
                return Step::Restart;
            }
            t.touch(leaf.page);
            Step::Done(hit)
        })
    }

    /// Overwrites the value of an existing key. Returns whether it existed.
    pub fn update(&self, ctx: &mut OpCtx, key: u64, value: u64) -> bool {
        self.retry(ctx, |t, ctx| {
            let Some((leaf, _)) = t.descend(ctx, key) else { return Step::Restart };
            let (_, count) = t.header(leaf.frame);
            let i = t.lower_bound(leaf.frame, count, key);
            let found = i < count && t.key(leaf.frame, i) == key;
            if !found {
                return if t.valid(&leaf) { Step::Done(false) } else { Step::Restart };
            }
            if !t.upgrade(ctx, &leaf) {
                return Step::Restart;
            }
            t.set_val(leaf.frame, i, value);
            t.mm.set_dirty(leaf.page, true);
            t.unlock(ctx, leaf.page, true);
            t.touch(leaf.page);
            Step::Done(true)
        })
    }

    /// Inserts `key`, or overwrites its value. Returns `true` if the key is new.
    pub fn insert(&self, ctx: &mut OpCtx, key: u64, value: u64) -> Result<bool, TreeError> {
        self.retry(ctx, |t, ctx| t.insert_step(ctx, key, value))
    }

    fn insert_step(&self, ctx: &mut OpCtx, key: u64, value: u64) -> Step<Result<bool, TreeError>> {
        let Some(mut node) = self.root_snap(ctx) else { return Step::Restart };
        let mut parent: Option<Snap> = None;
        loop {
            let (leaf, count) = self.header(node.frame);
            if !leaf {
                if count >= FANOUT {
                    return self.split(ctx, node, parent).map_or(Step::Restart, |r| match r {
                        Ok(()) => Step::Restart,
                        Err(e) => Step::Done(Err(e)),
                    });
                }
                if count == 0 {
                    return Step::Restart;
                }
                let slot = self.child_slot(node.frame, count, key);
                let child = PageId(self.val(node.frame, slot) as u32);
                if !self.valid(&node) {
                    return Step::Restart;
                }
                let Some(next) = self.read(ctx, child) else { return Step::Restart };
                if !self.valid(&node) {
                    return Step::Restart;
                }
                parent = Some(node);
                node = next;
                continue;
            }
            let i = self.lower_bound(node.frame, count, key);
            let exists = i < count && self.key(node.frame, i) == key;
            if !exists && count >= FANOUT {
                return self.split(ctx, node, parent).map_or(Step::Restart, |r| match r {
                    Ok(()) => Step::Restart,
                    Err(e) => Step::Done(Err(e)),
                });
            }
            if !self.upgrade(ctx, &node) {
                return Step::Restart;
            }
            let f = node.frame;
            if exists {
                self.set_val(f, i, value);
            } else {
                for j in (i..count).rev() {
                    self.set_key(f, j + 1, self.key(f, j));
                    self.set_val(f, j + 1, self.val(f, j));
                }
                self.set_key(f, i, key);
                self.set_val(f, i, value);
                self.set_header(f, true, count + 1);
                self.len.fetch_add(1, Ordering::AcqRel);
            }
            self.mm.set_dirty(node.page, true);
            self.unlock(ctx, node.page, true);
            self.touch(node.page);
            return Step::Done(Ok(!exists));
        }
    }

    /// Splits the full `node`. `None` means a lock could not be taken.
    fn split(&self, ctx: &mut OpCtx, node: Snap, parent: Option<Snap>) -> Option<Result<(), TreeError>> {
        if let Some(p) = &parent {
            if !self.upgrade(ctx, p) {
                return None;
            }
        }
        if !self.upgrade(ctx, &node) {
            if let Some(p) = &parent {
                self.unlock(ctx, p.page, false);
            }
            return None;
        }
        if parent.is_none() && self.root_page() != node.page {
            self.unlock(ctx, node.page, false);
            return None;
        }
        let home = node.frame.node;
        ctx.ns += 2 * crate::memory::LINES_PER_PAGE / 4 * self.mm.topology().latency(home, home) as u64;
        let ctx = &*ctx;
        let release = |modified: bool| {
            self.unlock(ctx, node.page, modified);
            if let Some(p) = &parent {
                self.unlock(ctx, p.page, modified);
            }
        };
        let (leaf, count) = self.header(node.frame);
        let right = match self.alloc_node(home, leaf) {
            Ok(r) => r,
            Err(e) => {
                release(false);
                return Some(Err(e));
            }
        };
        let locked = self.mm.try_lock_page(right, ctx.owner);
        debug_assert!(locked);
        let (lf, rf) = (node.frame, self.frame_of(right));
        let keep = count / 2;
        let sep;
        if leaf {
            for j in keep..count {
                self.set_key(rf, j - keep, self.key(lf, j));
                self.set_val(rf, j - keep, self.val(lf, j));
            }
            self.set_header(rf, true, count - keep);
            self.set_next(rf, self.next(lf));
            self.set_next(lf, Some(right));
            self.set_header(lf, true, keep);
            sep = self.key(rf, 0);
        } else {
            // Children keep..count move right; separator keep-1 moves up.
            for j in keep..count {
                self.set_val(rf, j - keep, self.val(lf, j));
            }
            for j in keep..count - 1 {
                self.set_key(rf, j - keep, self.key(lf, j));
            }
            sep = self.key(lf, keep - 1);
            self.set_header(rf, false, count - keep);
            self.set_header(lf, false, keep);
        }
        match &parent {
            Some(p) => {
                let pf = p.frame;
                let (_, pc) = self.header(pf);
                let slot = self.child_slot(pf, pc, sep);
                // Shift separators slot.. and children slot+1.. right by one.
                for j in (slot..pc - 1).rev() {
                    self.set_key(pf, j + 1, self.key(pf, j));
                }
                for j in (slot + 1..pc).rev() {
                    self.set_val(pf, j + 1, self.val(pf, j));
                }
                self.set_key(pf, slot, sep);
                self.set_val(pf, slot + 1, right.0 as u64);
                self.set_header(pf, false, pc + 1);
            }
            None => {
                let root = match self.alloc_node(home, false) {
                    Ok(r) => r,
                    Err(e) => {
                        // Undo is not needed for correctness: the right half
                        // is reachable only through the leaf chain, so keep
                        // the split local by merging back.
                        self.merge_back(lf, rf, leaf, keep, count);
                        self.unlock(ctx, right, false);
                        release(false);
                        return Some(Err(e));
                    }
                };
                let rootf = self.frame_of(root);
                self.set_val(rootf, 0, node.page.0 as u64);
                self.set_val(rootf, 1, right.0 as u64);
                self.set_key(rootf, 0, sep);
                self.set_header(rootf, false, 2);
                self.root.store(root.0, Ordering::Release);
                self.height.fetch_add(1, Ordering::AcqRel);
            }
        }
        self.unlock(ctx, right, true);
        release(true);
        Some(Ok(()))
    }

    fn merge_back(&self, lf: FrameId, rf: FrameId, leaf: bool, keep: usize, count: usize) {
        if leaf {
            self.set_next(lf, self.next(rf));
            for j in keep..count {
                self.set_key(lf, j, self.key(rf, j - keep));
                self.set_val(lf, j, self.val(rf, j - keep));
            }
        }
        self.set_header(lf, leaf, count);
    }

    /// Up to `n` pairs with key `>= start`, in key order.
    pub fn scan(&self, ctx: &mut OpCtx, start: u64, n: usize) -> Vec<(u64, u64)> {
        let mut out: Vec<(u64, u64)> = Vec::with_capacity(n);
        let mut from = start;
        'restart: while out.len() < n {
            let Some((mut leaf, _)) = self.descend(ctx, from) else {
                ctx.restarts += 1;
                continue;
            };
            loop {
                let (_, count) = self.header(leaf.frame);
                let mut i = self.lower_bound(leaf.frame, count, from);
                let mut batch = Vec::new();
                while i < count && out.len() + batch.len() < n {
                    batch.push((self.key(leaf.frame, i), self.val(leaf.frame, i)));
                    i += 1;
                }
                let next = self.next(leaf.frame);
                if !self.valid(&leaf) {
                    ctx.restarts += 1;
                    continue 'restart;
                }
                self.touch(leaf.page);
                if let Some(&(k, _)) = batch.last() {
                    out.extend(batch);
                    match k.checked_add(1) {
                        Some(f) => from = f,
                        None => return out,
                    }
                }
                if out.len() >= n {
                    return out;
                }
                let Some(next) = next else { return out };
                match self.read(ctx, next) {
                    Some(s) if self.valid(&leaf) => leaf = s,
                    _ => {
                        ctx.restarts += 1;
                        continue 'restart;
                    }
                }
            }
        }
        out
    }

    // ------------------------------------------------------------- selection

    /// Up to `n` distinct node pages chosen by `selector`.
    pub fn sample_pages<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, selector: Selector) -> Vec<PageId> {
        if n == 0 {
            return Vec::new();
        }
        match selector {
            Selector::RandomLeaf => {
                let leaves = self.leaves.lock();
                let total = leaves.len();
                if n >= total {
                    return leaves.clone();
                }
                // Floyd's algorithm: n distinct indices, in draw order.
                let mut picked: Vec<usize> = Vec::with_capacity(n);
                for j in total - n..total {
                    let t = rng.random_range(0..=j);
                    if picked.contains(&t) {
                        picked.push(j);
                    } else {
                        picked.push(t);
                    }
                }
                picked.into_iter().map(|i| leaves[i]).collect()
            }
            Selector::HotLeaf => {
                let cursor = self.hot_cursor.load(Ordering::Acquire) as usize;
                let mut out: Vec<PageId> = Vec::with_capacity(n);
                let mut seen = alloc::collections::BTreeSet::new();
                for back in 0..HOT_RING.min(cursor) {
                    let slot = (cursor - 1 - back) % HOT_RING;
                    let v = self.hot[slot].load(Ordering::Relaxed);
                    if v != 0 && seen.insert(v) {
                        out.push(PageId(v - 1));
                        if out.len() == n {
                            break;
                        }
                    }
                }
                out
            }
            Selector::Subtree { lo, hi } => self.leaves_covering(lo, hi, n),
        }
    }

    /// Leaves whose key range intersects `lo..=hi`, left to right. Safe under
    /// concurrent writers and migrations: each node is read optimistically.
    fn leaves_covering(&self, lo: u64, hi: u64, n: usize) -> Vec<PageId> {
        let mut out = Vec::new();
        let mut cur = Some(self.find_leaf_raw(lo));
        while let Some(p) = cur {
            if out.len() >= n {
                break;
            }
            let (first, count, next) = loop {
                let (w, f) = self.stable(p);
                let (_, count) = self.header(f);
                let first = self.key(f, 0);
                let next = self.next(f);
                fence(Ordering::Acquire);
                if self.mm.pte(p).raw() == w.raw() {
                    break (first, count, next);
                }
            };
            if count > 0 && first > hi && !out.is_empty() {
                break;
            }
            out.push(p);
            cur = next;
        }
        out
    }

    /// Waits until `page` is mapped and unlocked.
    fn stable(&self, page: PageId) -> (PteWord, FrameId) {
        loop {
            let w = self.mm.pte(page);
            if let (Some(f), false) = (w.frame(), w.is_locked()) {
                return (w, f);
            }
            crate::memory::backoff();
        }
    }

    /// Leaf covering `key`, found without touching any TLB or clock.
    fn find_leaf_raw(&self, key: u64) -> PageId {
        'restart: loop {
            let mut p = self.root_page();
            loop {
                let (w, f) = self.stable(p);
                let (leaf, count) = self.header(f);
                if leaf {
                    return p;
                }
                let child = if count == 0 { None } else { Some(self.val(f, self.child_slot(f, count, key))) };
                fence(Ordering::Acquire);
                match child {
                    Some(c) if self.mm.pte(p).raw() == w.raw() => p = PageId(c as u32),
                    _ => continue 'restart,
                }
            }
        }
    }

    /// Page of the leaf that currently covers `key`.
    pub fn locate(&self, ctx: &mut OpCtx, key: u64) -> PageId {
        self.retry(ctx, |t, ctx| match t.descend(ctx, key) {
            Some((leaf, _)) => Step::Done(leaf.page),
            None => Step::Restart,
        })
    }

    // --------------------------------------------------------------- checks

    /// Every pair in key order, by walking the leaf chain. Quiescent use only.
    pub fn full_scan(&self) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        let mut page = Some(self.leftmost_leaf());
        while let Some(p) = page {
            let f = self.frame_of(p);
            let (_, count) = self.header(f);
            for i in 0..count {
                out.push((self.key(f, i), self.val(f, i)));
            }
            page = self.next(f);
        }
        out
    }

    fn leftmost_leaf(&self) -> PageId {
        let mut p = self.root_page();
        loop {
            let f = self.frame_of(p);
            let (leaf, _) = self.header(f);
            if leaf {
                return p;
            }
            p = PageId(self.val(f, 0) as u32);
        }
    }

    /// Structural check: sorted keys, separator bounds, uniform depth, fanout
    /// limits and a sorted leaf chain that visits every leaf. Quiescent use only.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut leaves_in_order = Vec::new();
        let depth = self.check_node(self.root_page(), None, None, &mut leaves_in_order)?;
        if depth != self.height() {
            return Err(alloc::format!("height {} but leaves at depth {depth}", self.height()));
        }
        let mut chain = Vec::new();
        let mut page = Some(self.leftmost_leaf());
        while let Some(p) = page {
            chain.push(p);
            if chain.len() > leaves_in_order.len() {
                return Err("leaf chain longer than the tree".into());
            }
            page = self.next(self.frame_of(p));
        }
        if chain != leaves_in_order {
            return Err("leaf chain does not match in-order leaves".into());
        }
        let scan = self.full_scan();
        if scan.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err("leaf chain keys not strictly increasing".into());
        }
        if scan.len() as u64 != self.len() {
            return Err(alloc::format!("{} keys reachable, {} inserted", scan.len(), self.len()));
        }
        Ok(())
    }

    fn check_node(
        &self,
        page: PageId,
        lo: Option<u64>,
        hi: Option<u64>,
        leaves: &mut Vec<PageId>,
    ) -> Result<u32, String> {
        let w = self.mm.pte(page);
        let f = w.frame().ok_or_else(|| alloc::format!("{page} unmapped"))?;
        if w.is_locked() {
            return Err(alloc::format!("{page} still locked"));
        }
        let (leaf, count) = self.header(f);
        let nkeys = if leaf { count } else { count.saturating_sub(1) };
        for i in 0..nkeys {
            let k = self.key(f, i);
            if i > 0 && self.key(f, i - 1) >= k {
                return Err(alloc::format!("{page} keys out of order"));
            }
            if lo.is_some_and(|l| k < l) || hi.is_some_and(|h| k >= h) {
                return Err(alloc::format!("{page} key {k} outside parent range"));
            }
        }
        if leaf {
            leaves.push(page);
            return Ok(1);
        }
        if count < 2 {
            return Err(alloc::format!("inner {page} with {count} children"));
        }
        let mut depth = None;
        for c in 0..count {
            let clo = if c == 0 { lo } else { Some(self.key(f, c - 1)) };
            let chi = if c + 1 == count { hi } else { Some(self.key(f, c)) };
            let d = self.check_node(PageId(self.val(f, c) as u32), clo, chi, leaves)?;
            if depth.is_some_and(|x| x != d) {
                return Err(alloc::format!("{page} has children at different depths"));
            }
            depth = Some(d);
        }
        Ok(depth.unwrap_or(0) + 1)
    }

    /// Height, node counts and per-node residency.
    pub fn stats(&self) -> TreeStats {
        let mut per = alloc::vec![0u32; self.mm.topology().node_count()];
        let leaves = self.leaves.lock().len();
        let inner = self.inner.lock().len();
        for p in self.all_pages() {
            if let Some(n) = self.mm.page_node(p) {
                per[n.0 as usize] += 1;
            }
        }
        TreeStats { height: self.height(), leaves, inner, nodes_per_numa: per }
    }
}

const _: () = assert!(2 * FANOUT == PAGE_WORDS);

use alloc::string::String;
