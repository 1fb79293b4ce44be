//! `migrate_pages2`, `migrate_pages_sync` and `migrate_pages_batch`.

use alloc::vec::Vec;

use super::inject::Phase;
use super::pipeline::Call;
use super::{Errno, MigrationMode, PageOutcome};
use crate::ids::{FrameId, NodeId, PageId};
use crate::memory::{backoff, LINES_PER_PAGE, PAGE_SIZE};

enum Unmap {
    Done { old: FrameId, new: FrameId },
    /// Lock not obtained; worth another pass.
    Again,
    Fail(Errno),
    NoMem,
}

/// Pages a batch call could not migrate, and whether it ran out of memory.
struct BatchResult {
    failed: Vec<(usize, Errno)>,
    nomem: bool,
}

impl Call<'_> {
    /// Migrates the isolated pages of the current round to `target`.
    /// Returns the number of pages left behind, or a negative errno.
    /// Pages left behind go back to the LRU.
    pub(super) fn migrate_round(&mut self, target: NodeId) -> i64 {
        let list = core::mem::take(&mut self.pagelist);
        self.stats.rounds += 1;
        let mut gathered = 0i64;
        let cap = self.cap;
        let chunks: Vec<&[usize]> = list.chunks(cap).collect();
        for (k, chunk) in chunks.iter().enumerate() {
            self.stats.batches += 1;
            let res = if self.mode == MigrationMode::Sync {
                self.migrate_pages_sync(chunk, target)
            } else {
                let retries = self.cfg.pages_retry;
                self.migrate_pages_batch(chunk, target, self.mode, retries)
            };
            let failed = res.failed.len() as i64;
            for (i, e) in res.failed {
                self.put_back(i, e);
            }
            if res.nomem {
                for &i in chunks[k + 1..].iter().flat_map(|c| c.iter()) {
                    self.put_back(i, Errno::NoMem);
                }
                return Errno::NoMem.code();
            }
            gathered += failed;
        }
        gathered
    }

    fn put_back(&mut self, i: usize, e: Errno) {
        self.mm.lru_putback(self.pages[i]);
        self.outcomes[i] = PageOutcome::Failed(e);
    }

    /// Optimistic pass over the whole sub-group, then one blocking
    /// single-page call per page that is still left.
    fn migrate_pages_sync(&mut self, chunk: &[usize], target: NodeId) -> BatchResult {
        let retries = self.cfg.async_retry;
        let first = self.migrate_pages_batch(chunk, target, MigrationMode::Async, retries);
        if first.nomem {
            return first;
        }
        let mut failed = Vec::new();
        let mut pending = first.failed.into_iter();
        while let Some((i, _)) = pending.next() {
            let retries = self.cfg.sync_retry;
            let res = self.migrate_pages_batch(&[i], target, MigrationMode::Sync, retries);
            failed.extend(res.failed);
            if res.nomem {
                failed.extend(pending);
                return BatchResult { failed, nomem: true };
            }
        }
        BatchResult { failed, nomem: false }
    }

    /// Unmap every page it can within `passes` passes, then move them all.
    ///
    /// `lock_mode` decides locking and writeback behaviour for this call.
    /// Shootdowns are deferred to one broadcast only when the caller asked for
    /// `MIGRATE_ASYNC`; otherwise every unmapped page is shot down on its own.
    fn migrate_pages_batch(
        &mut self,
        list: &[usize],
        target: NodeId,
        lock_mode: MigrationMode,
        passes: u32,
    ) -> BatchResult {
        let deferred = self.mode == MigrationMode::Async;
        let mut pending: Vec<usize> = list.to_vec();
        let mut unmapped: Vec<(usize, FrameId, FrameId)> = Vec::new();
        let mut failed = Vec::new();
        let mut nomem = false;
        'passes: for _ in 0..passes {
            if pending.is_empty() {
                break;
            }
            let mut again = Vec::new();
            for (k, &i) in pending.iter().enumerate() {
                match self.unmap_one(i, target, lock_mode) {
                    Unmap::Done { old, new } => {
                        if !deferred {
                            self.shootdown(&[self.pages[i]]);
                        }
                        unmapped.push((i, old, new));
                    }
                    Unmap::Again => again.push(i),
                    Unmap::Fail(e) => failed.push((i, e)),
                    Unmap::NoMem => {
                        nomem = true;
                        failed.push((i, Errno::NoMem));
                        failed.extend(pending[k + 1..].iter().map(|&j| (j, Errno::NoMem)));
                        failed.extend(again.iter().map(|&j| (j, Errno::Busy)));
                        pending.clear();
                        break 'passes;
                    }
                }
            }
            pending = again;
        }
        failed.extend(pending.into_iter().map(|i| (i, Errno::Busy)));
        if deferred && !unmapped.is_empty() {
            let pages: Vec<PageId> = unmapped.iter().map(|&(i, _, _)| self.pages[i]).collect();
            self.shootdown(&pages);
        }
        let cache_pages = (self.cfg.cost.cache_bytes / PAGE_SIZE as u64) as usize;
        for (k, (i, old, new)) in unmapped.into_iter().enumerate() {
            if k >= cache_pages {
                self.charge(self.cfg.cost.cache_miss_page_ns);
            }
            self.move_one(i, old, new);
        }
        BatchResult { failed, nomem }
    }

    fn unmap_one(&mut self, i: usize, target: NodeId, lock_mode: MigrationMode) -> Unmap {
        let a = &mut self.attempts[i];
        if lock_mode == MigrationMode::Async {
            a.async_attempts += 1;
            self.stats.async_attempts += 1;
        } else {
            a.sync_retries += 1;
            self.stats.sync_retries += 1;
        }
        let attempt = a.async_attempts + a.sync_retries;
        self.charge(self.cfg.cost.unmap_attempt_ns);
        let page = self.pages[i];
        let owner = self.caller.owner;
        let blocking = lock_mode.blocks();
        if self.inject.fails(i, page, Phase::Unmap, attempt) {
            if blocking {
                self.charge(self.cfg.cost.lock_wait_ns);
            }
            return Unmap::Again;
        }
        let mut locked = self.mm.try_lock_page(page, owner);
        if !locked && blocking {
            for _ in 0..self.cfg.lock_spins {
                backoff();
                if self.mm.try_lock_page(page, owner) {
                    locked = true;
                    break;
                }
            }
            self.charge(self.cfg.cost.lock_wait_ns);
        }
        if !locked {
            return Unmap::Again;
        }
        if self.mm.flags(page).under_writeback {
            match lock_mode {
                MigrationMode::Sync | MigrationMode::SyncNoCopy => {
                    self.charge(self.cfg.cost.writeback_wait_ns);
                    self.mm.set_writeback(page, false);
                }
                MigrationMode::Async | MigrationMode::SyncLight => {
                    let _ = self.mm.unlock_page(page, owner, false);
                    return Unmap::Fail(Errno::Busy);
                }
            }
        }
        let new = if self.inject.fails(i, page, Phase::Alloc, attempt) {
            None
        } else {
            self.mm.alloc_frame(target).ok()
        };
        let Some(new) = new else {
            let _ = self.mm.unlock_page(page, owner, false);
            return Unmap::NoMem;
        };
        match self.mm.install_migration_entry(page, owner) {
            Ok(old) => Unmap::Done { old, new },
            Err(_) => {
                self.mm.free_frame(new);
                Unmap::Again
            }
        }
    }

    fn move_one(&mut self, i: usize, old: FrameId, new: FrameId) {
        let page = self.pages[i];
        let topo = self.mm.topology();
        let here = topo.core_node(self.caller.core);
        let line_ns = (topo.latency(here, old.node) + topo.latency(here, new.node)) as u64;
        if self.mode == MigrationMode::SyncNoCopy {
            self.mm.copy_frame(old, new, false);
            self.mm.transfer_payload(old, new);
        } else {
            self.mm.copy_frame(old, new, true);
            self.stats.copy_bytes += PAGE_SIZE as u64;
            self.charge(LINES_PER_PAGE * line_ns / self.cfg.cost.copy_parallelism.max(1));
        }
        self.mm.remap(page, new);
        self.mm.free_frame(old);
        self.mm.lru_putback(page);
        self.charge(self.cfg.cost.remap_ns);
        self.stats.pages_moved += 1;
        self.outcomes[i] = PageOutcome::Migrated;
    }

    fn shootdown(&mut self, pages: &[PageId]) {
        self.mm.tlb_shootdown(pages);
        self.mm.broadcast_interrupt(Some(self.caller.core), self.cfg.cost.ipi_receive_ns);
        self.stats.tlb_shootdowns += 1;
        self.charge(self.cfg.cost.shootdown_ns);
    }
}
