//! `do_pages_move` and `do_pages_move2`: round formation and error handling.

use alloc::vec;
use alloc::vec::Vec;

use super::inject::{FailureInjector, Phase};
use super::{
    Caller, EngineConfig, EngineStats, Errno, MigrationMode, MigrationOutcome, PageAttempts, PageOutcome,
    PageStatus,
};
use crate::ids::{NodeId, PageId};
use crate::memory::MemoryModel;

/// State of one system call in progress.
pub(super) struct Call<'a> {
    pub(super) cfg: &'a EngineConfig,
    pub(super) mm: &'a MemoryModel,
    pub(super) caller: Caller,
    pub(super) pages: &'a [PageId],
    nodes: &'a [NodeId],
    pub(super) mode: MigrationMode,
    pub(super) cap: usize,
    pub(super) inject: &'a dyn FailureInjector,
    status: Vec<PageStatus>,
    pub(super) outcomes: Vec<PageOutcome>,
    pub(super) attempts: Vec<PageAttempts>,
    pub(super) stats: EngineStats,
    /// Request indices isolated for the current round.
    pub(super) pagelist: Vec<usize>,
    ret: i64,
}

enum Exit {
    Done,
    /// Flush what was collected, then return.
    OutFlush,
    /// Return immediately.
    Out,
}

impl<'a> Call<'a> {
    #[allow(clippy::too_many_arguments)]
    pub(super) fn new(
        cfg: &'a EngineConfig,
        mm: &'a MemoryModel,
        caller: Caller,
        pages: &'a [PageId],
        nodes: &'a [NodeId],
        mode: MigrationMode,
        cap: usize,
        inject: &'a dyn FailureInjector,
    ) -> Self {
        let n = pages.len();
        Call {
            cfg,
            mm,
            caller,
            pages,
            nodes,
            mode,
            cap,
            inject,
            status: vec![PageStatus::Unset; n],
            outcomes: vec![PageOutcome::Unattempted; n],
            attempts: vec![PageAttempts::default(); n],
            stats: EngineStats { pages_requested: n as u64, ..EngineStats::default() },
            pagelist: Vec::new(),
            ret: 0,
        }
    }

    pub(super) fn charge(&mut self, ns: u64) {
        self.stats.sim_ns += ns;
    }

    fn store_status(&mut self, i: usize, s: PageStatus) {
        self.charge(self.cfg.cost.store_status_ns);
        self.status[i] = s;
    }

    /// Validation that happens before a page joins a round: copying the
    /// arguments in and checking the target node.
    fn check_args(&mut self, i: usize) -> Result<NodeId, Errno> {
        let page = self.pages[i];
        if self.inject.fails(i, page, Phase::CopyIn, 1) {
            return Err(Errno::Fault);
        }
        let node = self.nodes[i];
        if !self.mm.topology().has_node(node) {
            return Err(Errno::InvalNode);
        }
        if self.inject.fails(i, page, Phase::NodeCheck, 1) {
            return Err(Errno::Acces);
        }
        Ok(node)
    }

    /// Returns `Ok(true)` when the page was isolated and queued, `Ok(false)`
    /// when it already lives on `target`.
    fn add_page_for_migration(&mut self, i: usize, target: NodeId) -> Result<bool, Errno> {
        self.charge(self.cfg.cost.add_page_ns);
        let page = self.pages[i];
        if !self.mm.is_valid_page(page) {
            return Err(Errno::Fault);
        }
        let Some(node) = self.mm.page_node(page) else {
            return Err(Errno::NoEnt);
        };
        if node == target {
            return Ok(false);
        }
        if self.inject.fails(i, page, Phase::Isolate, 1) || !self.mm.lru_isolate(page) {
            return Err(Errno::Busy);
        }
        self.pagelist.push(i);
        Ok(true)
    }

    /// Native `move_pages_and_store_status`: on failure no status is stored
    /// and the count of pages left behind includes everything from `i` on.
    fn move_pages_and_store_status(&mut self, node: Option<NodeId>, start: usize, i: usize) -> i64 {
        let Some(node) = node else { return 0 };
        if self.pagelist.is_empty() {
            return 0;
        }
        let rc = self.migrate_round(node);
        if rc != 0 {
            return if rc > 0 { rc + (self.pages.len() - i) as i64 } else { rc };
        }
        for k in start..i {
            self.store_status(k, PageStatus::Node(node));
        }
        0
    }

    /// Partial-migration flush: every page of the round gets its own status.
    fn move_pages_and_store_status2(&mut self, node: Option<NodeId>) {
        let Some(node) = node else { return };
        if self.pagelist.is_empty() {
            return;
        }
        let round = self.pagelist.clone();
        self.migrate_round(node);
        for i in round {
            let s = match self.outcomes[i] {
                PageOutcome::Failed(e) => PageStatus::Err(e),
                _ => PageStatus::Node(node),
            };
            self.store_status(i, s);
        }
    }

    pub(super) fn do_pages_move(&mut self) {
        self.charge(self.cfg.cost.syscall_ns);
        self.mm.set_lru_enabled(false);
        let n = self.pages.len();
        let mut current: Option<NodeId> = None;
        let mut start = 0;
        let mut err: i64 = 0;
        let mut i = 0;
        let mut exit = Exit::Done;
        while i < n {
            let node = match self.check_args(i) {
                Ok(node) => node,
                Err(e) => {
                    err = e.code();
                    self.outcomes[i] = PageOutcome::Failed(e);
                    exit = Exit::OutFlush;
                    break;
                }
            };
            match current {
                None => {
                    current = Some(node);
                    start = i;
                }
                Some(cur) if cur != node => {
                    let e = self.move_pages_and_store_status(current, start, i);
                    if e != 0 {
                        err = e;
                        exit = Exit::Out;
                        break;
                    }
                    start = i;
                    current = Some(node);
                }
                Some(_) => {}
            }
            let cur = current.unwrap_or(node);
            match self.add_page_for_migration(i, cur) {
                Ok(true) => {
                    err = 1;
                    i += 1;
                    continue;
                }
                Ok(false) => {
                    self.outcomes[i] = PageOutcome::Migrated;
                    self.store_status(i, PageStatus::Node(cur));
                }
                Err(e) => {
                    self.outcomes[i] = PageOutcome::Failed(e);
                    self.store_status(i, PageStatus::Err(e));
                }
            }
            let e = self.move_pages_and_store_status(current, start, i);
            if e != 0 {
                // Page i is already accounted for in its status slot.
                err = if e > 0 { e - 1 } else { e };
                exit = Exit::Out;
                break;
            }
            current = None;
            err = 0;
            i += 1;
        }
        if !matches!(exit, Exit::Out) {
            let e1 = self.move_pages_and_store_status(current, start, i);
            if err >= 0 {
                err = e1;
            }
        }
        self.stats.aborted = !matches!(exit, Exit::Done);
        self.mm.set_lru_enabled(true);
        self.ret = err;
    }

    pub(super) fn do_pages_move2(&mut self) {
        self.charge(self.cfg.cost.syscall_ns);
        self.mm.set_lru_enabled(false);
        let n = self.pages.len();
        let mut current: Option<NodeId> = None;
        for i in 0..n {
            let node = match self.check_args(i) {
                Ok(node) => node,
                Err(e) => {
                    self.outcomes[i] = PageOutcome::Failed(e);
                    self.store_status(i, PageStatus::Err(e));
                    self.move_pages_and_store_status2(current);
                    current = None;
                    continue;
                }
            };
            match current {
                None => current = Some(node),
                Some(cur) if cur != node => {
                    self.move_pages_and_store_status2(current);
                    current = Some(node);
                }
                Some(_) => {}
            }
            let cur = current.unwrap_or(node);
            match self.add_page_for_migration(i, cur) {
                Ok(true) => continue,
                Ok(false) => {
                    self.outcomes[i] = PageOutcome::Migrated;
                    self.store_status(i, PageStatus::Node(cur));
                }
                Err(e) => {
                    self.outcomes[i] = PageOutcome::Failed(e);
                    self.store_status(i, PageStatus::Err(e));
                }
            }
            self.move_pages_and_store_status2(current);
            current = None;
        }
        self.move_pages_and_store_status2(current);
        self.mm.set_lru_enabled(true);
        self.ret = self.outcomes.iter().filter(|o| **o != PageOutcome::Migrated).count() as i64;
    }

    pub(super) fn finish(mut self) -> MigrationOutcome {
        for o in &self.outcomes {
            match o {
                PageOutcome::Migrated => self.stats.pages_migrated += 1,
                PageOutcome::Failed(_) => self.stats.pages_failed += 1,
                PageOutcome::Unattempted => self.stats.pages_unattempted += 1,
            }
        }
        MigrationOutcome {
            ret: self.ret,
            status: self.status,
            outcomes: self.outcomes,
            attempts: self.attempts,
            stats: self.stats,
        }
    }
}
