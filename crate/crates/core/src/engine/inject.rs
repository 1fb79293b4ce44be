//! Failure injection hooks.
//!
//! Real migrations fail because other threads hold page locks, pages sit
//! under writeback or memory runs out. Tests need those failures on demand
//! and reproducibly, so the engine asks an injector before each step.

use alloc::vec::Vec;

use crate::ids::PageId;

/// Pipeline step an injected failure applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    /// Reading `pages[i]` or `nodes[i]` from user space (EFAULT).
    CopyIn,
    /// The caller may not use the target node (EACCES).
    NodeCheck,
    /// LRU isolation in `add_page_for_migration` (EBUSY).
    Isolate,
    /// Taking the page lock during unmap; retried like a held lock.
    Unmap,
    /// Allocating the destination frame (ENOMEM).
    Alloc,
}

impl Phase {
    pub const ALL: [Phase; 5] = [Phase::CopyIn, Phase::NodeCheck, Phase::Isolate, Phase::Unmap, Phase::Alloc];
}

/// Which attempts of a phase fail. Attempts are numbered from 1; only
/// `Unmap` is ever attempted more than once per call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttemptSel {
    Always,
    /// Attempts `1..=k`.
    FirstN(u32),
    Only(u32),
}

impl AttemptSel {
    pub fn matches(self, attempt: u32) -> bool {
        match self {
            AttemptSel::Always => true,
            AttemptSel::FirstN(k) => attempt <= k,
            AttemptSel::Only(k) => attempt == k,
        }
    }
}

pub trait FailureInjector: Sync {
    /// Whether step `phase` of request index `index` (page `page`) fails on
    /// its `attempt`-th try within this call.
    fn fails(&self, index: usize, page: PageId, phase: Phase, attempt: u32) -> bool;
}

/// Injects nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoFailures;

impl FailureInjector for NoFailures {
    fn fails(&self, _: usize, _: PageId, _: Phase, _: u32) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Injection {
    pub index: usize,
    pub phase: Phase,
    pub attempts: AttemptSel,
}

impl Injection {
    pub fn permanent(index: usize, phase: Phase) -> Self {
        Injection { index, phase, attempts: AttemptSel::Always }
    }
}

/// Deterministic list of failures keyed by request index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FailurePlan {
    pub injections: Vec<Injection>,
}

impl FailurePlan {
    pub fn new(injections: Vec<Injection>) -> Self {
        FailurePlan { injections }
    }

    pub fn permanent(points: &[(usize, Phase)]) -> Self {
        FailurePlan {
            injections: points.iter().map(|&(i, p)| Injection::permanent(i, p)).collect(),
        }
    }
}

impl FailureInjector for FailurePlan {
    fn fails(&self, index: usize, _: PageId, phase: Phase, attempt: u32) -> bool {
        self.injections
            .iter()
            .any(|inj| inj.index == index && inj.phase == phase && inj.attempts.matches(attempt))
    }
}

/// Each page is independently found held by someone else for the whole call
/// with probability `prob`. The draw is a hash of `(seed, salt, page)`, so a
/// call is reproducible and different calls (different salts) are independent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LockHold {
    pub prob: f64,
    pub seed: u64,
    pub salt: u64,
}

impl LockHold {
    pub fn new(prob: f64, seed: u64, salt: u64) -> Self {
        LockHold { prob, seed, salt }
    }

    pub fn held(&self, page: PageId) -> bool {
        if self.prob <= 0.0 {
            return false;
        }
        let h = mix64(self.seed ^ mix64(self.salt.wrapping_add(page.0 as u64)));
        // 53 high bits as a uniform in [0, 1).
        ((h >> 11) as f64) * (1.0 / (1u64 << 53) as f64) < self.prob
    }
}

impl FailureInjector for LockHold {
    fn fails(&self, _: usize, page: PageId, phase: Phase, _: u32) -> bool {
        phase == Phase::Unmap && self.held(page)
    }
}

/// SplitMix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attempt_selectors() {
        assert!(AttemptSel::Always.matches(9));
        assert!(AttemptSel::FirstN(3).matches(3));
        assert!(!AttemptSel::FirstN(3).matches(4));
        assert!(AttemptSel::Only(2).matches(2));
        assert!(!AttemptSel::Only(2).matches(1));
    }

    #[test]
    fn plan_matches_index_and_phase() {
        let plan = FailurePlan::permanent(&[(4, Phase::Unmap)]);
        assert!(plan.fails(4, PageId(0), Phase::Unmap, 7));
        assert!(!plan.fails(4, PageId(0), Phase::Isolate, 1));
        assert!(!plan.fails(3, PageId(0), Phase::Unmap, 1));
    }

    #[test]
    fn lock_hold_rate_and_stability() {
        let hold = LockHold::new(0.1, 7, 1);
        let held = (0..100_000).filter(|&p| hold.held(PageId(p))).count();
        assert!((9_000..11_000).contains(&held), "{held}");
        assert_eq!(hold.held(PageId(5)), hold.held(PageId(5)));
        assert_eq!((0..1000).filter(|&p| LockHold::new(0.0, 7, 1).held(PageId(p))).count(), 0);
        assert_eq!((0..1000).filter(|&p| LockHold::new(1.0, 7, 1).held(PageId(p))).count(), 1000);
    }
}
