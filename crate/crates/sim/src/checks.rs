//! Property checks shared by `pagemig verify` and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pagemig_core::engine::{
    Caller, Engine, FailurePlan, Injection, MigrationMode, MigrationRequest, NoFailures, Phase, Variant,
};
use pagemig_core::memory::MemoryModel;
use pagemig_core::topology::Topology;
use pagemig_core::{CoreId, NodeId, OwnerId, PageId};

use crate::reference::{execute, Case, Fault, Observed};

/// Faults used by the dominance cases. Writeback is left out: whether it
/// fails a page depends on the mode, so it is not a fixed input.
pub const DOMINANCE_FAULTS: [Fault; 7] = [
    Fault::CopyIn,
    Fault::NodeCheck,
    Fault::BadNode,
    Fault::Isolate,
    Fault::Pinned,
    Fault::PinnedFor(2),
    Fault::NoMem,
];

/// Random request of `1..=max_pages` pages on a 3-node machine. Targets come
/// in runs so requests have several multi-page rounds.
pub fn random_case<R: Rng>(rng: &mut R, max_pages: usize) -> Case {
    let n = rng.random_range(1..=max_pages);
    let mut targets = Vec::with_capacity(n);
    while targets.len() < n {
        let t = rng.random_range(0..3u16);
        let run = rng.random_range(1..=16usize).min(n - targets.len());
        targets.extend(std::iter::repeat_n(t, run));
    }
    let initial = (0..n).map(|_| rng.random_range(0..3u16)).collect();
    let faults = (0..rng.random_range(0..=3))
        .map(|_| (rng.random_range(0..n), DOMINANCE_FAULTS[rng.random_range(0..DOMINANCE_FAULTS.len())]))
        .collect();
    let mode = MigrationMode::ALL[rng.random_range(0..MigrationMode::ALL.len())];
    let cap = [1, 2, 7, 16, 512][rng.random_range(0..5)];
    Case { nodes: 3, frames: 128, initial, targets, faults, variant: Variant::MovePages2, mode, cap }
}

/// Whether native `move_pages` must stop at a failure that still leaves a
/// page `move_pages2` will certainly migrate in a later round.
///
/// Worked out from the request alone: hard argument errors stop the walk at
/// once; a page that cannot be unmapped or allocated spoils its round, and
/// the walk stops when that round closes. A page is certainly migratable
/// when it already sits on its target, or when nothing touches it beyond a
/// lock held for fewer attempts than either pipeline makes and no page of
/// its round runs out of memory (which fails the rest of the sub-group).
pub fn failure_precedes_migratable(case: &Case) -> bool {
    let n = case.initial.len();
    let faults_at = |i: usize| case.faults.iter().filter(move |&&(j, _)| j == i).map(|&(_, f)| f);
    let hard = |i: usize| faults_at(i).any(|f| matches!(f, Fault::CopyIn | Fault::NodeCheck | Fault::BadNode));
    let in_place = |i: usize| case.initial[i] == case.targets[i];
    let closes = |i: usize| in_place(i) || faults_at(i).any(|f| f == Fault::Isolate);
    let queued = |i: usize| !hard(i) && !closes(i);

    // Round of every index under the shared round formation.
    let mut round_of = vec![None; n];
    let mut rid = 0;
    let mut open: Option<u16> = None;
    for i in 0..n {
        if hard(i) {
            if open.take().is_some() {
                rid += 1;
            }
            continue;
        }
        let t = case.targets[i];
        if open.is_some_and(|o| o != t) {
            rid += 1;
        }
        open = Some(t);
        round_of[i] = Some(rid);
        if closes(i) {
            rid += 1;
            open = None;
        }
    }
    let mut dry = vec![false; rid + 1];
    for i in (0..n).filter(|&i| queued(i)) {
        if faults_at(i).any(|f| f == Fault::NoMem) {
            dry[round_of[i].expect("queued pages have a round")] = true;
        }
    }
    let certain = |j: usize| {
        !hard(j)
            && (in_place(j)
                || (faults_at(j).all(|f| matches!(f, Fault::PinnedFor(k) if k < 10))
                    && !dry[round_of[j].expect("non-hard pages have a round")]))
    };

    // Native walk: where does it stop, if anywhere?
    let mut spoiled: Option<usize> = None;
    for i in 0..n {
        if hard(i) {
            return (i + 1..n).any(certain);
        }
        let r = round_of[i].expect("non-hard pages have a round");
        if let Some(s) = spoiled {
            if s != r {
                // The spoiled round was flushed when page i opened a new one.
                return (i..n).any(certain);
            }
        }
        if closes(i) {
            if spoiled == Some(r) {
                return (i + 1..n).any(certain);
            }
            continue;
        }
        if faults_at(i).any(|f| matches!(f, Fault::Pinned | Fault::NoMem)) {
            spoiled = Some(r);
        }
    }
    false
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DominanceReport {
    pub cases: usize,
    /// Cases where `move_pages2` migrated fewer pages.
    pub violations: usize,
    /// Cases that must be strict.
    pub strict_expected: usize,
    /// Of those, cases that were not.
    pub strict_violations: usize,
    pub first_violation: Option<Case>,
}

impl DominanceReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.strict_violations == 0
    }
}

/// Runs `count` random cases through `run` for both variants.
pub fn check_dominance(seed: u64, count: usize, max_pages: usize, run: impl Fn(&Case) -> Observed) -> DominanceReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = DominanceReport::default();
    for _ in 0..count {
        let mp2 = random_case(&mut rng, max_pages);
        let native = Case { variant: Variant::MovePages, ..mp2.clone() };
        let a = run(&native).migrated().len();
        let b = run(&mp2).migrated().len();
        r.cases += 1;
        let strict = failure_precedes_migratable(&mp2);
        let bad = b < a || (strict && b == a);
        if b < a {
            r.violations += 1;
        }
        if strict {
            r.strict_expected += 1;
            if b <= a {
                r.strict_violations += 1;
            }
        }
        if bad && r.first_violation.is_none() {
            r.first_violation = Some(mp2);
        }
    }
    r
}

/// Dominance against the real engine.
pub fn engine_dominance(seed: u64, count: usize, max_pages: usize) -> DominanceReport {
    let engine = Engine::default();
    check_dominance(seed, count, max_pages, |c| execute(c, &engine))
}

/// Shootdowns of a failure-free single-round migration of `pages` pages.
pub fn single_round_shootdowns(pages: usize, mode: MigrationMode, cap: usize) -> u64 {
    let mm = MemoryModel::new(Topology::dual_socket(1, pages as u32 + 1));
    let ids: Vec<PageId> = (0..pages).map(|_| mm.alloc_page(NodeId(0)).expect("room")).collect();
    let req = MigrationRequest::to_node(ids, NodeId(1)).with_mode(mode).with_batch(cap);
    let out = Engine::default()
        .move_pages2(&mm, Caller::new(CoreId(0), OwnerId(1)), &req, &NoFailures)
        .expect("valid request");
    assert_eq!(out.stats.rounds, 1);
    assert_eq!(out.stats.pages_moved, pages as u64);
    out.stats.tlb_shootdowns
}

/// `(async attempts, sync retries)` recorded for a page whose lock is never
/// released, migrated under `MIGRATE_SYNC` by `variant`.
pub fn retries_for_held_page(variant: Variant) -> (u32, u32) {
    let mm = MemoryModel::new(Topology::dual_socket(1, 16));
    let ids: Vec<PageId> = (0..4).map(|_| mm.alloc_page(NodeId(0)).expect("room")).collect();
    let req = MigrationRequest::to_node(ids, NodeId(1)).with_mode(MigrationMode::Sync);
    let plan = FailurePlan::new(vec![Injection::permanent(2, Phase::Unmap)]);
    let out = Engine::default()
        .call(variant, &mm, Caller::new(CoreId(0), OwnerId(1)), &req, &plan)
        .expect("valid request");
    let a = out.attempts[2];
    (a.async_attempts, a.sync_retries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(initial: &[u16], targets: &[u16], faults: &[(usize, Fault)]) -> Case {
        Case {
            nodes: 3,
            frames: 16,
            initial: initial.to_vec(),
            targets: targets.to_vec(),
            faults: faults.to_vec(),
            variant: Variant::MovePages2,
            mode: MigrationMode::Sync,
            cap: 512,
        }
    }

    #[test]
    fn predicate_on_hand_cases() {
        let held_then_more = case(&[0; 6], &[1, 1, 1, 2, 2, 2], &[(1, Fault::Pinned)]);
        assert!(failure_precedes_migratable(&held_then_more));
        let held_in_last_round = case(&[0; 6], &[1, 1, 1, 2, 2, 2], &[(4, Fault::Pinned)]);
        assert!(!failure_precedes_migratable(&held_in_last_round));
        let busy_isolation = case(&[0; 4], &[1, 1, 2, 2], &[(1, Fault::Isolate)]);
        assert!(!failure_precedes_migratable(&busy_isolation));
        let bad_node = case(&[0; 3], &[1, 1, 1], &[(1, Fault::BadNode)]);
        assert!(failure_precedes_migratable(&bad_node));
        let everything_after_is_held = case(&[0; 3], &[1, 2, 2], &[(0, Fault::Pinned), (1, Fault::Pinned), (2, Fault::NoMem)]);
        assert!(!failure_precedes_migratable(&everything_after_is_held));
        // An in-place page closes a spoiled round; the walk stops there.
        let closed_by_in_place = case(&[0, 1, 0], &[1, 1, 1], &[(0, Fault::Pinned)]);
        assert!(failure_precedes_migratable(&closed_by_in_place));
    }

    #[test]
    fn broken_engine_is_caught() {
        let engine = Engine::default();
        // A "move_pages2" that behaves like the native call.
        let r = check_dominance(3, 500, 32, |c| execute(&Case { variant: Variant::MovePages, ..c.clone() }, &engine));
        assert!(r.strict_expected > 0);
        assert!(!r.passed());
        assert_eq!(r.violations, 0);
        assert_eq!(r.strict_violations, r.strict_expected);
    }

    #[test]
    fn shootdowns_and_retries() {
        assert_eq!(single_round_shootdowns(100, MigrationMode::Async, 32), 4);
        assert_eq!(single_round_shootdowns(100, MigrationMode::Sync, 32), 100);
        assert_eq!(retries_for_held_page(Variant::MovePages), (3, 7));
        assert_eq!(retries_for_held_page(Variant::MovePages2), (3, 7));
    }
}
