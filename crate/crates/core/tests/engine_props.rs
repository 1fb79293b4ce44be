use pagemig_core::engine::{
    AttemptSel, Caller, Engine, FailurePlan, Injection, MigrationMode, MigrationRequest, NoFailures, PageOutcome,
    PageStatus, Phase, Variant,
};
use pagemig_core::memory::{AccessKind, MemoryModel};
use pagemig_core::topology::Topology;
use pagemig_core::{CoreId, NodeId, OwnerId, PageId};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Req {
    initial: Vec<u16>,
    targets: Vec<u16>,
    injections: Vec<Injection>,
    variant: Variant,
    mode: MigrationMode,
    cap: usize,
}

fn phase() -> impl Strategy<Value = Phase> {
    prop::sample::select(Phase::ALL.to_vec())
}

fn attempts() -> impl Strategy<Value = AttemptSel> {
    prop_oneof![Just(AttemptSel::Always), (1..12u32).prop_map(AttemptSel::FirstN), (1..12u32).prop_map(AttemptSel::Only)]
}

fn req(max_pages: usize, max_faults: usize) -> impl Strategy<Value = Req> {
    (1..=max_pages)
        .prop_flat_map(move |n| {
            (
                prop::collection::vec(0..3u16, n),
                prop::collection::vec(0..3u16, n),
                prop::collection::vec((0..n, phase(), attempts()), 0..=max_faults),
                prop::sample::select(vec![Variant::MovePages, Variant::MovePages2]),
                prop::sample::select(MigrationMode::ALL.to_vec()),
                prop::sample::select(vec![1usize, 2, 3, 8, 512]),
            )
        })
        .prop_map(|(initial, targets, inj, variant, mode, cap)| Req {
            initial,
            targets,
            injections: inj.into_iter().map(|(index, phase, attempts)| Injection { index, phase, attempts }).collect(),
            variant,
            mode,
            cap,
        })
}

struct Setup {
    mm: MemoryModel,
    pages: Vec<PageId>,
}

fn setup(r: &Req) -> Setup {
    let mm = MemoryModel::new(Topology::chiplet(3, 2, 256));
    let pages: Vec<PageId> = r.initial.iter().map(|&n| mm.alloc_page(NodeId(n)).unwrap()).collect();
    // Warm every TLB so shootdowns have something to drop.
    for c in 0..mm.topology().core_count() {
        for &p in &pages {
            mm.access(CoreId(c as u16), p, AccessKind::Read).unwrap();
        }
    }
    Setup { mm, pages }
}

fn run(r: &Req, s: &Setup) -> pagemig_core::engine::MigrationOutcome {
    let targets = r.targets.iter().map(|&t| NodeId(t)).collect();
    let request = MigrationRequest::new(s.pages.clone(), targets).with_mode(r.mode).with_batch(r.cap);
    let plan = FailurePlan::new(r.injections.clone());
    Engine::default().call(r.variant, &s.mm, Caller::new(CoreId(0), OwnerId(1)), &request, &plan).unwrap()
}

/// Queued pages per round of a fault-free request: runs of equal target,
/// with pages already in place closing the run.
fn fault_free_rounds(initial: &[u16], targets: &[u16]) -> Vec<usize> {
    let mut rounds = Vec::new();
    let mut open: Option<(u16, usize)> = None;
    for (&at, &t) in initial.iter().zip(targets) {
        if let Some((o, k)) = open {
            if o != t {
                rounds.push(k);
                open = None;
            }
        }
        if at == t {
            if let Some((_, k)) = open.take() {
                rounds.push(k);
            }
            continue;
        }
        open = Some((t, open.map_or(0, |(_, k)| k) + 1));
    }
    rounds.extend(open.map(|(_, k)| k));
    rounds.retain(|&k| k > 0);
    rounds
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn nothing_leaks_and_nothing_moves_twice(r in req(40, 4)) {
        let s = setup(&r);
        let total: u32 = s.mm.mapped_frames_per_node().iter().sum();
        let out = run(&r, &s);

        prop_assert_eq!(s.mm.isolated_count(), 0);
        prop_assert_eq!(s.mm.mapped_frames_per_node().iter().sum::<u32>(), total);
        for n in 0..3u16 {
            prop_assert_eq!(s.mm.frame_usage(NodeId(n)).in_use, s.mm.mapped_frames_per_node()[n as usize]);
        }
        prop_assert!(s.mm.incoherent_translations().is_empty());
        for (i, &p) in s.pages.iter().enumerate() {
            prop_assert!(!s.mm.pte(p).is_migrating());
            prop_assert_eq!(s.mm.lock_owner(p), None);
            let now = s.mm.page_node(p).unwrap().0;
            match out.outcomes[i] {
                PageOutcome::Migrated => prop_assert_eq!(now, r.targets[i]),
                _ => prop_assert_eq!(now, r.initial[i]),
            }
        }
    }

    #[test]
    fn stats_partition_the_request(r in req(40, 4)) {
        let s = setup(&r);
        let out = run(&r, &s);
        let st = &out.stats;
        prop_assert_eq!(st.pages_requested, r.initial.len() as u64);
        prop_assert_eq!(st.pages_migrated + st.pages_failed + st.pages_unattempted, st.pages_requested);
        let count = |f: fn(&PageOutcome) -> bool| out.outcomes.iter().filter(|o| f(o)).count() as u64;
        prop_assert_eq!(st.pages_migrated, count(|o| matches!(o, PageOutcome::Migrated)));
        prop_assert_eq!(st.pages_failed, count(|o| matches!(o, PageOutcome::Failed(_))));
        let in_place = r.initial.iter().zip(&r.targets).filter(|(a, b)| a == b).count() as u64;
        prop_assert!(st.pages_moved <= st.pages_migrated);
        prop_assert!(st.pages_migrated <= st.pages_moved + in_place);
        if r.variant == Variant::MovePages2 {
            prop_assert_eq!(out.unset_count(), 0);
            prop_assert!(!st.aborted);
            prop_assert_eq!(st.pages_unattempted, 0);
        }
        for (i, s) in out.status.iter().enumerate() {
            match (s, out.outcomes[i]) {
                (PageStatus::Node(n), PageOutcome::Migrated) => prop_assert_eq!(n.0, r.targets[i]),
                (PageStatus::Err(e), PageOutcome::Failed(f)) => prop_assert_eq!(*e, f),
                (PageStatus::Unset, _) => prop_assert_eq!(r.variant, Variant::MovePages),
                _ => {}
            }
        }
    }

    #[test]
    fn retries_stay_within_their_budgets(r in req(24, 3)) {
        let s = setup(&r);
        let out = run(&r, &s);
        for a in &out.attempts {
            if r.variant == Variant::MovePages || r.mode == MigrationMode::Sync {
                prop_assert!(a.async_attempts <= 3);
                prop_assert!(a.sync_retries <= 7);
            } else if r.mode == MigrationMode::Async {
                prop_assert!(a.async_attempts <= 10);
                prop_assert_eq!(a.sync_retries, 0);
            } else {
                prop_assert_eq!(a.async_attempts, 0);
                prop_assert!(a.sync_retries <= 10);
            }
        }
    }

    #[test]
    fn shootdowns_follow_the_mode(
        initial in prop::collection::vec(0..3u16, 1..80),
        seed in any::<u64>(),
        mode in prop::sample::select(MigrationMode::ALL.to_vec()),
        cap in prop::sample::select(vec![1usize, 3, 8, 32, 512]),
    ) {
        let targets: Vec<u16> = initial.iter().enumerate().map(|(i, _)| ((seed >> (i % 32)) % 3) as u16).collect();
        let r = Req { initial, targets, injections: Vec::new(), variant: Variant::MovePages2, mode, cap };
        let s = setup(&r);
        let before = s.mm.counters().shootdowns;
        let out = run(&r, &s);
        let rounds = fault_free_rounds(&r.initial, &r.targets);
        let moved: usize = rounds.iter().sum();
        prop_assert_eq!(out.stats.pages_moved, moved as u64);
        let want = if mode == MigrationMode::Async {
            rounds.iter().map(|&k| k.div_ceil(cap) as u64).sum()
        } else {
            moved as u64
        };
        prop_assert_eq!(out.stats.tlb_shootdowns, want);
        prop_assert_eq!(s.mm.counters().shootdowns - before, want);
    }

    #[test]
    fn pipelines_agree_without_failures(
        initial in prop::collection::vec(0..3u16, 1..64),
        targets_seed in prop::collection::vec(0..3u16, 64),
    ) {
        let targets = targets_seed[..initial.len()].to_vec();
        let base = Req {
            initial, targets, injections: Vec::new(),
            variant: Variant::MovePages, mode: MigrationMode::Sync, cap: 512,
        };
        let mp2 = Req { variant: Variant::MovePages2, ..base.clone() };
        let (a, b) = (setup(&base), setup(&mp2));
        let (oa, ob) = (run(&base, &a), run(&mp2, &b));
        prop_assert_eq!(oa.ret, ob.ret);
        prop_assert_eq!(&oa.status, &ob.status);
        prop_assert_eq!(&oa.outcomes, &ob.outcomes);
        prop_assert_eq!(oa.stats.rounds, ob.stats.rounds);
        prop_assert_eq!(oa.stats.pages_moved, ob.stats.pages_moved);
    }
}

#[test]
fn contents_survive_migration() {
    let mm = MemoryModel::new(Topology::dual_socket(2, 64));
    let pages: Vec<PageId> = (0..20).map(|_| mm.alloc_page(NodeId(0)).unwrap()).collect();
    let before: Vec<_> = pages.iter().map(|&p| mm.pte(p).frame().unwrap()).collect();
    for (i, f) in before.iter().enumerate() {
        mm.payload(*f, 3).store(i as u64 * 7 + 1, std::sync::atomic::Ordering::Relaxed);
    }
    let req = MigrationRequest::to_node(pages.clone(), NodeId(1));
    let out = Engine::default().move_pages2(&mm, Caller::new(CoreId(0), OwnerId(1)), &req, &NoFailures).unwrap();
    assert_eq!(out.stats.pages_moved, 20);
    for (i, &p) in pages.iter().enumerate() {
        let f = mm.pte(p).frame().unwrap();
        assert_eq!(f.node, NodeId(1));
        assert_eq!(mm.payload(f, 3).load(std::sync::atomic::Ordering::Relaxed), i as u64 * 7 + 1);
    }
}
