use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};

use pagemig_core::btree::{value_for, BTree, KeyDist, OpCtx, Placement, Selector};
use pagemig_core::engine::{Caller, Engine, LockHold, MigrationMode, MigrationRequest, Variant};
use pagemig_core::memory::MemoryModel;
use pagemig_core::topology::Topology;
use pagemig_core::{CoreId, NodeId, OwnerId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LOADED: u64 = 40_000;
const WRITERS: u64 = 4;
const INSERTS: u64 = 3_000;
const UPDATE_ROUNDS: u64 = 3;

fn updated(key: u64, round: u64) -> u64 {
    key.wrapping_mul(31).wrapping_add(round) ^ 0xabcd
}

/// Writers insert fresh keys and rewrite the lower half of the loaded keys,
/// readers check the upper half, and one thread keeps migrating leaves with
/// both system calls. The end state must equal a sequential replay.
#[test]
fn concurrent_ops_under_migration_match_replay() {
    let mm = MemoryModel::new(Topology::dual_socket(4, 16_384));
    let tree = BTree::load(&mm, LOADED, KeyDist::Sequential, Placement::RoundRobin).unwrap();
    let engine = Engine::default();
    let stop = AtomicBool::new(false);

    std::thread::scope(|s| {
        let mut writers = Vec::new();
        for t in 0..WRITERS {
            let tree = &tree;
            writers.push(s.spawn(move || {
                let mut ctx = OpCtx::new(CoreId(t as u16), OwnerId(t as u32 + 1));
                for j in 0..INSERTS {
                    let key = LOADED + t + WRITERS * j;
                    assert_eq!(tree.insert(&mut ctx, key, value_for(key)), Ok(true));
                }
                for round in 1..=UPDATE_ROUNDS {
                    for key in (t..LOADED / 2).step_by(WRITERS as usize) {
                        assert!(tree.update(&mut ctx, key, updated(key, round)));
                    }
                }
            }));
        }
        let reader = {
            let (tree, stop) = (&tree, &stop);
            s.spawn(move || {
                let mut ctx = OpCtx::new(CoreId(4), OwnerId(10));
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let mut n = 0u64;
                while !stop.load(Ordering::Acquire) {
                    let key = rng.random_range(LOADED / 2..LOADED);
                    assert_eq!(tree.lookup(&mut ctx, key), Some(value_for(key)));
                    let run = tree.scan(&mut ctx, key, 20);
                    assert!(run.windows(2).all(|w| w[0].0 < w[1].0));
                    n += 1;
                }
                n
            })
        };
        let migrator = {
            let (tree, stop, engine, mm) = (&tree, &stop, &engine, &mm);
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                let mut moved = 0;
                let mut call = 0u64;
                while !stop.load(Ordering::Acquire) {
                    call += 1;
                    let pages = tree.sample_pages(&mut rng, 64, Selector::RandomLeaf);
                    let variant = if call.is_multiple_of(2) { Variant::MovePages } else { Variant::MovePages2 };
                    let mode = MigrationMode::ALL[(call % 4) as usize];
                    let req = MigrationRequest::to_node(pages, NodeId((call % 2) as u16)).with_mode(mode).with_batch(16);
                    let pins = LockHold::new(0.05, 3, call);
                    let out = engine.call(variant, mm, Caller::new(CoreId(7), OwnerId(20)), &req, &pins).unwrap();
                    moved += out.stats.pages_moved;
                }
                moved
            })
        };
        for w in writers {
            w.join().unwrap();
        }
        stop.store(true, Ordering::Release);
        assert!(reader.join().unwrap() > 0);
        assert!(migrator.join().unwrap() > 0, "the migrator never moved a page");
    });

    let mut replay: BTreeMap<u64, u64> = (0..LOADED).map(|k| (k, value_for(k))).collect();
    for t in 0..WRITERS {
        for j in 0..INSERTS {
            let key = LOADED + t + WRITERS * j;
            replay.insert(key, value_for(key));
        }
    }
    for key in 0..LOADED / 2 {
        replay.insert(key, updated(key, UPDATE_ROUNDS));
    }
    let got = tree.full_scan();
    assert_eq!(got.len(), replay.len());
    assert!(got.iter().zip(&replay).all(|(a, (k, v))| a == &(*k, *v)));
    assert_eq!(tree.len(), replay.len() as u64);
    tree.check_invariants().unwrap();
    assert_eq!(mm.isolated_count(), 0);
    assert!(mm.incoherent_translations().is_empty());
    for n in 0..2 {
        assert_eq!(mm.frame_usage(NodeId(n)).in_use, mm.mapped_frames_per_node()[n as usize]);
    }
}

#[test]
fn single_thread_runs_are_repeatable() {
    let run = || {
        let mm = MemoryModel::new(Topology::dual_socket(2, 4096));
        let tree = BTree::load(&mm, 5_000, KeyDist::Scattered, Placement::Blocks(4)).unwrap();
        let mut ctx = OpCtx::new(CoreId(0), OwnerId(1));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2_000 {
            let k: u64 = rng.random();
            tree.insert(&mut ctx, k, k).unwrap();
            tree.lookup(&mut ctx, k);
        }
        (tree.full_scan(), ctx.ns, tree.stats())
    };
    assert_eq!(run(), run());
}
