use pagemig_core::btree::{BTree, KeyDist, Placement};
use pagemig_core::engine::{Engine, Variant};
use pagemig_core::memory::MemoryModel;
use pagemig_core::topology::Topology;
use pagemig_core::workload::{
    worker_rng, BaseMix, KeyChoice, MigLoad, Op, OpGenerator, Worker, WorkloadConfig, WorkloadMix, MAX_SCAN,
};
use pagemig_core::CoreId;

const DRAWS: u64 = 1_000_000;

#[derive(Default)]
struct Tally {
    read: u64,
    update: u64,
    scan: u64,
    insert: u64,
    migrate: u64,
    scan_len: Vec<u64>,
}

fn tally(base: BaseMix, share: f64, seed: u64) -> Tally {
    let gen = OpGenerator::new(WorkloadMix::new(base, share).unwrap(), KeyChoice::Zipfian(0.99), 10_000).unwrap();
    let mut rng = worker_rng(seed, 0);
    let mut t = Tally { scan_len: vec![0; MAX_SCAN as usize + 1], ..Tally::default() };
    for _ in 0..DRAWS {
        match gen.next_op(&mut rng) {
            Op::Read { rank } => {
                assert!(rank < 10_000);
                t.read += 1
            }
            Op::Update { .. } => t.update += 1,
            Op::Scan { len, .. } => {
                t.scan += 1;
                t.scan_len[len as usize] += 1;
            }
            Op::Insert => t.insert += 1,
            Op::Migrate => t.migrate += 1,
        }
    }
    t
}

fn frac(n: u64) -> f64 {
    n as f64 / DRAWS as f64
}

/// Pearson statistic of `observed` against `probs`.
fn chi_square(observed: &[u64], probs: &[f64]) -> f64 {
    let total: u64 = observed.iter().sum();
    observed
        .iter()
        .zip(probs)
        .map(|(&o, &p)| {
            let e = p * total as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum()
}

#[test]
fn ycsb_a_without_migration_is_half_reads() {
    let t = tally(BaseMix::YcsbA, 0.0, 1);
    assert!((frac(t.read) - 0.5).abs() <= 0.01, "{}", frac(t.read));
    assert_eq!(t.read + t.update, DRAWS);
    assert_eq!(t.migrate + t.scan + t.insert, 0);
}

#[test]
fn migration_share_is_honoured() {
    let t = tally(BaseMix::YcsbA, 0.25, 2);
    assert!((frac(t.migrate) - 0.25).abs() <= 0.01, "{}", frac(t.migrate));
    // 99.9% critical value with two degrees of freedom.
    let x2 = chi_square(&[t.migrate, t.read, t.update], &[0.25, 0.375, 0.375]);
    assert!(x2 < 13.82, "chi-square {x2}");
}

#[test]
fn ycsb_c_reads_only() {
    let t = tally(BaseMix::YcsbC, MigLoad::Medium.share(), 3);
    assert_eq!(t.read + t.migrate, DRAWS);
    assert!((frac(t.migrate) - 0.25).abs() <= 0.01);
}

#[test]
fn ycsb_e_scans_and_inserts() {
    let t = tally(BaseMix::YcsbE, MigLoad::High.share(), 4);
    let x2 = chi_square(&[t.migrate, t.scan, t.insert], &[0.5, 0.5 * 0.95, 0.5 * 0.05]);
    assert!(x2 < 13.82, "chi-square {x2}");
    // Scan lengths are uniform on 1..=MAX_SCAN; 99.9% critical value for 99 dof.
    let probs = vec![1.0 / MAX_SCAN as f64; MAX_SCAN as usize];
    let x2 = chi_square(&t.scan_len[1..], &probs);
    assert_eq!(t.scan_len[0], 0);
    assert!(x2 < 148.2, "chi-square {x2}");
}

#[test]
fn zipf_ranks_are_skewed_but_cover_the_window() {
    let gen = OpGenerator::new(WorkloadMix::new(BaseMix::YcsbC, 0.0).unwrap(), KeyChoice::Zipfian(0.99), 1_000).unwrap();
    let mut rng = worker_rng(7, 0);
    let mut hits = vec![0u64; 1_000];
    for _ in 0..200_000 {
        hits[gen.rank(&mut rng) as usize] += 1;
    }
    hits.sort_unstable_by(|a, b| b.cmp(a));
    // theta 0.99 over 1000 keys puts roughly 13% of the mass on the top key.
    let top = hits[0] as f64 / 200_000.0;
    assert!((0.11..0.16).contains(&top), "{top}");
    // Hashed ranks collide, so about 1 - 1/e of the slots are reachable.
    let covered = hits.iter().filter(|&&h| h > 0).count();
    assert!((550..700).contains(&covered), "{covered}");
}

#[test]
fn one_worker_is_deterministic() {
    let run = |variant| {
        let mm = MemoryModel::new(Topology::dual_socket(2, 4096));
        let tree = BTree::load(&mm, 20_000, KeyDist::Scattered, Placement::Blocks(64)).unwrap();
        let keys: Vec<u64> = tree.full_scan().into_iter().map(|(k, _)| k).collect();
        let engine = Engine::default();
        let mut cfg = WorkloadConfig::new(WorkloadMix::preset(BaseMix::YcsbE, MigLoad::High), variant);
        cfg.pages_per_query = 16;
        cfg.seed = 42;
        let mut w = Worker::new(0, CoreId(0), &tree, &engine, &keys, cfg).unwrap();
        w.run(3_000);
        (w.metrics, tree.full_scan(), mm.mapped_frames_per_node())
    };
    for variant in [Variant::MovePages, Variant::MovePages2] {
        let (a, b) = (run(variant), run(variant));
        assert!(a.0.migration_queries > 0);
        assert_eq!(a, b);
    }
}
