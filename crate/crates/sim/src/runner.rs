//! Multi-threaded benchmark runs and the post-run integrity audit.

use std::collections::BTreeSet;

use pagemig_core::btree::{scatter_key, BTree, KeyDist, Placement, TreeError};
use pagemig_core::engine::{Engine, EngineConfig};
use pagemig_core::memory::MemoryModel;
use pagemig_core::topology::Topology;
use pagemig_core::workload::{ConfigError, RunMetrics, Worker, WorkerMetrics, WorkloadConfig};
use pagemig_core::CoreId;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{threads} threads requested but the topology has {cores} cores")]
    TooManyThreads { threads: u32, cores: usize },
    #[error("threads must be at least 1")]
    NoThreads,
    #[error("loading the tree: {0}")]
    Load(#[from] TreeError),
}

/// Everything one run needs.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub topology: Topology,
    pub records: u64,
    pub threads: u32,
    /// Operations summed over all workers, migration queries included.
    pub ops: u64,
    pub workload: WorkloadConfig,
    pub engine: EngineConfig,
    pub placement: Placement,
}

/// Post-run checks. `passed()` requires all of them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Integrity {
    pub isolated_pages: usize,
    /// Nodes whose used + free frames differ from capacity, or whose used
    /// frames differ from the pages mapped there.
    pub conservation_violations: Vec<u16>,
    pub lost_keys: usize,
    pub unexpected_keys: usize,
    pub duplicate_keys: usize,
    pub structure: Result<(), String>,
}

impl Integrity {
    pub fn passed(&self) -> bool {
        self.isolated_pages == 0
            && self.conservation_violations.is_empty()
            && self.lost_keys == 0
            && self.unexpected_keys == 0
            && self.duplicate_keys == 0
            && self.structure.is_ok()
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub metrics: RunMetrics,
    pub workers: Vec<WorkerMetrics>,
    pub integrity: Integrity,
    pub tree_height: u32,
}

/// Loaded keys in ascending order, as [`BTree::load`] with
/// [`KeyDist::Scattered`] creates them.
pub fn loaded_keys(records: u64) -> Vec<u64> {
    let mut keys: Vec<u64> = (0..records).map(scatter_key).collect();
    keys.sort_unstable();
    keys
}

pub fn run(spec: &RunSpec) -> Result<RunReport, RunError> {
    spec.workload.validate()?;
    if spec.threads == 0 {
        return Err(RunError::NoThreads);
    }
    let cores = spec.topology.core_count();
    if spec.threads as usize > cores {
        return Err(RunError::TooManyThreads { threads: spec.threads, cores });
    }
    let mm = MemoryModel::new(spec.topology.clone());
    let tree = BTree::load(&mm, spec.records, KeyDist::Scattered, spec.placement)?;
    let keys = loaded_keys(spec.records);
    let engine = Engine::new(spec.engine);

    let threads = spec.threads as u64;
    let mut workers = Vec::with_capacity(spec.threads as usize);
    for i in 0..spec.threads {
        workers.push(Worker::new(i, spread_core(&spec.topology, i), &tree, &engine, &keys, spec.workload)?);
    }
    let share = |i: u64| spec.ops / threads + u64::from(i < spec.ops % threads);
    let metrics: Vec<WorkerMetrics> = if spec.threads == 1 {
        let mut w = workers.pop().expect("one worker");
        w.run(share(0));
        vec![w.metrics]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = workers
                .into_iter()
                .enumerate()
                .map(|(i, mut w)| {
                    let n = share(i as u64);
                    s.spawn(move || {
                        w.run(n);
                        w.metrics
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        })
    };
    let integrity = audit(&mm, &tree, &keys, &metrics);
    Ok(RunReport { metrics: RunMetrics::aggregate(&metrics), tree_height: tree.height(), workers: metrics, integrity })
}

/// Places worker `i` so consecutive workers alternate between nodes.
pub fn spread_core(topo: &Topology, i: u32) -> CoreId {
    let nodes = topo.compute_nodes();
    let node = nodes[i as usize % nodes.len()];
    let on = topo.cores_on(node);
    on[(i as usize / nodes.len()) % on.len()]
}

pub fn audit(mm: &MemoryModel, tree: &BTree<'_>, loaded: &[u64], workers: &[WorkerMetrics]) -> Integrity {
    let mapped = mm.mapped_frames_per_node();
    let conservation_violations = mm
        .topology()
        .nodes()
        .iter()
        .filter(|n| {
            let u = mm.frame_usage(n.id);
            u.in_use + u.free != u.capacity || u.in_use != mapped[n.id.0 as usize]
        })
        .map(|n| n.id.0)
        .collect();
    let mut expected: BTreeSet<u64> = loaded.iter().copied().collect();
    for w in workers {
        expected.extend(w.inserted.iter().copied());
    }
    let scan = tree.full_scan();
    let mut seen = BTreeSet::new();
    let mut duplicate_keys = 0;
    for &(k, _) in &scan {
        if !seen.insert(k) {
            duplicate_keys += 1;
        }
    }
    Integrity {
        isolated_pages: mm.isolated_count(),
        conservation_violations,
        lost_keys: expected.difference(&seen).count(),
        unexpected_keys: seen.difference(&expected).count(),
        duplicate_keys,
        structure: tree.check_invariants(),
    }
}
