//! Simulated machine layout: nodes, cores and the access-latency matrix.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::ids::{CoreId, NodeId};

/// Base cost of a local DRAM access in nanoseconds.
pub const LOCAL_DRAM_NS: u32 = 100;
/// Remote socket or remote chiplet: four times local.
pub const REMOTE_NUMA_NS: u32 = 400;
/// CXL-attached memory: five times local.
pub const CXL_NS: u32 = 500;
/// Page-table walk surcharge paid on a TLB miss.
pub const DEFAULT_TLB_MISS_NS: u32 = 50;

/// Highest node count the page-table encoding can address.
pub const MAX_NODES: usize = 254;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Dram,
    Cxl,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Dram => "dram",
            NodeKind::Cxl => "cxl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub id: NodeId,
    /// Capacity in 4 KB frames.
    pub frames: u32,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoreSpec {
    pub id: CoreId,
    pub node: NodeId,
}

/// Unvalidated topology description, as read from a config file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopologySpec {
    pub nodes: Vec<NodeSpec>,
    pub cores: Vec<CoreSpec>,
    /// Row-major: `latency_ns[accessing node][page node]`.
    pub latency_ns: Vec<Vec<u32>>,
    pub tlb_miss_ns: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopologyError {
    /// The offending config key plus a short reason.
    MalformedConfig { key: &'static str, reason: String },
}

impl TopologyError {
    fn malformed(key: &'static str, reason: impl ToString) -> Self {
        TopologyError::MalformedConfig {
            key,
            reason: reason.to_string(),
        }
    }
}

impl fmt::Display for TopologyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologyError::MalformedConfig { key, reason } => {
                write!(f, "malformed topology config at `{key}`: {reason}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TopologyError {}

/// Validated, immutable machine description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    nodes: Vec<NodeSpec>,
    cores: Vec<CoreSpec>,
    latency: Vec<u32>,
    tlb_miss_ns: u32,
}

impl Topology {
    pub fn new(spec: TopologySpec) -> Result<Self, TopologyError> {
        let n = spec.nodes.len();
        if n == 0 {
            return Err(TopologyError::malformed("nodes", "at least one node is required"));
        }
        if n > MAX_NODES {
            return Err(TopologyError::malformed("nodes", "too many nodes"));
        }
        for (i, node) in spec.nodes.iter().enumerate() {
            if node.id.0 as usize != i {
                return Err(TopologyError::malformed(
                    "nodes",
                    alloc::format!("node ids must be 0..{n} in order, found {} at position {i}", node.id.0),
                ));
            }
            if node.frames >= (1 << 24) {
                return Err(TopologyError::malformed("nodes", "frame count must be below 2^24"));
            }
        }
        for (i, c) in spec.cores.iter().enumerate() {
            if c.id.0 as usize != i {
                return Err(TopologyError::malformed(
                    "cores",
                    alloc::format!("core ids must be 0..{} in order", spec.cores.len()),
                ));
            }
            if c.node.0 as usize >= n {
                return Err(TopologyError::malformed(
                    "cores",
                    alloc::format!("core {} names missing node {}", c.id.0, c.node.0),
                ));
            }
        }
        if spec.cores.is_empty() {
            return Err(TopologyError::malformed("cores", "at least one core is required"));
        }
        if spec.latency_ns.len() != n {
            return Err(TopologyError::malformed(
                "latency_ns",
                alloc::format!("expected {n} rows, found {}", spec.latency_ns.len()),
            ));
        }
        let mut latency = Vec::with_capacity(n * n);
        for (r, row) in spec.latency_ns.iter().enumerate() {
            if row.len() != n {
                return Err(TopologyError::malformed(
                    "latency_ns",
                    alloc::format!("row {r} has {} entries, expected {n}", row.len()),
                ));
            }
            if row.contains(&0) {
                return Err(TopologyError::malformed("latency_ns", "latencies must be positive"));
            }
            if row.iter().any(|&v| v < row[r]) {
                return Err(TopologyError::malformed(
                    "latency_ns",
                    alloc::format!("row {r}: local latency exceeds a remote entry"),
                ));
            }
            latency.extend_from_slice(row);
        }
        Ok(Topology {
            nodes: spec.nodes,
            cores: spec.cores,
            latency,
            tlb_miss_ns: spec.tlb_miss_ns,
        })
    }

    /// Two sockets, `cores_per_node` cores each, 4x remote penalty.
    pub fn dual_socket(cores_per_node: u16, frames_per_node: u32) -> Self {
        Self::symmetric(2, cores_per_node, frames_per_node, REMOTE_NUMA_NS)
    }

    /// Single node: every access is local.
    pub fn uma(cores: u16, frames: u32) -> Self {
        Self::symmetric(1, cores, frames, LOCAL_DRAM_NS)
    }

    /// `chiplets` compute dies behind one package, 4x cross-die penalty.
    pub fn chiplet(chiplets: u16, cores_per_chiplet: u16, frames_per_chiplet: u32) -> Self {
        Self::symmetric(chiplets, cores_per_chiplet, frames_per_chiplet, REMOTE_NUMA_NS)
    }

    /// One DRAM node with cores plus one core-less CXL node.
    pub fn tiered(cores: u16, dram_frames: u32, cxl_frames: u32) -> Self {
        let spec = TopologySpec {
            nodes: alloc::vec![
                NodeSpec { id: NodeId(0), frames: dram_frames, kind: NodeKind::Dram },
                NodeSpec { id: NodeId(1), frames: cxl_frames, kind: NodeKind::Cxl },
            ],
            cores: (0..cores).map(|c| CoreSpec { id: CoreId(c), node: NodeId(0) }).collect(),
            latency_ns: alloc::vec![
                alloc::vec![LOCAL_DRAM_NS, CXL_NS],
                alloc::vec![CXL_NS, LOCAL_DRAM_NS],
            ],
            tlb_miss_ns: DEFAULT_TLB_MISS_NS,
        };
        Topology::new(spec).expect("tiered preset is valid")
    }

    fn symmetric(nodes: u16, cores_per_node: u16, frames: u32, remote: u32) -> Self {
        let n = nodes as usize;
        let spec = TopologySpec {
            nodes: (0..nodes)
                .map(|i| NodeSpec { id: NodeId(i), frames, kind: NodeKind::Dram })
                .collect(),
            cores: (0..nodes * cores_per_node)
                .map(|c| CoreSpec { id: CoreId(c), node: NodeId(c / cores_per_node) })
                .collect(),
            latency_ns: (0..n)
                .map(|r| (0..n).map(|c| if r == c { LOCAL_DRAM_NS } else { remote }).collect())
                .collect(),
            tlb_miss_ns: DEFAULT_TLB_MISS_NS,
        };
        Topology::new(spec).expect("symmetric preset is valid")
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn core_count(&self) -> usize {
        self.cores.len()
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn cores(&self) -> &[CoreSpec] {
        &self.cores
    }

    pub fn has_node(&self, node: NodeId) -> bool {
        (node.0 as usize) < self.nodes.len()
    }

    pub fn node(&self, node: NodeId) -> Option<&NodeSpec> {
        self.nodes.get(node.0 as usize)
    }

    pub fn core_node(&self, core: CoreId) -> NodeId {
        self.cores[core.0 as usize].node
    }

    /// Nodes that host at least one core, in id order.
    pub fn compute_nodes(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .map(|n| n.id)
            .filter(|id| self.cores.iter().any(|c| c.node == *id))
            .collect()
    }

    /// Cores homed on `node`, in id order.
    pub fn cores_on(&self, node: NodeId) -> Vec<CoreId> {
        self.cores.iter().filter(|c| c.node == node).map(|c| c.id).collect()
    }

    pub fn latency(&self, from: NodeId, to: NodeId) -> u32 {
        self.latency[from.0 as usize * self.nodes.len() + to.0 as usize]
    }

    pub fn latency_row(&self, from: NodeId) -> &[u32] {
        let n = self.nodes.len();
        &self.latency[from.0 as usize * n..(from.0 as usize + 1) * n]
    }

    pub fn tlb_miss_ns(&self) -> u32 {
        self.tlb_miss_ns
    }

    pub fn total_frames(&self) -> u64 {
        self.nodes.iter().map(|n| n.frames as u64).sum()
    }

    /// Converts back into the plain description (for serialisation).
    pub fn to_spec(&self) -> TopologySpec {
        TopologySpec {
            nodes: self.nodes.clone(),
            cores: self.cores.clone(),
            latency_ns: (0..self.nodes.len())
                .map(|r| self.latency_row(NodeId(r as u16)).to_vec())
                .collect(),
            tlb_miss_ns: self.tlb_miss_ns,
        }
    }
}
