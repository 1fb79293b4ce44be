//! TOML topology files.
//!
//! ```toml
//! tlb_miss_ns = 50
//! latency_ns = [[100, 400], [400, 100]]
//!
//! [[nodes]]
//! id = 0
//! frames = 16384
//! kind = "dram"
//!
//! [[cores]]
//! id = 0
//! node = 0
//! ```

use std::path::Path;

use pagemig_core::topology::{NodeKind, NodeSpec, CoreSpec, Topology, TopologyError, TopologySpec, DEFAULT_TLB_MISS_NS};
use pagemig_core::{CoreId, NodeId};
use toml::{Table, Value};

#[derive(Debug, thiserror::Error)]
pub enum TopoFileError {
    #[error("cannot read topology file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("topology file is not valid TOML: {0}")]
    Syntax(String),
    /// `key` is a dotted path such as `nodes[1].frames`.
    #[error("topology key `{key}`: {reason}")]
    Key { key: String, reason: String },
    #[error(transparent)]
    Invalid(#[from] TopologyError),
}

impl TopoFileError {
    /// The config key the error points at, if any.
    pub fn key(&self) -> Option<&str> {
        match self {
            TopoFileError::Key { key, .. } => Some(key),
            TopoFileError::Invalid(TopologyError::MalformedConfig { key, .. }) => Some(key),
            _ => None,
        }
    }
}

fn key_err(key: impl Into<String>, reason: impl Into<String>) -> TopoFileError {
    TopoFileError::Key { key: key.into(), reason: reason.into() }
}

fn uint(v: &Value, key: &str, max: u64) -> Result<u64, TopoFileError> {
    match v.as_integer() {
        Some(i) if i >= 0 && (i as u64) <= max => Ok(i as u64),
        Some(i) => Err(key_err(key, format!("{i} is out of range 0..={max}"))),
        None => Err(key_err(key, format!("expected an integer, found {}", v.type_str()))),
    }
}

fn field<'a>(t: &'a Table, name: &str, key: &str) -> Result<&'a Value, TopoFileError> {
    t.get(name).ok_or_else(|| key_err(format!("{key}.{name}"), "missing"))
}

fn tables<'a>(root: &'a Table, name: &str) -> Result<Vec<&'a Table>, TopoFileError> {
    let arr = root.get(name).ok_or_else(|| key_err(name, "missing"))?;
    let arr = arr.as_array().ok_or_else(|| key_err(name, "expected an array of tables"))?;
    arr.iter()
        .enumerate()
        .map(|(i, v)| v.as_table().ok_or_else(|| key_err(format!("{name}[{i}]"), "expected a table")))
        .collect()
}

pub fn parse_topology(text: &str) -> Result<Topology, TopoFileError> {
    let root: Table = text.parse().map_err(|e: toml::de::Error| TopoFileError::Syntax(e.message().to_string()))?;
    for k in root.keys() {
        if !matches!(k.as_str(), "nodes" | "cores" | "latency_ns" | "tlb_miss_ns") {
            return Err(key_err(k.as_str(), "unknown key"));
        }
    }
    let mut nodes = Vec::new();
    for (i, t) in tables(&root, "nodes")?.into_iter().enumerate() {
        let at = format!("nodes[{i}]");
        let id = uint(field(t, "id", &at)?, &format!("{at}.id"), u16::MAX as u64)? as u16;
        let frames = uint(field(t, "frames", &at)?, &format!("{at}.frames"), u32::MAX as u64)? as u32;
        let kind = match t.get("kind") {
            None => NodeKind::Dram,
            Some(v) => match v.as_str() {
                Some("dram") => NodeKind::Dram,
                Some("cxl") => NodeKind::Cxl,
                _ => return Err(key_err(format!("{at}.kind"), "expected \"dram\" or \"cxl\"")),
            },
        };
        nodes.push(NodeSpec { id: NodeId(id), frames, kind });
    }
    let mut cores = Vec::new();
    for (i, t) in tables(&root, "cores")?.into_iter().enumerate() {
        let at = format!("cores[{i}]");
        let id = uint(field(t, "id", &at)?, &format!("{at}.id"), u16::MAX as u64)? as u16;
        let node = uint(field(t, "node", &at)?, &format!("{at}.node"), u16::MAX as u64)? as u16;
        cores.push(CoreSpec { id: CoreId(id), node: NodeId(node) });
    }
    let rows = root.get("latency_ns").ok_or_else(|| key_err("latency_ns", "missing"))?;
    let rows = rows.as_array().ok_or_else(|| key_err("latency_ns", "expected an array of rows"))?;
    let mut latency_ns = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let row = row.as_array().ok_or_else(|| key_err(format!("latency_ns[{r}]"), "expected an array"))?;
        let vals = row
            .iter()
            .enumerate()
            .map(|(c, v)| uint(v, &format!("latency_ns[{r}][{c}]"), u32::MAX as u64).map(|x| x as u32))
            .collect::<Result<Vec<_>, _>>()?;
        latency_ns.push(vals);
    }
    let tlb_miss_ns = match root.get("tlb_miss_ns") {
        None => DEFAULT_TLB_MISS_NS,
        Some(v) => uint(v, "tlb_miss_ns", u32::MAX as u64)? as u32,
    };
    Ok(Topology::new(TopologySpec { nodes, cores, latency_ns, tlb_miss_ns })?)
}

pub fn load_topology(path: &Path) -> Result<Topology, TopoFileError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| TopoFileError::Io { path: path.display().to_string(), source })?;
    parse_topology(&text)
}

/// Renders `topo` in the format [`parse_topology`] reads.
pub fn render_topology(topo: &Topology) -> String {
    let spec = topo.to_spec();
    let mut out = format!("tlb_miss_ns = {}\nlatency_ns = [\n", spec.tlb_miss_ns);
    for row in &spec.latency_ns {
        let cells: Vec<String> = row.iter().map(u32::to_string).collect();
        out.push_str(&format!("  [{}],\n", cells.join(", ")));
    }
    out.push_str("]\n");
    for n in &spec.nodes {
        out.push_str(&format!("\n[[nodes]]\nid = {}\nframes = {}\nkind = \"{}\"\n", n.id.0, n.frames, n.kind.as_str()));
    }
    for c in &spec.cores {
        out.push_str(&format!("\n[[cores]]\nid = {}\nnode = {}\n", c.id.0, c.node.0));
    }
    out
}
