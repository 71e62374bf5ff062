//! External-environment graph around one target function.
//!
//! Starting from the target, each expansion round visits the current
//! frontier of function nodes and links them to their call partners,
//! address neighbours, data co-users and used strings. Newly discovered
//! functions form the next frontier; strings are never expanded. Edge types:
//!
//! | type | meaning                         |
//! |------|---------------------------------|
//! | 0    | call (caller → callee)          |
//! | 1    | be-called (callee → caller)     |
//! | 2    | address-pre (higher → lower)    |
//! | 3    | address-post (lower → higher)   |
//! | 4    | data co-use (both directions)   |
//! | 5    | string use (string → function)  |

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::RelationIndex;
use crate::{Error, Result};

pub const NUM_EDGE_TYPES: usize = 6;
pub const DEFAULT_MAX_DEPTH: u32 = 4;
pub const DEFAULT_CO_USE_CAP: usize = 256;

pub const CALL: u8 = 0;
pub const BE_CALLED: u8 = 1;
pub const ADDR_PRE: u8 = 2;
pub const ADDR_POST: u8 = 3;
pub const DATA_CO_USE: u8 = 4;
pub const STRING_USE: u8 = 5;

/// Node of a binary: function or string, by position in the binary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeRef {
    Function(u32),
    String(u32),
}

impl NodeRef {
    pub fn is_function(self) -> bool {
        matches!(self, NodeRef::Function(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct EesgNode {
    pub node: NodeRef,
    /// Hop distance from the target at first discovery.
    pub depth: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EesgEdge {
    pub src: NodeRef,
    pub dst: NodeRef,
    pub etype: u8,
}

/// Set of enabled edge types.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeMask(u8);

impl EdgeMask {
    pub const ALL: EdgeMask = EdgeMask(0b11_1111);
    pub const NONE: EdgeMask = EdgeMask(0);

    pub fn contains(self, etype: u8) -> bool {
        self.0 & (1 << etype) != 0
    }

    pub fn without(self, etype: u8) -> EdgeMask {
        EdgeMask(self.0 & !(1 << etype))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn from_bits(bits: u8) -> EdgeMask {
        EdgeMask(bits & Self::ALL.0)
    }
}

impl Default for EdgeMask {
    fn default() -> Self {
        EdgeMask::ALL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EesgOptions {
    pub max_depth: u32,
    pub mask: EdgeMask,
    /// Per-function limit on enumerated co-use partners.
    pub co_use_cap: usize,
    /// Also add function → string type-5 edges.
    pub string_reverse_edges: bool,
}

impl Default for EesgOptions {
    fn default() -> Self {
        EesgOptions {
            max_depth: DEFAULT_MAX_DEPTH,
            mask: EdgeMask::ALL,
            co_use_cap: DEFAULT_CO_USE_CAP,
            string_reverse_edges: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Eesg {
    pub target: NodeRef,
    pub max_depth: u32,
    /// Sorted by node.
    pub nodes: Vec<EesgNode>,
    /// Sorted, no duplicates.
    pub edges: Vec<EesgEdge>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EesgStats {
    pub nodes: usize,
    pub function_nodes: usize,
    pub string_nodes: usize,
    pub edges: usize,
    pub edges_by_type: [usize; NUM_EDGE_TYPES],
    pub max_depth_reached: u32,
}

struct Builder<'a> {
    idx: &'a RelationIndex,
    opts: &'a EesgOptions,
    nodes: BTreeMap<NodeRef, u32>,
    edges: BTreeSet<EesgEdge>,
    next: Vec<u32>,
}

impl Builder<'_> {
    fn discover(&mut self, node: NodeRef, depth: u32) {
        if let std::collections::btree_map::Entry::Vacant(e) = self.nodes.entry(node) {
            e.insert(depth);
            if let NodeRef::Function(f) = node {
                self.next.push(f);
            }
        }
    }

    fn edge(&mut self, src: NodeRef, dst: NodeRef, etype: u8) {
        if self.opts.mask.contains(etype) {
            self.edges.insert(EesgEdge { src, dst, etype });
        }
    }

    fn expand(&mut self, n: u32, depth: u32) {
        let (idx, mask) = (self.idx, self.opts.mask);
        let me = NodeRef::Function(n);
        let d = depth + 1;

        if mask.contains(CALL) || mask.contains(BE_CALLED) {
            for &p in idx.call_out(n) {
                let p = NodeRef::Function(p);
                self.discover(p, d);
                self.edge(me, p, CALL);
                self.edge(p, me, BE_CALLED);
            }
            for &p in idx.call_in(n) {
                let p = NodeRef::Function(p);
                self.discover(p, d);
                self.edge(p, me, CALL);
                self.edge(me, p, BE_CALLED);
            }
        }
        if mask.contains(ADDR_PRE) || mask.contains(ADDR_POST) {
            if let Some(lo) = idx.address_pred(n) {
                let lo = NodeRef::Function(lo);
                self.discover(lo, d);
                self.edge(me, lo, ADDR_PRE);
                self.edge(lo, me, ADDR_POST);
            }
            if let Some(hi) = idx.address_succ(n) {
                let hi = NodeRef::Function(hi);
                self.discover(hi, d);
                self.edge(hi, me, ADDR_PRE);
                self.edge(me, hi, ADDR_POST);
            }
        }
        if mask.contains(DATA_CO_USE) {
            for &p in idx.co_use(n).iter().take(self.opts.co_use_cap) {
                let p = NodeRef::Function(p);
                self.discover(p, d);
                self.edge(me, p, DATA_CO_USE);
                self.edge(p, me, DATA_CO_USE);
            }
        }
        if mask.contains(STRING_USE) {
            for &s in idx.strings_used(n) {
                let s = NodeRef::String(s);
                self.discover(s, d);
                self.edge(s, me, STRING_USE);
                if self.opts.string_reverse_edges {
                    self.edge(me, s, STRING_USE);
                }
            }
        }
    }
}

/// Build the graph of the function with id `target`.
pub fn build_eesg(idx: &RelationIndex, target: &str, opts: &EesgOptions) -> Result<Eesg> {
    let t = idx
        .function_index(target)
        .ok_or_else(|| Error::UnknownFunction(target.to_owned()))?;
    Ok(build_eesg_at(idx, t, opts))
}

/// Build the graph of the function at position `target` of the indexed binary.
pub fn build_eesg_at(idx: &RelationIndex, target: u32, opts: &EesgOptions) -> Eesg {
    assert!(
        (target as usize) < idx.num_functions(),
        "target out of range"
    );
    let mut b = Builder {
        idx,
        opts,
        nodes: BTreeMap::from([(NodeRef::Function(target), 0)]),
        edges: BTreeSet::new(),
        next: Vec::new(),
    };
    let mut frontier = vec![target];
    for depth in 0..opts.max_depth {
        for &n in &frontier {
            b.expand(n, depth);
        }
        frontier = std::mem::take(&mut b.next);
        if frontier.is_empty() {
            break;
        }
    }
    Eesg {
        target: NodeRef::Function(target),
        max_depth: opts.max_depth,
        nodes: b
            .nodes
            .into_iter()
            .map(|(node, depth)| EesgNode { node, depth })
            .collect(),
        edges: b.edges.into_iter().collect(),
    }
}

pub fn eesg_stats(g: &Eesg) -> EesgStats {
    let mut edges_by_type = [0; NUM_EDGE_TYPES];
    for e in &g.edges {
        edges_by_type[e.etype as usize] += 1;
    }
    let function_nodes = g.nodes.iter().filter(|n| n.node.is_function()).count();
    EesgStats {
        nodes: g.nodes.len(),
        function_nodes,
        string_nodes: g.nodes.len() - function_nodes,
        edges: g.edges.len(),
        edges_by_type,
        max_depth_reached: g.nodes.iter().map(|n| n.depth).max().unwrap_or(0),
    }
}

impl Eesg {
    pub fn node_id<'a>(&self, idx: &'a RelationIndex, n: NodeRef) -> &'a str {
        match n {
            NodeRef::Function(f) => idx.function_id(f),
            NodeRef::String(s) => idx.string_id(s),
        }
    }

    /// Diff-stable JSON dump with edges sorted by (src id, dst id, type).
    pub fn debug_json(&self, idx: &RelationIndex) -> serde_json::Value {
        let nodes: Vec<_> = self
            .nodes
            .iter()
            .map(|n| {
                let kind = if n.node.is_function() {
                    "function"
                } else {
                    "string"
                };
                json!({"id": self.node_id(idx, n.node), "kind": kind, "depth": n.depth})
            })
            .collect();
        let mut edges: Vec<(&str, &str, u8)> = self
            .edges
            .iter()
            .map(|e| (self.node_id(idx, e.src), self.node_id(idx, e.dst), e.etype))
            .collect();
        edges.sort();
        json!({
            "target": self.node_id(idx, self.target),
            "nodes": nodes,
            "edges": edges.iter().map(|(s, d, t)| json!([s, d, t])).collect::<Vec<_>>(),
        })
    }
}
