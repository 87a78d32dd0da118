//! Multi-source heterogeneous knowledge graph.
//!
//! Six node kinds (concepts, question groups, questions, students, ability
//! levels, difficulty levels) joined by typed edges. Only concept-to-concept
//! prerequisite edges are directed; traversal treats every edge as
//! bidirectional.

mod build;
mod bundle;
mod kc;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use build::{
    assign_question_group, build_from_interactions, build_knowledge_base, qg_key, BuildConfig, BuildManifest,
    KnowledgeBase, QuestionInfo, SourceRecord,
};
pub use bundle::{load_bundle, persist_bundle, BUNDLE_FILES};
pub use kc::{
    judge_prompt, kc_match, load_kc_graph, normalize_label, ConceptJudge, KcGraph, KcMatch,
    MatchMethod, Matcher, SimilarityBackend, TokenJaccard, DEFAULT_MATCH_THRESHOLD,
};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum NodeKind {
    K,
    QG,
    Q,
    S,
    A,
    D,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::K => "K",
            NodeKind::QG => "QG",
            NodeKind::Q => "Q",
            NodeKind::S => "S",
            NodeKind::A => "A",
            NodeKind::D => "D",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub kind: NodeKind,
    pub key: String,
}

impl NodeId {
    pub fn new(kind: NodeKind, key: impl Into<String>) -> Self {
        Self {
            kind,
            key: key.into(),
        }
    }

    pub fn concept(key: impl Into<String>) -> Self {
        Self::new(NodeKind::K, key)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.key)
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum EdgeKind {
    #[serde(rename = "K_K_prereq")]
    KKPrereq,
    #[serde(rename = "K_K_assoc")]
    KKAssoc,
    #[serde(rename = "S_A")]
    SA,
    #[serde(rename = "S_QG")]
    SQG,
    #[serde(rename = "QG_D")]
    QGD,
    #[serde(rename = "QG_K")]
    QGK,
    #[serde(rename = "Q_QG")]
    QQG,
}

impl EdgeKind {
    /// Required (from, to) node kinds.
    pub fn endpoints(self) -> (NodeKind, NodeKind) {
        match self {
            EdgeKind::KKPrereq | EdgeKind::KKAssoc => (NodeKind::K, NodeKind::K),
            EdgeKind::SA => (NodeKind::S, NodeKind::A),
            EdgeKind::SQG => (NodeKind::S, NodeKind::QG),
            EdgeKind::QGD => (NodeKind::QG, NodeKind::D),
            EdgeKind::QGK => (NodeKind::QG, NodeKind::K),
            EdgeKind::QQG => (NodeKind::Q, NodeKind::QG),
        }
    }

    pub fn is_concept_link(self) -> bool {
        matches!(self, EdgeKind::KKPrereq | EdgeKind::KKAssoc)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
    pub kind: EdgeKind,
    /// Attempt count on S_QG edges; 1 elsewhere.
    pub weight: u32,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: BTreeSet<NodeId>,
    edges: BTreeMap<(NodeId, NodeId, EdgeKind), u32>,
    adjacency: BTreeMap<NodeId, Vec<(NodeId, EdgeKind)>>,
}

/// Graphs are equal when their node and edge sets (with weights) are.
impl PartialEq for Graph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.edges == other.edges
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(nodes: impl IntoIterator<Item = NodeId>, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let mut g = Graph::new();
        for n in nodes {
            g.add_node(n);
        }
        for e in edges {
            g.add_edge(e.from, e.to, e.kind, e.weight)?;
        }
        Ok(g)
    }

    /// Returns true if the node was new.
    pub fn add_node(&mut self, node: NodeId) -> bool {
        self.nodes.insert(node)
    }

    pub fn contains(&self, node: &NodeId) -> bool {
        self.nodes.contains(node)
    }

    /// Adds an edge, or raises the weight of an existing one by `weight`.
    /// Undirected associative edges are stored with ordered endpoints.
    pub fn add_edge(&mut self, from: NodeId, to: NodeId, kind: EdgeKind, weight: u32) -> Result<()> {
        for n in [&from, &to] {
            if !self.nodes.contains(n) {
                return Err(Error::UnknownNode(n.to_string()));
            }
        }
        let (from, to) = if kind == EdgeKind::KKAssoc && to < from {
            (to, from)
        } else {
            (from, to)
        };
        let key = (from.clone(), to.clone(), kind);
        match self.edges.get_mut(&key) {
            Some(w) => *w += weight,
            None => {
                self.edges.insert(key, weight);
                self.adjacency.entry(from.clone()).or_default().push((to.clone(), kind));
                if from != to {
                    self.adjacency.entry(to).or_default().push((from, kind));
                }
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.iter()
    }

    pub fn nodes_of(&self, kind: NodeKind) -> impl Iterator<Item = &NodeId> {
        self.nodes.iter().filter(move |n| n.kind == kind)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges.iter().map(|((from, to, kind), w)| Edge {
            from: from.clone(),
            to: to.clone(),
            kind: *kind,
            weight: *w,
        })
    }

    pub fn edge_weight(&self, from: &NodeId, to: &NodeId, kind: EdgeKind) -> Option<u32> {
        self.edges.get(&(from.clone(), to.clone(), kind)).copied()
    }

    /// Neighbors over every edge kind, in both directions.
    pub fn neighbors(&self, node: &NodeId) -> impl Iterator<Item = (&NodeId, EdgeKind)> {
        self.adjacency
            .get(node)
            .into_iter()
            .flat_map(|v| v.iter().map(|(n, k)| (n, *k)))
    }

    /// All nodes within `hops` of `center`, center included.
    pub fn k_hop_subgraph(&self, center: &NodeId, hops: usize) -> Result<BTreeSet<NodeId>> {
        if !self.contains(center) {
            return Err(Error::UnknownNode(center.to_string()));
        }
        let mut seen = BTreeSet::from([center.clone()]);
        let mut frontier = vec![center];
        for _ in 0..hops {
            let mut next = Vec::new();
            for node in frontier {
                for (n, _) in self.neighbors(node) {
                    if seen.insert(n.clone()) {
                        next.push(n);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        Ok(seen)
    }

    /// Hop distances from concept `from` to every concept reachable over
    /// concept-to-concept edges within `cap` hops.
    pub fn concept_distances(&self, from: &str, cap: usize) -> Result<BTreeMap<String, usize>> {
        let start = NodeId::concept(from);
        if !self.contains(&start) {
            return Err(Error::UnknownNode(start.to_string()));
        }
        let mut dist = BTreeMap::from([(from.to_string(), 0usize)]);
        let mut queue = VecDeque::from([(start, 0usize)]);
        while let Some((node, d)) = queue.pop_front() {
            if d == cap {
                continue;
            }
            for (n, kind) in self.neighbors(&node) {
                if kind.is_concept_link() && !dist.contains_key(&n.key) {
                    dist.insert(n.key.clone(), d + 1);
                    queue.push_back((n.clone(), d + 1));
                }
            }
        }
        Ok(dist)
    }

    /// Shortest concept-to-concept hop count; `None` when unreachable within `cap`.
    pub fn shortest_kk_path_len(&self, k1: &str, k2: &str, cap: usize) -> Result<Option<usize>> {
        let target = NodeId::concept(k2);
        if !self.contains(&target) {
            return Err(Error::UnknownNode(target.to_string()));
        }
        Ok(self.concept_distances(k1, cap)?.get(k2).copied())
    }

    /// Restriction to concept nodes and concept-to-concept edges.
    pub fn concept_subgraph(&self) -> Graph {
        let mut g = Graph::new();
        for n in self.nodes_of(NodeKind::K) {
            g.add_node(n.clone());
        }
        for e in self.edges().filter(|e| e.kind.is_concept_link()) {
            g.add_edge(e.from, e.to, e.kind, e.weight)
                .expect("endpoints are concept nodes");
        }
        g
    }

    /// Full-graph schema sweep; returns one message per violation.
    pub fn schema_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut q_qg: BTreeMap<&NodeId, usize> = BTreeMap::new();
        let mut qg_d: BTreeMap<&NodeId, usize> = BTreeMap::new();
        let mut qg_k: BTreeMap<&NodeId, usize> = BTreeMap::new();
        for (from, to, kind) in self.edges.keys() {
            let (fk, tk) = kind.endpoints();
            if from.kind != fk || to.kind != tk {
                out.push(format!("edge {from} -> {to} has wrong endpoint kinds for {kind:?}"));
            }
            match kind {
                EdgeKind::QQG => *q_qg.entry(from).or_default() += 1,
                EdgeKind::QGD => *qg_d.entry(from).or_default() += 1,
                EdgeKind::QGK => *qg_k.entry(from).or_default() += 1,
                _ => {}
            }
        }
        for q in self.nodes_of(NodeKind::Q) {
            let n = q_qg.get(q).copied().unwrap_or(0);
            if n != 1 {
                out.push(format!("{q} has {n} Q_QG edges"));
            }
        }
        for qg in self.nodes_of(NodeKind::QG) {
            for (name, counts) in [("QG_D", &qg_d), ("QG_K", &qg_k)] {
                let n = counts.get(qg).copied().unwrap_or(0);
                if n != 1 {
                    out.push(format!("{qg} has {n} {name} edges"));
                }
            }
        }
        out
    }
}
