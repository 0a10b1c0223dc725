//! The finished task hierarchy and its file formats.
//!
//! Hierarchy file, one node per line in pre-order:
//!
//! ```text
//! node_id \t parent_id \t child_order \t query_ids \t loglik \t pmi_score
//! ```
//!
//! `parent_id` is `-1` for roots, whose `child_order` is their position among
//! the roots. `query_ids` is filled for leaves only (comma-joined). An empty
//! `pmi_score` means the hierarchy has not been scored by pruning yet.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use crate::artifact::ArtifactHeader;
use crate::error::{Error, Result};
use crate::query_log::{LogCorpus, QueryId};
use crate::rose_tree::NodeId;

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Sorted query ids at or below this node.
    pub leaf_queries: Vec<QueryId>,
    pub loglik: f64,
    pub pmi_score: Option<f64>,
}

impl HierarchyNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// A forest of rose trees over query ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    nodes: BTreeMap<NodeId, HierarchyNode>,
    roots: Vec<NodeId>,
}

impl Hierarchy {
    /// Assembles a hierarchy, checking parent/child links and that leaf query
    /// sets are disjoint unions of their children's.
    pub fn from_nodes(nodes: Vec<HierarchyNode>, roots: Vec<NodeId>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for n in nodes {
            let id = n.id;
            if map.insert(id, n).is_some() {
                return Err(Error::Config(format!("duplicate node id {id}")));
            }
        }
        let h = Hierarchy { nodes: map, roots };
        h.check()?;
        Ok(h)
    }

    fn check(&self) -> Result<()> {
        for &r in &self.roots {
            let node = self.nodes.get(&r).ok_or(Error::UnknownNode(r))?;
            if node.parent.is_some() {
                return Err(Error::Config(format!("root {r} has a parent")));
            }
        }
        let mut reached = 0usize;
        let mut stack: Vec<NodeId> = self.roots.clone();
        while let Some(id) = stack.pop() {
            reached += 1;
            let node = &self.nodes[&id];
            if node.children.len() == 1 {
                return Err(Error::Config(format!("node {id} has a single child")));
            }
            if node.is_leaf() {
                if node.leaf_queries.is_empty() {
                    return Err(Error::Config(format!("leaf {id} holds no queries")));
                }
                continue;
            }
            let mut union = Vec::new();
            for &c in &node.children {
                let child = self.nodes.get(&c).ok_or(Error::UnknownNode(c))?;
                if child.parent != Some(id) {
                    return Err(Error::Config(format!("node {c} does not point back to parent {id}")));
                }
                union.extend_from_slice(&child.leaf_queries);
                stack.push(c);
            }
            union.sort_unstable();
            if union != node.leaf_queries {
                return Err(Error::Config(format!(
                    "queries of node {id} are not the disjoint union of its children's"
                )));
            }
        }
        if reached != self.nodes.len() {
            return Err(Error::Config("hierarchy contains unreachable nodes".into()));
        }
        let mut all: Vec<QueryId> = self
            .roots
            .iter()
            .flat_map(|r| self.nodes[r].leaf_queries.iter().copied())
            .collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        if all.len() != n {
            return Err(Error::Config("a query appears under two roots".into()));
        }
        Ok(())
    }

    pub fn roots(&self) -> &[NodeId] {
        &self.roots
    }

    pub fn node(&self, id: NodeId) -> Option<&HierarchyNode> {
        self.nodes.get(&id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &HierarchyNode> {
        self.nodes.values()
    }

    /// All query ids covered by the hierarchy, sorted.
    pub fn query_ids(&self) -> Vec<QueryId> {
        let mut all: Vec<QueryId> = self
            .roots
            .iter()
            .flat_map(|r| self.nodes[r].leaf_queries.iter().copied())
            .collect();
        all.sort_unstable();
        all
    }

    /// Node ids in pre-order: roots in order, children in child order.
    pub fn preorder(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack: Vec<NodeId> = self.roots.iter().rev().copied().collect();
        while let Some(id) = stack.pop() {
            out.push(id);
            stack.extend(self.nodes[&id].children.iter().rev());
        }
        out
    }

    /// Childless nodes in pre-order; each is one bottom-level task.
    pub fn bottom_nodes(&self) -> Vec<NodeId> {
        self.preorder()
            .into_iter()
            .filter(|id| self.nodes[id].is_leaf())
            .collect()
    }

    /// Depth of the deepest node (roots have depth 0).
    pub fn depth(&self) -> usize {
        fn go(h: &Hierarchy, id: NodeId) -> usize {
            h.nodes[&id]
                .children
                .iter()
                .map(|&c| 1 + go(h, c))
                .max()
                .unwrap_or(0)
        }
        self.roots.iter().map(|&r| go(self, r)).max().unwrap_or(0)
    }

    /// Chain of ancestors from `id` (inclusive) up to its root.
    pub fn ancestors(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes.get(&cur).and_then(|n| n.parent) {
            out.push(p);
            cur = p;
        }
        out
    }

    /// Map from query id to the bottom-level node that holds it.
    pub fn query_to_bottom_node(&self) -> HashMap<QueryId, NodeId> {
        let mut out = HashMap::new();
        for id in self.bottom_nodes() {
            for &q in &self.nodes[&id].leaf_queries {
                out.insert(q, id);
            }
        }
        out
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> Option<&mut HierarchyNode> {
        self.nodes.get_mut(&id)
    }

    /// Removes every descendant of `id`, turning it into a leaf.
    pub(crate) fn flatten(&mut self, id: NodeId) {
        let mut stack = std::mem::take(&mut self.nodes.get_mut(&id).expect("node exists").children);
        while let Some(c) = stack.pop() {
            if let Some(node) = self.nodes.remove(&c) {
                stack.extend(node.children);
            }
        }
    }

    pub fn write_to<W: Write>(&self, mut out: W, header: &ArtifactHeader) -> Result<()> {
        writeln!(out, "{header}")?;
        let mut line = String::new();
        for id in self.preorder() {
            let node = &self.nodes[&id];
            let (parent, order) = match node.parent {
                None => (
                    "-1".to_string(),
                    self.roots.iter().position(|&r| r == id).expect("root listed"),
                ),
                Some(p) => (
                    p.to_string(),
                    self.nodes[&p]
                        .children
                        .iter()
                        .position(|&c| c == id)
                        .expect("child listed"),
                ),
            };
            line.clear();
            write!(line, "{id}\t{parent}\t{order}\t").unwrap();
            if node.is_leaf() {
                let ids: Vec<String> = node.leaf_queries.iter().map(u32::to_string).collect();
                line.push_str(&ids.join(","));
            }
            write!(line, "\t{}\t", node.loglik).unwrap();
            if let Some(s) = node.pmi_score {
                write!(line, "{s}").unwrap();
            }
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_file_string(&self, header: &ArtifactHeader) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf, header)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("hierarchy text is utf-8")
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        const WHAT: &str = "hierarchy file";
        struct Row {
            id: NodeId,
            parent: Option<NodeId>,
            order: usize,
            queries: Vec<QueryId>,
            loglik: f64,
            pmi: Option<f64>,
        }
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(input).lines().enumerate() {
            let line = line?;
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let n = i + 1;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::format(WHAT, n, format!("expected 6 fields, found {}", f.len())));
            }
            let bad = |field: &str, e: &dyn std::fmt::Display| Error::format(WHAT, n, format!("{field}: {e}"));
            let id = f[0].parse::<NodeId>().map_err(|e| bad("node_id", &e))?;
            let parent = match f[1] {
                "-1" => None,
                p => Some(p.parse::<NodeId>().map_err(|e| bad("parent_id", &e))?),
            };
            let order = f[2].parse::<usize>().map_err(|e| bad("child_order", &e))?;
            let queries = if f[3].is_empty() {
                Vec::new()
            } else {
                f[3].split(',')
                    .map(|q| q.parse::<QueryId>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| bad("query_ids", &e))?
            };
            let loglik = f[4].parse::<f64>().map_err(|e| bad("loglik", &e))?;
            let pmi = if f[5].is_empty() {
                None
            } else {
                Some(f[5].parse::<f64>().map_err(|e| bad("pmi_score", &e))?)
            };
            rows.push(Row {
                id,
                parent,
                order,
                queries,
                loglik,
                pmi,
            });
        }

        let mut roots: Vec<(usize, NodeId)> = Vec::new();
        let mut children: HashMap<NodeId, Vec<(usize, NodeId)>> = HashMap::new();
        for r in &rows {
            match r.parent {
                None => roots.push((r.order, r.id)),
                Some(p) => children.entry(p).or_default().push((r.order, r.id)),
            }
        }
        roots.sort_unstable();
        let mut nodes: HashMap<NodeId, HierarchyNode> = HashMap::new();
        for r in rows {
            let mut kids = children.remove(&r.id).unwrap_or_default();
            kids.sort_unstable();
            let mut leaf_queries = r.queries;
            leaf_queries.sort_unstable();
            nodes.insert(
                r.id,
                HierarchyNode {
                    id: r.id,
                    parent: r.parent,
                    children: kids.into_iter().map(|(_, c)| c).collect(),
                    leaf_queries,
                    loglik: r.loglik,
                    pmi_score: r.pmi,
                },
            );
        }
        if let Some((&p, _)) = children.iter().next() {
            return Err(Error::UnknownNode(p));
        }
        // Fill internal nodes' query sets bottom-up.
        let roots: Vec<NodeId> = roots.into_iter().map(|(_, id)| id).collect();
        let mut order = Vec::new();
        let mut stack = roots.clone();
        while let Some(id) = stack.pop() {
            order.push(id);
            let node = nodes.get(&id).ok_or(Error::UnknownNode(id))?;
            stack.extend(node.children.iter().copied());
        }
        for &id in order.iter().rev() {
            let kids = nodes[&id].children.clone();
            if kids.is_empty() {
                continue;
            }
            let mut union: Vec<QueryId> = kids
                .iter()
                .flat_map(|c| nodes[c].leaf_queries.iter().copied())
                .collect();
            union.sort_unstable();
            nodes.get_mut(&id).expect("present").leaf_queries = union;
        }
        Hierarchy::from_nodes(nodes.into_values().collect(), roots)
    }

    /// Graphviz rendering. With a corpus, nodes are labelled with their most
    /// frequent terms.
    pub fn to_dot(&self, corpus: Option<&LogCorpus>) -> String {
        let mut s = String::from("digraph taskforest {\n  node [shape=box];\n");
        for id in self.preorder() {
            let node = &self.nodes[&id];
            let mut label = format!("{id} ({} queries)", node.leaf_queries.len());
            if let Some(c) = corpus {
                let terms = top_terms(c, &node.leaf_queries, 3);
                if !terms.is_empty() {
                    label.push_str("\\n");
                    label.push_str(&terms.join(" "));
                }
            }
            if let Some(p) = node.pmi_score {
                write!(label, "\\npmi={p:.3}").unwrap();
            }
            writeln!(s, "  n{id} [label=\"{}\"];", label.replace('"', "'")).unwrap();
            for c in &node.children {
                writeln!(s, "  n{id} -> n{c};").unwrap();
            }
        }
        s.push_str("}\n");
        s
    }
}

/// Up to `k` most frequent terms over `queries`, ties broken alphabetically.
pub fn top_terms(corpus: &LogCorpus, queries: &[QueryId], k: usize) -> Vec<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for &q in queries {
        if let Some(query) = corpus.queries().get(q as usize) {
            for t in &query.terms {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let mut v: Vec<(&str, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    v.into_iter().take(k).map(|(t, _)| t.to_string()).collect()
}
