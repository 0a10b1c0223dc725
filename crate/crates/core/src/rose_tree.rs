//! Greedy Bayesian rose-tree agglomeration.
//!
//! The engine starts from one leaf per query and repeatedly applies the merge
//! (pair of live trees plus one of four merge kinds) with the largest log
//! Bayes factor, stopping once no merge scores above zero.
//!
//! Engine layout:
//!
//! * Nodes live in an arena and are never mutated after creation. Every merge,
//!   including absorb and collapse, creates a fresh node id, so a candidate is
//!   stale exactly when one of its trees has been consumed.
//! * Each live tree keeps a map from its neighbours to the cross-pair affinity
//!   stats between them. Merged stats are assembled from these maps instead of
//!   being recomputed from leaves.
//! * With blocking on, two trees are neighbours only if they share a query
//!   term, session or clicked domain. Without blocking every pair of live
//!   trees is a neighbour.
//! * The heap holds, for each neighbouring pair, its best-scoring merge kind.
//!   Pairs scoring `<= 0` are never pushed: tree scores do not change while
//!   both trees are live, so such a pair can never be accepted.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rayon::prelude::*;

use crate::affinity::{AffinityModel, AffinityStats, BlockKey, EmbeddingTable};
use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, HierarchyNode};
use crate::likelihood::{
    fold_children, log_bayes_factor, merge_allowed, merged_node, MergedNode, ModelConfig,
    TreeSummary,
};
use crate::query_log::{LogCorpus, QueryId};

pub type NodeId = u32;

/// How two trees are combined. The declaration order is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MergeKind {
    /// New node with the two trees as its children.
    Join,
    /// The right tree becomes an extra child of the left tree's children.
    AbsorbLeft,
    /// The left tree becomes an extra child of the right tree's children.
    AbsorbRight,
    /// One node holding both trees' children.
    Collapse,
}

impl MergeKind {
    pub const ALL: [MergeKind; 4] = [
        MergeKind::Join,
        MergeKind::AbsorbLeft,
        MergeKind::AbsorbRight,
        MergeKind::Collapse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MergeKind::Join => "join",
            MergeKind::AbsorbLeft => "absorb-left",
            MergeKind::AbsorbRight => "absorb-right",
            MergeKind::Collapse => "collapse",
        }
    }
}

/// An owned rose tree with cached statistics and log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskTree {
    pub node_id: NodeId,
    pub children: Vec<TaskTree>,
    /// Sorted query ids at or below this node.
    pub leaf_queries: Vec<QueryId>,
    pub stats: AffinityStats,
    pub cached_loglik: f64,
}

impl TaskTree {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Number of nodes in the subtree.
    pub fn size(&self) -> usize {
        1 + self.children.iter().map(TaskTree::size).sum::<usize>()
    }
}

/// A proposed merge. `left < right` always.
#[derive(Debug, Clone, Copy)]
pub struct MergeCandidate {
    pub left: NodeId,
    pub right: NodeId,
    pub kind: MergeKind,
    pub log_score: f64,
    /// Merge generation at which the candidate was pushed.
    pub stamp: u64,
}

impl PartialEq for MergeCandidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for MergeCandidate {}

impl PartialOrd for MergeCandidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for MergeCandidate {
    /// Greater means "merge first": higher score, then smaller ids, then
    /// earlier kind.
    fn cmp(&self, other: &Self) -> Ordering {
        self.log_score
            .total_cmp(&other.log_score)
            .then_with(|| other.left.cmp(&self.left))
            .then_with(|| other.right.cmp(&self.right))
            .then_with(|| other.kind.cmp(&self.kind))
    }
}

/// One applied merge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeRecord {
    pub left: NodeId,
    pub right: NodeId,
    pub kind: MergeKind,
    pub log_score: f64,
    pub result: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineOptions {
    /// Restrict candidates to trees sharing a term, session or clicked domain.
    pub blocking: bool,
    /// Log progress every this many merges (0 disables).
    pub progress_every: usize,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            blocking: true,
            progress_every: 1000,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    children: Vec<NodeId>,
    child_logliks: Vec<f64>,
    child_sum: f64,
    leaf_queries: Vec<QueryId>,
    stats: AffinityStats,
    loglik: f64,
}

impl Node {
    fn summary(&self) -> TreeSummary<'_> {
        TreeSummary {
            stats: self.stats,
            loglik: self.loglik,
            child_logliks: &self.child_logliks,
            child_sum: self.child_sum,
        }
    }
}

/// The live forest during agglomeration.
#[derive(Debug)]
pub struct Forest {
    model: AffinityModel,
    config: ModelConfig,
    options: EngineOptions,
    nodes: Vec<Node>,
    live: Vec<bool>,
    n_live: usize,
    heap: BinaryHeap<MergeCandidate>,
    /// `neighbours[a][b]` = cross-pair stats between live trees `a` and `b`.
    neighbours: Vec<HashMap<NodeId, AffinityStats>>,
    generation: u64,
    merges: Vec<MergeRecord>,
}

/// Builds the affinity model for `corpus` and the initial forest of leaves.
pub fn init_forest(
    corpus: &LogCorpus,
    embeddings: Option<&EmbeddingTable>,
    config: &ModelConfig,
    options: EngineOptions,
) -> Result<Forest> {
    Forest::new(AffinityModel::new(corpus, embeddings), *config, options)
}

/// Runs agglomeration to completion and returns the final forest.
pub fn build_hierarchy(
    corpus: &LogCorpus,
    embeddings: Option<&EmbeddingTable>,
    config: &ModelConfig,
    options: EngineOptions,
) -> Result<Forest> {
    let mut forest = init_forest(corpus, embeddings, config, options)?;
    forest.run();
    Ok(forest)
}

impl Forest {
    pub fn new(model: AffinityModel, config: ModelConfig, options: EngineOptions) -> Result<Self> {
        config.validate()?;
        let n = model.len();
        if n == 0 {
            return Err(Error::EmptyCorpus);
        }
        let leaf_loglik = config.group_log_marginal(&AffinityStats::ZERO);
        let nodes: Vec<Node> = (0..n as QueryId)
            .map(|q| Node {
                children: Vec::new(),
                child_logliks: Vec::new(),
                child_sum: 0.0,
                leaf_queries: vec![q],
                stats: AffinityStats::ZERO,
                loglik: leaf_loglik,
            })
            .collect();

        let adjacency = if options.blocking {
            blocked_adjacency(&model)
        } else {
            (0..n as NodeId)
                .map(|i| (i + 1..n as NodeId).collect())
                .collect()
        };

        let mut forest = Forest {
            model,
            config,
            options,
            nodes,
            live: vec![true; n],
            n_live: n,
            heap: BinaryHeap::new(),
            neighbours: vec![HashMap::new(); n],
            generation: 0,
            merges: Vec::new(),
        };

        // Each row holds the higher-numbered neighbours of one leaf.
        let scored: Vec<Vec<(NodeId, NodeId, AffinityStats, Option<MergeCandidate>)>> = adjacency
            .par_iter()
            .enumerate()
            .map(|(i, higher)| {
                let i = i as NodeId;
                higher
                    .iter()
                    .map(|&j| {
                        let cross = AffinityStats::from_pair(&forest.model.pair(i, j));
                        (i, j, cross, forest.best_candidate(i, j, &cross))
                    })
                    .collect()
            })
            .collect();
        for (i, j, cross, cand) in scored.into_iter().flatten() {
            forest.neighbours[i as usize].insert(j, cross);
            forest.neighbours[j as usize].insert(i, cross);
            if let Some(c) = cand {
                forest.heap.push(c);
            }
        }
        Ok(forest)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn model(&self) -> &AffinityModel {
        &self.model
    }

    pub fn n_queries(&self) -> usize {
        self.model.len()
    }

    pub fn is_live(&self, id: NodeId) -> bool {
        self.live.get(id as usize).copied().unwrap_or(false)
    }

    /// Live tree ids in ascending order.
    pub fn live_trees(&self) -> Vec<NodeId> {
        (0..self.nodes.len() as NodeId)
            .filter(|&i| self.live[i as usize])
            .collect()
    }

    pub fn n_live(&self) -> usize {
        self.n_live
    }

    pub fn merges(&self) -> &[MergeRecord] {
        &self.merges
    }

    /// Candidates currently queued, including stale ones, in no particular order.
    pub fn candidates(&self) -> impl Iterator<Item = &MergeCandidate> {
        self.heap.iter()
    }

    /// Whether two live trees are currently merge partners.
    pub fn are_neighbours(&self, a: NodeId, b: NodeId) -> bool {
        self.neighbours
            .get(a as usize)
            .is_some_and(|m| m.contains_key(&b))
    }

    pub fn node_loglik(&self, id: NodeId) -> Option<f64> {
        self.nodes.get(id as usize).map(|n| n.loglik)
    }

    pub fn node_children(&self, id: NodeId) -> Option<&[NodeId]> {
        self.nodes.get(id as usize).map(|n| n.children.as_slice())
    }

    pub fn leaf_queries(&self, id: NodeId) -> Option<&[QueryId]> {
        self.nodes.get(id as usize).map(|n| n.leaf_queries.as_slice())
    }

    /// The owned subtree rooted at `id`, with cached values as the engine holds them.
    pub fn task_tree(&self, id: NodeId) -> Result<TaskTree> {
        let node = self.nodes.get(id as usize).ok_or(Error::UnknownNode(id))?;
        Ok(TaskTree {
            node_id: id,
            children: node
                .children
                .iter()
                .map(|&c| self.task_tree(c))
                .collect::<Result<_>>()?,
            leaf_queries: node.leaf_queries.clone(),
            stats: node.stats,
            cached_loglik: node.loglik,
        })
    }

    /// Checks that live trees' query sets partition the corpus.
    pub fn is_partition(&self) -> bool {
        let mut seen = vec![false; self.n_queries()];
        for id in self.live_trees() {
            for &q in &self.nodes[id as usize].leaf_queries {
                if std::mem::replace(&mut seen[q as usize], true) {
                    return false;
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    fn cross_between(&self, a: NodeId, b: NodeId) -> AffinityStats {
        match self.neighbours[a as usize].get(&b) {
            Some(s) => *s,
            None => self.model.cross_stats(
                &self.nodes[a as usize].leaf_queries,
                &self.nodes[b as usize].leaf_queries,
            ),
        }
    }

    fn evaluate(&self, left: NodeId, right: NodeId, cross: &AffinityStats, kind: MergeKind) -> Option<(f64, MergedNode)> {
        let a = self.nodes[left as usize].summary();
        let b = self.nodes[right as usize].summary();
        if !merge_allowed(&a, &b, kind) {
            return None;
        }
        let merged = merged_node(&a, &b, cross, kind, &self.config);
        Some((log_bayes_factor(merged.loglik, a.loglik, b.loglik), merged))
    }

    /// Best merge kind for a pair, if it scores above zero.
    fn best_candidate(&self, a: NodeId, b: NodeId, cross: &AffinityStats) -> Option<MergeCandidate> {
        let (left, right) = if a < b { (a, b) } else { (b, a) };
        let mut best: Option<(MergeKind, f64)> = None;
        for kind in MergeKind::ALL {
            if let Some((score, _)) = self.evaluate(left, right, cross, kind) {
                if best.map_or(true, |(_, s)| score > s) {
                    best = Some((kind, score));
                }
            }
        }
        let (kind, log_score) = best?;
        (log_score > 0.0).then_some(MergeCandidate {
            left,
            right,
            kind,
            log_score,
            stamp: self.generation,
        })
    }

    /// Pops the best live candidate without applying it.
    pub fn pop_best(&mut self) -> Option<MergeCandidate> {
        while let Some(c) = self.heap.pop() {
            if self.is_live(c.left) && self.is_live(c.right) {
                return Some(c);
            }
        }
        None
    }

    /// Applies a merge. Returns `Ok(None)` when the candidate is stale.
    pub fn apply_merge(&mut self, cand: &MergeCandidate) -> Result<Option<NodeId>> {
        let (l, r) = (cand.left, cand.right);
        if l == r || !self.is_live(l) || !self.is_live(r) {
            return Ok(None);
        }
        let cross = self.cross_between(l, r);
        let Some((score, merged)) = self.evaluate(l, r, &cross, cand.kind) else {
            return Err(Error::Domain(format!(
                "{} is not applicable to trees {l} and {r}",
                cand.kind.name()
            )));
        };

        let (ln, rn) = (&self.nodes[l as usize], &self.nodes[r as usize]);
        let (children, child_logliks): (Vec<NodeId>, Vec<f64>) = match cand.kind {
            MergeKind::Join => (vec![l, r], vec![ln.loglik, rn.loglik]),
            MergeKind::AbsorbLeft => (
                ln.children.iter().copied().chain([r]).collect(),
                ln.child_logliks.iter().copied().chain([rn.loglik]).collect(),
            ),
            MergeKind::AbsorbRight => (
                rn.children.iter().copied().chain([l]).collect(),
                rn.child_logliks.iter().copied().chain([ln.loglik]).collect(),
            ),
            MergeKind::Collapse => (
                ln.children.iter().chain(&rn.children).copied().collect(),
                ln.child_logliks.iter().chain(&rn.child_logliks).copied().collect(),
            ),
        };
        debug_assert_eq!(children.len(), merged.n_children);
        debug_assert_eq!(
            fold_children(0.0, child_logliks.iter().copied()).to_bits(),
            merged.child_sum.to_bits()
        );
        let leaf_queries = merge_sorted(&ln.leaf_queries, &rn.leaf_queries);

        let new_id = self.nodes.len() as NodeId;
        self.nodes.push(Node {
            children,
            child_logliks,
            child_sum: merged.child_sum,
            leaf_queries,
            stats: merged.stats,
            loglik: merged.loglik,
        });
        self.live.push(true);
        self.neighbours.push(HashMap::new());

        // Neighbours of the merged tree: anything adjacent to either part.
        let mut partners: Vec<NodeId> = self.neighbours[l as usize]
            .keys()
            .chain(self.neighbours[r as usize].keys())
            .copied()
            .filter(|&c| c != l && c != r)
            .collect();
        partners.sort_unstable();
        partners.dedup();

        let this = &*self;
        let fresh: Vec<(NodeId, AffinityStats)> = partners
            .par_iter()
            .map(|&c| (c, this.cross_between(l, c) + this.cross_between(r, c)))
            .collect();

        for part in [l, r] {
            let old = std::mem::take(&mut self.neighbours[part as usize]);
            for c in old.keys() {
                self.neighbours[*c as usize].remove(&part);
            }
            self.live[part as usize] = false;
        }
        for (c, stats) in &fresh {
            self.neighbours[new_id as usize].insert(*c, *stats);
            self.neighbours[*c as usize].insert(new_id, *stats);
        }
        self.n_live -= 1;
        self.generation += 1;

        let this = &*self;
        let cands: Vec<MergeCandidate> = fresh
            .par_iter()
            .filter_map(|(c, stats)| this.best_candidate(*c, new_id, stats))
            .collect();
        self.heap.extend(cands);

        self.merges.push(MergeRecord {
            left: l,
            right: r,
            kind: cand.kind,
            log_score: score,
            result: new_id,
        });
        Ok(Some(new_id))
    }

    /// Merges greedily until no live candidate scores above zero.
    pub fn run(&mut self) {
        while let Some(cand) = self.pop_best() {
            if cand.log_score <= 0.0 {
                break;
            }
            self.apply_merge(&cand)
                .expect("queued candidates are always applicable");
            let done = self.merges.len();
            if self.options.progress_every > 0 && done % self.options.progress_every == 0 {
                log::info!(
                    "{done} merges, {} trees live, last score {:.4}",
                    self.n_live,
                    cand.log_score
                );
            }
        }
        log::info!("agglomeration finished: {} merges, {} roots", self.merges.len(), self.n_live);
    }

    /// The current forest as an exportable hierarchy. Roots are ordered by id,
    /// children keep their merge order.
    pub fn hierarchy(&self) -> Hierarchy {
        let mut nodes = Vec::new();
        let roots = self.live_trees();
        let mut stack: Vec<(NodeId, Option<NodeId>)> =
            roots.iter().rev().map(|&r| (r, None)).collect();
        while let Some((id, parent)) = stack.pop() {
            let node = &self.nodes[id as usize];
            nodes.push(HierarchyNode {
                id,
                parent,
                children: node.children.clone(),
                leaf_queries: node.leaf_queries.clone(),
                loglik: node.loglik,
                pmi_score: None,
            });
            stack.extend(node.children.iter().rev().map(|&c| (c, Some(id))));
        }
        Hierarchy::from_nodes(nodes, roots).expect("engine trees are well formed")
    }
}

fn merge_sorted(a: &[QueryId], b: &[QueryId]) -> Vec<QueryId> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// For each leaf, the higher-numbered leaves sharing at least one blocking key.
fn blocked_adjacency(model: &AffinityModel) -> Vec<Vec<NodeId>> {
    let n = model.len();
    let mut index: HashMap<BlockKey, Vec<QueryId>> = HashMap::new();
    let keys: Vec<Vec<BlockKey>> = (0..n as QueryId).map(|q| model.block_keys(q)).collect();
    for (q, ks) in keys.iter().enumerate() {
        for k in ks {
            index.entry(*k).or_default().push(q as QueryId);
        }
    }
    keys.par_iter()
        .enumerate()
        .map(|(q, ks)| {
            let q = q as QueryId;
            let mut higher: Vec<NodeId> = ks
                .iter()
                .flat_map(|k| index[k].iter().copied())
                .filter(|&o| o > q)
                .collect();
            higher.sort_unstable();
            higher.dedup();
            higher
        })
        .collect()
}
