//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

use taskforest::affinity::group_affinity;
use taskforest::query_log::sessionize;
use taskforest::{AffinityModel, AffinityStats, Hierarchy, HierarchyNode, LogCorpus, ModelConfig, NodeId, Query, QueryId};

// ---------------------------------------------------------------------------
// Gamma-Poisson marginal by numerical integration

/// Γ(a) for positive integer or half-integer `a`, by the recurrence from Γ(1) or Γ(1/2).
pub fn gamma_fn(a: f64) -> f64 {
    let twice = (2.0 * a).round();
    assert!((2.0 * a - twice).abs() < 1e-12 && a > 0.0, "unsupported argument {a}");
    let (mut x, mut g) = if twice as u64 % 2 == 0 {
        (1.0, 1.0)
    } else {
        (0.5, std::f64::consts::PI.sqrt())
    };
    while x < a - 1e-12 {
        g *= x;
        x += 1.0;
    }
    g
}

fn ln_factorial(r: u64) -> f64 {
    (2..=r).map(|k| (k as f64).ln()).sum()
}

/// `ln ∫ Poisson(r | λ) Gamma(λ | α, rate β) dλ` by composite Simpson in
/// `u = √λ`, which makes the integrand smooth at zero for the supported `α`.
pub fn quadrature_log_pmf(r: u64, alpha: f64, beta: f64) -> f64 {
    let shape = r as f64 + alpha;
    let rate = 1.0 + beta;
    // ln of 2 u^(2 shape - 1) e^(-rate u²), the λ-integrand after substitution
    let g = |u: f64| -> f64 {
        if u == 0.0 {
            if 2.0 * shape - 1.0 == 0.0 {
                return 2f64.ln();
            }
            return f64::NEG_INFINITY;
        }
        2f64.ln() + (2.0 * shape - 1.0) * u.ln() - rate * u * u
    };
    let mean = shape / rate;
    let sd = shape.sqrt() / rate;
    let lambda_max = mean + 60.0 * sd + 60.0 / rate;
    let u_max = lambda_max.sqrt();
    let panels = 40_000usize;
    let h = u_max / panels as f64;
    let u_peak = ((shape - 0.5) / rate).max(0.0).sqrt();
    let g_max = g(u_peak).max(g(h));
    let mut acc = 0.0;
    for i in 0..=panels {
        let w = if i == 0 || i == panels {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * (g(i as f64 * h) - g_max).exp();
    }
    let log_integral = (acc * h / 3.0).ln() + g_max;
    log_integral + alpha * beta.ln() - gamma_fn(alpha).ln() - ln_factorial(r)
}

// ---------------------------------------------------------------------------
// Rose-tree shapes and tree-consistent partitions

/// A rose tree over leaf labels; internal nodes have at least two children.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Leaf(u32),
    Node(Vec<Shape>),
}

impl Shape {
    pub fn leaves(&self) -> Vec<u32> {
        match self {
            Shape::Leaf(q) => vec![*q],
            Shape::Node(ch) => {
                let mut v: Vec<u32> = ch.iter().flat_map(Shape::leaves).collect();
                v.sort_unstable();
                v
            }
        }
    }

    pub fn internal_count(&self) -> usize {
        match self {
            Shape::Leaf(_) => 0,
            Shape::Node(ch) => 1 + ch.iter().map(Shape::internal_count).sum::<usize>(),
        }
    }
}

/// All set partitions of `items` into at least `min_blocks` blocks.
fn set_partitions(items: &[u32], min_blocks: usize) -> Vec<Vec<Vec<u32>>> {
    fn go(items: &[u32], i: usize, blocks: &mut Vec<Vec<u32>>, out: &mut Vec<Vec<Vec<u32>>>) {
        if i == items.len() {
            out.push(blocks.clone());
            return;
        }
        for b in 0..blocks.len() {
            blocks[b].push(items[i]);
            go(items, i + 1, blocks, out);
            blocks[b].pop();
        }
        blocks.push(vec![items[i]]);
        go(items, i + 1, blocks, out);
        blocks.pop();
    }
    let mut out = Vec::new();
    go(items, 0, &mut Vec::new(), &mut out);
    out.retain(|p| p.len() >= min_blocks);
    out
}

/// Every rose tree whose leaves are exactly `items` (children unordered).
pub fn all_shapes(items: &[u32]) -> Vec<Shape> {
    if items.len() == 1 {
        return vec![Shape::Leaf(items[0])];
    }
    let mut out = Vec::new();
    for blocks in set_partitions(items, 2) {
        let options: Vec<Vec<Shape>> = blocks.iter().map(|b| all_shapes(b)).collect();
        let mut combos: Vec<Vec<Shape>> = vec![Vec::new()];
        for opts in &options {
            let mut next = Vec::new();
            for c in &combos {
                for o in opts {
                    let mut c2 = c.clone();
                    c2.push(o.clone());
                    next.push(c2);
                }
            }
            combos = next;
        }
        out.extend(combos.into_iter().map(Shape::Node));
    }
    out
}

/// One tree-consistent partition: its clusters and the log of its mixing weight.
#[derive(Debug, Clone)]
pub struct WeightedPartition {
    pub clusters: Vec<Vec<u32>>,
    pub log_weight: f64,
}

/// Expands a tree into all its tree-consistent partitions. A node either
/// keeps its leaves as one cluster (weight π) or defers to its children
/// (weight 1 − π times one partition per child).
pub fn tree_partitions(shape: &Shape, gamma: f64) -> Vec<WeightedPartition> {
    match shape {
        Shape::Leaf(q) => vec![WeightedPartition {
            clusters: vec![vec![*q]],
            log_weight: 0.0,
        }],
        Shape::Node(children) => {
            let m = children.len() as f64;
            let one_minus_pi = (1.0 - gamma).powf(m - 1.0);
            let pi = 1.0 - one_minus_pi;
            let mut out = vec![WeightedPartition {
                clusters: vec![shape.leaves()],
                log_weight: pi.ln(),
            }];
            let mut combos = vec![WeightedPartition {
                clusters: Vec::new(),
                log_weight: one_minus_pi.ln(),
            }];
            for c in children {
                let parts = tree_partitions(c, gamma);
                let mut next = Vec::new();
                for a in &combos {
                    for b in &parts {
                        let mut clusters = a.clusters.clone();
                        clusters.extend(b.clusters.iter().cloned());
                        next.push(WeightedPartition {
                            clusters,
                            log_weight: a.log_weight + b.log_weight,
                        });
                    }
                }
                combos = next;
            }
            out.extend(combos);
            out
        }
    }
}

/// `ln Σ exp(x)` with the maximum factored out.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln p(D | T)` as a sum over tree-consistent partitions, with cluster log
/// marginals supplied by `log_f`.
pub fn enumerated_log_likelihood(shape: &Shape, gamma: f64, log_f: &dyn Fn(&[u32]) -> f64) -> f64 {
    let terms: Vec<f64> = tree_partitions(shape, gamma)
        .iter()
        .map(|p| p.log_weight + p.clusters.iter().map(|c| log_f(c)).sum::<f64>())
        .collect();
    log_sum_exp(&terms)
}

// ---------------------------------------------------------------------------
// Naive agglomeration: rescore every pair of live trees after every merge

#[derive(Debug, Clone, PartialEq)]
pub struct NaiveNode {
    pub id: u32,
    pub children: Vec<u32>,
    pub leaf_queries: Vec<QueryId>,
    pub loglik: f64,
}

const KINDS: [&str; 4] = ["join", "absorb-left", "absorb-right", "collapse"];

/// `ln(π e^marginal + (1 − π) e^children)`, `π = 1 − (1 − γ)^(m − 1)`.
fn naive_node_loglik(marginal: f64, m: usize, children: f64, gamma: f64) -> f64 {
    let one_minus_pi = (1.0 - gamma).powi(m as i32 - 1);
    log_sum_exp(&[(1.0 - one_minus_pi).ln() + marginal, one_minus_pi.ln() + children])
}

/// Greedy agglomeration that scores all live pairs and kinds from scratch
/// each round. Returns every node created, indexed by id, and the ids of the
/// final roots. Ties go to the smaller left id, then right id, then kind.
pub fn naive_agglomerate(model: &AffinityModel, config: &ModelConfig) -> (Vec<NaiveNode>, Vec<u32>) {
    let n = model.len();
    let log_f = |qs: &[QueryId]| config.group_log_marginal(&model.group_stats(qs));
    let mut nodes: Vec<NaiveNode> = (0..n as u32)
        .map(|q| NaiveNode {
            id: q,
            children: Vec::new(),
            leaf_queries: vec![q],
            loglik: log_f(&[q]),
        })
        .collect();
    let mut live: BTreeSet<u32> = (0..n as u32).collect();
    loop {
        let ids: Vec<u32> = live.iter().copied().collect();
        let mut best: Option<(f64, u32, u32, usize, Vec<u32>, f64)> = None;
        for (a, &l) in ids.iter().enumerate() {
            for &r in &ids[a + 1..] {
                let (ln, rn) = (&nodes[l as usize], &nodes[r as usize]);
                let mut union = ln.leaf_queries.clone();
                union.extend_from_slice(&rn.leaf_queries);
                union.sort_unstable();
                let marginal = log_f(&union);
                for (k, _) in KINDS.iter().enumerate() {
                    let children: Vec<u32> = match k {
                        0 => vec![l, r],
                        1 if !ln.children.is_empty() => ln.children.iter().copied().chain([r]).collect(),
                        2 if !rn.children.is_empty() => rn.children.iter().copied().chain([l]).collect(),
                        3 if !ln.children.is_empty() && !rn.children.is_empty() => {
                            ln.children.iter().chain(&rn.children).copied().collect()
                        }
                        _ => continue,
                    };
                    let child_sum: f64 = children.iter().map(|&c| nodes[c as usize].loglik).sum();
                    let ll = naive_node_loglik(marginal, children.len(), child_sum, config.gamma);
                    let score = ll - ln.loglik - rn.loglik;
                    if best.as_ref().map_or(true, |b| score > b.0) {
                        best = Some((score, l, r, k, children, ll));
                    }
                }
            }
        }
        match best {
            Some((score, l, r, _, children, ll)) if score > 0.0 => {
                let mut leaf_queries = nodes[l as usize].leaf_queries.clone();
                leaf_queries.extend_from_slice(&nodes[r as usize].leaf_queries);
                leaf_queries.sort_unstable();
                let id = nodes.len() as u32;
                nodes.push(NaiveNode {
                    id,
                    children,
                    leaf_queries,
                    loglik: ll,
                });
                live.remove(&l);
                live.remove(&r);
                live.insert(id);
            }
            _ => break,
        }
    }
    (nodes, live.into_iter().collect())
}

// ---------------------------------------------------------------------------
// Pairwise metrics by enumeration

/// Pairwise precision, recall and F1 over queries labelled in both maps,
/// counting every unordered pair directly.
pub fn brute_force_prf(pred: &BTreeMap<QueryId, String>, gold: &BTreeMap<QueryId, String>) -> (f64, f64, f64) {
    let ids: Vec<QueryId> = pred.keys().filter(|q| gold.contains_key(q)).copied().collect();
    let (mut sp, mut sg, mut both) = (0u64, 0u64, 0u64);
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            let p = pred[&ids[i]] == pred[&ids[j]];
            let g = gold[&ids[i]] == gold[&ids[j]];
            sp += p as u64;
            sg += g as u64;
            both += (p && g) as u64;
        }
    }
    let precision = if sp == 0 { 0.0 } else { both as f64 / sp as f64 };
    let recall = if sg == 0 { 0.0 } else { both as f64 / sg as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

// ---------------------------------------------------------------------------
// Random inputs

/// A small random log over a tiny vocabulary so terms, URLs and sessions
/// overlap often. Sessionized with a 30 minute timeout.
pub fn random_corpus<R: Rng>(rng: &mut R, n: usize) -> LogCorpus {
    const WORDS: [&str; 8] = ["cheap", "flights", "paris", "hotel", "rome", "train", "map", "weather"];
    const HOSTS: [&str; 4] = ["a.com", "b.org", "c.net", "d.com"];
    let users = rng.gen_range(1..=3);
    let mut t = 1_141_171_200i64;
    let queries: Vec<Query> = (0..n)
        .map(|i| {
            t += if rng.gen_bool(0.2) { 3600 } else { rng.gen_range(10..300) };
            let k = rng.gen_range(1..=3);
            let mut terms: Vec<String> = WORDS.choose_multiple(rng, k).map(|w| w.to_string()).collect();
            terms.shuffle(rng);
            let clicked_urls = if rng.gen_bool(0.5) {
                vec![format!("http://www.{}/p{}", HOSTS.choose(rng).unwrap(), rng.gen_range(0..3))]
            } else {
                Vec::new()
            };
            Query {
                query_id: i as QueryId,
                user_id: format!("u{}", rng.gen_range(0..users)),
                raw_text: terms.join(" "),
                terms,
                timestamp: t,
                session_id: 0,
                clicked_urls,
            }
        })
        .collect();
    sessionize(LogCorpus::from_queries(queries).unwrap(), 1800)
}

/// Stats whose discretized group affinity at resolution 1 is exactly `counts`.
pub fn stats_with_counts(counts: [u64; 4], n_pairs: u64) -> AffinityStats {
    let sums = counts.map(|c| (c * n_pairs.max(1)) as f64);
    let s = AffinityStats::from_pair_sums(sums, n_pairs);
    debug_assert_eq!(group_affinity(&s, 1), counts);
    s
}

/// A random forest over queries `0..n`: queries are split into random roots,
/// and every block of two or more is split again into 2 to 4 children.
/// Leaves use the query id as node id; internal nodes are numbered from `n`.
pub fn random_hierarchy<R: Rng>(rng: &mut R, n: usize) -> Hierarchy {
    fn build<R: Rng>(
        rng: &mut R,
        items: Vec<QueryId>,
        parent: Option<NodeId>,
        next: &mut NodeId,
        out: &mut Vec<HierarchyNode>,
    ) -> NodeId {
        if items.len() == 1 {
            out.push(HierarchyNode {
                id: items[0],
                parent,
                children: Vec::new(),
                leaf_queries: items,
                loglik: 0.0,
                pmi_score: None,
            });
            return out.last().unwrap().id;
        }
        let id = *next;
        *next += 1;
        let k = rng.gen_range(2..=items.len().min(4));
        let mut blocks: Vec<Vec<QueryId>> = vec![Vec::new(); k];
        for (i, &q) in items.iter().enumerate() {
            let b = if i < k { i } else { rng.gen_range(0..k) };
            blocks[b].push(q);
        }
        let slot = out.len();
        out.push(HierarchyNode {
            id,
            parent,
            children: Vec::new(),
            leaf_queries: items,
            loglik: 0.0,
            pmi_score: None,
        });
        let children: Vec<NodeId> = blocks
            .into_iter()
            .map(|b| build(rng, b, Some(id), next, out))
            .collect();
        out[slot].children = children;
        id
    }

    let mut ids: Vec<QueryId> = (0..n as QueryId).collect();
    ids.shuffle(rng);
    let n_roots = rng.gen_range(1..=n.min(3));
    let mut blocks: Vec<Vec<QueryId>> = vec![Vec::new(); n_roots];
    for (i, q) in ids.into_iter().enumerate() {
        let b = if i < n_roots { i } else { rng.gen_range(0..n_roots) };
        blocks[b].push(q);
    }
    let mut next = n as NodeId;
    let mut nodes = Vec::new();
    let mut roots = Vec::new();
    for mut b in blocks {
        b.sort_unstable();
        roots.push(build(rng, b, None, &mut next, &mut nodes));
    }
    for node in &mut nodes {
        node.leaf_queries.sort_unstable();
    }
    Hierarchy::from_nodes(nodes, roots).unwrap()
}
