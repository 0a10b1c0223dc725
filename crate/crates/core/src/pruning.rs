//! Task-coherence pruning.
//!
//! A node's coherence is the average pointwise mutual information of its
//! query terms, with probabilities taken from same-session co-occurrence in a
//! reference collection. Scanning top-down, the first node on each path whose
//! coherence reaches the threshold loses its subtree and becomes one atomic
//! task.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};

use rayon::prelude::*;

use crate::artifact::{short_hash, ArtifactHeader};
use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;
use crate::query_log::LogCorpus;
use crate::rose_tree::NodeId;

/// Default coherence threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.8;

/// How pairwise PMIs are averaged into a node score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoherenceNormalization {
    /// Mean over unordered pairs of distinct terms.
    #[default]
    PairMean,
    /// Sum over all ordered pairs including self-pairs, divided by the number
    /// of terms.
    Literal,
}

impl CoherenceNormalization {
    pub fn name(self) -> &'static str {
        match self {
            CoherenceNormalization::PairMean => "pair-mean",
            CoherenceNormalization::Literal => "literal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pair-mean" => Some(CoherenceNormalization::PairMean),
            "literal" => Some(CoherenceNormalization::Literal),
            _ => None,
        }
    }
}

/// Session-level term and term-pair document frequencies.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CooccurrenceStats {
    n_sessions: u64,
    term_session_count: HashMap<String, u64>,
    /// Keyed by the lexicographically ordered pair.
    pair_session_count: HashMap<(String, String), u64>,
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl CooccurrenceStats {
    /// Stats from explicit sessions, each given as a bag of terms.
    pub fn from_sessions<'a, S, T>(sessions: S) -> Self
    where
        S: IntoIterator<Item = T>,
        T: IntoIterator<Item = &'a str>,
    {
        let mut stats = CooccurrenceStats::default();
        for session in sessions {
            let mut terms: Vec<&str> = session.into_iter().collect();
            terms.sort_unstable();
            terms.dedup();
            stats.n_sessions += 1;
            for (i, a) in terms.iter().enumerate() {
                *stats.term_session_count.entry(a.to_string()).or_default() += 1;
                for b in &terms[i + 1..] {
                    *stats
                        .pair_session_count
                        .entry((a.to_string(), b.to_string()))
                        .or_default() += 1;
                }
            }
        }
        stats
    }

    pub fn n_sessions(&self) -> u64 {
        self.n_sessions
    }

    pub fn term_sessions(&self, term: &str) -> u64 {
        self.term_session_count.get(term).copied().unwrap_or(0)
    }

    /// Sessions containing both terms. A term paired with itself counts its own sessions.
    pub fn pair_sessions(&self, a: &str, b: &str) -> u64 {
        if a == b {
            return self.term_sessions(a);
        }
        self.pair_session_count
            .get(&ordered(a, b))
            .copied()
            .unwrap_or(0)
    }

    pub fn n_terms(&self) -> usize {
        self.term_session_count.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.pair_session_count.len()
    }

    pub fn write_to<W: Write>(&self, mut out: W, header: &ArtifactHeader) -> Result<()> {
        writeln!(out, "{header}")?;
        writeln!(out, "N\t{}", self.n_sessions)?;
        let terms: BTreeMap<&String, &u64> = self.term_session_count.iter().collect();
        for (t, c) in terms {
            writeln!(out, "T\t{t}\t{c}")?;
        }
        let pairs: BTreeMap<&(String, String), &u64> = self.pair_session_count.iter().collect();
        for ((a, b), c) in pairs {
            writeln!(out, "P\t{a}\t{b}\t{c}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        const WHAT: &str = "co-occurrence cache";
        let mut stats = CooccurrenceStats::default();
        for (i, line) in BufReader::new(input).lines().enumerate() {
            let line = line?;
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let count = |s: &str| {
                s.parse::<u64>()
                    .map_err(|e| Error::format(WHAT, i + 1, e.to_string()))
            };
            match f.as_slice() {
                ["N", n] => stats.n_sessions = count(n)?,
                ["T", t, c] => {
                    stats.term_session_count.insert(t.to_string(), count(c)?);
                }
                ["P", a, b, c] => {
                    stats.pair_session_count.insert(ordered(a, b), count(c)?);
                }
                _ => return Err(Error::format(WHAT, i + 1, "unrecognized record")),
            }
        }
        Ok(stats)
    }
}

/// Counts, per session of a sessionized corpus, which terms occur and which
/// term pairs co-occur. Each term counts once per session.
pub fn build_cooccurrence(corpus: &LogCorpus) -> CooccurrenceStats {
    let sessions = corpus.sessions();
    CooccurrenceStats::from_sessions(sessions.iter().map(|ids| {
        ids.iter()
            .flat_map(|&q| corpus.query(q).terms.iter().map(String::as_str))
    }))
}

/// Fingerprint of a corpus, used to key co-occurrence caches.
pub fn corpus_fingerprint(corpus: &LogCorpus) -> String {
    short_hash(corpus.to_file_string(&ArtifactHeader::new("-")).as_bytes())
}

/// `log p(w1, w2) / (p(w1) p(w2))` with session frequencies and `1/N` added
/// to the joint probability. Unknown terms score 0.
pub fn pmi(w1: &str, w2: &str, stats: &CooccurrenceStats) -> f64 {
    let c1 = stats.term_sessions(w1);
    let c2 = stats.term_sessions(w2);
    if c1 == 0 || c2 == 0 || stats.n_sessions == 0 {
        return 0.0;
    }
    let n = stats.n_sessions as f64;
    let joint = stats.pair_sessions(w1, w2) as f64 / n + 1.0 / n;
    (joint / ((c1 as f64 / n) * (c2 as f64 / n))).ln()
}

/// Coherence of a set of unique terms. Fewer than two terms score `+∞`.
pub fn pmi_score(node_terms: &[&str], stats: &CooccurrenceStats, norm: CoherenceNormalization) -> f64 {
    let w = node_terms.len();
    if w < 2 {
        return f64::INFINITY;
    }
    let mut distinct = 0.0;
    for i in 0..w {
        for j in i + 1..w {
            distinct += pmi(node_terms[i], node_terms[j], stats);
        }
    }
    match norm {
        CoherenceNormalization::PairMean => distinct / (w * (w - 1) / 2) as f64,
        CoherenceNormalization::Literal => {
            let diagonal: f64 = node_terms.iter().map(|t| pmi(t, t, stats)).sum();
            (2.0 * distinct + diagonal) / w as f64
        }
    }
}

/// Sorted unique terms of a node's queries.
fn node_terms<'c>(corpus: &'c LogCorpus, hierarchy: &Hierarchy, id: NodeId) -> Vec<&'c str> {
    let node = hierarchy.node(id).expect("node exists");
    let mut seen = HashSet::new();
    let mut terms: Vec<&str> = node
        .leaf_queries
        .iter()
        .flat_map(|&q| corpus.query(q).terms.iter().map(String::as_str))
        .filter(|t| seen.insert(*t))
        .collect();
    terms.sort_unstable();
    terms
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneOptions {
    pub threshold: f64,
    pub normalization: CoherenceNormalization,
}

impl Default for PruneOptions {
    fn default() -> Self {
        PruneOptions {
            threshold: DEFAULT_THRESHOLD,
            normalization: CoherenceNormalization::PairMean,
        }
    }
}

/// Scores nodes top-down and flattens the first node on every root-to-leaf
/// path whose coherence is at least the threshold. Every surviving node gets
/// its `pmi_score` recorded.
pub fn prune(
    hierarchy: &Hierarchy,
    corpus: &LogCorpus,
    stats: &CooccurrenceStats,
    options: &PruneOptions,
) -> Result<Hierarchy> {
    if let Some(&q) = hierarchy.query_ids().last() {
        if q as usize >= corpus.len() {
            return Err(Error::Config(format!(
                "hierarchy references query {q} but the corpus has {} queries",
                corpus.len()
            )));
        }
    }
    let mut out = hierarchy.clone();
    let mut frontier: Vec<NodeId> = hierarchy.roots().to_vec();
    while !frontier.is_empty() {
        let scores: Vec<f64> = frontier
            .par_iter()
            .map(|&id| pmi_score(&node_terms(corpus, hierarchy, id), stats, options.normalization))
            .collect();
        let mut next = Vec::new();
        for (&id, score) in frontier.iter().zip(scores) {
            out.node_mut(id).expect("node exists").pmi_score = Some(score);
            let node = hierarchy.node(id).expect("node exists");
            if node.is_leaf() {
                continue;
            }
            if score >= options.threshold {
                out.flatten(id);
            } else {
                next.extend(node.children.iter().copied());
            }
        }
        frontier = next;
    }
    Ok(out)
}
