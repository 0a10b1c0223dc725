//! Extraction quality: pairwise precision/recall/F1 against task labels and
//! the held-out term-prediction harness.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;
use crate::query_log::{LogCorpus, Query, QueryId};
use crate::rose_tree::NodeId;

/// Default number of recommended terms.
pub const DEFAULT_TOP_K: usize = 10;

/// Query id → task label.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaskLabeling {
    pub assignment: BTreeMap<QueryId, String>,
}

impl TaskLabeling {
    pub fn from_pairs<L: Into<String>>(pairs: impl IntoIterator<Item = (QueryId, L)>) -> Self {
        TaskLabeling {
            assignment: pairs.into_iter().map(|(q, l)| (q, l.into())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Reads `query_id \t task_label` lines; `#` lines are comments.
    pub fn read<R: Read>(input: R) -> Result<Self> {
        const WHAT: &str = "label file";
        let mut assignment = BTreeMap::new();
        for (i, line) in BufReader::new(input).lines().enumerate() {
            let line = line?;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let (id, label) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(WHAT, i + 1, "expected query_id<TAB>label"))?;
            let id = id
                .trim()
                .parse::<QueryId>()
                .map_err(|e| Error::format(WHAT, i + 1, e.to_string()))?;
            assignment.insert(id, label.trim_end().to_string());
        }
        Ok(TaskLabeling { assignment })
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for (q, l) in &self.assignment {
            writeln!(out, "{q}\t{l}")?;
        }
        Ok(())
    }
}

/// Outcome of aligning an annotated log with a corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationReport {
    pub rows: usize,
    pub matched: usize,
    pub unmatched: usize,
}

fn column(header: &[String], names: &[&str]) -> Option<usize> {
    header.iter().position(|h| names.iter().any(|n| h.eq_ignore_ascii_case(n)))
}

/// Reads a task-annotated query log and labels the corpus queries it covers.
///
/// The first line names the tab-separated columns. Recognized names (any
/// case): `AnonID`/`UserID`/`user`, `Query`, `QueryTime`/`Time`/`timestamp`,
/// `TaskID`/`Task`, and optionally `SessionID`/`SessionNum`/`session`. Times are
/// either `YYYY-MM-DD HH:MM:SS` or Unix seconds. A row is matched to the
/// corpus query with the same user, time and normalized text, falling back to
/// user and time alone when that pair is unique. Labels are
/// `user/session/task`.
pub fn read_annotated_log<R: Read>(input: R, corpus: &LogCorpus) -> Result<(TaskLabeling, AnnotationReport)> {
    const WHAT: &str = "annotated log";
    let mut lines = BufReader::new(input).lines();
    let header: Vec<String> = match lines.next() {
        Some(line) => line?.split('\t').map(|h| h.trim().to_string()).collect(),
        None => return Err(Error::format(WHAT, 1, "missing header line")),
    };
    let need = |names: &[&str]| {
        column(&header, names).ok_or_else(|| Error::format(WHAT, 1, format!("no {} column", names[0])))
    };
    let user_col = need(&["AnonID", "UserID", "user"])?;
    let query_col = need(&["Query"])?;
    let time_col = need(&["QueryTime", "Time", "timestamp"])?;
    let task_col = need(&["TaskID", "Task", "task_id"])?;
    let session_col = column(&header, &["SessionID", "SessionNum", "session"]);

    let mut exact: HashMap<(&str, i64, String), QueryId> = HashMap::new();
    let mut by_time: HashMap<(&str, i64), Vec<QueryId>> = HashMap::new();
    for q in corpus.queries() {
        exact.insert((q.user_id.as_str(), q.timestamp, q.normalized_text()), q.query_id);
        by_time.entry((q.user_id.as_str(), q.timestamp)).or_default().push(q.query_id);
    }

    let mut report = AnnotationReport::default();
    let mut assignment = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let n = i + 2;
        let fields: Vec<&str> = line.split('\t').collect();
        let field = |c: usize| {
            fields
                .get(c)
                .map(|f| f.trim())
                .ok_or_else(|| Error::format(WHAT, n, format!("expected at least {} fields", c + 1)))
        };
        report.rows += 1;
        let user = field(user_col)?;
        let time = field(time_col)?;
        let timestamp = match time.parse::<i64>() {
            Ok(t) => t,
            Err(_) => chrono::NaiveDateTime::parse_from_str(time, "%Y-%m-%d %H:%M:%S")
                .map_err(|e| Error::format(WHAT, n, format!("bad time {time:?}: {e}")))?
                .and_utc()
                .timestamp(),
        };
        let text = crate::query_log::normalize_query(field(query_col)?).join(" ");
        let session = match session_col {
            Some(c) => field(c)?,
            None => "",
        };
        let label = format!("{user}/{session}/{}", field(task_col)?);
        let id = exact.get(&(user, timestamp, text)).copied().or_else(|| {
            match by_time.get(&(user, timestamp)).map(Vec::as_slice) {
                Some([only]) => Some(*only),
                _ => None,
            }
        });
        match id {
            Some(id) => {
                report.matched += 1;
                assignment.insert(id, label);
            }
            None => report.unmatched += 1,
        }
    }
    Ok((TaskLabeling { assignment }, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Pair counts behind [`PairwiseScores`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PairCounts {
    pub same_predicted: u64,
    pub same_gold: u64,
    pub same_both: u64,
}

impl PairCounts {
    /// Ratios with the convention `0/0 = 0`.
    pub fn scores(&self) -> PairwiseScores {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.same_both, self.same_predicted);
        let recall = ratio(self.same_both, self.same_gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        PairwiseScores {
            precision,
            recall,
            f1,
        }
    }
}

fn choose2(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Pair counts over the queries labeled in both labelings.
pub fn pair_counts(predicted: &TaskLabeling, gold: &TaskLabeling) -> Result<PairCounts> {
    let mut pred_sizes: HashMap<&str, u64> = HashMap::new();
    let mut gold_sizes: HashMap<&str, u64> = HashMap::new();
    let mut cell_sizes: HashMap<(&str, &str), u64> = HashMap::new();
    let mut shared = 0usize;
    for (q, p) in &predicted.assignment {
        let Some(g) = gold.assignment.get(q) else { continue };
        shared += 1;
        *pred_sizes.entry(p).or_default() += 1;
        *gold_sizes.entry(g).or_default() += 1;
        *cell_sizes.entry((p, g)).or_default() += 1;
    }
    if shared == 0 {
        return Err(Error::DisjointLabelings);
    }
    Ok(PairCounts {
        same_predicted: pred_sizes.values().map(|&n| choose2(n)).sum(),
        same_gold: gold_sizes.values().map(|&n| choose2(n)).sum(),
        same_both: cell_sizes.values().map(|&n| choose2(n)).sum(),
    })
}

/// Pairwise precision, recall and F1 of `predicted` against `gold`.
///
/// Only queries labeled in both are scored; labelings with no query in
/// common are an error.
pub fn pairwise_prf(predicted: &TaskLabeling, gold: &TaskLabeling) -> Result<PairwiseScores> {
    Ok(pair_counts(predicted, gold)?.scores())
}

/// One label per bottom-level node of the hierarchy.
pub fn leaf_labeling(hierarchy: &Hierarchy) -> TaskLabeling {
    let mut assignment = BTreeMap::new();
    for id in hierarchy.bottom_nodes() {
        for &q in &hierarchy.node(id).expect("bottom node exists").leaf_queries {
            assignment.insert(q, format!("node{id}"));
        }
    }
    TaskLabeling { assignment }
}

/// Term-frequency profiles of a hierarchy's bottom-level tasks.
#[derive(Debug, Clone)]
pub struct TaskIndex {
    tasks: Vec<TaskProfile>,
}

#[derive(Debug, Clone)]
struct TaskProfile {
    node: NodeId,
    tf: HashMap<String, f64>,
    norm: f64,
    /// Terms by descending frequency, ties alphabetical.
    ranked: Vec<String>,
}

fn term_frequencies<'a>(queries: impl IntoIterator<Item = &'a Query>) -> HashMap<String, f64> {
    let mut tf: HashMap<String, f64> = HashMap::new();
    for q in queries {
        for t in &q.terms {
            *tf.entry(t.clone()).or_default() += 1.0;
        }
    }
    tf
}

fn norm_of(tf: &HashMap<String, f64>) -> f64 {
    let mut v: Vec<f64> = tf.values().copied().collect();
    v.sort_by(f64::total_cmp);
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl TaskIndex {
    pub fn new(hierarchy: &Hierarchy, corpus: &LogCorpus) -> Result<Self> {
        let mut tasks = Vec::new();
        let mut ids = hierarchy.bottom_nodes();
        ids.sort_unstable();
        for id in ids {
            let node = hierarchy.node(id).expect("bottom node exists");
            let mut queries = Vec::with_capacity(node.leaf_queries.len());
            for &q in &node.leaf_queries {
                queries.push(corpus.queries().get(q as usize).ok_or_else(|| {
                    Error::Config(format!("hierarchy references query {q} missing from the corpus"))
                })?);
            }
            let tf = term_frequencies(queries);
            let mut ranked: Vec<(&String, f64)> = tf.iter().map(|(t, &c)| (t, c)).collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            let ranked = ranked.into_iter().map(|(t, _)| t.clone()).collect();
            tasks.push(TaskProfile {
                node: id,
                norm: norm_of(&tf),
                tf,
                ranked,
            });
        }
        Ok(TaskIndex { tasks })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Bottom-level task with the highest term-frequency cosine to `partial`;
    /// ties go to the smaller node id. `None` only for an empty index.
    pub fn match_task_node(&self, partial: &[&Query]) -> Option<NodeId> {
        self.best(partial).map(|t| t.node)
    }

    fn best(&self, partial: &[&Query]) -> Option<&TaskProfile> {
        let tf = term_frequencies(partial.iter().copied());
        let norm = norm_of(&tf);
        let mut keys: Vec<&String> = tf.keys().collect();
        keys.sort_unstable();
        let mut best: Option<(&TaskProfile, f64)> = None;
        for task in &self.tasks {
            let dot: f64 = keys
                .iter()
                .map(|k| tf[*k] * task.tf.get(*k).copied().unwrap_or(0.0))
                .sum();
            let cos = if norm == 0.0 || task.norm == 0.0 {
                0.0
            } else {
                dot / (norm * task.norm)
            };
            // Tasks are in ascending id order, so strict > keeps the smaller id on ties.
            if best.map_or(true, |(_, c)| cos > c) {
                best = Some((task, cos));
            }
        }
        best.map(|(t, _)| t)
    }

    /// Up to `k` most frequent terms of the task matched by `partial`,
    /// skipping terms already present in `partial`.
    pub fn recommend(&self, partial: &[&Query], k: usize) -> Vec<String> {
        let Some(task) = self.best(partial) else {
            return Vec::new();
        };
        let seen: HashSet<&str> = partial
            .iter()
            .flat_map(|q| q.terms.iter().map(String::as_str))
            .collect();
        task.ranked
            .iter()
            .filter(|t| !seen.contains(t.as_str()))
            .take(k)
            .cloned()
            .collect()
    }
}

/// Convenience wrapper building a [`TaskIndex`] for a single lookup.
pub fn match_task_node(partial: &[&Query], hierarchy: &Hierarchy, corpus: &LogCorpus) -> Result<NodeId> {
    TaskIndex::new(hierarchy, corpus)?
        .match_task_node(partial)
        .ok_or(Error::EmptyCorpus)
}

/// Where a session is cut into its matching and held-out parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionSplit {
    pub matching_fraction: f64,
}

impl PredictionSplit {
    pub fn new(matching_fraction: f64) -> Result<Self> {
        if !(matching_fraction > 0.0 && matching_fraction < 1.0) {
            return Err(Error::Domain(format!(
                "matching fraction must lie strictly between 0 and 1, got {matching_fraction}"
            )));
        }
        Ok(PredictionSplit { matching_fraction })
    }

    /// Number of leading queries used for matching: `floor(f · len)` clamped
    /// to `[1, len − 1]`. Requires `len >= 2`.
    pub fn split_index(&self, len: usize) -> usize {
        let raw = (self.matching_fraction * len as f64).floor() as usize;
        raw.clamp(1, len - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionResult {
    pub matching_fraction: f64,
    /// Mean number of recommended terms found among the held-out terms.
    pub mean_matched_terms: f64,
    pub evaluated_sessions: usize,
    pub skipped_sessions: usize,
}

/// Terms recommended from the first part of a session that reappear in its
/// held-out part.
pub fn session_hits(index: &TaskIndex, session: &[&Query], split: &PredictionSplit, k: usize) -> usize {
    let cut = split.split_index(session.len());
    let (head, tail) = session.split_at(cut);
    let held_out: HashSet<&str> = tail
        .iter()
        .flat_map(|q| q.terms.iter().map(String::as_str))
        .collect();
    index
        .recommend(head, k)
        .iter()
        .filter(|t| held_out.contains(t.as_str()))
        .count()
}

/// Mean held-out term recall per matching fraction. Sessions with fewer than
/// two queries are skipped and counted.
pub fn term_prediction_eval(
    index: &TaskIndex,
    sessions: &[Vec<&Query>],
    splits: &[PredictionSplit],
    k: usize,
) -> Vec<PredictionResult> {
    let usable: Vec<&Vec<&Query>> = sessions.iter().filter(|s| s.len() >= 2).collect();
    let skipped = sessions.len() - usable.len();
    splits
        .iter()
        .map(|split| {
            let hits: Vec<usize> = usable
                .par_iter()
                .map(|s| session_hits(index, s, split, k))
                .collect();
            let total: usize = hits.iter().sum();
            PredictionResult {
                matching_fraction: split.matching_fraction,
                mean_matched_terms: if usable.is_empty() {
                    0.0
                } else {
                    total as f64 / usable.len() as f64
                },
                evaluated_sessions: usable.len(),
                skipped_sessions: skipped,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::HierarchyNode;

    fn lab(pairs: &[(u32, &str)]) -> TaskLabeling {
        TaskLabeling::from_pairs(pairs.iter().map(|(q, l)| (*q, *l)))
    }

    #[test]
    fn annotated_log_matches_corpus_queries() {
        let mut a = q(0, 0, "cheap flights");
        a.timestamp = 1_141_171_200;
        let mut b = q(1, 0, "boston hotels");
        b.timestamp = 1_141_171_260;
        let corpus = LogCorpus::from_queries(vec![a, b]).unwrap();
        let text = "SessionNum\tTaskID\tAnonID\tQuery\tQueryTime\n\
                    s1\t1\tu\tCheap  Flights\t2006-03-01 00:00:00\n\
                    s1\t2\tu\tsomething else\t2006-03-01 00:01:00\n\
                    s1\t2\tu\tmissing\t2006-03-02 00:00:00\n";
        let (labels, report) = read_annotated_log(text.as_bytes(), &corpus).unwrap();
        assert_eq!(report, AnnotationReport { rows: 3, matched: 2, unmatched: 1 });
        assert_eq!(labels.assignment[&0], "u/s1/1");
        assert_eq!(labels.assignment[&1], "u/s1/2");
    }

    #[test]
    fn annotated_log_needs_task_column() {
        let corpus = LogCorpus::from_queries(vec![q(0, 0, "a")]).unwrap();
        assert!(read_annotated_log("AnonID\tQuery\tQueryTime\n".as_bytes(), &corpus).is_err());
    }

    #[test]
    fn perfect_prediction() {
        let g = lab(&[(0, "x"), (1, "x"), (2, "y")]);
        let s = pairwise_prf(&g, &g).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn over_merged_prediction_hand_case() {
        let gold = lab(&[(0, "ab"), (1, "ab"), (2, "c")]);
        let pred = lab(&[(0, "all"), (1, "all"), (2, "all")]);
        let s = pairwise_prf(&pred, &gold).unwrap();
        assert_eq!(s.precision, 1.0 / 3.0);
        assert_eq!(s.recall, 1.0);
        assert_eq!(s.f1, 0.5);
    }

    #[test]
    fn all_singletons_score_zero() {
        let gold = lab(&[(0, "a"), (1, "a"), (2, "b")]);
        let pred = lab(&[(0, "1"), (1, "2"), (2, "3")]);
        let s = pairwise_prf(&pred, &gold).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn disjoint_domains_error() {
        let a = lab(&[(0, "a")]);
        let b = lab(&[(1, "a")]);
        assert!(matches!(pairwise_prf(&a, &b), Err(Error::DisjointLabelings)));
    }

    #[test]
    fn label_file_round_trip() {
        let l = lab(&[(3, "task one"), (7, "t2")]);
        let mut buf = Vec::new();
        l.write_to(&mut buf).unwrap();
        assert_eq!(TaskLabeling::read(&buf[..]).unwrap(), l);
    }

    fn q(id: u32, session: u32, text: &str) -> Query {
        Query {
            query_id: id,
            user_id: "u".into(),
            raw_text: text.into(),
            terms: crate::query_log::normalize_query(text),
            timestamp: id as i64,
            session_id: session,
            clicked_urls: vec![],
        }
    }

    /// Two bottom tasks: node 10 = {0,1} (flights), node 11 = {2,3} (hotels).
    fn toy() -> (LogCorpus, Hierarchy) {
        let corpus = LogCorpus::from_queries(vec![
            q(0, 0, "cheap flights boston"),
            q(1, 0, "flights boston airline"),
            q(2, 1, "boston hotels"),
            q(3, 1, "hotels cheap suites"),
        ])
        .unwrap();
        let leaf = |id, qs: &[u32]| HierarchyNode {
            id,
            parent: None,
            children: vec![],
            leaf_queries: qs.to_vec(),
            loglik: 0.0,
            pmi_score: None,
        };
        let h = Hierarchy::from_nodes(vec![leaf(10, &[0, 1]), leaf(11, &[2, 3])], vec![10, 11]).unwrap();
        (corpus, h)
    }

    #[test]
    fn leaf_labeling_covers_all_queries() {
        let (_, h) = toy();
        let l = leaf_labeling(&h);
        assert_eq!(l.len(), 4);
        assert_eq!(l.assignment[&0], l.assignment[&1]);
        assert_ne!(l.assignment[&0], l.assignment[&2]);
    }

    #[test]
    fn matching_examples() {
        let (c, h) = toy();
        // Identical to node 11's queries.
        assert_eq!(match_task_node(&[c.query(2), c.query(3)], &h, &c).unwrap(), 11);
        // No overlap: cosine 0 everywhere, smallest id wins.
        let stranger = q(9, 9, "pizza");
        assert_eq!(match_task_node(&[&stranger], &h, &c).unwrap(), 10);
        // "cheap boston": node 10 tf {cheap:1, flights:2, boston:2, airline:1},
        // |v|=sqrt(10), dot=3, cos=3/(sqrt2*sqrt10)=0.671; node 11 tf
        // {boston:1, hotels:2, cheap:1, suites:1}, |v|=sqrt(7), dot=2, cos=0.535.
        let probe = q(9, 9, "cheap boston");
        assert_eq!(match_task_node(&[&probe], &h, &c).unwrap(), 10);
    }

    #[test]
    fn prediction_hand_count() {
        let (c, h) = toy();
        let index = TaskIndex::new(&h, &c).unwrap();
        // Matching part "flights" picks node 10; ranked terms excluding
        // "flights": boston(2), airline(1), cheap(1). Held-out "boston airline".
        let s1 = [q(20, 5, "flights"), q(21, 5, "boston airline")];
        let s1: Vec<&Query> = s1.iter().collect();
        let split = PredictionSplit::new(0.5).unwrap();
        assert_eq!(index.recommend(&s1[..1], 2), vec!["boston", "airline"]);
        assert_eq!(session_hits(&index, &s1, &split, 10), 2);
        assert_eq!(session_hits(&index, &s1, &split, 1), 1);

        // Held-out part repeats the matching terms only.
        let s2 = [q(22, 6, "hotels"), q(23, 6, "hotels")];
        let s2: Vec<&Query> = s2.iter().collect();
        assert_eq!(session_hits(&index, &s2, &split, 10), 0);

        let short = [q(24, 7, "hotels")];
        let short: Vec<&Query> = short.iter().collect();
        let res = term_prediction_eval(&index, &[s1, s2, short], &[split], 10);
        assert_eq!(res[0].evaluated_sessions, 2);
        assert_eq!(res[0].skipped_sessions, 1);
        assert_eq!(res[0].mean_matched_terms, 1.0);
    }

    #[test]
    fn split_index_is_clamped() {
        let s = PredictionSplit::new(0.2).unwrap();
        assert_eq!(s.split_index(2), 1);
        assert_eq!(s.split_index(10), 2);
        assert_eq!(PredictionSplit::new(0.8).unwrap().split_index(2), 1);
        assert!(PredictionSplit::new(1.0).is_err());
    }
}
