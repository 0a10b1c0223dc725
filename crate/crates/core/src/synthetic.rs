//! Seeded generator of query logs with a planted task/subtask structure.
//!
//! Every task belongs to one user and owns one task term; each of its
//! subtasks owns two subtask terms and a small pool of filler terms. A query
//! of subtask `s` of task `t` contains the task term, both subtask terms and,
//! sometimes, one filler. Subtasks are an hour apart, so sessionizing with the
//! default timeout yields one session per subtask. No term is shared across
//! tasks.

use std::collections::HashSet;
use std::fmt::Write as _;

use chrono::DateTime;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::affinity::EmbeddingTable;
use crate::evaluation::TaskLabeling;
use crate::query_log::{sessionize, LogCorpus, Query, DEFAULT_SESSION_TIMEOUT_SECS};

/// 2006-03-01 00:00:00 UTC, the first day of the AOL collection.
const EPOCH: i64 = 1_141_171_200;
const EMBEDDING_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    pub tasks: usize,
    pub subtasks_per_task: usize,
    pub queries_per_subtask: usize,
    pub fillers_per_subtask: usize,
    /// Probability that a query carries a filler term.
    pub filler_rate: f64,
    /// Probability that a query has a clicked URL.
    pub click_rate: f64,
    /// Sessions per subtask in the companion reference collection.
    pub reference_sessions_per_subtask: usize,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            tasks: 5,
            subtasks_per_task: 3,
            queries_per_subtask: 10,
            fillers_per_subtask: 3,
            filler_rate: 0.5,
            click_rate: 0.7,
            reference_sessions_per_subtask: 100,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
struct PlantedTask {
    term: String,
    subtasks: Vec<PlantedSubtask>,
}

#[derive(Debug, Clone)]
struct PlantedSubtask {
    terms: [String; 2],
    fillers: Vec<String>,
    pages: Vec<String>,
}

/// A generated log with its ground truth.
#[derive(Debug, Clone)]
pub struct PlantedLog {
    pub corpus: LogCorpus,
    /// Query id → `t<task>.s<subtask>`.
    pub subtask_labels: TaskLabeling,
    /// Query id → `t<task>`.
    pub task_labels: TaskLabeling,
    /// Sessions drawn from the same structure, for co-occurrence statistics.
    pub reference: LogCorpus,
    pub embeddings: EmbeddingTable,
}

impl PlantedLog {
    /// Planted sibling-subtask pairs as pairs of subtask labels.
    pub fn sibling_pairs(&self) -> Vec<(String, String)> {
        let mut labels: Vec<&String> = self.subtask_labels.assignment.values().collect();
        labels.sort();
        labels.dedup();
        let mut out = Vec::new();
        for (i, a) in labels.iter().enumerate() {
            for b in &labels[i + 1..] {
                if task_of(a) == task_of(b) {
                    out.push(((*a).clone(), (*b).clone()));
                }
            }
        }
        out
    }
}

fn task_of(label: &str) -> &str {
    label.split('.').next().unwrap_or(label)
}

struct WordSource {
    used: HashSet<String>,
}

impl WordSource {
    const ONSETS: &'static [&'static str] = &[
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "st", "pl",
    ];
    const VOWELS: &'static [&'static str] = &["a", "e", "i", "o", "u", "ai", "ou"];

    /// Fresh three-syllable pseudo-word, never repeated.
    fn word(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..3 {
                w.push_str(Self::ONSETS.choose(rng).expect("non-empty"));
                w.push_str(Self::VOWELS.choose(rng).expect("non-empty"));
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn plant(spec: &PlantedSpec, rng: &mut ChaCha8Rng) -> Vec<PlantedTask> {
    let mut words = WordSource { used: HashSet::new() };
    (0..spec.tasks)
        .map(|_| {
            let term = words.word(rng);
            let host = format!("{}.com", words.word(rng));
            let subtasks = (0..spec.subtasks_per_task)
                .map(|_| {
                    let terms = [words.word(rng), words.word(rng)];
                    let fillers = (0..spec.fillers_per_subtask).map(|_| words.word(rng)).collect();
                    let page = words.word(rng);
                    let pages = (0..3).map(|i| format!("http://www.{host}/{page}/{i}")).collect();
                    PlantedSubtask { terms, fillers, pages }
                })
                .collect();
            PlantedTask { term, subtasks }
        })
        .collect()
}

fn draw_query(task: &PlantedTask, sub: &PlantedSubtask, spec: &PlantedSpec, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
    let mut words = vec![task.term.clone(), sub.terms[0].clone(), sub.terms[1].clone()];
    if !sub.fillers.is_empty() && rng.gen_bool(spec.filler_rate) {
        words.push(sub.fillers.choose(rng).expect("non-empty").clone());
    }
    words.shuffle(rng);
    let urls = if rng.gen_bool(spec.click_rate) {
        vec![sub.pages.choose(rng).expect("non-empty").clone()]
    } else {
        Vec::new()
    };
    (words, urls)
}

fn query(id: usize, user: String, words: Vec<String>, timestamp: i64, urls: Vec<String>) -> Query {
    Query {
        query_id: id as u32,
        user_id: user,
        raw_text: words.join(" "),
        terms: words,
        timestamp,
        session_id: 0,
        clicked_urls: urls,
    }
}

/// Generates a planted log. The same spec always yields the same log.
pub fn planted_log(spec: &PlantedSpec) -> PlantedLog {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tasks = plant(spec, &mut rng);

    let mut queries = Vec::new();
    let mut subtask_labels = Vec::new();
    let mut task_labels = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        let user = format!("{}", 1000 + t);
        let start = EPOCH + t as i64 * 86_400;
        for (s, sub) in task.subtasks.iter().enumerate() {
            let sub_start = start + s as i64 * 3_600;
            for i in 0..spec.queries_per_subtask {
                let (words, urls) = draw_query(task, sub, spec, &mut rng);
                let id = queries.len();
                queries.push(query(id, user.clone(), words, sub_start + 60 * i as i64, urls));
                subtask_labels.push((id as u32, format!("t{t}.s{s}")));
                task_labels.push((id as u32, format!("t{t}")));
            }
        }
    }
    let corpus = LogCorpus::from_queries(queries).expect("generated queries are valid");

    let mut reference = Vec::new();
    let mut session = 0usize;
    for task in &tasks {
        for sub in &task.subtasks {
            for _ in 0..spec.reference_sessions_per_subtask {
                let user = format!("r{session}");
                let start = EPOCH + session as i64 * 86_400;
                let len = rng.gen_range(2..=6);
                for i in 0..len {
                    let (words, urls) = draw_query(task, sub, spec, &mut rng);
                    let id = reference.len();
                    reference.push(query(id, user.clone(), words, start + 60 * i, urls));
                }
                session += 1;
            }
        }
    }
    let reference = if reference.is_empty() {
        corpus.clone()
    } else {
        LogCorpus::from_queries(reference).expect("generated queries are valid")
    };

    let embeddings = planted_embeddings(&tasks, &mut rng);
    PlantedLog {
        corpus: sessionize(corpus, DEFAULT_SESSION_TIMEOUT_SECS),
        subtask_labels: TaskLabeling::from_pairs(subtask_labels),
        task_labels: TaskLabeling::from_pairs(task_labels),
        reference: sessionize(reference, DEFAULT_SESSION_TIMEOUT_SECS),
        embeddings,
    }
}

/// Word vectors near a per-task direction, nudged towards a per-subtask one.
fn planted_embeddings(tasks: &[PlantedTask], rng: &mut ChaCha8Rng) -> EmbeddingTable {
    let mut table = EmbeddingTable::new(EMBEDDING_DIM);
    let unit = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..EMBEDDING_DIM).map(|_| rng.gen_range(-1.0f32..1.0)).collect() };
    for task in tasks {
        let task_dir = unit(rng);
        table.insert(&task.term, task_dir.clone()).expect("dimension matches");
        for sub in &task.subtasks {
            let sub_dir = unit(rng);
            for w in sub.terms.iter().chain(&sub.fillers) {
                let noise = unit(rng);
                let v = (0..EMBEDDING_DIM)
                    .map(|i| task_dir[i] + 0.5 * sub_dir[i] + 0.1 * noise[i])
                    .collect();
                table.insert(w, v).expect("dimension matches");
            }
        }
    }
    table
}

/// Renders a corpus as AOL-style TSV with a header row, one row per click.
pub fn to_aol_tsv(corpus: &LogCorpus) -> String {
    let mut out = String::from("AnonID\tQuery\tQueryTime\tItemRank\tClickURL\n");
    for q in corpus.queries() {
        let time = DateTime::from_timestamp(q.timestamp, 0)
            .expect("timestamp in range")
            .format("%Y-%m-%d %H:%M:%S");
        if q.clicked_urls.is_empty() {
            writeln!(out, "{}\t{}\t{time}", q.user_id, q.raw_text).expect("write to string");
        }
        for (rank, url) in q.clicked_urls.iter().enumerate() {
            writeln!(out, "{}\t{}\t{time}\t{}\t{url}", q.user_id, q.raw_text, rank + 1).expect("write to string");
        }
    }
    out
}

/// Renders an embedding table in the text format [`EmbeddingTable::read`] accepts.
pub fn embeddings_to_text(table: &EmbeddingTable) -> String {
    let mut words: Vec<&String> = table.words().collect();
    words.sort();
    let mut out = String::new();
    for w in words {
        out.push_str(w);
        for x in table.get(w).expect("listed word") {
            write!(out, " {x}").expect("write to string");
        }
        out.push('\n');
    }
    out
}
