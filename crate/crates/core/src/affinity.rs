//! Inter-query affinities and their aggregation over query groups.
//!
//! Four affinity classes are computed for every query pair:
//!
//! | class | features (each clamped to `[0, 1]`, summed)                       | range    |
//! |-------|-------------------------------------------------------------------|----------|
//! | term  | term-set cosine, 1 − normalized edit distance, Jaccard, common/union | `[0, 4]` |
//! | url   | 1 − min edit, 1 − mean edit, max Jaccard, mean Jaccard over URL pairs | `[0, 4]` |
//! | session | same user, same session                                         | `{0,1,2}`|
//! | embedding | cosine of averaged term vectors, negatives clamped to 0       | `[0, 1]` |
//!
//! Group statistics are kept in fixed point so that merging two groups'
//! statistics is exact and independent of merge order.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Read};
use std::ops::{Add, AddAssign};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::query_log::{LogCorpus, Query, QueryId, SessionId, TermId};

/// Number of affinity classes.
pub const N_CLASSES: usize = 4;

/// Default discretization resolution for group affinities.
pub const DEFAULT_RESOLUTION: u32 = 100;

/// Fixed-point units per unit of affinity (2^20).
const FIXED_SCALE: u64 = 1 << 20;

/// Affinities between one pair of queries.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PairAffinity {
    pub r1_term: f64,
    pub r2_url: f64,
    pub r3_session: f64,
    pub r4_embedding: f64,
}

impl PairAffinity {
    pub fn as_array(&self) -> [f64; N_CLASSES] {
        [self.r1_term, self.r2_url, self.r3_session, self.r4_embedding]
    }

    fn quantized(&self) -> [u64; N_CLASSES] {
        self.as_array().map(to_fixed)
    }
}

fn to_fixed(x: f64) -> u64 {
    debug_assert!(x.is_finite() && x >= 0.0);
    (x * FIXED_SCALE as f64).round() as u64
}

/// Summed pairwise affinities over the unordered pairs of a query group.
///
/// Sums are held in fixed point (2^-20 resolution per pair), which makes the
/// merge `stats(A ∪ B) = stats(A) + stats(B) + cross(A, B)` exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct AffinityStats {
    sums: [u64; N_CLASSES],
    n_pairs: u64,
}

impl AffinityStats {
    pub const ZERO: AffinityStats = AffinityStats {
        sums: [0; N_CLASSES],
        n_pairs: 0,
    };

    /// Stats from real-valued pair sums, quantized to the fixed-point grid.
    pub fn from_pair_sums(pair_sum: [f64; N_CLASSES], n_pairs: u64) -> Self {
        AffinityStats {
            sums: pair_sum.map(to_fixed),
            n_pairs,
        }
    }

    pub fn from_pair(aff: &PairAffinity) -> Self {
        AffinityStats {
            sums: aff.quantized(),
            n_pairs: 1,
        }
    }

    pub fn pair_sum(&self) -> [f64; N_CLASSES] {
        self.sums.map(|s| s as f64 / FIXED_SCALE as f64)
    }

    pub fn n_pairs(&self) -> u64 {
        self.n_pairs
    }

    /// Stats of the union of two disjoint groups given their cross-pair stats.
    pub fn merged(&self, other: &AffinityStats, cross: &AffinityStats) -> AffinityStats {
        *self + *other + *cross
    }
}

impl Add for AffinityStats {
    type Output = AffinityStats;

    fn add(mut self, rhs: AffinityStats) -> AffinityStats {
        self += rhs;
        self
    }
}

impl AddAssign for AffinityStats {
    fn add_assign(&mut self, rhs: AffinityStats) {
        for k in 0..N_CLASSES {
            self.sums[k] += rhs.sums[k];
        }
        self.n_pairs += rhs.n_pairs;
    }
}

impl std::iter::Sum for AffinityStats {
    fn sum<I: Iterator<Item = AffinityStats>>(iter: I) -> Self {
        iter.fold(AffinityStats::ZERO, Add::add)
    }
}

/// Discretized group affinity: `round(resolution · pair_sum[k] / max(n_pairs, 1))`.
///
/// Rounding is half-up and computed in integer arithmetic on the fixed-point sums.
pub fn group_affinity(stats: &AffinityStats, resolution: u32) -> [u64; N_CLASSES] {
    let denom = FIXED_SCALE as u128 * stats.n_pairs.max(1) as u128;
    stats.sums.map(|s| {
        let num = resolution as u128 * s as u128;
        ((2 * num + denom) / (2 * denom)) as u64
    })
}

/// Pre-trained word vectors, one line per term: `term v1 … v_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, term: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Domain(format!(
                "vector has length {}, table dimension is {}",
                vector.len(),
                self.dim
            )));
        }
        self.vectors.insert(term.into(), vector);
        Ok(())
    }

    /// Vocabulary of the table, in no particular order.
    pub fn words(&self) -> impl Iterator<Item = &String> {
        self.vectors.keys()
    }

    pub fn get(&self, term: &str) -> Option<&[f32]> {
        self.vectors.get(term).map(Vec::as_slice)
    }

    /// Reads the text format. A leading word2vec-style `count dim` line is accepted.
    pub fn read<R: Read>(input: R) -> Result<Self> {
        const WHAT: &str = "embedding file";
        let mut table: Option<EmbeddingTable> = None;
        for (i, line) in BufReader::new(input).lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(term) = parts.next() else { continue };
            let values: Vec<&str> = parts.collect();
            if i == 0 && values.len() == 1 && term.parse::<usize>().is_ok() {
                if let Ok(dim) = values[0].parse::<usize>() {
                    table = Some(EmbeddingTable::new(dim));
                    continue;
                }
            }
            let vector = values
                .iter()
                .map(|v| v.parse::<f32>())
                .collect::<std::result::Result<Vec<f32>, _>>()
                .map_err(|e| Error::format(WHAT, i + 1, e.to_string()))?;
            if vector.iter().any(|x| !x.is_finite()) {
                return Err(Error::format(WHAT, i + 1, "non-finite component"));
            }
            let t = table.get_or_insert_with(|| EmbeddingTable::new(vector.len()));
            if vector.len() != t.dim {
                return Err(Error::format(
                    WHAT,
                    i + 1,
                    format!("expected {} components, found {}", t.dim, vector.len()),
                ));
            }
            t.vectors.insert(term.to_string(), vector);
        }
        table.ok_or_else(|| Error::format(WHAT, 0, "no vectors"))
    }
}

/// Mean of the query's in-vocabulary term vectors; the zero vector when every
/// term is out of vocabulary.
pub fn query_vector(q: &Query, table: &EmbeddingTable) -> Vec<f64> {
    let mut sum = vec![0.0f64; table.dim()];
    let mut found = 0usize;
    for t in &q.terms {
        if let Some(v) = table.get(t) {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += f64::from(*x);
            }
            found += 1;
        }
    }
    if found > 0 {
        let n = found as f64;
        sum.iter_mut().for_each(|s| *s /= n);
    }
    sum
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

fn vector_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    clamp01(dot / (na * nb).sqrt())
}

pub fn embedding_affinity(a: &Query, b: &Query, table: &EmbeddingTable) -> f64 {
    vector_cosine(&query_vector(a, table), &query_vector(b, table))
}

/// Levenshtein distance divided by the longer string's length, in characters.
fn normalized_edit_distance(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 0.0;
    }
    strsim::levenshtein(a, b) as f64 / longest as f64
}

#[derive(Debug, Clone)]
struct TermFeatures {
    /// Sorted, deduplicated.
    terms: Vec<TermId>,
    text: String,
}

fn sorted_intersection_len<T: Ord>(a: &[T], b: &[T]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

fn term_features_affinity(a: &TermFeatures, b: &TermFeatures) -> f64 {
    let common = sorted_intersection_len(&a.terms, &b.terms);
    let union = a.terms.len() + b.terms.len() - common;
    let cosine = common as f64 / ((a.terms.len() * b.terms.len()) as f64).sqrt();
    let edit = 1.0 - normalized_edit_distance(&a.text, &b.text);
    let jaccard = common as f64 / union as f64;
    let common_share = common as f64 / union as f64;
    clamp01(cosine) + clamp01(edit) + clamp01(jaccard) + clamp01(common_share)
}

#[derive(Debug, Clone)]
struct UrlFeature {
    /// Host and path, scheme and leading `www.` removed.
    text: String,
    /// Host plus `/`-separated path segments, sorted and deduplicated.
    tokens: Vec<String>,
}

impl UrlFeature {
    fn new(raw: &str) -> Self {
        let text = canonical_url(raw);
        let mut tokens: Vec<String> = text
            .split('/')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        tokens.sort();
        tokens.dedup();
        UrlFeature { text, tokens }
    }

    fn jaccard(&self, other: &UrlFeature) -> f64 {
        let common = sorted_intersection_len(&self.tokens, &other.tokens);
        let union = self.tokens.len() + other.tokens.len() - common;
        if union == 0 {
            return 0.0;
        }
        common as f64 / union as f64
    }
}

/// Lowercased host+path with any `scheme://`, a leading `www.` and trailing
/// slashes removed.
pub fn canonical_url(raw: &str) -> String {
    let lower = raw.trim().to_lowercase();
    let rest = match lower.find("://") {
        Some(i) => &lower[i + 3..],
        None => lower.as_str(),
    };
    let rest = rest.strip_prefix("www.").unwrap_or(rest);
    rest.trim_end_matches('/').to_string()
}

/// Host part of a URL, after [`canonical_url`].
pub fn url_domain(raw: &str) -> String {
    let c = canonical_url(raw);
    c.split('/').next().unwrap_or("").to_string()
}

fn url_features_affinity(a: &[UrlFeature], b: &[UrlFeature]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut edits = Vec::with_capacity(a.len() * b.len());
    let mut jaccards = Vec::with_capacity(a.len() * b.len());
    for u in a {
        for v in b {
            edits.push(normalized_edit_distance(&u.text, &v.text));
            jaccards.push(u.jaccard(v));
        }
    }
    // Sorting before summing makes the mean independent of argument order.
    edits.sort_by(f64::total_cmp);
    jaccards.sort_by(f64::total_cmp);
    let n = edits.len() as f64;
    let min_edit = edits[0];
    let mean_edit = edits.iter().sum::<f64>() / n;
    let max_jac = jaccards[jaccards.len() - 1];
    let mean_jac = jaccards.iter().sum::<f64>() / n;
    clamp01(1.0 - min_edit) + clamp01(1.0 - mean_edit) + clamp01(max_jac) + clamp01(mean_jac)
}

/// Outside a corpus there is no vocabulary; ids are assigned per pair.
fn string_term_ids(a: &Query, b: &Query) -> (Vec<TermId>, Vec<TermId>) {
    let mut ids: HashMap<&str, TermId> = HashMap::new();
    let mut out = [Vec::new(), Vec::new()];
    for (slot, q) in out.iter_mut().zip([a, b]) {
        for t in &q.terms {
            let next = ids.len() as TermId;
            slot.push(*ids.entry(t.as_str()).or_insert(next));
        }
        slot.sort_unstable();
        slot.dedup();
    }
    let [x, y] = out;
    (x, y)
}

/// Term-class affinity of two queries, in `[0, 4]`.
pub fn term_affinity(a: &Query, b: &Query) -> f64 {
    let (ta, tb) = string_term_ids(a, b);
    let fa = TermFeatures {
        terms: ta,
        text: a.normalized_text(),
    };
    let fb = TermFeatures {
        terms: tb,
        text: b.normalized_text(),
    };
    term_features_affinity(&fa, &fb)
}

/// URL-class affinity of two queries, in `[0, 4]`; 0 when either has no clicks.
pub fn url_affinity(a: &Query, b: &Query) -> f64 {
    let ua: Vec<UrlFeature> = a.clicked_urls.iter().map(|u| UrlFeature::new(u)).collect();
    let ub: Vec<UrlFeature> = b.clicked_urls.iter().map(|u| UrlFeature::new(u)).collect();
    url_features_affinity(&ua, &ub)
}

/// `[same user] + [same session]`.
pub fn session_affinity(a: &Query, b: &Query) -> f64 {
    let same_user = a.user_id == b.user_id;
    let same_session = same_user && a.session_id == b.session_id;
    f64::from(u8::from(same_user)) + f64::from(u8::from(same_session))
}

/// Blocking keys shared by candidate merge partners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockKey {
    Term(TermId),
    Session(SessionId),
    Domain(u32),
}

#[derive(Debug, Clone)]
struct QueryFeatures {
    term: TermFeatures,
    urls: Vec<UrlFeature>,
    user: u32,
    session: SessionId,
    vector: Option<Vec<f64>>,
    domains: Vec<u32>,
}

/// Per-query features precomputed over a corpus, answering pairwise and
/// group affinity queries by query id.
#[derive(Debug, Clone)]
pub struct AffinityModel {
    features: Vec<QueryFeatures>,
    has_embeddings: bool,
}

impl AffinityModel {
    pub fn new(corpus: &LogCorpus, embeddings: Option<&EmbeddingTable>) -> Self {
        let mut users: HashMap<&str, u32> = HashMap::new();
        let mut domains: HashMap<String, u32> = HashMap::new();
        let features = corpus
            .queries()
            .iter()
            .map(|q| {
                let next_user = users.len() as u32;
                let user = *users.entry(q.user_id.as_str()).or_insert(next_user);
                let mut terms: Vec<TermId> = q
                    .terms
                    .iter()
                    .map(|t| corpus.term_id(t).expect("corpus term in vocab"))
                    .collect();
                terms.sort_unstable();
                terms.dedup();
                let mut doms: Vec<u32> = q
                    .clicked_urls
                    .iter()
                    .map(|u| url_domain(u))
                    .filter(|d| !d.is_empty())
                    .map(|d| {
                        let next = domains.len() as u32;
                        *domains.entry(d).or_insert(next)
                    })
                    .collect();
                doms.sort_unstable();
                doms.dedup();
                QueryFeatures {
                    term: TermFeatures {
                        terms,
                        text: q.normalized_text(),
                    },
                    urls: q.clicked_urls.iter().map(|u| UrlFeature::new(u)).collect(),
                    user,
                    session: q.session_id,
                    vector: embeddings.map(|t| query_vector(q, t)),
                    domains: doms,
                }
            })
            .collect();
        AffinityModel {
            features,
            has_embeddings: embeddings.is_some(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn has_embeddings(&self) -> bool {
        self.has_embeddings
    }

    pub fn pair(&self, a: QueryId, b: QueryId) -> PairAffinity {
        let fa = &self.features[a as usize];
        let fb = &self.features[b as usize];
        let same_user = fa.user == fb.user;
        let same_session = same_user && fa.session == fb.session;
        PairAffinity {
            r1_term: term_features_affinity(&fa.term, &fb.term),
            r2_url: url_features_affinity(&fa.urls, &fb.urls),
            r3_session: f64::from(u8::from(same_user)) + f64::from(u8::from(same_session)),
            r4_embedding: match (&fa.vector, &fb.vector) {
                (Some(x), Some(y)) => vector_cosine(x, y),
                _ => 0.0,
            },
        }
    }

    /// Stats over all pairs (a, b) with a ∈ `left`, b ∈ `right`.
    pub fn cross_stats(&self, left: &[QueryId], right: &[QueryId]) -> AffinityStats {
        let row = |&a: &QueryId| -> AffinityStats {
            right
                .iter()
                .map(|&b| AffinityStats::from_pair(&self.pair(a, b)))
                .sum()
        };
        if left.len() * right.len() >= 4096 {
            left.par_iter().map(row).sum()
        } else {
            left.iter().map(row).sum()
        }
    }

    /// Stats over all unordered pairs of distinct members of `group`.
    pub fn group_stats(&self, group: &[QueryId]) -> AffinityStats {
        (0..group.len())
            .map(|i| self.cross_stats(&group[i..=i], &group[i + 1..]))
            .sum()
    }

    /// Blocking keys of one query: its terms, its session, its clicked domains.
    pub fn block_keys(&self, q: QueryId) -> Vec<BlockKey> {
        let f = &self.features[q as usize];
        let mut keys: Vec<BlockKey> = f.term.terms.iter().map(|&t| BlockKey::Term(t)).collect();
        keys.push(BlockKey::Session(f.session));
        keys.extend(f.domains.iter().map(|&d| BlockKey::Domain(d)));
        keys
    }

    /// Whether two queries share at least one blocking key.
    pub fn shares_block(&self, a: QueryId, b: QueryId) -> bool {
        let ka: HashSet<BlockKey> = self.block_keys(a).into_iter().collect();
        self.block_keys(b).iter().any(|k| ka.contains(k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(id: u32, user: &str, session: u32, text: &str, urls: &[&str]) -> Query {
        Query {
            query_id: id,
            user_id: user.into(),
            raw_text: text.into(),
            terms: crate::query_log::normalize_query(text),
            timestamp: 0,
            session_id: session,
            clicked_urls: urls.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn identical_queries_have_maximal_term_affinity() {
        let a = q(0, "u", 0, "cheap flights", &[]);
        assert_eq!(term_affinity(&a, &a.clone()), 4.0);
    }

    #[test]
    fn term_affinity_hand_example() {
        // {cheap, flights} vs {cheap, hotels}: cosine 1/2, jaccard 1/3,
        // common/union 1/3; "flights" -> "hotels" takes 6 edits
        // (5 substitutions, drop the "t", keep the "s") over 13 chars.
        let a = q(0, "u", 0, "cheap flights", &[]);
        let b = q(1, "u", 0, "cheap hotels", &[]);
        assert_eq!(strsim::levenshtein("cheap flights", "cheap hotels"), 6);
        let expected = 0.5 + (1.0 - 6.0 / 13.0) + 1.0 / 3.0 + 1.0 / 3.0;
        assert!((term_affinity(&a, &b) - expected).abs() < 1e-12);
    }

    #[test]
    fn disjoint_far_apart_queries_have_near_zero_term_affinity() {
        let a = q(0, "u", 0, "aaaaaaaaaa", &[]);
        let b = q(1, "u", 0, "zzzzzzzzzz", &[]);
        assert_eq!(term_affinity(&a, &b), 0.0);
    }

    #[test]
    fn url_affinity_examples() {
        let a = q(0, "u", 0, "x", &["http://www.aol.com"]);
        let b = q(1, "v", 1, "y", &["www.aol.com"]);
        assert_eq!(url_affinity(&a, &b), 4.0);
        let none = q(2, "w", 2, "z", &[]);
        assert_eq!(url_affinity(&none, &a), 0.0);
    }

    #[test]
    fn url_affinity_hand_example() {
        // a = {x.com}; b = {x.com, y.org}.
        // pair 1: identical -> edit 0, jaccard 1.
        // pair 2: "x.com" vs "y.org": 4 edits of 5 chars -> 0.8; tokens disjoint -> jaccard 0.
        let a = q(0, "u", 0, "x", &["http://x.com"]);
        let b = q(1, "u", 0, "y", &["http://x.com", "http://y.org"]);
        assert_eq!(strsim::levenshtein("x.com", "y.org"), 4);
        let expected = (1.0 - 0.0) + (1.0 - 0.4) + 1.0 + 0.5;
        assert!((url_affinity(&a, &b) - expected).abs() < 1e-12);
    }

    #[test]
    fn canonical_url_strips_scheme_and_www() {
        assert_eq!(canonical_url("HTTP://www.Example.com/a/b/"), "example.com/a/b");
        assert_eq!(url_domain("https://www.example.com/a"), "example.com");
    }

    #[test]
    fn session_affinity_examples() {
        let a = q(0, "u", 3, "x", &[]);
        assert_eq!(session_affinity(&a, &q(1, "u", 3, "y", &[])), 2.0);
        assert_eq!(session_affinity(&a, &q(1, "u", 4, "y", &[])), 1.0);
        assert_eq!(session_affinity(&a, &q(1, "v", 5, "y", &[])), 0.0);
    }

    fn table() -> EmbeddingTable {
        let text = "cat 1 0 0\ndog 0 1 0\nfish 1 1 2\n";
        EmbeddingTable::read(text.as_bytes()).unwrap()
    }

    #[test]
    fn query_vector_examples() {
        let t = table();
        assert_eq!(query_vector(&q(0, "u", 0, "cat", &[]), &t), vec![1.0, 0.0, 0.0]);
        assert_eq!(query_vector(&q(0, "u", 0, "zebra", &[]), &t), vec![0.0; 3]);
        assert_eq!(
            query_vector(&q(0, "u", 0, "cat fish zebra", &[]), &t),
            vec![1.0, 0.5, 1.0]
        );
    }

    #[test]
    fn embedding_affinity_examples() {
        let t = table();
        let cat = q(0, "u", 0, "cat", &[]);
        let dog = q(1, "u", 0, "dog", &[]);
        let oov = q(2, "u", 0, "zebra", &[]);
        let fish = q(3, "u", 0, "fish", &[]);
        assert_eq!(embedding_affinity(&fish, &fish.clone(), &t), 1.0);
        assert_eq!(embedding_affinity(&cat, &oov, &t), 0.0);
        assert_eq!(embedding_affinity(&cat, &dog, &t), 0.0);
    }

    #[test]
    fn negative_cosine_clamps_to_zero() {
        let mut t = EmbeddingTable::new(2);
        t.insert("up", vec![0.0, 1.0]).unwrap();
        t.insert("down", vec![0.0, -1.0]).unwrap();
        let a = q(0, "u", 0, "up", &[]);
        let b = q(1, "u", 0, "down", &[]);
        assert_eq!(embedding_affinity(&a, &b, &t), 0.0);
    }

    #[test]
    fn embedding_file_with_header_and_bad_dims() {
        let t = EmbeddingTable::read("2 2\na 1 2\nb 3 4\n".as_bytes()).unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.len(), 2);
        assert!(EmbeddingTable::read("a 1 2\nb 3\n".as_bytes()).is_err());
    }

    #[test]
    fn group_affinity_examples() {
        assert_eq!(group_affinity(&AffinityStats::ZERO, 100), [0, 0, 0, 0]);
        let s = AffinityStats::from_pair_sums([2.0, 0.0, 1.0, 0.5], 2);
        assert_eq!(group_affinity(&s, 100), [100, 0, 50, 25]);
    }

    #[test]
    fn duplicate_groups_keep_their_average() {
        let queries: Vec<Query> = (0..4)
            .map(|i| q(i, "u", 0, "cheap flights", &["http://x.com/a"]))
            .collect();
        let corpus = LogCorpus::from_queries(queries).unwrap();
        let model = AffinityModel::new(&corpus, None);
        let two = model.group_stats(&[0, 1]);
        let four = model.group_stats(&[0, 1, 2, 3]);
        assert_eq!(four.n_pairs(), 6);
        assert_eq!(group_affinity(&two, 100), group_affinity(&four, 100));
        assert_eq!(group_affinity(&two, 100), [400, 400, 200, 0]);
    }

    #[test]
    fn model_pair_matches_standalone_functions() {
        let queries = vec![
            q(0, "u", 0, "cheap flights boston", &["http://www.kayak.com/flights"]),
            q(1, "u", 1, "boston hotels", &["http://hotels.com", "http://kayak.com/hotels"]),
        ];
        let corpus = LogCorpus::from_queries(queries).unwrap();
        let t = table();
        let model = AffinityModel::new(&corpus, Some(&t));
        let p = model.pair(0, 1);
        let (a, b) = (corpus.query(0), corpus.query(1));
        assert_eq!(p.r1_term, term_affinity(a, b));
        assert_eq!(p.r2_url, url_affinity(a, b));
        assert_eq!(p.r3_session, session_affinity(a, b));
        assert_eq!(p.r4_embedding, embedding_affinity(a, b, &t));
    }

    #[test]
    fn blocking_keys() {
        let queries = vec![
            q(0, "u", 0, "cheap flights", &[]),
            q(1, "v", 1, "flights", &[]),
            q(2, "w", 2, "hotels", &["http://a.com/x"]),
            q(3, "z", 3, "motels", &["http://www.a.com/y"]),
            q(4, "y", 4, "pizza", &[]),
        ];
        let corpus = LogCorpus::from_queries(queries).unwrap();
        let model = AffinityModel::new(&corpus, None);
        assert!(model.shares_block(0, 1));
        assert!(model.shares_block(2, 3));
        assert!(!model.shares_block(0, 4));
        assert!(!model.shares_block(1, 2));
    }
}
