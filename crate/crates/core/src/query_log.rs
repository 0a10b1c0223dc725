//! Query-log ingestion: AOL-style TSV parsing, normalization, sessionization
//! and the normalized corpus file format.
//!
//! The normalized corpus file holds one query per line:
//!
//! ```text
//! query_id \t user_id \t session_id \t timestamp \t terms \t urls
//! ```
//!
//! with terms joined by single spaces and URLs joined by commas. Commas and
//! percent signs inside URLs are percent-encoded at ingest time so the file
//! round-trips byte for byte.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};

use chrono::NaiveDateTime;
use flate2::read::MultiGzDecoder;
use rayon::prelude::*;

use crate::artifact::ArtifactHeader;
use crate::error::{Error, Result};

pub type QueryId = u32;
pub type TermId = u32;
pub type SessionId = u32;

/// Default session inactivity timeout (30 minutes).
pub const DEFAULT_SESSION_TIMEOUT_SECS: i64 = 30 * 60;

const AOL_TIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// One normalized log record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub query_id: QueryId,
    pub user_id: String,
    pub raw_text: String,
    pub terms: Vec<String>,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub session_id: SessionId,
    pub clicked_urls: Vec<String>,
}

impl Query {
    /// Terms joined by single spaces; the form edit distances are taken over.
    pub fn normalized_text(&self) -> String {
        self.terms.join(" ")
    }
}

/// A parsed, immutable collection of queries with its vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogCorpus {
    queries: Vec<Query>,
    vocab: HashMap<String, TermId>,
    terms: Vec<String>,
    term_counts: Vec<u64>,
    sessionized: bool,
}

impl LogCorpus {
    /// Builds a corpus from queries whose ids are exactly `0..n` in order.
    pub fn from_queries(queries: Vec<Query>) -> Result<Self> {
        for (i, q) in queries.iter().enumerate() {
            if q.query_id as usize != i {
                return Err(Error::Config(format!(
                    "query ids must be dense and ordered; position {i} holds id {}",
                    q.query_id
                )));
            }
            if q.terms.is_empty() {
                return Err(Error::Config(format!("query {i} has no terms")));
            }
        }
        let mut vocab = HashMap::new();
        let mut terms = Vec::new();
        let mut term_counts = Vec::new();
        for q in &queries {
            for t in &q.terms {
                let id = *vocab.entry(t.clone()).or_insert_with(|| {
                    terms.push(t.clone());
                    term_counts.push(0);
                    (terms.len() - 1) as TermId
                });
                term_counts[id as usize] += 1;
            }
        }
        Ok(LogCorpus {
            queries,
            vocab,
            terms,
            term_counts,
            sessionized: false,
        })
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn query(&self, id: QueryId) -> &Query {
        &self.queries[id as usize]
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn vocab(&self) -> &HashMap<String, TermId> {
        &self.vocab
    }

    pub fn term_id(&self, term: &str) -> Option<TermId> {
        self.vocab.get(term).copied()
    }

    pub fn term(&self, id: TermId) -> &str {
        &self.terms[id as usize]
    }

    pub fn vocab_size(&self) -> usize {
        self.terms.len()
    }

    /// Total occurrences of `term` across all queries.
    pub fn term_count(&self, term: &str) -> u64 {
        self.term_id(term)
            .map_or(0, |id| self.term_counts[id as usize])
    }

    pub fn total_term_occurrences(&self) -> u64 {
        self.term_counts.iter().sum()
    }

    pub fn is_sessionized(&self) -> bool {
        self.sessionized
    }

    /// Query ids grouped by session, each session ordered by time then id.
    /// Sessions are returned in ascending session id order.
    pub fn sessions(&self) -> Vec<Vec<QueryId>> {
        let mut by_session: BTreeMap<SessionId, Vec<QueryId>> = BTreeMap::new();
        for q in &self.queries {
            by_session.entry(q.session_id).or_default().push(q.query_id);
        }
        by_session
            .into_values()
            .map(|mut ids| {
                ids.sort_by_key(|&id| (self.query(id).timestamp, id));
                ids
            })
            .collect()
    }

    /// Writes the normalized corpus file.
    pub fn write_to<W: Write>(&self, mut out: W, header: &ArtifactHeader) -> Result<()> {
        writeln!(out, "{header}")?;
        for q in &self.queries {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                q.query_id,
                q.user_id,
                q.session_id,
                q.timestamp,
                q.terms.join(" "),
                q.clicked_urls.join(",")
            )?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_file_string(&self, header: &ArtifactHeader) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf, header)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("corpus text is utf-8")
    }
}

/// Input layouts understood by [`parse_log`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    /// Tab-separated `AnonID, Query, QueryTime, ItemRank, ClickURL` with a header row.
    Aol,
    /// The tool's own normalized corpus file.
    Normalized,
}

#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    pub remove_stopwords: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub rows: usize,
    pub malformed: usize,
    pub dropped_empty: usize,
    pub queries: usize,
}

/// Lowercases, maps every non-alphanumeric character to a space and splits on
/// whitespace.
pub fn normalize_query(raw_text: &str) -> Vec<String> {
    let cleaned: String = raw_text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

// A short English function-word list, used only when stopword removal is requested.
const STOPWORDS: &[&str] = &[
    "a", "about", "an", "and", "are", "as", "at", "be", "by", "for", "from", "how", "in", "is",
    "it", "of", "on", "or", "that", "the", "this", "to", "was", "what", "when", "where", "who",
    "will", "with",
];

pub fn is_stopword(term: &str) -> bool {
    STOPWORDS.binary_search(&term).is_ok()
}

fn escape_url(url: &str) -> String {
    url.replace('%', "%25").replace(',', "%2C")
}

/// Wraps `input` in a gzip decoder when it starts with the gzip magic bytes.
pub fn maybe_decompress<'a, R: Read + 'a>(input: R) -> Result<Box<dyn BufRead + 'a>> {
    let mut buffered = BufReader::new(input);
    let magic = buffered.fill_buf()?;
    if magic.len() >= 2 && magic[0] == 0x1f && magic[1] == 0x8b {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(buffered))))
    } else {
        Ok(Box::new(buffered))
    }
}

impl LogFormat {
    /// Guesses the layout from the first data line (comment lines skipped):
    /// six tab-separated fields with numeric id, session and time columns
    /// mean a normalized corpus, anything else is read as AOL.
    pub fn detect(sample: &str) -> LogFormat {
        let Some(line) = sample.lines().find(|l| !l.starts_with('#') && !l.trim().is_empty()) else {
            return LogFormat::Aol;
        };
        let f: Vec<&str> = line.split('\t').collect();
        let numeric = |i: usize| f[i].parse::<i64>().is_ok();
        if f.len() == 6 && numeric(0) && numeric(2) && numeric(3) {
            LogFormat::Normalized
        } else {
            LogFormat::Aol
        }
    }
}

/// [`parse_log`] with the format chosen by [`LogFormat::detect`] on the
/// start of the (decompressed) stream.
pub fn parse_log_auto<R: Read>(input: R, options: &ParseOptions) -> Result<(LogCorpus, ParseReport, LogFormat)> {
    let mut reader = maybe_decompress(input)?;
    let format = LogFormat::detect(&String::from_utf8_lossy(reader.fill_buf()?));
    let (corpus, report) = match format {
        LogFormat::Aol => parse_aol(reader, options)?,
        LogFormat::Normalized => parse_normalized(reader)?,
    };
    Ok((corpus, report, format))
}

/// Parses a log stream. Gzip-compressed input is detected automatically.
///
/// AOL rows that cannot be parsed are skipped and counted; an unreadable
/// stream is an error. The normalized format is strict: any bad line is an
/// error, since the tool wrote it.
pub fn parse_log<R: Read>(
    input: R,
    format: LogFormat,
    options: &ParseOptions,
) -> Result<(LogCorpus, ParseReport)> {
    let reader = maybe_decompress(input)?;
    match format {
        LogFormat::Aol => parse_aol(reader, options),
        LogFormat::Normalized => parse_normalized(reader),
    }
}

fn parse_aol(reader: Box<dyn BufRead + '_>, options: &ParseOptions) -> Result<(LogCorpus, ParseReport)> {
    let mut report = ParseReport::default();
    let mut queries: Vec<Query> = Vec::new();
    let mut index: HashMap<(String, String, String), usize> = HashMap::new();
    let mut dropped: HashSet<(String, String, String)> = HashSet::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if lineno == 0 && line.starts_with("AnonID") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        report.rows += 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 || fields.len() > 5 {
            report.malformed += 1;
            continue;
        }
        let (user, raw, time) = (fields[0].trim(), fields[1], fields[2].trim());
        if user.is_empty() {
            report.malformed += 1;
            continue;
        }
        let Ok(ts) = NaiveDateTime::parse_from_str(time, AOL_TIME_FORMAT) else {
            report.malformed += 1;
            continue;
        };
        let click = fields.get(4).map(|s| s.trim()).unwrap_or("");
        let key = (user.to_string(), raw.to_string(), time.to_string());

        if let Some(&i) = index.get(&key) {
            let url = escape_url(click);
            if !click.is_empty() && !queries[i].clicked_urls.contains(&url) {
                queries[i].clicked_urls.push(url);
            }
            continue;
        }
        if dropped.contains(&key) {
            continue;
        }

        let mut terms = normalize_query(raw);
        if options.remove_stopwords {
            terms.retain(|t| !is_stopword(t));
        }
        if terms.is_empty() {
            report.dropped_empty += 1;
            dropped.insert(key);
            continue;
        }
        let id = queries.len();
        index.insert(key, id);
        queries.push(Query {
            query_id: id as QueryId,
            user_id: user.to_string(),
            raw_text: raw.to_string(),
            terms,
            timestamp: ts.and_utc().timestamp(),
            session_id: 0,
            clicked_urls: if click.is_empty() {
                Vec::new()
            } else {
                vec![escape_url(click)]
            },
        });
    }
    report.queries = queries.len();
    Ok((LogCorpus::from_queries(queries)?, report))
}

fn parse_normalized(reader: Box<dyn BufRead + '_>) -> Result<(LogCorpus, ParseReport)> {
    const WHAT: &str = "normalized corpus";
    let mut queries = Vec::new();
    let mut report = ParseReport::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let n = lineno + 1;
        report.rows += 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::format(WHAT, n, format!("expected 6 fields, found {}", fields.len())));
        }
        let query_id = fields[0]
            .parse::<QueryId>()
            .map_err(|e| Error::format(WHAT, n, format!("query_id: {e}")))?;
        let session_id = fields[2]
            .parse::<SessionId>()
            .map_err(|e| Error::format(WHAT, n, format!("session_id: {e}")))?;
        let timestamp = fields[3]
            .parse::<i64>()
            .map_err(|e| Error::format(WHAT, n, format!("timestamp: {e}")))?;
        let terms: Vec<String> = fields[4].split(' ').map(str::to_string).collect();
        if terms.iter().any(String::is_empty) {
            return Err(Error::format(WHAT, n, "empty term"));
        }
        let clicked_urls = if fields[5].is_empty() {
            Vec::new()
        } else {
            fields[5].split(',').map(str::to_string).collect()
        };
        queries.push(Query {
            query_id,
            user_id: fields[1].to_string(),
            raw_text: fields[4].to_string(),
            terms,
            timestamp,
            session_id,
            clicked_urls,
        });
    }
    report.queries = queries.len();
    let mut corpus = LogCorpus::from_queries(queries)?;
    corpus.sessionized = true;
    Ok((corpus, report))
}

/// Assigns session ids: per user, queries are ordered by (timestamp, query_id)
/// and a new session starts whenever the gap to the previous query exceeds
/// `timeout_secs`. Users are visited in lexicographic order, so ids are
/// globally unique and deterministic.
pub fn sessionize(mut corpus: LogCorpus, timeout_secs: i64) -> LogCorpus {
    let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, q) in corpus.queries.iter().enumerate() {
        by_user.entry(q.user_id.as_str()).or_default().push(i);
    }
    let users: Vec<Vec<usize>> = by_user.into_values().collect();

    let per_user: Vec<(Vec<(usize, u32)>, u32)> = users
        .into_par_iter()
        .map(|mut idx| {
            idx.sort_by_key(|&i| (corpus.queries[i].timestamp, i));
            let mut local = 0u32;
            let mut prev: Option<i64> = None;
            let mut out = Vec::with_capacity(idx.len());
            for i in idx {
                let ts = corpus.queries[i].timestamp;
                if let Some(p) = prev {
                    if ts - p > timeout_secs {
                        local += 1;
                    }
                }
                prev = Some(ts);
                out.push((i, local));
            }
            (out, local + 1)
        })
        .collect();

    let mut offset = 0u32;
    for (assignments, count) in per_user {
        for (i, local) in assignments {
            corpus.queries[i].session_id = offset + local;
        }
        offset += count;
    }
    corpus.sessionized = true;
    corpus
}
