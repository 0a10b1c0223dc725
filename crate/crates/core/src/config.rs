//! Run configuration: a flat `key = value` text file.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; missing keys keep their defaults. [`RunConfig::to_text`] writes
//! every key in a fixed order, and reading that text back yields an equal
//! config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::affinity::N_CLASSES;
use crate::artifact::{short_hash, ArtifactHeader};
use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_TOP_K;
use crate::likelihood::ModelConfig;
use crate::pruning::{CoherenceNormalization, DEFAULT_THRESHOLD};
use crate::query_log::DEFAULT_SESSION_TIMEOUT_SECS;

/// Environment variable naming the config file used when none is given.
pub const CONFIG_ENV_VAR: &str = "TASKFOREST_CONFIG";

pub const CLASS_NAMES: [&str; N_CLASSES] = ["term", "url", "session", "embedding"];

pub const DEFAULT_FRACTIONS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub reference_corpus: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub sessions: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub blocking: bool,
    pub timeout_mins: i64,
    pub remove_stopwords: bool,
    pub threshold: f64,
    pub coherence: CoherenceNormalization,
    pub top_k: usize,
    pub fractions: Vec<f64>,
    /// Worker threads; 0 lets rayon decide.
    pub threads: usize,
    /// Reserved: the pipeline is deterministic.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: None,
            embeddings: None,
            reference_corpus: None,
            gold: None,
            sessions: None,
            output_dir: None,
            model: ModelConfig::default(),
            blocking: true,
            timeout_mins: DEFAULT_SESSION_TIMEOUT_SECS / 60,
            remove_stopwords: false,
            threshold: DEFAULT_THRESHOLD,
            coherence: CoherenceNormalization::default(),
            top_k: DEFAULT_TOP_K,
            fractions: DEFAULT_FRACTIONS.to_vec(),
            threads: 0,
            seed: 0,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::format("config file", line, format!("{key}: {e}")))
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::format("config file", line, format!("{key}: expected true or false"))),
    }
}

pub fn parse_fractions(value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad fraction {f:?}: {e}")))
        })
        .collect()
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format("config file", i + 1, "expected key = value"))?;
            cfg.set(key.trim(), value.trim(), i + 1)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Applies one `key = value` setting; `line` is used in error messages.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let path = || Some(PathBuf::from(value));
        match key {
            "corpus" => self.corpus = path(),
            "embeddings" => self.embeddings = path(),
            "reference_corpus" => self.reference_corpus = path(),
            "gold" => self.gold = path(),
            "sessions" => self.sessions = path(),
            "output_dir" => self.output_dir = path(),
            "gamma" => self.model.gamma = parse_value(key, value, line)?,
            "affinity_resolution" => self.model.resolution = parse_value(key, value, line)?,
            "blocking" => self.blocking = parse_bool(key, value, line)?,
            "timeout_mins" => self.timeout_mins = parse_value(key, value, line)?,
            "remove_stopwords" => self.remove_stopwords = parse_bool(key, value, line)?,
            "threshold" => self.threshold = parse_value(key, value, line)?,
            "coherence" => {
                self.coherence = CoherenceNormalization::parse(value)
                    .ok_or_else(|| Error::format("config file", line, format!("unknown coherence {value:?}")))?
            }
            "k" => self.top_k = parse_value(key, value, line)?,
            "fractions" => {
                self.fractions = parse_fractions(value).map_err(|e| Error::format("config file", line, e.to_string()))?
            }
            "threads" => self.threads = parse_value(key, value, line)?,
            "seed" => self.seed = parse_value(key, value, line)?,
            _ => {
                let (prefix, class) = key
                    .split_once('.')
                    .ok_or_else(|| Error::format("config file", line, format!("unknown key {key:?}")))?;
                let k = CLASS_NAMES
                    .iter()
                    .position(|c| *c == class)
                    .ok_or_else(|| Error::format("config file", line, format!("unknown affinity class {class:?}")))?;
                match prefix {
                    "alpha" => self.model.params.alpha[k] = parse_value(key, value, line)?,
                    "beta" => self.model.params.beta[k] = parse_value(key, value, line)?,
                    _ => return Err(Error::format("config file", line, format!("unknown key {key:?}"))),
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.threshold.is_finite()) {
            return Err(Error::Config("threshold must be finite".into()));
        }
        if self.timeout_mins <= 0 {
            return Err(Error::Config("timeout_mins must be positive".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::Config("fractions must lie strictly between 0 and 1".into()));
        }
        Ok(())
    }

    /// Settings that change results, one `key = value` per line.
    pub fn settings_text(&self) -> String {
        let mut out = String::new();
        let m = &self.model;
        let _ = writeln!(out, "gamma = {}", m.gamma);
        for (k, name) in CLASS_NAMES.iter().enumerate() {
            let _ = writeln!(out, "alpha.{name} = {}", m.params.alpha[k]);
        }
        for (k, name) in CLASS_NAMES.iter().enumerate() {
            let _ = writeln!(out, "beta.{name} = {}", m.params.beta[k]);
        }
        let _ = writeln!(out, "affinity_resolution = {}", m.resolution);
        let _ = writeln!(out, "blocking = {}", self.blocking);
        let _ = writeln!(out, "timeout_mins = {}", self.timeout_mins);
        let _ = writeln!(out, "remove_stopwords = {}", self.remove_stopwords);
        let _ = writeln!(out, "threshold = {}", self.threshold);
        let _ = writeln!(out, "coherence = {}", self.coherence.name());
        let _ = writeln!(out, "k = {}", self.top_k);
        let fr: Vec<String> = self.fractions.iter().map(|f| f.to_string()).collect();
        let _ = writeln!(out, "fractions = {}", fr.join(","));
        let _ = writeln!(out, "seed = {}", self.seed);
        out
    }

    /// Full config, paths included. Reads back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let paths = [
            ("corpus", &self.corpus),
            ("embeddings", &self.embeddings),
            ("reference_corpus", &self.reference_corpus),
            ("gold", &self.gold),
            ("sessions", &self.sessions),
            ("output_dir", &self.output_dir),
        ];
        for (key, p) in paths {
            if let Some(p) = p {
                let _ = writeln!(out, "{key} = {}", p.display());
            }
        }
        out.push_str(&self.settings_text());
        let _ = writeln!(out, "threads = {}", self.threads);
        out
    }

    /// Hash of [`settings_text`](Self::settings_text); paths and thread
    /// count do not affect it.
    pub fn hash(&self) -> String {
        short_hash(self.settings_text().as_bytes())
    }

    pub fn header(&self) -> ArtifactHeader {
        ArtifactHeader::new(self.hash())
    }

    pub fn timeout_secs(&self) -> i64 {
        self.timeout_mins * 60
    }
}
