use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};

use taskforest::artifact::ArtifactHeader;
use taskforest::config::{parse_fractions, RunConfig};
use taskforest::evaluation::{
    leaf_labeling, pair_counts, read_annotated_log, term_prediction_eval, PredictionResult, PredictionSplit,
    TaskIndex, TaskLabeling,
};
use taskforest::pruning::{build_cooccurrence, corpus_fingerprint, prune, CooccurrenceStats, PruneOptions};
use taskforest::query_log::{maybe_decompress, parse_log, parse_log_auto, sessionize, LogFormat, ParseOptions, Query};
use taskforest::synthetic::{embeddings_to_text, planted_log, to_aol_tsv, PlantedSpec};
use taskforest::{build_hierarchy, CoherenceNormalization, EmbeddingTable, EngineOptions, Hierarchy, LogCorpus};

use crate::{
    BuildArgs, Cli, Coherence, Command, DotArgs, EvalArgs, GoldFormat, IngestArgs, InputFormat, ModelArgs,
    PredictArgs, PruneArgs, RunArgs, SynthArgs, EXIT_DATA, EXIT_INTERNAL, EXIT_USAGE,
};

/// Bad or missing arguments (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A broken internal invariant (exit code 3).
#[derive(Debug)]
pub struct InternalError(pub String);

impl fmt::Display for InternalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InternalError {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.chain().any(|c| c.is::<UsageError>()) {
        EXIT_USAGE
    } else if e.chain().any(|c| c.is::<InternalError>()) {
        EXIT_INTERNAL
    } else {
        EXIT_DATA
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => match RunConfig::read(p) {
            Ok(c) => c,
            Err(e @ taskforest::Error::Io(_)) => {
                return Err(anyhow::Error::new(e).context(format!("reading config {}", p.display())))
            }
            Err(e) => return Err(usage(format!("config {}: {e}", p.display()))),
        },
        None => RunConfig::default(),
    };
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if cfg.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    match cli.command {
        Command::Ingest(a) => ingest(cfg, a),
        Command::Build(a) => build(cfg, a),
        Command::Prune(a) => prune_cmd(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::PredictTerms(a) => predict(cfg, a),
        Command::ExportDot(a) => export_dot(a),
        Command::Run(a) => run(cfg, a),
        Command::Synth(a) => synth(a),
    }
}

fn apply_model_args(cfg: &mut RunConfig, m: &ModelArgs) -> Result<()> {
    let p = &mut cfg.model.params;
    let alphas = [m.alpha_term, m.alpha_url, m.alpha_session, m.alpha_embedding];
    let betas = [m.beta_term, m.beta_url, m.beta_session, m.beta_embedding];
    for k in 0..alphas.len() {
        if let Some(v) = alphas[k] {
            p.alpha[k] = v;
        }
        if let Some(v) = betas[k] {
            p.beta[k] = v;
        }
    }
    if let Some(g) = m.gamma {
        cfg.model.gamma = g;
    }
    if let Some(r) = m.affinity_resolution {
        cfg.model.resolution = r;
    }
    if let Some(e) = &m.embeddings {
        cfg.embeddings = Some(e.clone());
    }
    if m.no_blocking {
        cfg.blocking = false;
    }
    validate(cfg)
}

fn validate(cfg: &RunConfig) -> Result<()> {
    cfg.validate().map_err(|e| usage(e.to_string()))
}

fn coherence(c: Coherence) -> CoherenceNormalization {
    match c {
        Coherence::PairMean => CoherenceNormalization::PairMean,
        Coherence::Literal => CoherenceNormalization::Literal,
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("opening {}", path.display()))
}

/// Opens a text file, gunzipping it if needed.
fn open_text(path: &Path) -> Result<Box<dyn BufRead>> {
    Ok(maybe_decompress(open(path)?)?)
}

/// Reads a corpus or raw log and sessionizes it if needed.
fn load_corpus(path: &Path, format: InputFormat, cfg: &RunConfig) -> Result<LogCorpus> {
    let options = ParseOptions {
        remove_stopwords: cfg.remove_stopwords,
    };
    let file = open(path)?;
    let (corpus, report, format) = match format {
        InputFormat::Auto => parse_log_auto(file, &options),
        InputFormat::Aol => parse_log(file, LogFormat::Aol, &options).map(|(c, r)| (c, r, LogFormat::Aol)),
        InputFormat::Normalized => {
            parse_log(file, LogFormat::Normalized, &options).map(|(c, r)| (c, r, LogFormat::Normalized))
        }
    }
    .with_context(|| format!("reading {}", path.display()))?;
    if format == LogFormat::Aol {
        info!(
            "{}: {} rows, {} malformed, {} empty after normalization, {} queries",
            path.display(),
            report.rows,
            report.malformed,
            report.dropped_empty,
            report.queries
        );
        if report.malformed > 0 {
            warn!("{}: skipped {} malformed rows", path.display(), report.malformed);
        }
    }
    if corpus.is_sessionized() {
        Ok(corpus)
    } else {
        Ok(sessionize(corpus, cfg.timeout_secs()))
    }
}

fn read_forest(path: &Path) -> Result<Hierarchy> {
    Hierarchy::read(open(path)?).with_context(|| format!("reading forest {}", path.display()))
}

fn load_embeddings(cfg: &RunConfig) -> Result<Option<EmbeddingTable>> {
    let Some(path) = &cfg.embeddings else {
        return Ok(None);
    };
    if !path.exists() {
        warn!(
            "embeddings file {} not found; embedding affinity is 0 for every pair",
            path.display()
        );
        return Ok(None);
    }
    let table = EmbeddingTable::read(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    info!("{}: {} vectors of dimension {}", path.display(), table.len(), table.dim());
    Ok(Some(table))
}

/// Writes to a `.tmp` sibling, then renames it into place.
fn write_artifact(path: &Path, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut w = BufWriter::new(File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?);
        body(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_artifact(path, |w| Ok(w.write_all(text.as_bytes())?))
}

fn ingest(mut cfg: RunConfig, a: IngestArgs) -> Result<()> {
    if let Some(t) = a.timeout_mins {
        cfg.timeout_mins = t;
    }
    if a.remove_stopwords {
        cfg.remove_stopwords = true;
    }
    validate(&cfg)?;
    let corpus = load_corpus(&a.input, a.format, &cfg)?;
    write_artifact(&a.out, |w| Ok(corpus.write_to(w, &cfg.header())?))?;
    println!(
        "ingested {} queries in {} sessions ({} terms) -> {}",
        corpus.len(),
        corpus.sessions().len(),
        corpus.vocab_size(),
        a.out.display()
    );
    Ok(())
}

fn build_forest(cfg: &RunConfig, corpus: &LogCorpus) -> Result<Hierarchy> {
    let embeddings = load_embeddings(cfg)?;
    let options = EngineOptions {
        blocking: cfg.blocking,
        ..EngineOptions::default()
    };
    let forest = build_hierarchy(corpus, embeddings.as_ref(), &cfg.model, options)?;
    if !forest.is_partition() {
        return Err(InternalError("live trees do not partition the corpus".into()).into());
    }
    let h = forest.hierarchy();
    info!(
        "{} merges, {} roots, depth {}",
        forest.merges().len(),
        h.roots().len(),
        h.depth()
    );
    Ok(h)
}

fn build(mut cfg: RunConfig, a: BuildArgs) -> Result<()> {
    apply_model_args(&mut cfg, &a.model)?;
    let corpus = load_corpus(&a.corpus, InputFormat::Auto, &cfg)?;
    let h = build_forest(&cfg, &corpus)?;
    write_artifact(&a.out, |w| Ok(h.write_to(w, &cfg.header())?))?;
    println!(
        "built forest over {} queries: {} roots, depth {} -> {}",
        corpus.len(),
        h.roots().len(),
        h.depth(),
        a.out.display()
    );
    Ok(())
}

/// Co-occurrence counts of `reference`, cached in `dir` under the corpus
/// fingerprint.
fn cooccurrence(reference: &LogCorpus, dir: &Path, header: &ArtifactHeader) -> Result<CooccurrenceStats> {
    let path = dir.join(format!("cooc-{}.tsv", corpus_fingerprint(reference)));
    if path.exists() {
        match File::open(&path).map_err(Into::into).and_then(CooccurrenceStats::read) {
            Ok(stats) => {
                info!("co-occurrence counts from cache {}", path.display());
                return Ok(stats);
            }
            Err(e) => warn!("ignoring unreadable cache {}: {e}", path.display()),
        }
    }
    let stats = build_cooccurrence(reference);
    write_artifact(&path, |w| Ok(stats.write_to(w, header)?))?;
    info!(
        "co-occurrence counts over {} sessions cached in {}",
        stats.n_sessions(),
        path.display()
    );
    Ok(stats)
}

fn prune_forest(cfg: &RunConfig, h: &Hierarchy, corpus: &LogCorpus, cache_dir: &Path) -> Result<Hierarchy> {
    let reference = match &cfg.reference_corpus {
        Some(p) => Some(load_corpus(p, InputFormat::Auto, cfg)?),
        None => None,
    };
    let stats = cooccurrence(reference.as_ref().unwrap_or(corpus), cache_dir, &cfg.header())?;
    let options = PruneOptions {
        threshold: cfg.threshold,
        normalization: cfg.coherence,
    };
    Ok(prune(h, corpus, &stats, &options)?)
}

fn prune_cmd(mut cfg: RunConfig, a: PruneArgs) -> Result<()> {
    if let Some(t) = a.threshold {
        cfg.threshold = t;
    }
    if let Some(c) = a.coherence {
        cfg.coherence = coherence(c);
    }
    if let Some(r) = &a.reference_corpus {
        cfg.reference_corpus = Some(r.clone());
    }
    validate(&cfg)?;
    let h = read_forest(&a.forest)?;
    let corpus = load_corpus(&a.corpus, InputFormat::Auto, &cfg)?;
    let cache_dir = match &a.cache_dir {
        Some(d) => d.clone(),
        None => a.out.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let pruned = prune_forest(&cfg, &h, &corpus, &cache_dir)?;
    write_artifact(&a.out, |w| Ok(pruned.write_to(w, &cfg.header())?))?;
    println!(
        "pruned forest: {} tasks at the bottom level, {} roots -> {}",
        pruned.bottom_nodes().len(),
        pruned.roots().len(),
        a.out.display()
    );
    Ok(())
}

fn read_gold(path: &Path, format: GoldFormat, corpus: Option<&LogCorpus>) -> Result<TaskLabeling> {
    match format {
        GoldFormat::Labels => {
            TaskLabeling::read(open_text(path)?).with_context(|| format!("reading labels {}", path.display()))
        }
        GoldFormat::Annotated => {
            let corpus = corpus.ok_or_else(|| usage("--gold-format annotated needs --corpus"))?;
            let (labels, report) = read_annotated_log(open_text(path)?, corpus)
                .with_context(|| format!("reading annotated log {}", path.display()))?;
            info!(
                "{}: {} rows, {} matched to corpus queries, {} unmatched",
                path.display(),
                report.rows,
                report.matched,
                report.unmatched
            );
            if report.unmatched > 0 {
                warn!("{} annotated rows have no matching corpus query", report.unmatched);
            }
            Ok(labels)
        }
    }
}

fn eval_reports(h: &Hierarchy, gold: &TaskLabeling, header: &ArtifactHeader) -> Result<(String, String)> {
    let predicted = leaf_labeling(h);
    let counts = pair_counts(&predicted, gold)?;
    let scores = counts.scores();
    let scored = gold
        .assignment
        .keys()
        .filter(|q| predicted.assignment.contains_key(q))
        .count();
    let report = format!(
        "{header}\n\
         queries scored: {scored} (forest {}, gold {})\n\
         same-task pairs: predicted {}, gold {}, both {}\n\
         precision: {:.6}\n\
         recall: {:.6}\n\
         f1: {:.6}\n",
        predicted.len(),
        gold.len(),
        counts.same_predicted,
        counts.same_gold,
        counts.same_both,
        scores.precision,
        scores.recall,
        scores.f1
    );
    let results = format!(
        "{header}\nmetric\tvalue\nprecision\t{}\nrecall\t{}\nf1\t{}\nqueries_scored\t{scored}\n\
         pairs_predicted\t{}\npairs_gold\t{}\npairs_both\t{}\n",
        scores.precision, scores.recall, scores.f1, counts.same_predicted, counts.same_gold, counts.same_both
    );
    Ok((report, results))
}

fn eval(cfg: RunConfig, a: EvalArgs) -> Result<()> {
    let h = read_forest(&a.forest)?;
    let corpus = match &a.corpus {
        Some(p) => Some(load_corpus(p, InputFormat::Auto, &cfg)?),
        None => None,
    };
    let gold = read_gold(&a.gold, a.gold_format, corpus.as_ref())?;
    let (report, results) = eval_reports(&h, &gold, &cfg.header())?;
    print!("{report}");
    if let Some(path) = &a.results {
        write_text(path, &results)?;
    }
    Ok(())
}

fn prediction_reports(
    h: &Hierarchy,
    corpus: &LogCorpus,
    sessions: &LogCorpus,
    cfg: &RunConfig,
) -> Result<(String, String)> {
    let index = TaskIndex::new(h, corpus)?;
    let groups: Vec<Vec<&Query>> = sessions
        .sessions()
        .into_iter()
        .map(|ids| ids.into_iter().map(|q| sessions.query(q)).collect())
        .collect();
    let splits = cfg
        .fractions
        .iter()
        .map(|&f| PredictionSplit::new(f))
        .collect::<taskforest::Result<Vec<_>>>()?;
    let results: Vec<PredictionResult> = term_prediction_eval(&index, &groups, &splits, cfg.top_k);
    let header = cfg.header();
    let mut report = format!("{header}\nterm prediction with k = {}\n", cfg.top_k);
    let mut rows = format!("{header}\nmetric\tvalue\n");
    if let Some(r) = results.first() {
        report.push_str(&format!(
            "sessions evaluated: {}, skipped (fewer than 2 queries): {}\n",
            r.evaluated_sessions, r.skipped_sessions
        ));
        rows.push_str(&format!(
            "evaluated_sessions\t{}\nskipped_sessions\t{}\n",
            r.evaluated_sessions, r.skipped_sessions
        ));
    }
    for r in &results {
        report.push_str(&format!(
            "fraction {}: mean matched terms {:.6}\n",
            r.matching_fraction, r.mean_matched_terms
        ));
        rows.push_str(&format!("mean_matched@{}\t{}\n", r.matching_fraction, r.mean_matched_terms));
    }
    Ok((report, rows))
}

fn apply_prediction_args(cfg: &mut RunConfig, fractions: &Option<String>, k: Option<usize>) -> Result<()> {
    if let Some(f) = fractions {
        cfg.fractions = parse_fractions(f).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(k) = k {
        cfg.top_k = k;
    }
    validate(cfg)
}

fn predict(mut cfg: RunConfig, a: PredictArgs) -> Result<()> {
    apply_prediction_args(&mut cfg, &a.fractions, a.k)?;
    let h = read_forest(&a.forest)?;
    let corpus = load_corpus(&a.corpus, InputFormat::Auto, &cfg)?;
    let sessions = load_corpus(&a.sessions, InputFormat::Auto, &cfg)?;
    let (report, rows) = prediction_reports(&h, &corpus, &sessions, &cfg)?;
    print!("{report}");
    if let Some(path) = &a.results {
        write_text(path, &rows)?;
    }
    Ok(())
}

fn dot_text(h: &Hierarchy, corpus: Option<&LogCorpus>, header: &ArtifactHeader) -> String {
    format!("{header}\n{}", h.to_dot(corpus))
}

fn export_dot(a: DotArgs) -> Result<()> {
    let h = read_forest(&a.forest)?;
    let cfg = RunConfig::default();
    let corpus = match &a.corpus {
        Some(p) => Some(load_corpus(p, InputFormat::Auto, &cfg)?),
        None => None,
    };
    let header = match fs::read_to_string(&a.forest)?.lines().next().and_then(ArtifactHeader::parse) {
        Some(h) => h,
        None => ArtifactHeader::default(),
    };
    let text = dot_text(&h, corpus.as_ref(), &header);
    match &a.out {
        Some(path) => write_text(path, &text),
        None => Ok(io::stdout().write_all(text.as_bytes())?),
    }
}

struct Stages<'a> {
    out_dir: &'a Path,
    done: Vec<String>,
}

impl Stages<'_> {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        info!("stage {name}");
        match f() {
            Ok(v) => {
                self.done.push(name.to_string());
                Ok(v)
            }
            Err(e) => {
                let marker = format!(
                    "stage {name} failed: {e:#}\ncompleted stages: {}\n",
                    if self.done.is_empty() {
                        "none".to_string()
                    } else {
                        self.done.join(", ")
                    }
                );
                if let Err(w) = fs::write(self.out_dir.join("PARTIAL"), marker) {
                    warn!("could not write PARTIAL marker: {w}");
                }
                Err(e.context(format!("stage {name}")))
            }
        }
    }
}

fn require_exists(what: &str, path: &Option<PathBuf>) -> Result<()> {
    if let Some(p) = path {
        if !p.exists() {
            bail!("{what} {} does not exist", p.display());
        }
    }
    Ok(())
}

fn run(mut cfg: RunConfig, a: RunArgs) -> Result<()> {
    apply_model_args(&mut cfg, &a.model)?;
    if let Some(t) = a.timeout_mins {
        cfg.timeout_mins = t;
    }
    if a.remove_stopwords {
        cfg.remove_stopwords = true;
    }
    if let Some(t) = a.threshold {
        cfg.threshold = t;
    }
    if let Some(c) = a.coherence {
        cfg.coherence = coherence(c);
    }
    for (flag, slot) in [
        (&a.input, &mut cfg.corpus),
        (&a.out_dir, &mut cfg.output_dir),
        (&a.reference_corpus, &mut cfg.reference_corpus),
        (&a.gold, &mut cfg.gold),
        (&a.sessions, &mut cfg.sessions),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    apply_prediction_args(&mut cfg, &a.fractions, a.k)?;

    let input = cfg.corpus.clone().ok_or_else(|| usage("no input: pass --input or set `corpus`"))?;
    let out_dir = cfg
        .output_dir
        .clone()
        .ok_or_else(|| usage("no output directory: pass --out-dir or set `output_dir`"))?;
    require_exists("input", &cfg.corpus)?;
    require_exists("reference corpus", &cfg.reference_corpus)?;
    require_exists("gold file", &cfg.gold)?;
    require_exists("sessions file", &cfg.sessions)?;
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let partial = out_dir.join("PARTIAL");
    if partial.exists() {
        fs::remove_file(&partial)?;
    }
    let header = cfg.header();
    write_text(&out_dir.join("config.conf"), &format!("{header}\n{}", cfg.to_text()))?;

    let mut st = Stages {
        out_dir: &out_dir,
        done: Vec::new(),
    };
    let corpus = st.stage("ingest", || {
        let corpus = load_corpus(&input, InputFormat::Auto, &cfg)?;
        write_artifact(&out_dir.join("corpus.tsv"), |w| Ok(corpus.write_to(w, &header)?))?;
        Ok(corpus)
    })?;
    let forest = st.stage("build", || {
        let h = build_forest(&cfg, &corpus)?;
        write_artifact(&out_dir.join("forest.tsv"), |w| Ok(h.write_to(w, &header)?))?;
        Ok(h)
    })?;
    let pruned = st.stage("prune", || {
        let p = prune_forest(&cfg, &forest, &corpus, &out_dir)?;
        write_artifact(&out_dir.join("pruned.tsv"), |w| Ok(p.write_to(w, &header)?))?;
        Ok(p)
    })?;
    st.stage("export-dot", || {
        write_text(&out_dir.join("pruned.dot"), &dot_text(&pruned, Some(&corpus), &header))
    })?;
    if let Some(gold_path) = cfg.gold.clone() {
        st.stage("eval", || {
            let gold = read_gold(&gold_path, a.gold_format, Some(&corpus))?;
            let (report, results) = eval_reports(&pruned, &gold, &header)?;
            write_text(&out_dir.join("eval.txt"), &report)?;
            write_text(&out_dir.join("eval.tsv"), &results)?;
            print!("{report}");
            Ok(())
        })?;
    }
    if let Some(sessions_path) = cfg.sessions.clone() {
        st.stage("predict-terms", || {
            let sessions = load_corpus(&sessions_path, InputFormat::Auto, &cfg)?;
            let (report, rows) = prediction_reports(&pruned, &corpus, &sessions, &cfg)?;
            write_text(&out_dir.join("predict.txt"), &report)?;
            write_text(&out_dir.join("predict.tsv"), &rows)?;
            print!("{report}");
            Ok(())
        })?;
    }
    println!(
        "pipeline complete: {} queries, {} roots, {} bottom-level tasks -> {}",
        corpus.len(),
        pruned.roots().len(),
        pruned.bottom_nodes().len(),
        out_dir.display()
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.tasks == 0 || a.subtasks == 0 || a.queries == 0 {
        return Err(usage("--tasks, --subtasks and --queries must be positive"));
    }
    let spec = PlantedSpec {
        tasks: a.tasks,
        subtasks_per_task: a.subtasks,
        queries_per_subtask: a.queries,
        reference_sessions_per_subtask: a.reference_sessions,
        seed: a.seed,
        ..PlantedSpec::default()
    };
    let log = planted_log(&spec);
    let header = ArtifactHeader::default();
    let dir = &a.out_dir;
    write_text(&dir.join("log.tsv"), &to_aol_tsv(&log.corpus))?;
    write_text(&dir.join("reference.tsv"), &to_aol_tsv(&log.reference))?;
    write_text(&dir.join("embeddings.txt"), &embeddings_to_text(&log.embeddings))?;
    for (name, labels) in [("gold-subtasks.tsv", &log.subtask_labels), ("gold-tasks.tsv", &log.task_labels)] {
        write_artifact(&dir.join(name), |w| {
            writeln!(w, "{header}")?;
            Ok(labels.write_to(w)?)
        })?;
    }
    println!(
        "wrote {} queries ({} tasks x {} subtasks) and {} reference queries to {}",
        log.corpus.len(),
        a.tasks,
        a.subtasks,
        log.reference.len(),
        dir.display()
    );
    Ok(())
}
