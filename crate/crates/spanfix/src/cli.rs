//! Command-line interface. Exit codes: 0 success, 1 input error, 2 backend
//! failure.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use spanfix_client::{AuditLog, Backend, Detector, Fallback, LlmClient, MockBackend, OpenAiBackend, QeClient};
use spanfix_core::analytics::{annotator_agreement, group_by_item, load_ratings, Dimension, Level};
use spanfix_core::dataset::{
    dataset_stats, export_jsonl, ingest_jsonl, ingest_mqm_tsv, IngestOptions, IngestReport, SampleRecord, TsvConfig,
};
use spanfix_core::metrics::{chrf, exact_match_rate, levenshtein_similarity, pairwise_win_rate, ChrfParams, WinItem};
use spanfix_core::model::{LanguagePair, Sample};
use spanfix_core::prompting::{default_demo_set, DemoBank, LanguageNames, PromptSpec};
use spanfix_core::router::{
    kept_fraction, mean_routed_objective, route, score_dev, split_dev, tune_on_scores, write_decisions_csv, DevItem,
    RoutingDecision,
};
use spanfix_core::run::{fix_counts, DetectorRef, PipelineRun};
use spanfix_core::scorer::{ChrfScorer, Scorer, TableScorer};

use crate::config::{BackendKind, Config, MockFallback};
use crate::pipeline::{build_prompts, explain_batch, ExplainContext, RunCache};
use crate::report::{fmt_opt, parse_span_labels, write_report, ReportInputs};
use crate::service::{router, AppState, RunStore};

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Backend(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Backend(m) => write!(f, "backend failure: {m}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

trait OrInput<T> {
    fn input(self, context: &str) -> CliResult<T>;
}

impl<T, E: fmt::Display> OrInput<T> for Result<T, E> {
    fn input(self, context: &str) -> CliResult<T> {
        self.map_err(|e| CliError::Input(format!("{context}: {e}")))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "spanfix",
    version,
    about = "Explain and correct machine-translation error spans"
)]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = "SPANFIX_CONFIG")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert JSONL or MQM TSV annotations to canonical sample JSONL.
    Ingest(IngestArgs),
    /// Sample, span and length statistics per language pair.
    Stats(StatsArgs),
    /// Obtain error spans (and scores) for a dataset.
    Detect(DetectArgs),
    /// Explain spans and correct translations.
    Explain(ExplainArgs),
    /// Choose between original and correction per sample.
    Route(RouteArgs),
    /// Tune the routing threshold on a seeded dev split.
    Tune(TuneArgs),
    /// Fix rate and lexical metrics over runs.
    Metrics(MetricsArgs),
    /// Inter-annotator agreement over ratings.
    Agree(AgreeArgs),
    /// Human-evaluation tables and figure data.
    Report(ReportArgs),
    /// Start the review HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    Jsonl,
    MqmTsv,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults from the file extension (.tsv is MQM TSV).
    #[arg(long, value_enum)]
    pub format: Option<InputFormat>,
    /// Language pair, required for TSV input.
    #[arg(long)]
    pub lp: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Merge overlapping spans instead of rejecting the sample.
    #[arg(long)]
    pub merge_overlaps: bool,
    /// Exit 0 even when some records were rejected.
    #[arg(long)]
    pub allow_errors: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DetectorKind {
    Human,
    Qe,
}

#[derive(Debug, Args)]
pub struct DetectorArgs {
    /// Span source; defaults to the configured detector, else human spans.
    #[arg(long, value_enum)]
    pub detector: Option<DetectorKind>,
    #[arg(long)]
    pub qe_endpoint: Option<String>,
    /// Send references to the QE service.
    #[arg(long)]
    pub qe_use_reference: bool,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub detector: DetectorArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Mock,
    Openai,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Runs JSONL (or prompts JSONL with --dry-run); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub detector: DetectorArgs,
    /// Number of demonstrations: 0, 1 or 5.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub use_reference: bool,
    #[arg(long)]
    pub demo_bank: Option<PathBuf>,
    /// Emit prompts without calling the LLM.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    /// JSONL of {"id", "reply"} for the mock backend.
    #[arg(long)]
    pub mock_replies: Option<PathBuf>,
    #[arg(long)]
    pub model_id: Option<String>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub no_cache: bool,
    #[arg(long)]
    pub audit_log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScorerArg {
    /// chrF against the reference.
    Chrf,
    /// Referenceless score from the configured QE service.
    Qe,
}

#[derive(Debug, Args)]
pub struct RouteArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub runs: PathBuf,
    /// Threshold; accepts -inf and inf.
    #[arg(long, allow_hyphen_values = true)]
    pub tau: f64,
    #[arg(long, value_enum, default_value = "chrf")]
    pub scorer: ScorerArg,
    #[arg(long)]
    pub qe_endpoint: Option<String>,
    /// Decisions CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the routed translations as JSONL.
    #[arg(long)]
    pub translations_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub runs: PathBuf,
    /// Fraction of items used as the dev split.
    #[arg(long, default_value_t = 0.1)]
    pub fraction: f64,
    /// Routing metric m.
    #[arg(long, value_enum, default_value = "chrf")]
    pub scorer: ScorerArg,
    /// Metric whose mean is maximized.
    #[arg(long, value_enum, default_value = "chrf")]
    pub objective: ScorerArg,
    #[arg(long)]
    pub qe_endpoint: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricKind {
    FixRate,
    Levenshtein,
    Chrf,
    /// Exact match (C), similarity (S) and win rate (delta) against references.
    ReferenceCopy,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long, value_enum)]
    pub what: MetricKind,
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub qe_endpoint: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AgreeArgs {
    #[arg(long)]
    pub ratings: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub repetitions: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub ratings: PathBuf,
    #[arg(long)]
    pub runs: PathBuf,
    /// Dataset with references, for the score-delta figure.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// JSONL of {"sample_id", "span_index", "correct"} for the category table.
    #[arg(long)]
    pub span_labels: Option<PathBuf>,
    /// Span counts at or above this share one bin.
    #[arg(long, default_value_t = 5)]
    pub span_cap: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Append-only ratings log.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub bind: Option<String>,
}

/// Parses `args` and runs the command, printing errors to stderr.
pub async fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("spanfix: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Parses `args` and runs the command; parse failures are input errors.
pub async fn run_args<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Input(e.to_string()))?;
    run(cli).await
}

pub async fn run(cli: Cli) -> CliResult<()> {
    let mut config = Config::load(cli.config.as_deref(), |k| std::env::var(k).ok()).input("config")?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    match cli.command {
        Command::Ingest(a) => ingest(&config, a),
        Command::Stats(a) => stats(&config, a),
        Command::Detect(a) => detect(&config, a).await,
        Command::Explain(a) => explain(&config, a).await,
        Command::Route(a) => route_cmd(&config, a).await,
        Command::Tune(a) => tune(&config, a).await,
        Command::Metrics(a) => metrics(&config, a).await,
        Command::Agree(a) => agree(&config, a),
        Command::Report(a) => report(a),
        Command::Serve(a) => serve(&config, a).await,
    }
}

fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).input(&p.display().to_string())?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn write_jsonl<T: Serialize>(items: &[T], out: &mut dyn Write) -> CliResult<()> {
    for item in items {
        let line = serde_json::to_string(item).input("serialize")?;
        writeln!(out, "{line}").input("write")?;
    }
    out.flush().input("write")
}

fn ingest_options(config: &Config, merge_overlaps: bool) -> CliResult<IngestOptions> {
    Ok(IngestOptions {
        buckets: config.scoring.buckets().input("config")?,
        merge_overlaps,
    })
}

fn report_errors(path: &Path, report: &IngestReport) {
    for e in &report.errors {
        eprintln!("{}:{}: {}", path.display(), e.line, e.message);
    }
    for w in &report.warnings {
        eprintln!("{}:{}: warning: {}", path.display(), w.line, w.message);
    }
}

/// Loads a canonical dataset; any rejected record is an input error.
pub fn load_samples(config: &Config, path: &Path) -> CliResult<Vec<Sample>> {
    let report = ingest_jsonl(path, &ingest_options(config, false)?).input("dataset")?;
    if !report.errors.is_empty() {
        report_errors(path, &report);
        return Err(CliError::Input(format!(
            "{}: {} invalid record(s)",
            path.display(),
            report.errors.len()
        )));
    }
    Ok(report.samples)
}

pub fn load_runs(path: &Path) -> CliResult<Vec<PipelineRun>> {
    let text = fs::read_to_string(path).input(&path.display().to_string())?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).input(&format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn ingest(config: &Config, a: IngestArgs) -> CliResult<()> {
    let format = a.format.unwrap_or_else(|| {
        if a.input.extension().is_some_and(|e| e == "tsv") {
            InputFormat::MqmTsv
        } else {
            InputFormat::Jsonl
        }
    });
    let report = match format {
        InputFormat::Jsonl => ingest_jsonl(&a.input, &ingest_options(config, a.merge_overlaps)?).input("ingest")?,
        InputFormat::MqmTsv => {
            let lp: LanguagePair =
                a.lp.as_deref()
                    .ok_or_else(|| CliError::Input("--lp is required for TSV input".into()))?
                    .parse()
                    .input("--lp")?;
            let cfg = TsvConfig {
                merge_overlaps: a.merge_overlaps,
                ..TsvConfig::default()
            };
            ingest_mqm_tsv(&a.input, &lp, &cfg).input("ingest")?
        }
    };
    report_errors(&a.input, &report);
    let mut out = output(a.out.as_deref())?;
    export_jsonl(&report.samples, &mut out).input("write")?;
    out.flush().input("write")?;
    eprintln!(
        "ingested {} sample(s), rejected {}",
        report.samples.len(),
        report.errors.len()
    );
    if !report.errors.is_empty() && !a.allow_errors {
        return Err(CliError::Input(format!("{} record(s) rejected", report.errors.len())));
    }
    Ok(())
}

fn stats(config: &Config, a: StatsArgs) -> CliResult<()> {
    let samples = load_samples(config, &a.dataset)?;
    let mut groups: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for s in &samples {
        groups.entry(s.lp.to_string()).or_default().push(s.clone());
    }
    groups.insert("all".into(), samples);
    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    w.write_record(["group", "samples", "spans", "avg_input_words", "avg_span_words"])
        .input("write")?;
    for (group, samples) in &groups {
        let st = dataset_stats(samples);
        w.write_record([
            group.clone(),
            st.n_samples.to_string(),
            st.n_spans.to_string(),
            format!("{:.2}", st.avg_input_words),
            format!("{:.2}", st.avg_span_words),
        ])
        .input("write")?;
    }
    w.flush().input("write")
}

fn detector_ref(config: &Config, a: &DetectorArgs, dataset: &Path) -> CliResult<DetectorRef> {
    let qe = |endpoint: Option<String>| -> CliResult<DetectorRef> {
        let endpoint = a
            .qe_endpoint
            .clone()
            .or(endpoint)
            .or_else(|| config.scorers.qe_endpoint.clone())
            .ok_or_else(|| CliError::Input("qe detector needs --qe-endpoint or a configured endpoint".into()))?;
        Ok(DetectorRef::QeService {
            endpoint,
            use_reference: a.qe_use_reference,
        })
    };
    let human = || DetectorRef::HumanFile {
        path: dataset.display().to_string(),
    };
    match (a.detector, &config.detector) {
        (Some(DetectorKind::Human), _) => Ok(human()),
        (Some(DetectorKind::Qe), Some(DetectorRef::QeService { endpoint, .. })) => qe(Some(endpoint.clone())),
        (Some(DetectorKind::Qe), _) => qe(None),
        (
            None,
            Some(DetectorRef::QeService {
                endpoint,
                use_reference,
            }),
        ) => Ok(DetectorRef::QeService {
            endpoint: a.qe_endpoint.clone().unwrap_or_else(|| endpoint.clone()),
            use_reference: *use_reference || a.qe_use_reference,
        }),
        (None, _) => Ok(human()),
    }
}

async fn detect(config: &Config, a: DetectArgs) -> CliResult<()> {
    let samples = load_samples(config, &a.dataset)?;
    let dref = detector_ref(config, &a.detector, &a.dataset)?;
    let detector = Detector::from_ref(&dref, config.backend.timeout()).input("detector")?;
    let results = detector.detect_batch(&samples, config.backend.max_in_flight).await;
    let mut records = Vec::new();
    let mut failures = 0;
    for (sample, result) in samples.iter().zip(results) {
        match result {
            Ok(d) => {
                let mut s = sample.clone();
                s.spans = d.spans;
                let mut record = SampleRecord::from(&s);
                if let Some(score) = d.score {
                    record.score = Some(score.value);
                }
                records.push(record);
            }
            Err(e) => {
                failures += 1;
                eprintln!("{e}");
            }
        }
    }
    let mut out = output(a.out.as_deref())?;
    write_jsonl(&records, &mut out)?;
    if failures > 0 {
        return Err(CliError::Backend(format!("{failures} sample(s) failed detection")));
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReplyRecord {
    id: String,
    reply: String,
}

fn load_replies(path: &Path) -> CliResult<HashMap<String, String>> {
    let text = fs::read_to_string(path).input(&path.display().to_string())?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: ReplyRecord = serde_json::from_str(line).input(&format!("{}:{}", path.display(), i + 1))?;
        out.insert(r.id, r.reply);
    }
    Ok(out)
}

fn build_client(config: &Config, a: &ExplainArgs) -> CliResult<LlmClient> {
    let mut backend_cfg = config.backend.clone();
    if let Some(b) = a.backend {
        backend_cfg.kind = match b {
            BackendArg::Mock => BackendKind::Mock,
            BackendArg::Openai => BackendKind::Openai,
        };
    }
    if let Some(p) = &a.mock_replies {
        backend_cfg.mock_replies = Some(p.clone());
    }
    if let Some(m) = &a.model_id {
        backend_cfg.model_id = m.clone();
    }
    if let Some(p) = &a.audit_log {
        backend_cfg.audit_log = Some(p.clone());
    }
    let backend: Arc<dyn Backend> = match backend_cfg.kind {
        BackendKind::Mock => {
            let replies = match &backend_cfg.mock_replies {
                Some(p) => load_replies(p)?,
                None => HashMap::new(),
            };
            let fallback = match backend_cfg.mock_fallback {
                MockFallback::Synthesize => Fallback::Synthesize,
                MockFallback::Fail => Fallback::Fail,
            };
            Arc::new(MockBackend::replay(replies, fallback))
        }
        BackendKind::Openai => {
            let key = match &backend_cfg.api_key_env {
                Some(var) => Some(
                    std::env::var(var)
                        .map_err(|_| CliError::Input(format!("environment variable {var} is not set")))?,
                ),
                None => None,
            };
            Arc::new(OpenAiBackend::new(&backend_cfg.base_url, key, backend_cfg.timeout()).input("backend")?)
        }
    };
    let mut client = LlmClient::new(backend, backend_cfg.gen_params())
        .with_retry(backend_cfg.retry())
        .with_max_in_flight(a.max_in_flight.unwrap_or(backend_cfg.max_in_flight));
    if let Some(path) = &backend_cfg.audit_log {
        client = client.with_audit(Arc::new(AuditLog::to_file(path).input("audit log")?));
    }
    Ok(client)
}

#[derive(Serialize)]
struct PromptRecord<'a> {
    id: &'a str,
    prompt: &'a str,
}

async fn explain(config: &Config, a: ExplainArgs) -> CliResult<()> {
    let samples = load_samples(config, &a.dataset)?;
    let k = a.k.unwrap_or(config.prompt.k);
    let use_reference = a.use_reference || config.prompt.use_reference;
    let bank = match (k, a.demo_bank.as_ref().or(config.paths.demo_bank.as_ref())) {
        (0, _) => DemoBank::default(),
        (_, Some(p)) => DemoBank::load(p).input("demo bank")?,
        (_, None) => return Err(CliError::Input(format!("k = {k} needs --demo-bank or paths.demo_bank"))),
    };
    let specs = samples
        .iter()
        .map(|s| {
            Ok(PromptSpec::explain(
                use_reference,
                default_demo_set(&bank, &s.lp, k).input("demos")?,
            ))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let dref = detector_ref(config, &a.detector, &a.dataset)?;
    if a.dry_run && !matches!(dref, DetectorRef::HumanFile { .. }) {
        return Err(CliError::Input(
            "--dry-run makes no network calls and needs the human detector".into(),
        ));
    }
    let detector = Detector::from_ref(&dref, config.backend.timeout()).input("detector")?;
    let cache = match (
        a.no_cache || a.dry_run,
        a.cache_dir.as_ref().or(config.paths.cache_dir.as_ref()),
    ) {
        (false, Some(dir)) => Some(RunCache::open(dir).input("cache dir")?),
        _ => None,
    };
    let client = build_client(config, &a)?;
    let ctx = ExplainContext {
        max_in_flight: a.max_in_flight.unwrap_or(config.backend.max_in_flight),
        client,
        names: LanguageNames::default().with_overrides(&config.prompt.language_names),
        buckets: config.scoring.buckets().input("config")?,
        weights: config.scoring.weights().input("config")?,
        cache,
    };
    let mut out = output(a.out.as_deref())?;

    if a.dry_run {
        let mut failures = 0;
        for result in build_prompts(&ctx, &samples, &detector, &specs).await {
            match result {
                Ok(run) => {
                    let prompt = run.prompt.as_ref().expect("prepared runs carry a prompt");
                    let line = serde_json::to_string(&PromptRecord {
                        id: &run.sample_id,
                        prompt: &prompt.text,
                    })
                    .input("serialize")?;
                    writeln!(out, "{line}").input("write")?;
                }
                Err(run) => {
                    failures += 1;
                    if let Some(f) = &run.failure {
                        eprintln!("sample {}: {}", run.sample_id, f.message);
                    }
                }
            }
        }
        out.flush().input("write")?;
        if failures > 0 {
            return Err(CliError::Input(format!("{failures} prompt(s) could not be built")));
        }
        return Ok(());
    }

    let runs = explain_batch(&ctx, &samples, &detector, &specs).await;
    write_jsonl(&runs, &mut out)?;
    let (mut backend_failures, mut input_failures) = (0, 0);
    for run in &runs {
        if let Some(f) = &run.failure {
            eprintln!("sample {}: {:?} failed: {}", run.sample_id, f.stage, f.message);
            if f.backend {
                backend_failures += 1;
            } else {
                input_failures += 1;
            }
        }
    }
    let ok = runs.len() - backend_failures - input_failures;
    eprintln!("explained {ok}/{} sample(s)", runs.len());
    if backend_failures > 0 {
        return Err(CliError::Backend(format!(
            "{backend_failures} sample(s) failed at the backend"
        )));
    }
    if input_failures > 0 {
        return Err(CliError::Input(format!("{input_failures} sample(s) had invalid input")));
    }
    Ok(())
}

/// A run joined with its sample.
struct Joined<'a> {
    sample: &'a Sample,
    run: &'a PipelineRun,
}

fn join<'a>(samples: &'a [Sample], runs: &'a [PipelineRun]) -> CliResult<Vec<Joined<'a>>> {
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    runs.iter()
        .map(|run| {
            let sample = by_id
                .get(run.sample_id.as_str())
                .ok_or_else(|| CliError::Input(format!("run {} has no sample in the dataset", run.sample_id)))?;
            Ok(Joined { sample, run })
        })
        .collect()
}

/// Scores `(src, hyp)` pairs with the QE service into a lookup table.
async fn qe_table(endpoint: &str, pairs: Vec<(String, String)>, config: &Config) -> CliResult<TableScorer> {
    let client = QeClient::new(endpoint, config.backend.timeout()).input("qe client")?;
    let mut unique = pairs;
    unique.sort();
    unique.dedup();
    let results: Vec<_> = stream::iter(unique.iter().enumerate().map(|(i, (src, hyp))| {
        let client = &client;
        async move { client.query(&format!("pair-{i}"), src, hyp, None).await }
    }))
    .buffered(config.backend.max_in_flight)
    .collect()
    .await;
    let mut table = TableScorer::new("qe");
    for ((src, hyp), result) in unique.into_iter().zip(results) {
        let out = result.map_err(|e| CliError::Backend(e.to_string()))?;
        table.insert(src, hyp, out.score);
    }
    Ok(table)
}

fn qe_endpoint(config: &Config, flag: &Option<String>) -> CliResult<String> {
    flag.clone()
        .or_else(|| config.scorers.qe_endpoint.clone())
        .ok_or_else(|| {
            CliError::Input("referenceless scoring needs a QE endpoint (--qe-endpoint or scorers.qe_endpoint)".into())
        })
}

async fn make_scorer(
    kind: ScorerArg,
    config: &Config,
    endpoint: &Option<String>,
    pairs: impl FnOnce() -> Vec<(String, String)>,
) -> CliResult<Box<dyn Scorer>> {
    Ok(match kind {
        ScorerArg::Chrf => Box::new(ChrfScorer::default()),
        ScorerArg::Qe => Box::new(qe_table(&qe_endpoint(config, endpoint)?, pairs(), config).await?),
    })
}

fn fmt_tau(tau: f64) -> String {
    if tau == f64::NEG_INFINITY {
        "-inf".into()
    } else if tau == f64::INFINITY {
        "inf".into()
    } else {
        format!("{tau}")
    }
}

fn all_pairs(joined: &[Joined<'_>]) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    for j in joined {
        pairs.push((j.sample.source.clone(), j.run.translation.clone()));
        if let Some(c) = j.run.correction() {
            pairs.push((j.sample.source.clone(), c.to_string()));
        }
    }
    pairs
}

#[derive(Serialize)]
struct RoutedRecord<'a> {
    id: &'a str,
    translation: &'a str,
}

async fn route_cmd(config: &Config, a: RouteArgs) -> CliResult<()> {
    if a.tau.is_nan() {
        return Err(CliError::Input("--tau must not be NaN".into()));
    }
    let samples = load_samples(config, &a.dataset)?;
    let runs = load_runs(&a.runs)?;
    let joined = join(&samples, &runs)?;
    let scorer = make_scorer(a.scorer, config, &a.qe_endpoint, || all_pairs(&joined)).await?;
    let mut rows: Vec<(String, RoutingDecision)> = Vec::new();
    let mut routed = Vec::new();
    for j in &joined {
        let correction = || -> Result<String, String> {
            match (j.run.correction(), &j.run.failure) {
                (Some(c), _) => Ok(c.to_string()),
                (None, Some(f)) => Err(f.message.clone()),
                (None, None) => Err("no correction parsed".into()),
            }
        };
        let outcome = route(
            &j.sample.source,
            &j.run.translation,
            j.sample.reference.as_deref(),
            correction,
            scorer.as_ref(),
            a.tau,
        )
        .input(&format!("sample {}", j.sample.id))?;
        routed.push((j.sample.id.clone(), outcome.translation));
        rows.push((j.sample.id.clone(), outcome.decision));
    }
    let mut out = output(a.out.as_deref())?;
    write_decisions_csv(&mut out, &rows).input("write")?;
    out.flush().input("write")?;
    if let Some(path) = &a.translations_out {
        let records: Vec<RoutedRecord<'_>> = routed
            .iter()
            .map(|(id, t)| RoutedRecord { id, translation: t })
            .collect();
        write_jsonl(&records, &mut output(Some(path))?)?;
    }
    let decisions: Vec<RoutingDecision> = rows.into_iter().map(|(_, d)| d).collect();
    if let Ok(kept) = kept_fraction(&decisions) {
        eprintln!(
            "kept original for {kept:.4} of {} sample(s) at tau = {}",
            decisions.len(),
            fmt_tau(a.tau)
        );
    }
    Ok(())
}

async fn tune(config: &Config, a: TuneArgs) -> CliResult<()> {
    let samples = load_samples(config, &a.dataset)?;
    let runs = load_runs(&a.runs)?;
    let joined = join(&samples, &runs)?;
    let items: Vec<DevItem> = joined
        .iter()
        .map(|j| DevItem {
            source: j.sample.source.clone(),
            original: j.run.translation.clone(),
            correction: j.run.correction().unwrap_or(&j.run.translation).to_string(),
            reference: j.sample.reference.clone(),
        })
        .collect();
    let (dev, test) = split_dev(&items, a.fraction, config.seed).input("split")?;
    let pairs = || {
        items
            .iter()
            .flat_map(|i| {
                [
                    (i.source.clone(), i.original.clone()),
                    (i.source.clone(), i.correction.clone()),
                ]
            })
            .collect::<Vec<_>>()
    };
    let m = make_scorer(a.scorer, config, &a.qe_endpoint, pairs).await?;
    let objective = if a.objective == a.scorer {
        None
    } else {
        Some(make_scorer(a.objective, config, &a.qe_endpoint, pairs).await?)
    };
    let objective = objective.as_deref().unwrap_or(m.as_ref());
    let dev_scores = score_dev(&dev, m.as_ref(), objective).input("scoring dev")?;
    let best = tune_on_scores(&dev_scores).input("tune")?;
    let (test_objective, test_kept) = if test.is_empty() {
        (String::new(), String::new())
    } else {
        let scores = score_dev(&test, m.as_ref(), objective).input("scoring test")?;
        let kept = scores.iter().filter(|s| s.keeps_original(best.tau)).count() as f64 / scores.len() as f64;
        (
            format!("{:.6}", mean_routed_objective(&scores, best.tau)),
            format!("{kept:.6}"),
        )
    };
    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    w.write_record([
        "tau",
        "dev_objective",
        "n_dev",
        "n_test",
        "test_objective",
        "test_kept_fraction",
        "seed",
    ])
    .input("write")?;
    w.write_record([
        fmt_tau(best.tau),
        format!("{:.6}", best.objective_mean),
        dev.len().to_string(),
        test.len().to_string(),
        test_objective,
        test_kept,
        config.seed.to_string(),
    ])
    .input("write")?;
    w.flush().input("write")
}

fn groups<'a>(joined: &'a [Joined<'a>]) -> BTreeMap<String, Vec<&'a Joined<'a>>> {
    let mut out: BTreeMap<String, Vec<&Joined<'_>>> = BTreeMap::new();
    for j in joined {
        out.entry(j.sample.lp.to_string()).or_default().push(j);
        out.entry("all".into()).or_default().push(j);
    }
    out
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    spanfix_core::analytics::mean(&v)
}

async fn metrics(config: &Config, a: MetricsArgs) -> CliResult<()> {
    let samples = load_samples(config, &a.dataset)?;
    let runs = load_runs(&a.runs)?;
    let joined = join(&samples, &runs)?;
    let groups = groups(&joined);
    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    let corrected = |js: &[&'_ Joined<'_>]| -> Vec<(String, String, String, Option<String>)> {
        js.iter()
            .filter_map(|j| {
                Some((
                    j.sample.source.clone(),
                    j.run.translation.clone(),
                    j.run.correction()?.to_string(),
                    j.sample.reference.clone(),
                ))
            })
            .collect()
    };
    let need_ref = |r: &Option<String>| -> CliResult<String> {
        r.clone()
            .ok_or_else(|| CliError::Input("this metric needs references in the dataset".into()))
    };
    match a.what {
        MetricKind::FixRate => {
            w.write_record(["group", "runs", "spans", "fixed", "fix_rate"])
                .input("write")?;
            for (group, js) in &groups {
                let group_runs: Vec<PipelineRun> = js.iter().map(|j| j.run.clone()).collect();
                let counts = fix_counts(&group_runs).input("fix rate")?;
                let rate = counts.rate().ok();
                w.write_record([
                    group.clone(),
                    group_runs.len().to_string(),
                    counts.total.to_string(),
                    counts.fixed.to_string(),
                    rate.map(|r| format!("{r:.6}")).unwrap_or_else(|| "undefined".into()),
                ])
                .input("write")?;
            }
        }
        MetricKind::Levenshtein => {
            w.write_record(["group", "n", "mean_similarity_original_correction"])
                .input("write")?;
            for (group, js) in &groups {
                let items = corrected(js);
                let m = mean_of(items.iter().map(|(_, o, c, _)| levenshtein_similarity(o, c)));
                w.write_record([group.clone(), items.len().to_string(), fmt6(m)])
                    .input("write")?;
            }
        }
        MetricKind::Chrf => {
            w.write_record(["group", "n", "chrf_original", "chrf_correction", "delta"])
                .input("write")?;
            let params = ChrfParams::default();
            for (group, js) in &groups {
                let items = corrected(js);
                let mut orig = Vec::new();
                let mut corr = Vec::new();
                for (_, o, c, r) in &items {
                    let r = need_ref(r)?;
                    orig.push(chrf(o, &r, &params));
                    corr.push(chrf(c, &r, &params));
                }
                let (mo, mc) = (mean_of(orig.into_iter()), mean_of(corr.into_iter()));
                let delta = mo.zip(mc).map(|(o, c)| c - o);
                w.write_record([group.clone(), items.len().to_string(), fmt6(mo), fmt6(mc), fmt6(delta)])
                    .input("write")?;
            }
        }
        MetricKind::ReferenceCopy => {
            let all = corrected(&groups.get("all").cloned().unwrap_or_default());
            let scorer = match qe_endpoint(config, &a.qe_endpoint) {
                Ok(endpoint) => {
                    let mut pairs = Vec::new();
                    for (s, _, c, r) in &all {
                        pairs.push((s.clone(), c.clone()));
                        pairs.push((s.clone(), need_ref(r)?));
                    }
                    Some(qe_table(&endpoint, pairs, config).await?)
                }
                Err(_) => {
                    eprintln!("no QE endpoint configured; the delta column is left empty");
                    None
                }
            };
            w.write_record(["group", "n", "exact_match", "similarity", "win_rate"])
                .input("write")?;
            for (group, js) in &groups {
                let items = corrected(js);
                let mut corrections = Vec::new();
                let mut references = Vec::new();
                let mut wins = Vec::new();
                for (s, _, c, r) in &items {
                    let r = need_ref(r)?;
                    wins.push(WinItem {
                        source: s.clone(),
                        correction: c.clone(),
                        reference: r.clone(),
                    });
                    corrections.push(c.clone());
                    references.push(r);
                }
                let exact = exact_match_rate(&corrections, &references).ok();
                let sim = mean_of(
                    corrections
                        .iter()
                        .zip(&references)
                        .map(|(c, r)| levenshtein_similarity(c, r)),
                );
                let win = match &scorer {
                    Some(s) => fmt6(pairwise_win_rate(s, &wins).ok()),
                    None => String::new(),
                };
                w.write_record([group.clone(), items.len().to_string(), fmt6(exact), fmt6(sim), win])
                    .input("write")?;
            }
        }
    }
    w.flush().input("write")
}

fn fmt6(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "undefined".into())
}

fn agree(config: &Config, a: AgreeArgs) -> CliResult<()> {
    let ratings = load_ratings(&a.ratings).input("ratings")?;
    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    w.write_record([
        "level",
        "dimension",
        "n_items",
        "n_repetitions",
        "seed",
        "pearson_r",
        "spearman_rho",
    ])
    .input("write")?;
    let combos = [
        (Level::Explanation, Dimension::Relatedness),
        (Level::Document, Dimension::Relatedness),
        (Level::Document, Dimension::HelpfulnessQ1),
        (Level::Document, Dimension::HelpfulnessQ2),
    ];
    let mut written = 0;
    for (level, dimension) in combos {
        let items: Vec<_> = group_by_item(&ratings, level, dimension)
            .into_iter()
            .filter(|i| i.values.len() >= 2)
            .collect();
        if items.len() < 2 {
            continue;
        }
        let result = annotator_agreement(&items, config.seed, a.repetitions.max(1)).input("agreement")?;
        w.write_record([
            level.to_string(),
            dimension.to_string(),
            result.n_items.to_string(),
            result.n_repetitions.to_string(),
            result.seed.to_string(),
            fmt_opt(result.pearson_r),
            fmt_opt(result.spearman_rho),
        ])
        .input("write")?;
        written += 1;
    }
    w.flush().input("write")?;
    if written == 0 {
        return Err(CliError::Input("no level/dimension has 2+ items with 2+ raters".into()));
    }
    Ok(())
}

fn report(a: ReportArgs) -> CliResult<()> {
    let ratings = load_ratings(&a.ratings).input("ratings")?;
    let runs = load_runs(&a.runs)?;
    let samples = match &a.dataset {
        Some(p) => Some(load_samples(&Config::default(), p)?),
        None => None,
    };
    let labels = match &a.span_labels {
        Some(p) => {
            Some(parse_span_labels(&fs::read_to_string(p).input(&p.display().to_string())?).input("span labels")?)
        }
        None => None,
    };
    let inputs = ReportInputs {
        ratings: &ratings,
        runs: &runs,
        samples: samples.as_deref(),
        span_labels: labels.as_deref(),
        span_cap: a.span_cap,
    };
    for path in write_report(&inputs, &a.out_dir).input("report")? {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

async fn serve(config: &Config, a: ServeArgs) -> CliResult<()> {
    let samples = load_samples(config, &a.dataset)?;
    let runs = load_runs(&a.runs)?;
    let store = RunStore::from_runs(&runs, &samples).input("run store")?;
    let n = store.len();
    let state = Arc::new(AppState::open(store, &a.store).input("ratings store")?);
    let app = router(state, config.service.cors_origin.as_deref());
    let bind = a.bind.unwrap_or_else(|| config.service.bind.clone());
    let listener = tokio::net::TcpListener::bind(&bind)
        .await
        .input(&format!("bind {bind}"))?;
    eprintln!("serving {n} sample(s) on http://{bind}");
    axum::serve(listener, app)
        .await
        .map_err(|e| CliError::Backend(e.to_string()))
}
