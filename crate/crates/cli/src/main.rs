use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use annoflow_core::backend::{DirCache, MemoryCache, ResponseCache};
use annoflow_core::corpus::synthetic::generate;
use annoflow_core::corpus::{
    build_segments, category_distribution, ingest_corpus, stratified_sample, write_gold,
    write_transcripts, Corpus,
};
use annoflow_core::metrics::{cohen_kappa, KappaResult, UndefinedPolicy};
use annoflow_core::orchestrator::{
    build_clients, total_usage, ClientOptions, Depth, Orchestrator, RunConfig, RunLedger,
    RunOptions, StrategyEntry, StrategyId,
};
use annoflow_core::report::{read_category_table, summarize, write_report, RunSummary};
use annoflow_core::scheme::{LabelScheme, Stage};

const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Parser)]
#[command(
    name = "annoflow",
    version,
    about = "Hierarchical LLM annotation runs and reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate transcripts and gold labels and print corpus statistics.
    Ingest(IngestArgs),
    /// Draw a stratified sample of gold-labelled target turns.
    Sample(SampleArgs),
    /// Build context segments around target turns.
    Segment(SegmentArgs),
    /// Run annotation strategies and write their ledgers.
    Run(RunArgs),
    /// Score ledgers against gold labels.
    Evaluate(EvaluateArgs),
    /// Emit the category table and figure data.
    Report(ReportArgs),
    /// Repeat a synthetic configuration over shifted seeds.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// Transcript files or directories of `*.jsonl` files.
    #[arg(long = "transcripts", num_args = 1..)]
    transcripts: Vec<PathBuf>,
    /// Gold labels (`utterance_id,category`).
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Label scheme file; the built-in talk-moves scheme by default.
    #[arg(long)]
    scheme: Option<PathBuf>,
}

impl CorpusArgs {
    fn scheme(&self) -> Result<LabelScheme> {
        match &self.scheme {
            Some(p) => {
                LabelScheme::load(p).with_context(|| format!("loading scheme {}", p.display()))
            }
            None => Ok(LabelScheme::talk_moves()),
        }
    }

    fn corpus(&self, scheme: &LabelScheme) -> Result<Corpus> {
        if self.transcripts.is_empty() {
            bail!("--transcripts is required");
        }
        Ok(ingest_corpus(
            &self.transcripts,
            self.gold.as_deref(),
            scheme,
        )?)
    }
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file for target ids; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// File of target ids, one per line; every gold-labelled turn when absent.
    #[arg(long)]
    targets: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    window_k: usize,
    /// Output JSONL file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration; a small offline synthetic setup when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Output directory (ledgers/, meta/, cache/, corpus/).
    #[arg(long, default_value = "annoflow-out")]
    out: PathBuf,
    /// Only run these strategies, or with --backend, run them on that backend.
    #[arg(long = "strategy")]
    strategies: Vec<StrategyId>,
    /// Annotator backend for the strategies given with --strategy.
    #[arg(long)]
    backend: Option<String>,
    /// Adjudicator for adjudicated strategies given with --backend.
    #[arg(long)]
    adjudicator: Option<String>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Stop after this many targets per strategy (for testing resumption).
    #[arg(long, hide = true)]
    halt_after: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Exclude,
    ZeroFill,
}

impl From<Policy> for UndefinedPolicy {
    fn from(p: Policy) -> Self {
        match p {
            Policy::Exclude => UndefinedPolicy::Exclude,
            Policy::ZeroFill => UndefinedPolicy::ZeroFill,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long = "ledger", required = true, num_args = 1..)]
    ledgers: Vec<PathBuf>,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    scheme: Option<PathBuf>,
    /// How categories with undefined F1 enter the macro average.
    #[arg(long, value_enum, default_value = "exclude")]
    undefined: Policy,
    /// Also write the evaluation to <out>/meta/evaluation.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory of ledgers to report on.
    #[arg(long, conflicts_with = "table")]
    ledgers: Option<PathBuf>,
    #[arg(long, requires = "ledgers")]
    gold: Option<PathBuf>,
    /// A per-category table file to report on instead of ledgers.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    scheme: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "exclude")]
    undefined: Policy,
    #[arg(long, default_value = "annoflow-out")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    repeats: u64,
    /// Write per-run statistics to <out>/tables/simulate.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Sample(a) => sample(a),
        Command::Segment(a) => segment(a),
        Command::Run(a) => run(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::Simulate(a) => simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    })
}

#[derive(Serialize)]
struct CorpusStats {
    transcripts: usize,
    utterances: usize,
    gold_labels: usize,
    distribution: BTreeMap<String, usize>,
}

fn ingest(a: IngestArgs) -> Result<()> {
    let scheme = a.corpus.scheme()?;
    let corpus = a.corpus.corpus(&scheme)?;
    let dist = category_distribution(corpus.gold());
    print_json(&CorpusStats {
        transcripts: corpus.transcripts().len(),
        utterances: corpus.utterance_count(),
        gold_labels: corpus.gold().len(),
        distribution: dist
            .counts
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
    })
}

fn sample(a: SampleArgs) -> Result<()> {
    let scheme = a.corpus.scheme()?;
    let corpus = a.corpus.corpus(&scheme)?;
    let ids = stratified_sample(corpus.gold(), a.size, a.seed)?;
    let mut out = output(a.out.as_deref())?;
    for id in ids {
        writeln!(out, "{id}")?;
    }
    out.flush()?;
    Ok(())
}

fn read_targets(path: &Path) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn segment(a: SegmentArgs) -> Result<()> {
    let scheme = a.corpus.scheme()?;
    let corpus = a.corpus.corpus(&scheme)?;
    let targets = match &a.targets {
        Some(p) => read_targets(p)?,
        None => corpus
            .gold()
            .iter()
            .map(|g| g.utterance_id.clone())
            .collect(),
    };
    let segments = build_segments(&corpus, &targets, a.window_k)?;
    let mut out = output(a.out.as_deref())?;
    for s in &segments {
        serde_json::to_writer(&mut out, s)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::from_toml_str(DEFAULT_CONFIG)?,
    })
}

fn config_corpus(cfg: &RunConfig, args: &CorpusArgs, scheme: &LabelScheme) -> Result<Corpus> {
    if !args.transcripts.is_empty() {
        return args.corpus(scheme);
    }
    match &cfg.synthetic_corpus {
        Some(spec) => Ok(generate(spec, scheme)),
        None => bail!("no corpus: pass --transcripts or configure [synthetic_corpus]"),
    }
}

struct Setup {
    orchestrator: Orchestrator,
    corpus: Corpus,
    targets: Vec<String>,
}

fn setup(cfg: &RunConfig, corpus: Corpus, cache: Option<Arc<dyn ResponseCache>>) -> Result<Setup> {
    let scheme = Arc::new(cfg.load_scheme()?);
    let templates = cfg.load_templates()?;
    let options = ClientOptions {
        retry: cfg.retry,
        cache,
        timeout: Duration::from_secs(cfg.timeout_secs),
        ..ClientOptions::default()
    };
    let clients = build_clients(
        &cfg.backends,
        scheme.clone(),
        Arc::new(corpus.gold_map()),
        &options,
    )?;
    let targets = cfg.targets(&corpus)?;
    Ok(Setup {
        orchestrator: Orchestrator::new(scheme, templates, clients)
            .with_parallelism(cfg.parallelism),
        corpus,
        targets,
    })
}

fn select_strategies(cfg: &mut RunConfig, a: &RunArgs) -> Result<()> {
    if let Some(backend) = &a.backend {
        if a.strategies.is_empty() {
            bail!("--backend needs at least one --strategy");
        }
        let adjudicator = a.adjudicator.clone().or_else(|| {
            cfg.backends
                .iter()
                .map(|b| b.backend_id.clone())
                .find(|id| id != backend)
        });
        cfg.grid.clear();
        cfg.strategies = a
            .strategies
            .iter()
            .map(|s| StrategyEntry {
                run_id: None,
                model: None,
                strategy: *s,
                annotator: backend.clone(),
                adjudicator: (s.depth == Depth::Adjudicated)
                    .then(|| adjudicator.clone())
                    .flatten(),
                scope: Default::default(),
                panel: Vec::new(),
            })
            .collect();
    }
    Ok(())
}

#[derive(Serialize)]
struct RunMeta {
    scheme_id: String,
    seed: u64,
    targets: usize,
    runs: Vec<RunLine>,
}

#[derive(Serialize)]
struct RunLine {
    run_id: String,
    strategy: String,
    ledger: String,
    annotate_calls: usize,
    verify_calls: usize,
    adjudicate_calls: usize,
    total_tokens: u64,
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    select_strategies(&mut cfg, &a)?;
    if let Some(p) = a.parallelism {
        cfg.parallelism = p;
    }
    let mut configs = cfg.strategy_configs()?;
    if a.backend.is_none() && !a.strategies.is_empty() {
        configs.retain(|c| a.strategies.contains(&c.strategy_id));
        if configs.is_empty() {
            bail!("no configured run uses the requested strategies");
        }
    }
    let scheme = cfg.load_scheme()?;
    let corpus = config_corpus(&cfg, &a.corpus, &scheme)?;
    if a.corpus.transcripts.is_empty() {
        write_transcripts(
            &corpus,
            create(&a.out.join("corpus").join("transcripts.jsonl"))?,
        )?;
        write_gold(
            corpus.gold(),
            create(&a.out.join("corpus").join("gold.csv"))?,
        )?;
    }
    let cache: Option<Arc<dyn ResponseCache>> = cfg
        .cache
        .then(|| Arc::new(DirCache::new(a.out.join("cache"))) as Arc<dyn ResponseCache>);
    let s = setup(&cfg, corpus, cache)?;
    let options = RunOptions {
        halt_after_targets: a.halt_after,
    };
    let mut lines = Vec::new();
    for c in &configs {
        let path = a.out.join("ledgers").join(format!("{}.jsonl", c.run_id));
        let ledger = s
            .orchestrator
            .run_strategy(c, &s.corpus, &s.targets, Some(&path), options)
            .with_context(|| format!("run {}", c.run_id))?;
        let usage = total_usage(&ledger);
        let line = RunLine {
            run_id: c.run_id.clone(),
            strategy: c.strategy_id.to_string(),
            ledger: path.display().to_string(),
            annotate_calls: ledger.stage_count(Stage::Annotate),
            verify_calls: ledger.stage_count(Stage::Verify),
            adjudicate_calls: ledger.stage_count(Stage::Adjudicate),
            total_tokens: usage.attributed_total.total_tokens(),
        };
        println!(
            "{}\t{} targets\t{} adjudicated\t{} tokens",
            line.run_id,
            ledger.final_labels.len(),
            line.adjudicate_calls,
            line.total_tokens
        );
        lines.push(line);
    }
    let meta = RunMeta {
        scheme_id: scheme.scheme_id().to_string(),
        seed: cfg.seed,
        targets: s.targets.len(),
        runs: lines,
    };
    let mut w = create(&a.out.join("meta").join("run.json"))?;
    serde_json::to_writer_pretty(&mut w, &meta)?;
    writeln!(w)?;
    Ok(())
}

fn load_scheme(path: Option<&Path>) -> Result<LabelScheme> {
    match path {
        Some(p) => LabelScheme::load(p).with_context(|| format!("loading scheme {}", p.display())),
        None => Ok(LabelScheme::talk_moves()),
    }
}

fn read_gold_map(path: &Path) -> Result<BTreeMap<String, annoflow_core::scheme::CategoryId>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let labels = annoflow_core::corpus::read_gold(file, &path.display().to_string())?;
    Ok(labels
        .into_iter()
        .map(|g| (g.utterance_id, g.category))
        .collect())
}

#[derive(Serialize)]
struct Evaluation {
    summary: RunSummary<f64>,
    kappa_vs_gold: KappaResult<f64>,
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let scheme = load_scheme(a.scheme.as_deref())?;
    let gold = read_gold_map(&a.gold)?;
    let mut out = Vec::new();
    for path in &a.ledgers {
        let (ledger, _) = RunLedger::read(path)?;
        let summary = summarize::<f64>(&ledger, &gold, &scheme, a.undefined.into())?;
        let scored: BTreeMap<_, _> = ledger
            .final_labels
            .keys()
            .filter_map(|k| gold.get(k).map(|g| (k.clone(), g.clone())))
            .collect();
        out.push(Evaluation {
            summary,
            kappa_vs_gold: cohen_kappa(&scored, &ledger.final_labels)?,
        });
    }
    if let Some(dir) = &a.out {
        let mut w = create(&dir.join("meta").join("evaluation.json"))?;
        serde_json::to_writer_pretty(&mut w, &out)?;
        writeln!(w)?;
    }
    print_json(&out)
}

fn ledger_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

fn report(a: ReportArgs) -> Result<()> {
    let scheme = load_scheme(a.scheme.as_deref())?;
    let mut seeds = BTreeMap::new();
    let summaries: Vec<RunSummary<f64>> = match (&a.ledgers, &a.table) {
        (Some(dir), None) => {
            let gold_path = a.gold.as_deref().context("--ledgers needs --gold")?;
            let gold = read_gold_map(gold_path)?;
            let mut out = Vec::new();
            for path in ledger_files(dir)? {
                let (ledger, _) = RunLedger::read(&path)?;
                seeds.insert(ledger.run_id.clone(), ledger.strategy.seed);
                out.push(summarize(&ledger, &gold, &scheme, a.undefined.into())?);
            }
            out
        }
        (None, Some(table)) => {
            let name = table
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let file = File::open(table).with_context(|| format!("opening {}", table.display()))?;
            read_category_table(file, &name, &scheme)?
        }
        _ => bail!("pass either --ledgers with --gold, or --table"),
    };
    let files = write_report(&a.out, &summaries, &scheme, seeds)?;
    println!("{}", files.category_table.display());
    println!("{}", files.per_category_figure.display());
    if let Some(p) = &files.cost_performance {
        println!("{}", p.display());
    }
    println!("{}", files.meta.display());
    Ok(())
}

#[derive(Serialize)]
struct SimulationStat {
    run_id: String,
    strategy: String,
    repeats: u64,
    mean_macro_f1: f64,
    sd_macro_f1: f64,
    mean_tokens: f64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    if a.repeats == 0 {
        bail!("--repeats must be positive");
    }
    let base = load_config(a.config.as_deref())?;
    if base.synthetic_corpus.is_none() {
        bail!("simulate needs a [synthetic_corpus] section");
    }
    let configs = base.strategy_configs()?;
    let mut f1s: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut tokens: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in 0..a.repeats {
        let cfg = base.reseeded(r);
        let scheme = cfg.load_scheme()?;
        let spec = cfg.synthetic_corpus.as_ref().expect("checked above");
        let corpus = generate(spec, &scheme);
        let gold = corpus.gold_map();
        let cache = cfg
            .cache
            .then(|| Arc::new(MemoryCache::default()) as Arc<dyn ResponseCache>);
        let s = setup(&cfg, corpus, cache)?;
        let ledgers = s
            .orchestrator
            .run_all(&configs, &s.corpus, &s.targets, None)?;
        for l in &ledgers {
            let summary = summarize::<f64>(l, &gold, &scheme, UndefinedPolicy::Exclude)?;
            f1s.entry(l.run_id.clone())
                .or_default()
                .push(summary.macro_f1.unwrap_or(0.0));
            tokens
                .entry(l.run_id.clone())
                .or_default()
                .push(summary.total_tokens as f64);
        }
    }
    let stats: Vec<SimulationStat> = configs
        .iter()
        .map(|c| {
            let (mean, sd) = mean_sd(&f1s[&c.run_id]);
            SimulationStat {
                run_id: c.run_id.clone(),
                strategy: c.strategy_id.to_string(),
                repeats: a.repeats,
                mean_macro_f1: mean,
                sd_macro_f1: sd,
                mean_tokens: mean_sd(&tokens[&c.run_id]).0,
            }
        })
        .collect();
    if let Some(dir) = &a.out {
        let mut w = create(&dir.join("tables").join("simulate.csv"))?;
        writeln!(
            w,
            "run_id,strategy,repeats,mean_macro_f1,sd_macro_f1,mean_tokens"
        )?;
        for s in &stats {
            writeln!(
                w,
                "{},{},{},{:.6},{:.6},{:.1}",
                s.run_id, s.strategy, s.repeats, s.mean_macro_f1, s.sd_macro_f1, s.mean_tokens
            )?;
        }
    }
    print_json(&stats)
}
