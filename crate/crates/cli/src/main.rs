//! `meaeq`: run the query-selection pipeline one stage at a time, with every
//! intermediate result kept as a file in a work directory.

mod manifest;

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use meaeq_core::backend::{read_score_cache, write_score_cache};
use meaeq_core::cluster::{self, write_reduction};
use meaeq_core::eval::{self, emit_report, ReportFormat, SeedMetrics};
use meaeq_core::filter::{self, filter_report, read_filtered_pool, write_filtered_pool, ScoreTable};
use meaeq_core::sampler::{self, compute_budget, read_query_set, write_query_set, QuerySetHeader, Strategy};
use meaeq_core::synth::{self, SynthConfig};
use meaeq_core::victim::{query_victim, LedgerEntry, QueryLedger};
use meaeq_core::{
    corpus, student, CorpusStore, Error, ErrorKind, ExperimentConfig, FilterConfig, IngestOptions,
    MetricsReport, QueryPool, Result, StudentModel,
};
use serde_json::json;

use manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "meaeq",
    version,
    about = "Select, buy and distill victim labels for text-classifier extraction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set budget.absolute_k=60`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory holding the stage artifacts and the run manifest.
    #[arg(long, default_value = "meaeq-run")]
    work: PathBuf,
    /// Base address of the inference sidecar for the http backend.
    #[arg(long, env = "MEAEQ_SIDECAR_URL")]
    sidecar_url: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Split a raw text file into sentences and store them with ids.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        min_tokens: usize,
        #[arg(long, default_value_t = 128)]
        max_tokens: usize,
        /// Keep repeated sentences.
        #[arg(long)]
        no_dedup: bool,
    },
    /// Score every corpus sentence against the task prompt.
    Score(Common),
    /// Keep the sentences whose entailment score reaches epsilon.
    Filter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Cluster the filtered pool and keep one representative per cluster.
    Reduce {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw a query set without clustering (`rs`) or from the filtered pool (`meaeq`).
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Buy victim labels for the query set and train the student.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report the number of queries that would be sent and stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Score the student against the victim, or run a full multi-seed experiment.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run every configured seed end to end instead of scoring `student.bin`.
        #[arg(long)]
        experiment: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render metrics reports as a table.
    Report {
        /// Metrics files written by `eval`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic task: corpus, embeddings, victim, eval set and config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Absolute budget written into the generated config.
        #[arg(long, default_value_t = 30)]
        k: usize,
        #[arg(long)]
        pool_size: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Score(_) => "score",
            Command::Filter { .. } => "filter",
            Command::Reduce { .. } => "reduce",
            Command::Sample { .. } => "sample",
            Command::Attack { .. } => "attack",
            Command::Eval { .. } => "eval",
            Command::Report { .. } => "report",
            Command::Synth { .. } => "synth",
        }
    }
}

const SCORES: &str = "scores.jsonl";
const FILTERED: &str = "filtered.jsonl";
const REDUCTION: &str = "reduction.jsonl";
const QUERIES: &str = "queries.jsonl";
const LABELS: &str = "labels.jsonl";
const STUDENT: &str = "student.bin";
const METRICS: &str = "metrics.json";

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Validation => 2,
        ErrorKind::Backend => 3,
        ErrorKind::Budget => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = cli.command.stage();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(e.kind());
            let record = json!({"stage": stage, "code": code, "message": e.to_string()});
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest {
            input,
            out,
            min_tokens,
            max_tokens,
            no_dedup,
        } => {
            let opts = IngestOptions {
                min_tokens,
                max_tokens,
                dedup: !no_dedup,
            };
            let store = corpus::ingest(&input, &opts)?;
            store.save(&out)?;
            say(json!({"stage": "ingest", "sentences": store.len(), "out": out}));
            Ok(())
        }
        Command::Score(common) => score(&common),
        Command::Filter { common, epsilon } => filter_stage(&common, epsilon),
        Command::Reduce { common, seed } => reduce_stage(&common, seed),
        Command::Sample {
            common,
            strategy,
            seed,
        } => sample_stage(&common, strategy.as_deref(), seed),
        Command::Attack {
            common,
            seed,
            dry_run,
        } => attack(&common, seed, dry_run),
        Command::Eval {
            common,
            experiment,
            out,
        } => eval_stage(&common, experiment, out),
        Command::Report { inputs, format, out } => report(&inputs, format, out.as_deref()),
        Command::Synth {
            out,
            seed,
            k,
            pool_size,
        } => {
            let mut config = SynthConfig {
                seed,
                ..SynthConfig::default()
            };
            if let Some(n) = pool_size {
                config.pool_size = n;
            }
            let paths = synth::generate(&config)?.write(&out, k)?;
            say(json!({"stage": "synth", "config": paths.config, "corpus": paths.corpus}));
            Ok(())
        }
    }
}

fn say(value: serde_json::Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{value}");
}

struct Context {
    config: ExperimentConfig,
    work: PathBuf,
}

impl Context {
    fn open(common: &Common) -> Result<Self> {
        let mut overrides = Vec::new();
        if let Some(url) = &common.sidecar_url {
            overrides.push(format!("backend.url={}", toml_quote(url)));
        }
        overrides.extend(common.overrides.iter().cloned());
        let config = ExperimentConfig::load(&common.config, &overrides)?;
        std::fs::create_dir_all(&common.work).map_err(|e| Error::Io {
            path: common.work.clone(),
            source: e,
        })?;
        Ok(Context {
            config,
            work: common.work.clone(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.work.join(name)
    }

    /// Path of an upstream artifact, which must already exist.
    fn input(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Config(format!(
                "missing {} (run `meaeq {producer}` first)",
                p.display()
            )))
        }
    }

    fn store(&self) -> Result<CorpusStore> {
        CorpusStore::load(&self.config.corpus.path)
    }

    fn budget(&self) -> Result<usize> {
        compute_budget(&self.config.budget)
    }

    fn finish(&self, stage: &str, outputs: &[&str], seed: Option<u64>) -> Result<()> {
        let outputs = outputs.iter().map(|n| self.path(n)).collect();
        RunManifest::load_or_new(&self.work)?.record(
            &self.work,
            stage,
            outputs,
            seed,
            Some(self.config.digest()),
        )
    }
}

fn toml_quote(s: &str) -> String {
    let escaped = s.replace('\\', "\\\\").replace('"', "\\\"");
    format!("\"{escaped}\"")
}

fn score(common: &Common) -> Result<()> {
    let ctx = Context::open(common)?;
    let store = ctx.store()?;
    let task = ctx.config.task.resolve()?;
    let backend = ctx.config.backend.build()?;
    let pool = QueryPool::original(&store);
    let scores = filter::score_pool(&pool, &store, backend.as_ref(), &task.prompt)?;
    let cache: HashMap<_, _> = scores.into_iter().collect();
    write_score_cache(ctx.path(SCORES), &cache)?;
    say(json!({"stage": "score", "scored": cache.len(), "prompt": task.prompt.text()}));
    ctx.finish("score", &[SCORES], None)
}

fn filter_stage(common: &Common, epsilon: Option<f64>) -> Result<()> {
    let ctx = Context::open(common)?;
    let scores_path = ctx.input(SCORES, "score")?;
    let store = ctx.store()?;
    let task = ctx.config.task.resolve()?;
    let cfg = FilterConfig::new(epsilon.unwrap_or(ctx.config.strategy.epsilon), task.prompt)?;
    let scores: ScoreTable = read_score_cache(&scores_path)?.into_iter().collect();
    let pool = QueryPool::original(&store);
    let kept = filter::filter_task_relevant(&pool, &scores, &cfg)?;
    write_filtered_pool(ctx.path(FILTERED), &kept, &scores)?;
    let r = filter_report(&pool, &kept)?;
    say(json!({"stage": "filter", "epsilon": cfg.epsilon, "kept": r.kept, "dropped": r.dropped}));
    ctx.finish("filter", &[FILTERED], None)
}

/// Cluster the filtered pool and pad empty-cluster slots, writing both the
/// reduction and the query set.
fn reduce_stage(common: &Common, seed: u64) -> Result<()> {
    let ctx = Context::open(common)?;
    let filtered_path = ctx.input(FILTERED, "filter")?;
    let store = ctx.store()?;
    let backend = ctx.config.backend.build()?;
    let k = ctx.budget()?;
    let (filtered, _) = read_filtered_pool(&filtered_path)?;
    let result = cluster::reduce(
        &filtered,
        &store,
        backend.as_ref(),
        k,
        ctx.config.strategy.iterations,
        seed,
    )?;
    write_reduction(ctx.path(REDUCTION), &result)?;
    let chosen = result.representatives.len();
    let queries = sampler::top_up(&filtered, result.representatives, k, seed)?;
    write_queries(&ctx, Strategy::Meaeq, seed, k, &queries, &store)?;
    say(json!({
        "stage": "reduce",
        "k": k,
        "representatives": chosen,
        "topped_up": k - chosen,
        "objective": result.objective_value,
        "iterations": result.iterations_run,
    }));
    ctx.finish("reduce", &[REDUCTION, QUERIES], Some(seed))
}

fn write_queries(
    ctx: &Context,
    strategy: Strategy,
    seed: u64,
    k: usize,
    pool: &QueryPool,
    store: &CorpusStore,
) -> Result<()> {
    let header = QuerySetHeader {
        strategy,
        seed,
        k,
        config_digest: ctx.config.digest(),
    };
    write_query_set(ctx.path(QUERIES), &header, pool, store)
}

fn sample_stage(common: &Common, strategy: Option<&str>, seed: u64) -> Result<()> {
    let ctx = Context::open(common)?;
    let strategy = match strategy {
        Some(s) => s.parse()?,
        None => ctx.config.strategy.name,
    };
    match strategy {
        Strategy::Meaeq => reduce_stage(common, seed),
        Strategy::Random => {
            let store = ctx.store()?;
            let k = ctx.budget()?;
            let queries = sampler::random_sample(&QueryPool::original(&store), k, seed)?;
            write_queries(&ctx, strategy, seed, k, &queries, &store)?;
            say(json!({"stage": "sample", "strategy": strategy.name(), "k": k}));
            ctx.finish("sample", &[QUERIES], Some(seed))
        }
        Strategy::AlRandom | Strategy::AlUncertainty => Err(Error::Config(format!(
            "{strategy} picks queries while labeling them; run `meaeq eval --experiment --set strategy.name={strategy}`"
        ))),
    }
}

fn attack(common: &Common, seed: u64, dry_run: bool) -> Result<()> {
    let ctx = Context::open(common)?;
    let queries_path = ctx.input(QUERIES, "sample")?;
    let (header, queries, _) = read_query_set(&queries_path)?;
    let k = ctx.budget()?;
    if dry_run {
        say(json!({"stage": "attack", "dry_run": true, "queries": queries.len(), "budget": k}));
        return Ok(());
    }
    let experiment = ctx.config.build()?;
    let mut ledger = QueryLedger::new(k);
    query_victim(
        experiment.victim.as_ref(),
        &queries,
        &experiment.lookup,
        &mut ledger,
    )?;
    write_ledger(&ctx.path(LABELS), ledger.log())?;
    let student = student::train_or_constant(
        &ledger.labeled_pairs(),
        &experiment.lookup,
        experiment.backend.as_ref(),
        experiment.task.num_classes,
        &ctx.config.student.with_seed(seed),
    )?;
    student.save(ctx.path(STUDENT))?;
    say(json!({
        "stage": "attack",
        "strategy": header.strategy.name(),
        "spent": ledger.spent(),
        "budget": k,
    }));
    ctx.finish("attack", &[LABELS, STUDENT], Some(seed))
}

fn write_ledger(path: &Path, log: &[LedgerEntry]) -> Result<()> {
    let mut body = String::new();
    for e in log {
        body.push_str(&serde_json::to_string(e).expect("ledger entry serializes"));
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn eval_stage(common: &Common, experiment: bool, out: Option<PathBuf>) -> Result<()> {
    let ctx = Context::open(common)?;
    let out = out.unwrap_or_else(|| ctx.path(METRICS));
    let report = if experiment {
        eval::run_experiment(&ctx.config)?
    } else {
        let student_path = ctx.input(STUDENT, "attack")?;
        let (header, _, _) = read_query_set(ctx.input(QUERIES, "sample")?)?;
        let model = StudentModel::load(&student_path)?;
        let ex = ctx.config.build()?;
        let sentences = ex.eval.sentences();
        let points = ex.backend.embed_batch(&sentences)?;
        let predicted = eval::predict_labels(&model, &points)?;
        let reference = eval::reference_labels(ex.victim.as_ref(), &sentences)?;
        let metrics = SeedMetrics {
            seed: header.seed,
            agreement: eval::agreement(&reference, &predicted)?,
            accuracy: eval::accuracy(&predicted, &ex.eval.labels())?,
        };
        MetricsReport::from_results(
            header.strategy,
            ex.task.name.clone(),
            header.k,
            vec![metrics],
            vec![],
            ctx.config.digest(),
        )
    };
    report.save(&out)?;
    say(json!({
        "stage": "eval",
        "strategy": report.strategy.name(),
        "k": report.k,
        "agreement": report.agreement.map(|a| a.mean),
        "accuracy": report.accuracy.map(|a| a.mean),
        "failed_seeds": report.failed.len(),
    }));
    let name = out
        .strip_prefix(&ctx.work)
        .ok()
        .and_then(|p| p.to_str())
        .map(str::to_owned);
    let outputs: Vec<&str> = name.as_deref().into_iter().collect();
    ctx.finish("eval", &outputs, None)
}

fn report(inputs: &[PathBuf], format: Format, out: Option<&Path>) -> Result<()> {
    let reports = inputs
        .iter()
        .map(MetricsReport::load)
        .collect::<Result<Vec<_>>>()?;
    let format = match format {
        Format::Markdown => ReportFormat::Markdown,
        Format::Csv => ReportFormat::Csv,
    };
    let text = emit_report(&reports, format);
    match out {
        Some(path) => std::fs::write(path, &text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
