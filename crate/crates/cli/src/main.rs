//! `asag`: ingest datasets, run grading experiments, evaluate and compare runs.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime or
//! backend failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use asag_core::corpus::{
    descriptor_path_for, load_with_descriptor, save_dataset, CorpusError, Dataset, DatasetDescriptor,
};
use asag_core::embeddings::{EmbeddingStore, SelectionStrategy, StrategyKind, DEFAULT_K};
use asag_core::engine::{self, EngineError, GradingContext, RunConfig};
use asag_core::eval::{self, EvalError};
use asag_core::llm::{CompletionBackend, MockCompletionBackend, MockScript};
use asag_core::prompting::PromptTemplate;
use clap::{Parser, Subcommand};
use serde_json::json;

use config::AppConfig;

/// Marks an error caused by bad input rather than a failing run.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Parser)]
#[command(name = "asag", version, about = "LLM-based short answer grading")]
struct Cli {
    /// Application config file (default: ./asag.json when present)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset against its descriptor and write it normalized
    Ingest {
        source: PathBuf,
        #[arg(long)]
        descriptor: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grade a dataset and write a run directory
    Grade(GradeArgs),
    /// Evaluate a finished run against gold scores
    Eval {
        run: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        descriptor: Option<PathBuf>,
        /// Output directory (default: the run directory)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two runs on their common successfully graded submissions
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        descriptor: Option<PathBuf>,
        /// Also write the comparison to this file
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct GradeArgs {
    dataset: PathBuf,
    #[arg(long)]
    descriptor: Option<PathBuf>,
    /// Run directory to create
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "rag")]
    strategy: StrategyKind,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    /// Seed for random example selection and for --sample
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    model: Option<String>,
    /// Grade with the question rubrics instead of a single score
    #[arg(long)]
    rubric: bool,
    /// Grade a uniform random sample of this many submissions
    #[arg(long)]
    sample: Option<usize>,
    /// Offline backend driven by a script file
    #[arg(long)]
    mock: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Built-in template id or a template directory
    #[arg(long)]
    template: Option<String>,
    /// Request schema-constrained output (always on with --rubric)
    #[arg(long)]
    structured: bool,
}

fn load_dataset(path: &Path, descriptor: Option<&Path>) -> Result<Dataset> {
    let descriptor_path = descriptor
        .map(Path::to_path_buf)
        .unwrap_or_else(|| descriptor_path_for(path));
    let d = DatasetDescriptor::load(&descriptor_path)?;
    Ok(load_with_descriptor(path, &d)?)
}

fn error_list(e: &CorpusError) -> serde_json::Value {
    json!({"errors": [{"code": e.code(), "message": e.to_string(), "ids": e.ids()}]})
}

fn cmd_ingest(source: &Path, descriptor: &Path, out: &Path) -> Result<()> {
    let result = DatasetDescriptor::load(descriptor).and_then(|d| {
        let dataset = load_with_descriptor(source, &d)?;
        Ok((d, dataset))
    });
    let (d, dataset) = match result {
        Ok(v) => v,
        Err(e) => {
            println!("{}", error_list(&e));
            return Err(e.into());
        }
    };
    save_dataset(&dataset, out)?;
    let descriptor_out = descriptor_path_for(out);
    std::fs::write(&descriptor_out, d.to_json() + "\n")
        .with_context(|| format!("writing {}", descriptor_out.display()))?;
    let rubrics = dataset.questions.iter().filter(|q| q.rubric.is_some()).count();
    println!(
        "{}",
        json!({
            "dataset": dataset.name,
            "questions": dataset.questions.len(),
            "questions_with_rubric": rubrics,
            "submissions": dataset.submissions.len(),
            "out": out.display().to_string(),
            "descriptor": descriptor_out.display().to_string(),
        })
    );
    Ok(())
}

fn cmd_grade(app: &AppConfig, args: GradeArgs) -> Result<()> {
    let dataset = load_dataset(&args.dataset, args.descriptor.as_deref())?;
    let template = PromptTemplate::resolve(args.template.as_deref().unwrap_or(&app.template_id))?;
    let prices = app.prices()?;

    let strategy = match args.strategy {
        StrategyKind::None => SelectionStrategy::none(),
        StrategyKind::Random => SelectionStrategy::random(args.k, args.seed),
        StrategyKind::Rag => SelectionStrategy::rag(args.k),
    };
    let mut model = app.model.clone();
    if let Some(name) = args.model {
        model.model_name = name;
    }
    model.structured_output |= args.structured || args.rubric;
    let mut config = RunConfig::new(dataset.name.clone(), strategy, model);
    config.rubric_mode = args.rubric;
    config.parallelism = args.parallelism.unwrap_or(app.parallelism);
    config.sample_size = args.sample;
    config.sample_seed = args.sample.map(|_| args.seed);
    config.template_id = template.id().to_owned();
    config.validate().map_err(|e| Invalid(e.to_string()))?;

    let mock = args.mock.is_some();
    let backend: Box<dyn CompletionBackend> = match &args.mock {
        Some(script) => Box::new(MockCompletionBackend::new(MockScript::load(script).map_err(Invalid)?)),
        None => {
            let key = asag_core::llm::openai::api_key_from_env(&app.api_key_env)?;
            Box::new(asag_core::llm::openai::OpenAiChatBackend::new(
                app.base_url.clone(),
                key,
            ))
        }
    };

    let mut store = EmbeddingStore::new("unused");
    if config.strategy.kind == StrategyKind::Rag {
        let embedder = app.embedder(mock)?;
        let tag = embedder.tag();
        config.metadata.embedding_backend = Some(tag.clone());
        let cache = (!mock).then(|| app.cache_dir.join("embeddings.jsonl"));
        store = match &cache {
            Some(path) => EmbeddingStore::load_cache(path, &tag)?,
            None => EmbeddingStore::new(tag),
        };
        let added = engine::prepare_embeddings(&dataset, embedder.as_ref(), &mut store)?;
        if let (Some(path), true) = (&cache, added > 0) {
            std::fs::create_dir_all(&app.cache_dir)?;
            store.save_cache(path)?;
        }
    }

    eprintln!("{}", serde_json::to_string_pretty(&json!({"app": app, "run": config}))?);
    let ctx = GradingContext {
        dataset: &dataset,
        store: &store,
        backend: backend.as_ref(),
        template: &template,
        prices: &prices,
    };
    let run = engine::grade_batch(&dataset, &config, &ctx)?;
    engine::save_run(&args.out, &run)?;
    println!(
        "{}",
        json!({"run": args.out.display().to_string(), "stats": run.stats(), "usage": run.totals})
    );
    Ok(())
}

fn cmd_eval(run_dir: &Path, dataset: &Path, descriptor: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let gold = load_dataset(dataset, descriptor)?;
    let run = engine::load_run(run_dir)?;
    let evaluation = eval::evaluate_run(&run, &gold)?;
    eval::write_report(out.unwrap_or(run_dir), &evaluation)?;
    println!("{}", serde_json::to_string_pretty(&evaluation.report)?);
    Ok(())
}

fn cmd_compare(a: &Path, b: &Path, dataset: &Path, descriptor: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let gold = load_dataset(dataset, descriptor)?;
    let comparison = eval::compare_runs(&engine::load_run(a)?, &engine::load_run(b)?, &gold)?;
    if let Some(path) = out {
        eval::write_comparison(path, &comparison)?;
    }
    println!("{}", serde_json::to_string_pretty(&comparison)?);
    Ok(())
}

fn is_validation(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        if c.is::<Invalid>() || c.is::<CorpusError>() || c.is::<asag_core::prompting::PromptError>() {
            return true;
        }
        if let Some(e) = c.downcast_ref::<EngineError>() {
            return !matches!(
                e,
                EngineError::Fatal(_) | EngineError::Selection(_) | EngineError::Io { .. }
            );
        }
        if let Some(e) = c.downcast_ref::<EvalError>() {
            return !matches!(e, EvalError::Io { .. });
        }
        false
    })
}

/// Error chain joined with ": ", skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    let app = AppConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest {
            source,
            descriptor,
            out,
        } => cmd_ingest(&source, &descriptor, &out),
        Command::Grade(args) => {
            if args.k == 0 && args.strategy != StrategyKind::None {
                bail!(Invalid("--k must be positive".into()));
            }
            cmd_grade(&app, args)
        }
        Command::Eval {
            run,
            dataset,
            descriptor,
            out,
        } => cmd_eval(&run, &dataset, descriptor.as_deref(), out.as_deref()),
        Command::Compare {
            run_a,
            run_b,
            dataset,
            descriptor,
            out,
        } => cmd_compare(&run_a, &run_b, &dataset, descriptor.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}
