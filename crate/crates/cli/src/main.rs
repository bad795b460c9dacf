use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deepedit::dataset::{self, DatasetBundle, DatasetError};
use deepedit::eval::{self, EvalError, MockExperiment};
use deepedit::kg::{EditScope, KnowledgeGraph, Triplet};
use deepedit::metrics::{FluencyMode, GenerationSample, PreferenceCase};
use deepedit::pipeline::{Pipeline, PipelineConfig, PipelineError, QueryTemplates, ScriptStep};
use deepedit::probe::{transcript_lines, EndpointConfig, Phase, Prober};
use deepedit::review::{ReviewError, ReviewSession};
use serde::de::DeserializeOwned;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("endpoint error: {0}")]
    Endpoint(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Endpoint(_) => 4,
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e.exit_code() {
            2 => CliError::Config(e.to_string()),
            4 => CliError::Endpoint(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::EndpointFailure(_) => CliError::Endpoint(e.to_string()),
            PipelineError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ReviewError> for CliError {
    fn from(e: ReviewError) -> Self {
        match e {
            ReviewError::Pipeline(p) => p.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "deepedit",
    version,
    about = "Build knowledge graphs, probe models and score knowledge edits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the graph construction pipeline from a seed fact.
    Build(BuildArgs),
    /// Sample an endpoint on every chain step and contextual fact of a bundle.
    Probe(ProbeArgs),
    /// Compute the metrics report from pre- and post-edit probes.
    Eval(EvalArgs),
    /// Count chains per length.
    Stats {
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Edit a graph-backed mock model and score it, fully offline.
    MockEdit(MockEditArgs),
    /// Serve the review API for a construction session.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SeedArgs {
    /// Seed fact as `subject | relation | object`.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<String>,
    /// Seed template file (CSV or JSON); see --row.
    #[arg(long)]
    seeds: Option<PathBuf>,
    /// 1-based row of the seed file.
    #[arg(long, default_value_t = 1)]
    row: usize,
    #[arg(long)]
    graph_id: Option<String>,
    /// Directory with template overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    l_max: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    seed: SeedArgs,
    #[arg(long)]
    endpoint_config: PathBuf,
    /// Bundle whose graphs a `mock:` endpoint knows.
    #[arg(long)]
    mock_knowledge: Option<PathBuf>,
    /// JSON list of review steps applied in order.
    #[arg(long)]
    decisions: Option<PathBuf>,
    /// Pipeline state file; resumed when it exists, rewritten after the run.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output stem for `<stem>.graph.json` and `<stem>.chains.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    phase: Phase,
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    endpoint_config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write every raw sample to this JSONL file.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Thread earlier questions and answers of a chain into later prompts.
    #[arg(long)]
    conversation: bool,
    #[arg(long)]
    dry_run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FluencyArg {
    Entropy,
    AsPrinted,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Pre-edit probe records.
    #[arg(long, requires = "post", conflicts_with = "pre_endpoint")]
    pre: Option<PathBuf>,
    /// Post-edit probe records.
    #[arg(long, requires = "pre")]
    post: Option<PathBuf>,
    /// Probe this endpoint for the pre-edit phase instead of reading records.
    #[arg(long, requires = "post_endpoint")]
    pre_endpoint: Option<PathBuf>,
    #[arg(long, requires = "pre_endpoint")]
    post_endpoint: Option<PathBuf>,
    /// JSON list of preference cases.
    #[arg(long)]
    cases: Option<PathBuf>,
    /// JSON list of {generated, reference} pairs.
    #[arg(long)]
    generations: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "entropy")]
    fluency_mode: FluencyArg,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate inputs without probing or writing anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Shallow,
    Deep,
}

#[derive(Args)]
struct MockEditArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, value_enum, default_value = "shallow")]
    scope: ScopeArg,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = eval::DEFAULT_NEW_OBJECT)]
    new_object: String,
    #[arg(long, default_value_t = 5)]
    samples: usize,
    #[arg(long, default_value_t = 4)]
    max_parallel: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8765)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Session file; reopened when it exists.
    #[arg(long)]
    session: PathBuf,
    #[command(flatten)]
    seed: SeedArgs,
    #[arg(long)]
    endpoint_config: PathBuf,
    #[arg(long)]
    mock_knowledge: Option<PathBuf>,
}

fn load<T: DeserializeOwned>(path: &Path, what: &str, kind: fn(String) -> CliError) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| kind(format!("{what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| kind(format!("{what} {}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    load(path, what, CliError::Config)
}

fn read_data<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    load(path, what, CliError::Data)
}

fn endpoint_config(path: &Path) -> Result<EndpointConfig> {
    let config: EndpointConfig = read_json(path, "endpoint config")?;
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

fn prober(config: &EndpointConfig, graphs: &[KnowledgeGraph], conversation: bool) -> Result<Prober> {
    let endpoint = eval::open_endpoint(config, graphs)?;
    let mut options = config.probe_options();
    options.conversation = conversation;
    Ok(Prober::new(endpoint, options))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let text = dataset::to_canonical_json(value).map_err(|e| CliError::Data(e.to_string()))?;
    print!("{text}");
    Ok(())
}

fn parse_seed(text: &str) -> Result<Triplet> {
    let parts: Vec<&str> = text.split('|').collect();
    let [s, r, o] = parts[..] else {
        return Err(CliError::Config(format!(
            "seed {text:?} is not `subject | relation | object`"
        )));
    };
    Triplet::new(s, r, o).map_err(|e| CliError::Config(e.to_string()))
}

/// Seed fact, graph id and pipeline configuration from the seed flags.
fn pipeline_setup(args: &SeedArgs) -> Result<(Triplet, String, PipelineConfig)> {
    let mut templates = match &args.templates {
        Some(dir) => QueryTemplates::load_dir(dir).map_err(|e| CliError::Config(e.to_string()))?,
        None => QueryTemplates::default(),
    };
    let seed = match (&args.seed, &args.seeds) {
        (Some(text), _) => parse_seed(text)?,
        (None, Some(path)) => {
            let rows = dataset::import_seed_templates(path)?;
            let row = args.row.checked_sub(1).and_then(|i| rows.get(i)).ok_or_else(|| {
                CliError::Config(format!("seed file has {} rows, asked for row {}", rows.len(), args.row))
            })?;
            templates.register_blank_template(row.triplet.relation(), &row.template);
            row.triplet.clone()
        }
        (None, None) => return Err(CliError::Config("give --seed or --seeds".into())),
    };
    let defaults = PipelineConfig::default();
    let config = PipelineConfig {
        k_max: args.k_max.unwrap_or(defaults.k_max),
        l_max: args.l_max.unwrap_or(defaults.l_max),
        max_iterations: args.max_iterations.unwrap_or(defaults.max_iterations),
        templates,
    };
    config.validate()?;
    let graph_id = args
        .graph_id
        .clone()
        .unwrap_or_else(|| seed.subject().to_lowercase().replace(' ', "-"));
    Ok((seed, graph_id, config))
}

fn knowledge(path: &Option<PathBuf>) -> Result<Vec<KnowledgeGraph>> {
    Ok(match path {
        Some(p) => dataset::load_bundle(p)?.graphs,
        None => Vec::new(),
    })
}

fn build(args: BuildArgs) -> Result<()> {
    let (seed, graph_id, config) = pipeline_setup(&args.seed)?;
    let endpoint = endpoint_config(&args.endpoint_config)?;
    let steps: Vec<ScriptStep> = match &args.decisions {
        Some(p) => read_data(p, "decision script")?,
        None => Vec::new(),
    };
    let mut pipeline = match &args.checkpoint {
        Some(p) if p.exists() => Pipeline::load_checkpoint(p)?,
        _ => Pipeline::new(&graph_id, seed, config)?,
    };
    if args.dry_run {
        eprintln!("dry run: configuration is valid, {} review steps", steps.len());
        return Ok(());
    }
    let prober = prober(&endpoint, &knowledge(&args.mock_knowledge)?, false)?;
    let outcome = pipeline.run_script(&prober, &steps);
    if let Some(p) = &args.checkpoint {
        pipeline.save_checkpoint(p)?;
    }
    let status = outcome?;
    let bundle = pipeline.bundle();
    dataset::save_bundle(&bundle, &args.out)?;
    print_json(&json!({
        "status": status,
        "edges": pipeline.graph().map_or(0, KnowledgeGraph::edge_count),
        "chains": bundle.chains.len(),
        "pending_candidates": pipeline.pending_candidates().count(),
        "pending_refinements": pipeline.pending_refinements().len(),
        "discarded": pipeline.discarded().len(),
        "checkpoint_hash": pipeline.checkpoint_hash(),
    }))
}

fn probe(args: ProbeArgs) -> Result<()> {
    let bundle = dataset::load_bundle(&args.bundle)?;
    let config = endpoint_config(&args.endpoint_config)?;
    if args.dry_run {
        eprintln!("dry run: bundle and endpoint config are valid");
        return Ok(());
    }
    let mut prober = prober(&config, &bundle.graphs, args.conversation)?;
    if args.transcript.is_some() {
        let mut options = prober.options().clone();
        options.keep_responses = true;
        prober = Prober::new(prober.endpoint().clone(), options);
    }
    let mut records = eval::probe_bundle(&prober, &bundle, args.phase, &QueryTemplates::default())?;
    if let Some(path) = &args.transcript {
        let outcomes: Vec<_> = records.iter().flat_map(|r| r.steps.iter().cloned()).collect();
        dataset::write_transcript(path, &transcript_lines(&outcomes))?;
        for step in records.iter_mut().flat_map(|r| r.steps.iter_mut()) {
            step.raw_responses = None;
        }
    }
    dataset::write_probes(&args.out, &records)?;
    let failed: Vec<&str> = records
        .iter()
        .flat_map(|r| &r.steps)
        .filter(|s| s.p.is_none())
        .map(|s| s.query_id.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Endpoint(format!(
            "{} queries failed, first {}",
            failed.len(),
            failed[0]
        )));
    }
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let bundle = dataset::load_bundle(&args.bundle)?;
    let cases: Vec<PreferenceCase> = match &args.cases {
        Some(p) => read_data(p, "preference cases")?,
        None => Vec::new(),
    };
    let generations: Vec<GenerationSample> = match &args.generations {
        Some(p) => read_data(p, "generations")?,
        None => Vec::new(),
    };
    let mode = match args.fluency_mode {
        FluencyArg::Entropy => FluencyMode::Entropy,
        FluencyArg::AsPrinted => FluencyMode::AsPrinted,
    };
    let (pre, post) = match (&args.pre, &args.post, &args.pre_endpoint, &args.post_endpoint) {
        (Some(pre), Some(post), _, _) => {
            let pre = dataset::read_probes(pre)?;
            let post = dataset::read_probes(post)?;
            if args.dry_run {
                eval::observations(&bundle, &pre, &post, &QueryTemplates::default())?;
                eprintln!("dry run: probe records cover the bundle");
                return Ok(());
            }
            (pre, post)
        }
        (_, _, Some(pre_path), Some(post_path)) => {
            let pre_config = endpoint_config(pre_path)?;
            let post_config = endpoint_config(post_path)?;
            if args.dry_run {
                eprintln!("dry run: bundle and endpoint configs are valid");
                return Ok(());
            }
            if pre_config == post_config {
                return Err(CliError::Config(
                    "pre- and post-edit endpoints are identical; use --dry-run to check inputs only".into(),
                ));
            }
            let templates = QueryTemplates::default();
            let pre = eval::probe_bundle(
                &prober(&pre_config, &bundle.graphs, false)?,
                &bundle,
                Phase::Pre,
                &templates,
            )?;
            let post = eval::probe_bundle(
                &prober(&post_config, &bundle.graphs, false)?,
                &bundle,
                Phase::Post,
                &templates,
            )?;
            (pre, post)
        }
        _ => {
            return Err(CliError::Config(
                "give --pre/--post probe files or --pre-endpoint/--post-endpoint".into(),
            ))
        }
    };
    let report = eval::run_evaluation(&bundle, &pre, &post, &cases, &generations, mode)?;
    match &args.out {
        Some(path) => dataset::write_report(path, &report)?,
        None => print_json(&report)?,
    }
    Ok(())
}

fn mock_edit(args: MockEditArgs) -> Result<()> {
    let bundle = dataset::load_bundle(&args.bundle)?;
    let settings = MockExperiment {
        scope: match args.scope {
            ScopeArg::Shallow => EditScope::Shallow,
            ScopeArg::Deep => EditScope::DeepSubject,
        },
        noise: args.noise,
        seed: args.seed,
        new_object: args.new_object,
        samples_per_query: args.samples,
        max_parallel: args.max_parallel,
    };
    let run = eval::run_mock_experiment(&bundle, &settings)?;
    match &args.out {
        Some(path) => dataset::write_report(path, &run.report)?,
        None => print_json(&run.report)?,
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let endpoint = endpoint_config(&args.endpoint_config)?;
    let prober = prober(&endpoint, &knowledge(&args.mock_knowledge)?, false)?;
    let session = if args.session.exists() {
        ReviewSession::open(&args.session, prober)?
    } else {
        let (seed, graph_id, config) = pipeline_setup(&args.seed)?;
        let mut pipeline = Pipeline::new(&graph_id, seed, config)?;
        pipeline.resume(&prober)?;
        let id = args
            .session
            .file_stem()
            .map_or_else(|| "session".to_string(), |s| s.to_string_lossy().into_owned());
        ReviewSession::new(&id, pipeline, prober, Some(args.session.clone()))?
    };
    let addr = SocketAddr::new(args.host, args.port);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Config(e.to_string()))?;
    runtime
        .block_on(deepedit_review::serve(deepedit_review::shared(session), addr))
        .map_err(|e| CliError::Config(format!("{addr}: {e}")))
}

fn stats(bundle: &Path) -> Result<()> {
    let bundle: DatasetBundle = dataset::load_bundle(bundle)?;
    print_json(&dataset::stats(&bundle))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Build(args) => build(args),
        Command::Probe(args) => probe(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Stats { bundle } => stats(&bundle),
        Command::MockEdit(args) => mock_edit(args),
        Command::Serve(args) => serve(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("deepedit: {e}");
            ExitCode::from(e.code())
        }
    }
}
