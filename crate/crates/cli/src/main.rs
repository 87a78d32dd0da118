use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use peerkt::canonical::to_canonical_string;
use peerkt::config::{parse_seeds, MatcherMode, RunConfig};
use peerkt::eval::{records_tsv, run_cold_start, run_experiment, run_protocol, ExperimentReport, TOOL_VERSION};
use peerkt::graph::{
    build_knowledge_base, load_bundle, load_kc_graph, persist_bundle, KcGraph, KnowledgeBase, Matcher,
};
use peerkt::ingest::{load_interactions, segment_all, DatasetManifest};
use peerkt::predictor::{ChatClient, HeuristicPredictor, Predictor, RemotePredictor};
use peerkt::prompt::{render_prompt, Template};
use peerkt::retrieval::{
    assemble_context, resolve_target, retrieve_peers, FusionWeights, PredictionTarget,
};
use peerkt::simulator::{generate, write_simulation, SimConfig};
use peerkt::{Error, ErrorClass, Interaction, Result};

#[derive(Debug, Parser)]
#[command(name = "peerkt", version, about = "Knowledge tracing with peer retrieval over a multi-source knowledge base")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a knowledge-base bundle from dataset manifests.
    Build(BuildArgs),
    /// Show the peers retrieved for one target.
    Retrieve(RetrieveArgs),
    /// Predict one target's response.
    Predict(PredictArgs),
    /// Evaluate a predictor on held-out sequences.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic multi-source dataset.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backend {
    Heuristic,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MatcherArg {
    Exact,
    Similarity,
    Judge,
}

impl From<MatcherArg> for MatcherMode {
    fn from(m: MatcherArg) -> Self {
        match m {
            MatcherArg::Exact => MatcherMode::Exact,
            MatcherArg::Similarity => MatcherMode::Similarity,
            MatcherArg::Judge => MatcherMode::Judge,
        }
    }
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration file (TOML).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Concept matching mode [default: similarity]
    #[arg(long, value_enum)]
    matcher: Option<MatcherArg>,
}

#[derive(Debug, Args)]
struct RetrievalArgs {
    /// Number of peers to retrieve [default: 2]
    #[arg(short = 'k', long = "top-k", value_name = "N")]
    top_k: Option<usize>,
    /// Subgraph radius around the target concept [default: 2]
    #[arg(long, value_name = "N")]
    hops: Option<usize>,
    /// Fusion ratio behavior:structure:ability [default: 4:3:3]
    #[arg(long, value_name = "RATIO")]
    weights: Option<String>,
    /// Behavior-score accuracy weight [default: 0.5]
    #[arg(long, value_name = "X")]
    alpha: Option<f64>,
}

#[derive(Debug, Args)]
struct TargetArgs {
    /// Knowledge-base bundle directory.
    #[arg(long, value_name = "DIR")]
    bundle: PathBuf,
    /// Target student id.
    #[arg(long)]
    student: String,
    /// Target question id.
    #[arg(long, required_unless_present = "concept")]
    question: Option<String>,
    /// Concept label, for questions the knowledge base has not seen.
    #[arg(long)]
    concept: Option<String>,
    /// Only the student's interactions with order index below this are visible [default: all]
    #[arg(long, value_name = "N")]
    as_of: Option<u64>,
    /// Source id of the target [default: the student's source]
    #[arg(long)]
    source: Option<String>,
    /// Reject concept labels without a normalized exact match.
    #[arg(long)]
    no_matcher: bool,
}

#[derive(Debug, Args)]
struct BuildArgs {
    /// Dataset manifests (TOML).
    #[arg(required = true, value_name = "MANIFEST")]
    manifests: Vec<PathBuf>,
    /// Output bundle directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Seed recorded in the build manifest [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[command(flatten)]
    retrieval: RetrievalArgs,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[command(flatten)]
    retrieval: RetrievalArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Prediction backend; remote reads its endpoint and key from the environment
    #[arg(long, value_enum, default_value = "heuristic")]
    backend: Backend,
    /// Print the rendered prompt and exit without calling a backend.
    #[arg(long)]
    dump_prompt: bool,
    /// Prompt template file [default: built-in]
    #[arg(long, value_name = "FILE")]
    template: Option<PathBuf>,
    /// Probability threshold for the Correct label [default: 0.5]
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Bundle to evaluate against; used with --test.
    #[arg(long, value_name = "DIR", requires = "test", conflicts_with = "manifest")]
    bundle: Option<PathBuf>,
    /// Manifests of the held-out data; used with --bundle.
    #[arg(long, value_name = "MANIFEST", num_args = 1..)]
    test: Vec<PathBuf>,
    /// Manifests to split into train and test per seed.
    #[arg(long, value_name = "MANIFEST", num_args = 1.., required_unless_present = "bundle")]
    manifest: Vec<PathBuf>,
    /// Prediction backend; remote reads its endpoint and key from the environment
    #[arg(long, value_enum, default_value = "heuristic")]
    backend: Backend,
    /// Comma-separated split seeds [default: 0,1,2,3,4]
    #[arg(long, value_name = "LIST")]
    seeds: Option<String>,
    /// Sequences sampled for the test side per seed [default: 1000]
    #[arg(long, value_name = "N")]
    n_test: Option<usize>,
    /// Window length when segmenting histories [default: 25]
    #[arg(long, value_name = "N")]
    seq_len: Option<usize>,
    /// Require the test data to share no student, question or source with the bundle.
    #[arg(long, requires = "bundle")]
    cold_start: bool,
    /// Probability threshold for the Correct label [default: 0.5]
    #[arg(long)]
    threshold: Option<f64>,
    /// Directory for the report and per-record tables.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(flatten)]
    retrieval: RetrievalArgs,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Simulator configuration (TOML); `seed` is required there unless --seed is given.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn resolve_config(args: &ConfigArgs, apply_flags: impl FnOnce(&mut RunConfig) -> Result<()>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(m) = args.matcher {
        cfg.matcher.mode = m.into();
    }
    apply_flags(&mut cfg)?;
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_retrieval(cfg: &mut RunConfig, r: &RetrievalArgs) -> Result<()> {
    if let Some(k) = r.top_k {
        cfg.retrieval.top_k = k;
    }
    if let Some(h) = r.hops {
        cfg.retrieval.hops = h;
    }
    if let Some(w) = &r.weights {
        cfg.retrieval.weights = FusionWeights::from_ratio(w)?;
    }
    if let Some(a) = r.alpha {
        cfg.retrieval.alpha = a;
    }
    Ok(())
}

fn print_doc<T: Serialize>(value: &T) -> Result<()> {
    print!("{}", to_canonical_string(value)?);
    Ok(())
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn read_manifests(paths: &[PathBuf]) -> Result<Vec<DatasetManifest>> {
    paths.iter().map(|p| DatasetManifest::from_file(p)).collect()
}

fn load_sources(paths: &[PathBuf]) -> Result<(Vec<Interaction>, KcGraph)> {
    let mut interactions = Vec::new();
    let mut kc = KcGraph::default();
    for m in read_manifests(paths)? {
        let loaded = load_interactions(&m)?;
        if !loaded.skipped.is_empty() {
            log::warn!("{}: skipped {} of {} rows", m.source_id, loaded.skipped.len(), loaded.rows_read);
        }
        interactions.extend(loaded.interactions);
        if let Some(p) = &m.kc_graph_path {
            kc.merge(load_kc_graph(p)?);
        }
    }
    Ok((interactions, kc))
}

fn client_for(cfg: &RunConfig, needed: bool) -> Result<Option<ChatClient>> {
    if needed {
        ChatClient::new(cfg.remote.clone()).map(Some)
    } else {
        Ok(None)
    }
}

fn template(cfg: &RunConfig) -> Result<Template> {
    match &cfg.template {
        Some(p) => Template::from_file(p),
        None => Ok(Template::default_template()),
    }
}

fn predictor(cfg: &RunConfig, backend: Backend, client: Option<&ChatClient>) -> Result<Box<dyn Predictor>> {
    let heuristic = HeuristicPredictor::new(cfg.heuristic, cfg.threshold);
    Ok(match (backend, client) {
        (Backend::Heuristic, _) => Box::new(heuristic),
        (Backend::Remote, Some(c)) => Box::new(RemotePredictor::new(c.clone(), template(cfg)?, cfg.threshold, heuristic)),
        (Backend::Remote, None) => return Err(Error::Config("remote backend is not configured".into())),
    })
}

fn cmd_build(args: BuildArgs) -> Result<()> {
    let cfg = resolve_config(&args.config, |c| {
        if let Some(s) = args.seed {
            c.build.seed = s;
        }
        Ok(())
    })?;
    let client = client_for(&cfg, cfg.matcher.mode == MatcherMode::Judge)?;
    let matcher = cfg.matcher(client.as_ref())?;
    let kb = build_knowledge_base(&read_manifests(&args.manifests)?, &cfg.build, &matcher)?;
    persist_bundle(&kb, &args.out)?;
    print_doc(&json!({
        "tool_version": TOOL_VERSION,
        "bundle": args.out.display().to_string(),
        "nodes": kb.graph.node_count(),
        "edges": kb.graph.edge_count(),
        "question_groups": kb.qg_index.len(),
        "students": kb.repo.student_count(),
        "questions": kb.questions.len(),
        "sources": kb.source_ids(),
        "match_counts": kb.manifest.match_counts,
        "warnings": kb.manifest.warnings,
    }))
}

fn target_from_args(kb: &KnowledgeBase, t: &TargetArgs) -> Result<PredictionTarget> {
    let full = kb.repo.history(&t.student);
    let as_of = t.as_of.unwrap_or_else(|| full.last().map_or(0, |i| i.order_index + 1));
    let history: Vec<Interaction> = full.iter().filter(|i| i.order_index < as_of).cloned().collect();
    let known = t.question.as_ref().and_then(|q| kb.questions.get(q));
    let concept_label = match (&t.concept, known) {
        (Some(c), _) => c.clone(),
        (None, Some(info)) => info.label.clone(),
        (None, None) => {
            return Err(Error::Config(format!(
                "question {:?} is not in the knowledge base; pass --concept",
                t.question.as_deref().unwrap_or_default()
            )))
        }
    };
    let source_id = t
        .source
        .clone()
        .or_else(|| kb.student_sources.get(&t.student).cloned())
        .or_else(|| known.map(|i| i.source_id.clone()))
        .unwrap_or_else(|| "unknown".into());
    Ok(PredictionTarget {
        student_id: t.student.clone(),
        question_id: t.question.clone().unwrap_or_else(|| format!("unseen:{concept_label}")),
        source_id,
        concept_label,
        history,
        as_of,
    })
}

fn context_for(
    kb: &KnowledgeBase,
    t: &TargetArgs,
    cfg: &RunConfig,
) -> Result<(PredictionTarget, peerkt::retrieval::Retrieval, peerkt::retrieval::RetrievedContext)> {
    let target = target_from_args(kb, t)?;
    let matcher: Option<Matcher> = if t.no_matcher {
        None
    } else {
        let client = client_for(cfg, cfg.matcher.mode == MatcherMode::Judge)?;
        Some(cfg.matcher(client.as_ref())?)
    };
    let resolved = resolve_target(kb, &target, matcher.as_ref(), &cfg.retrieval)?;
    let retrieval = retrieve_peers(kb, &target, &resolved, &cfg.retrieval)?;
    let ctx = assemble_context(kb, &target, &resolved, &retrieval, &cfg.retrieval);
    Ok((target, retrieval, ctx))
}

fn cmd_retrieve(args: RetrieveArgs) -> Result<()> {
    let cfg = resolve_config(&args.config, |c| apply_retrieval(c, &args.retrieval))?;
    let kb = load_bundle(&args.target.bundle)?;
    let (_, retrieval, ctx) = context_for(&kb, &args.target, &cfg)?;
    print_doc(&json!({
        "tool_version": TOOL_VERSION,
        "config": cfg,
        "similarities": retrieval.peers,
        "context": ctx,
    }))
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let cfg = resolve_config(&args.config, |c| {
        apply_retrieval(c, &args.retrieval)?;
        if let Some(t) = args.threshold {
            c.threshold = t;
        }
        if let Some(p) = &args.template {
            c.template = Some(p.clone());
        }
        Ok(())
    })?;
    let kb = load_bundle(&args.target.bundle)?;
    let (_, _, ctx) = context_for(&kb, &args.target, &cfg)?;
    if args.dump_prompt {
        let doc = render_prompt(&ctx, &template(&cfg)?)?;
        println!("{}\n\n{}", doc.system_text.trim_end(), doc.user_text.trim_end());
        return Ok(());
    }
    let client = client_for(&cfg, args.backend == Backend::Remote)?;
    let predictor = predictor(&cfg, args.backend, client.as_ref())?;
    let result = predictor.predict(&ctx, &kb)?;
    print_doc(&json!({
        "tool_version": TOOL_VERSION,
        "config": cfg,
        "backend": predictor.name(),
        "target": ctx.target,
        "peers": ctx.peers.iter().map(|p| &p.similarity).collect::<Vec<_>>(),
        "result": result,
    }))
}

fn write_report(out: Option<&Path>, report: &ExperimentReport, suffix: &str) -> Result<()> {
    if let Some(dir) = out {
        write_out(dir, &format!("records{suffix}.tsv"), &records_tsv(&report.records))?;
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = resolve_config(&args.config, |c| {
        apply_retrieval(c, &args.retrieval)?;
        if let Some(s) = &args.seeds {
            c.seeds = parse_seeds(s)?;
        }
        if let Some(n) = args.n_test {
            c.n_test = n;
        }
        if let Some(n) = args.seq_len {
            c.seq_len = n;
        }
        if let Some(t) = args.threshold {
            c.threshold = t;
        }
        Ok(())
    })?;
    let client = client_for(&cfg, args.backend == Backend::Remote || cfg.matcher.mode == MatcherMode::Judge)?;
    let predictor = predictor(&cfg, args.backend, client.as_ref())?;
    let matcher = cfg.matcher(client.as_ref())?;
    let eval = cfg.eval_config();
    let out = args.out.as_deref();

    let doc = if let Some(bundle) = &args.bundle {
        let kb = load_bundle(bundle)?;
        let (interactions, _) = load_sources(&args.test)?;
        let test = segment_all(&interactions, eval.seq_len)?;
        let report = if args.cold_start {
            run_cold_start(&kb, &test, predictor.as_ref(), Some(&matcher), &eval)?
        } else {
            run_experiment(&kb, &test, predictor.as_ref(), Some(&matcher), &eval)?
        };
        write_report(out, &report, "")?;
        json!({ "config": cfg, "report": report })
    } else {
        let (interactions, kc) = load_sources(&args.manifest)?;
        let report = run_protocol(&interactions, &kc, &cfg.build, predictor.as_ref(), &matcher, &eval)?;
        for run in &report.runs {
            write_report(out, &run.report, &format!("_seed{}", run.seed))?;
        }
        json!({ "config": cfg, "protocol": report })
    };
    let text = to_canonical_string(&doc)?;
    if let Some(dir) = out {
        write_out(dir, "report.json", &text)?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let mut table = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    if let Some(seed) = args.seed {
        let seed = i64::try_from(seed).map_err(|_| Error::Config(format!("seed {seed} too large")))?;
        table.insert("seed".into(), toml::Value::Integer(seed));
    }
    let cfg = SimConfig::from_toml(&table.to_string())?;
    let sim = generate(&cfg)?;
    let manifests = write_simulation(&sim, &args.out)?;
    print_doc(&json!({
        "tool_version": TOOL_VERSION,
        "config": cfg,
        "manifests": manifests.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "interactions": sim.sources.iter().map(|s| s.interactions.len()).sum::<usize>(),
    }))
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 1,
        ErrorClass::Data => 2,
        ErrorClass::Backend => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let informational = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if informational { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Build(a) => cmd_build(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                json!({ "error": e.kind(), "class": format!("{:?}", e.class()).to_lowercase(), "message": e.to_string() })
            );
            ExitCode::from(exit_code(&e))
        }
    }
}
