//! Command-line orchestration of the pipeline. Every subcommand writes its
//! artifact atomically and prints one JSON summary line on stdout.

pub mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::batchinfer::{self, BatchError, BatchOptions, PlanCache};
use crate::clustertree::{build_tree, ClusterTree, TreeError};
use crate::corpus::{self, CorpusError, InteractionLog, ItemCatalog};
use crate::evalsim::{
    self, bucket_analysis, novelty_report, simulate, write_bucket_csv, EvalReport, ExploitPolicy,
    ImpressionLogs, NoveltyReport, Recommender, SerendipPolicy, SimilarContentPolicy,
};
use crate::persist::{self, PersistError};
use crate::planner::backend::BackendSpec;
use crate::planner::{
    plan_cluster, BackendError, GenerationBackend, NoisyStub, OracleStub, PlanError, ReplayBackend,
};
use crate::retriever::{recommend_exploit, recommend_restricted, train_cooccurrence, RetrievalError};
use crate::serendipity::{
    curate_training_data, eval_set, export_training_file, load_training_file, mine_pairs, vocabulary,
    MiningConfig, MiningOutcome, SerendipityError, TrainingFile,
};
use crate::synth;
use config::{ConfigError, PipelineConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Data,
    Backend,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Validation => 1,
            ErrorKind::Data => 2,
            ErrorKind::Backend => 3,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
    pub hint: Option<String>,
}

impl CliError {
    fn new(kind: ErrorKind, message: impl ToString) -> Self {
        CliError {
            kind,
            message: message.to_string(),
            hint: None,
        }
    }

    fn data(message: impl ToString) -> Self {
        Self::new(ErrorKind::Data, message)
    }

    fn hint(mut self, hint: impl ToString) -> Self {
        self.hint = Some(hint.to_string());
        self
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)?;
        if let Some(h) = &self.hint {
            write!(f, " (hint: {h})")?;
        }
        Ok(())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::new(ErrorKind::Validation, e)
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        Self::data(e)
    }
}

impl From<PersistError> for CliError {
    fn from(e: PersistError) -> Self {
        Self::data(e)
    }
}

impl From<TreeError> for CliError {
    fn from(e: TreeError) -> Self {
        match e {
            TreeError::InvalidConfig(_) => Self::new(ErrorKind::Validation, e),
            _ => Self::data(e),
        }
    }
}

impl From<SerendipityError> for CliError {
    fn from(e: SerendipityError) -> Self {
        match e {
            SerendipityError::InvalidLevels { .. } => Self::new(ErrorKind::Validation, e),
            _ => Self::data(e),
        }
    }
}

impl From<BatchError> for CliError {
    fn from(e: BatchError) -> Self {
        match e {
            BatchError::NoWorkers => Self::new(ErrorKind::Validation, e),
            BatchError::StaleCache { .. } => Self::data(e).hint("run `serve-batch` to rebuild the plan cache"),
            _ => Self::data(e),
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        Self::new(ErrorKind::Backend, e)
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::Backend { .. } => Self::new(ErrorKind::Backend, e),
            PlanError::Prompt { .. } => Self::data(e),
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::NoPlan(_) => {
                Self::data(e).hint("the item has no cached plan; run `serve-batch` (or raise --target-coverage)")
            }
            _ => Self::data(e),
        }
    }
}

impl From<evalsim::EvalError> for CliError {
    fn from(e: evalsim::EvalError) -> Self {
        match e {
            evalsim::EvalError::InvalidConfig(_) | evalsim::EvalError::NoBuckets => {
                Self::new(ErrorKind::Validation, e)
            }
            _ => Self::data(e),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "serendip", version, about = "Serendipitous recommendation pipeline")]
pub struct Cli {
    /// Pipeline config file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set batch.workers=8`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Stage {
    BuildTree,
    Mine,
    Curate,
    ServeBatch,
    Simulate,
    Eval,
}

impl Stage {
    const ORDER: [Stage; 6] = [
        Stage::BuildTree,
        Stage::Mine,
        Stage::Curate,
        Stage::ServeBatch,
        Stage::Simulate,
        Stage::Eval,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Serendip,
    Exploit,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic catalog and interaction log.
    GenData {
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the cluster tree over the catalog.
    BuildTree,
    /// Mine serendipitous transitions and their satisfaction rates.
    Mine,
    /// Select training examples and export the training file.
    Curate,
    /// Plan serendipitous clusters for the popular corpus.
    ServeBatch {
        #[arg(long)]
        target_coverage: Option<f64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Reuse the existing plan cache and plan only new items.
        #[arg(long)]
        incremental: bool,
        /// Drop cached items that left the popular corpus.
        #[arg(long)]
        compact: bool,
        #[arg(long)]
        backend: Option<String>,
    },
    /// Recommend items for a context item.
    Recommend {
        #[arg(long)]
        context: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum, default_value = "serendip")]
        mode: Mode,
    },
    /// Planner metrics on the curated eval set, plus simulation metrics when
    /// impressions are available.
    Eval {
        #[arg(long)]
        backend: Option<String>,
        /// Also write per-bucket gains as CSV.
        #[arg(long)]
        buckets_csv: bool,
    },
    /// Run the synthetic-user simulation.
    Simulate {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every stage in order, optionally starting at a later stage.
    Pipeline {
        #[arg(long, value_enum)]
        from: Option<Stage>,
    },
}

fn push_override(out: &mut Vec<String>, key: &str, value: Option<impl ToString>) {
    if let Some(v) = value {
        out.push(format!("{key}={}", v.to_string()));
    }
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

/// Flag values become config overrides so they share validation.
fn flag_overrides(command: &Command) -> Vec<String> {
    let mut o = Vec::new();
    match command {
        Command::GenData { items, seed } => {
            push_override(&mut o, "data.n_items", *items);
            push_override(&mut o, "data.seed", *seed);
        }
        Command::ServeBatch {
            target_coverage,
            workers,
            backend,
            ..
        } => {
            push_override(&mut o, "batch.target_coverage", *target_coverage);
            push_override(&mut o, "batch.workers", *workers);
            push_override(&mut o, "planner.backend", backend.as_deref().map(quoted));
        }
        Command::Recommend { k, .. } => push_override(&mut o, "retriever.k", *k),
        Command::Eval { backend, .. } => push_override(&mut o, "planner.backend", backend.as_deref().map(quoted)),
        Command::Simulate { steps, seed } => {
            push_override(&mut o, "sim.n_steps", *steps);
            push_override(&mut o, "sim.seed", *seed);
        }
        _ => {}
    }
    o
}

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn run_from_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(summaries) => {
            for s in summaries {
                println!("{s}");
            }
            0
        }
        Err((summaries, e)) => {
            for s in summaries {
                println!("{s}");
            }
            eprintln!("error: {e}");
            e.kind.exit_code()
        }
    }
}

type RunResult = Result<Vec<Value>, (Vec<Value>, CliError)>;

fn run(cli: &Cli) -> RunResult {
    let mut overrides = cli.overrides.clone();
    overrides.extend(flag_overrides(&cli.command));
    let cfg = PipelineConfig::load(cli.config.as_deref(), &overrides).map_err(|e| (Vec::new(), e.into()))?;
    let one = |r: Result<Value, CliError>| r.map(|v| vec![v]).map_err(|e| (Vec::new(), e));
    match &cli.command {
        Command::GenData { .. } => one(gen_data(&cfg)),
        Command::BuildTree => one(build_tree_stage(&cfg)),
        Command::Mine => one(mine_stage(&cfg)),
        Command::Curate => one(curate_stage(&cfg)),
        Command::ServeBatch {
            incremental, compact, ..
        } => one(serve_batch_stage(&cfg, *incremental, *compact)),
        Command::Recommend { context, mode, .. } => one(recommend(&cfg, context, *mode)),
        Command::Eval { buckets_csv, .. } => one(eval_stage(&cfg, *buckets_csv)),
        Command::Simulate { .. } => one(simulate_stage(&cfg)),
        Command::Pipeline { from } => {
            let start = from.unwrap_or(Stage::BuildTree);
            let mut out = Vec::new();
            for stage in Stage::ORDER.into_iter().filter(|s| *s >= start) {
                let r = match stage {
                    Stage::BuildTree => build_tree_stage(&cfg),
                    Stage::Mine => mine_stage(&cfg),
                    Stage::Curate => curate_stage(&cfg),
                    Stage::ServeBatch => serve_batch_stage(&cfg, true, false),
                    Stage::Simulate => simulate_stage(&cfg),
                    Stage::Eval => eval_stage(&cfg, true),
                };
                match r {
                    Ok(v) => out.push(v),
                    Err(e) => return Err((out, e)),
                }
            }
            Ok(out)
        }
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
    }
    Ok(())
}

fn require(path: &Path, producer: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::data(format!("missing input {}", path.display())).hint(format!("run `{producer}` first")))
    }
}

fn load_catalog(cfg: &PipelineConfig) -> Result<ItemCatalog, CliError> {
    require(&cfg.paths.items, "gen-data")?;
    let catalog = corpus::load_items(&cfg.paths.items, cfg.corpus.dimension)?;
    log::info!(
        "items: {} accepted, {} rejected",
        catalog.ingest_stats.accepted,
        catalog.ingest_stats.rejected
    );
    Ok(catalog)
}

fn load_log(cfg: &PipelineConfig, catalog: &ItemCatalog) -> Result<InteractionLog, CliError> {
    require(&cfg.paths.interactions, "gen-data")?;
    Ok(corpus::load_interactions(&cfg.paths.interactions, catalog)?)
}

fn load_tree(cfg: &PipelineConfig) -> Result<ClusterTree, CliError> {
    require(&cfg.paths.tree, "build-tree")?;
    Ok(ClusterTree::load(&cfg.paths.tree)?)
}

fn stale(what: &str, found: u64, current: u64, producer: &str) -> CliError {
    CliError::data(format!("{what} was built for tree version {found}, current tree is version {current}"))
        .hint(format!("rerun `{producer}`"))
}

fn load_training(cfg: &PipelineConfig, tree: &ClusterTree) -> Result<TrainingFile, CliError> {
    require(&cfg.paths.training, "curate")?;
    let file = load_training_file(&cfg.paths.training)?;
    if file.tree_version != tree.version() {
        return Err(stale("training file", file.tree_version, tree.version(), "curate"));
    }
    Ok(file)
}

fn gen_data(cfg: &PipelineConfig) -> Result<Value, CliError> {
    let (catalog, latent) = synth::generate_catalog(&cfg.data);
    let log = synth::generate_interactions(&catalog, &latent, &cfg.data);
    ensure_parent(&cfg.paths.items)?;
    ensure_parent(&cfg.paths.interactions)?;
    catalog.write_jsonl(&cfg.paths.items)?;
    log.write_jsonl(&cfg.paths.interactions)?;
    Ok(json!({
        "command": "gen-data",
        "status": "ok",
        "items": catalog.len(),
        "interactions": log.len(),
        "items_path": cfg.paths.items,
        "interactions_path": cfg.paths.interactions,
    }))
}

/// Rebuilds the tree; the version only moves when the content changes.
fn build_tree_stage(cfg: &PipelineConfig) -> Result<Value, CliError> {
    let catalog = load_catalog(cfg)?;
    let previous = if cfg.paths.tree.exists() {
        match ClusterTree::load(&cfg.paths.tree) {
            Ok(t) => Some(t),
            Err(e) => {
                log::warn!("ignoring unreadable previous tree: {e}");
                None
            }
        }
    } else {
        None
    };
    let base_version = previous.as_ref().map_or(1, ClusterTree::version);
    let tree = build_tree(&catalog, &cfg.tree_config(base_version))?;
    let (tree, changed) = match &previous {
        Some(prev) if prev.to_document() == tree.to_document() => (tree, false),
        Some(prev) => {
            let mut doc = tree.to_document();
            doc.version = prev.version() + 1;
            (ClusterTree::from_document(doc)?, true)
        }
        None => (tree, true),
    };
    if changed {
        ensure_parent(&cfg.paths.tree)?;
        tree.save(&cfg.paths.tree)?;
    }
    let violations = tree
        .balance_report(&cfg.tree.branching)
        .iter()
        .filter(|b| !b.exempt && b.mass_ratio > 1.0 + cfg.tree.balance_tolerance)
        .count();
    Ok(json!({
        "command": "build-tree",
        "status": "ok",
        "tree_version": tree.version(),
        "changed": changed,
        "items": catalog.len(),
        "nodes": tree.nodes().count(),
        "empty_leaves": tree.empty_leaves().len(),
        "balance_violations": violations,
        "path": cfg.paths.tree,
    }))
}

/// Mining output on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiningArtifact {
    pub tree_version: u64,
    pub config: MiningConfig,
    pub outcome: MiningOutcome,
}

fn mine_stage(cfg: &PipelineConfig) -> Result<Value, CliError> {
    let tree = load_tree(cfg)?;
    let catalog = load_catalog(cfg)?;
    let log = load_log(cfg, &catalog)?;
    let config = cfg.mining_config();
    let outcome = mine_pairs(&log, &tree, &config)?;
    let summary = json!({
        "command": "mine",
        "status": "ok",
        "tree_version": tree.version(),
        "records": log.len(),
        "serendipitous": outcome.serendipitous,
        "similar": outcome.similar,
        "unrelated": outcome.unrelated,
        "pairs": outcome.stats.len(),
        "path": cfg.paths.mining,
    });
    ensure_parent(&cfg.paths.mining)?;
    persist::write_json_atomic(
        &cfg.paths.mining,
        &MiningArtifact {
            tree_version: tree.version(),
            config,
            outcome,
        },
    )?;
    Ok(summary)
}

fn curate_stage(cfg: &PipelineConfig) -> Result<Value, CliError> {
    let tree = load_tree(cfg)?;
    require(&cfg.paths.mining, "mine")?;
    let mining: MiningArtifact = persist::read_json(&cfg.paths.mining)?;
    if mining.tree_version != tree.version() {
        return Err(stale("mining output", mining.tree_version, tree.version(), "mine"));
    }
    if mining.config.levels != cfg.levels() {
        return Err(CliError::data("mining output used different levels").hint("rerun `mine`"));
    }
    let catalog = load_catalog(cfg)?;
    let examples = curate_training_data(&mining.outcome.stats, &tree, &cfg.curation_config())?;
    ensure_parent(&cfg.paths.training)?;
    let written = export_training_file(
        &examples,
        &tree,
        &catalog,
        cfg.levels(),
        &cfg.prompt_options(),
        &cfg.paths.training,
    )?;
    let clusters = crate::serendipity::examples_per_cluster(&examples).len();
    Ok(json!({
        "command": "curate",
        "status": "ok",
        "tree_version": tree.version(),
        "examples": written,
        "clusters": clusters,
        "eval_contexts": eval_set(&examples).len(),
        "path": cfg.paths.training,
    }))
}

fn make_backend(cfg: &PipelineConfig, tree: &ClusterTree) -> Result<Box<dyn GenerationBackend>, CliError> {
    let spec = BackendSpec::parse(&cfg.planner.backend)?;
    let labels = || -> Result<_, CliError> {
        let training = load_training(cfg, tree)?;
        Ok(synth::oracle_labels(tree, &training.training_examples(), cfg.levels()))
    };
    Ok(match spec {
        BackendSpec::Oracle => Box::new(OracleStub::new(labels()?)),
        BackendSpec::Noisy(q) => Box::new(NoisyStub::new(
            labels()?,
            vocabulary(tree, cfg.serendipity.level),
            q,
            cfg.planner.backend_seed,
        )),
        BackendSpec::Replay(path) => Box::new(ReplayBackend::load(&path)?),
        #[cfg(feature = "remote")]
        BackendSpec::Remote(url) => Box::new(crate::planner::RemoteBackend::new(
            url,
            Duration::from_secs(cfg.planner.timeout_secs),
            false,
        )?),
        #[cfg(not(feature = "remote"))]
        BackendSpec::Remote(_) => {
            let _ = Duration::ZERO;
            return Err(CliError::new(ErrorKind::Validation, "built without remote backend support"));
        }
    })
}

fn serve_batch_stage(cfg: &PipelineConfig, incremental: bool, compact: bool) -> Result<Value, CliError> {
    let tree = load_tree(cfg)?;
    let catalog = load_catalog(cfg)?;
    let log = load_log(cfg, &catalog)?;
    let selection = batchinfer::select_corpus(&catalog, &log, cfg.batch.target_coverage);
    if !selection.reachable {
        log::warn!(
            "coverage target {} unreachable; reached {:.4}",
            selection.target,
            selection.achieved_coverage
        );
    }
    let previous = if incremental && cfg.paths.cache.exists() {
        Some(batchinfer::load_cache_unchecked(&cfg.paths.cache)?)
    } else {
        None
    };
    let backend = make_backend(cfg, &tree)?;
    let cache = batchinfer::run_batch(
        &cfg.plan_config(),
        backend.as_ref(),
        &tree,
        &catalog,
        &selection.selected,
        previous,
        BatchOptions {
            workers: cfg.batch.workers,
            compact,
        },
    )?;
    ensure_parent(&cfg.paths.cache)?;
    batchinfer::store_cache(&cache, &cfg.paths.cache)?;
    let run = cache.last_run().expect("run_batch appends a run record");
    let summary = json!({
        "command": "serve-batch",
        "status": if run.failed_count == 0 { "ok" } else { "partial" },
        "tree_version": cache.tree_version,
        "corpus_version": cache.corpus_version,
        "selected": selection.selected.len(),
        "achieved_coverage": selection.achieved_coverage,
        "processed_count": run.processed_count,
        "reused_count": run.reused_count,
        "failed_count": run.failed_count,
        "pruned_count": run.pruned_count,
        "backend_calls": run.backend_calls,
        "full_rebuild": run.full_rebuild,
        "path": cfg.paths.cache,
    });
    if run.failed_count > 0 {
        println!("{summary}");
        return Err(CliError::new(
            ErrorKind::Backend,
            format!("{} of {} items failed to plan", run.failed_count, run.processed_count),
        )
        .hint("failed items are cached as unresolved; rerun without --incremental to retry them"));
    }
    Ok(summary)
}

fn load_plan_cache(cfg: &PipelineConfig, tree: &ClusterTree) -> Result<PlanCache, CliError> {
    if !cfg.paths.cache.exists() {
        return Err(CliError::data("no plan cache").hint("run `serve-batch` first"));
    }
    Ok(batchinfer::load_cache(&cfg.paths.cache, tree.version())?)
}

fn recommend(cfg: &PipelineConfig, context: &str, mode: Mode) -> Result<Value, CliError> {
    let tree = load_tree(cfg)?;
    let catalog = load_catalog(cfg)?;
    if !catalog.contains(context) {
        return Err(CliError::data(format!("unknown context item {context}")));
    }
    let cache = match mode {
        Mode::Serendip => Some(load_plan_cache(cfg, &tree)?),
        Mode::Exploit => None,
    };
    let log = load_log(cfg, &catalog)?;
    let model = train_cooccurrence(&log, &catalog, cfg.decay_per_day())?;
    let k = cfg.retriever.k;
    let beta = cfg.retriever.beta;
    let (planned, recs) = match &cache {
        Some(cache) => {
            let out = recommend_restricted(&model, &tree, cache, context, k, beta)?;
            (Some(out.planned_cluster), out.recommendations)
        }
        None => (None, recommend_exploit(&model, context, k, beta)),
    };
    let planned_description = planned
        .as_deref()
        .and_then(|c| tree.node(c))
        .map(|n| n.description.clone());
    let list: Vec<Value> = recs
        .iter()
        .map(|r| {
            json!({
                "item_id": r.item_id,
                "score": r.score,
                "title": catalog.get(&r.item_id).map(|i| i.title.as_str()),
            })
        })
        .collect();
    Ok(json!({
        "command": "recommend",
        "status": "ok",
        "context": context,
        "mode": match mode { Mode::Serendip => "serendip", Mode::Exploit => "exploit" },
        "planned_cluster": planned,
        "planned_description": planned_description,
        "recommendations": list,
    }))
}

/// Simulation output on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImpressionArtifact {
    pub tree_version: u64,
    pub corpus_version: u64,
    pub impressions: ImpressionLogs,
}

fn simulate_stage(cfg: &PipelineConfig) -> Result<Value, CliError> {
    let tree = load_tree(cfg)?;
    let catalog = load_catalog(cfg)?;
    let cache = load_plan_cache(cfg, &tree)?;
    let log = load_log(cfg, &catalog)?;
    let model = train_cooccurrence(&log, &catalog, cfg.decay_per_day())?;
    let beta = cfg.retriever.beta;
    let serendip = SerendipPolicy {
        model: &model,
        tree: &tree,
        cache: &cache,
        beta,
    };
    let exploit = ExploitPolicy { model: &model, beta };
    let similar = SimilarContentPolicy {
        catalog: &catalog,
        tree: &tree,
        level: cfg.serendipity.level,
    };
    let policies: [&dyn Recommender; 3] = [&serendip, &exploit, &similar];
    let sim = cfg.sim_config();
    let out = simulate(&catalog, &tree, &policies, &sim)?;
    let report = novelty_report(&out.impressions);
    ensure_parent(&cfg.paths.impressions)?;
    persist::write_json_atomic(
        &cfg.paths.impressions,
        &ImpressionArtifact {
            tree_version: tree.version(),
            corpus_version: cache.corpus_version,
            impressions: out.impressions,
        },
    )?;
    ensure_parent(&cfg.paths.simulation)?;
    persist::write_json_atomic(
        &cfg.paths.simulation,
        &json!({ "config": sim, "interactions": out.interactions.len(), "novelty": report }),
    )?;
    Ok(json!({
        "command": "simulate",
        "status": "ok",
        "steps": sim.n_steps,
        "interactions": out.interactions.len(),
        "novelty": report.models,
        "path": cfg.paths.impressions,
    }))
}

/// Evaluation output on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub tree_version: u64,
    pub backend: String,
    pub offline: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub novelty: Option<NoveltyReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buckets: Option<Vec<evalsim::BucketGain>>,
}

fn eval_stage(cfg: &PipelineConfig, buckets_csv: bool) -> Result<Value, CliError> {
    let tree = load_tree(cfg)?;
    let catalog = load_catalog(cfg)?;
    let training = load_training(cfg, &tree)?;
    let examples = eval_set(&training.training_examples());
    let backend = make_backend(cfg, &tree)?;
    let plan = cfg.plan_config();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.batch.workers)
        .build()
        .map_err(|e| CliError::data(e.to_string()))?;
    let outputs: Vec<_> = pool.install(|| {
        examples
            .par_iter()
            .map(|e| {
                let item = catalog
                    .get(&e.context_item_id)
                    .ok_or_else(|| CliError::data(format!("eval item {} not in catalog", e.context_item_id)))?;
                let result = plan_cluster(backend.as_ref(), &tree, item, &plan)?;
                Ok((result, e.target_description.clone()))
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;
    let offline = evalsim::evaluate(&outputs, &tree, cfg.serendipity.level)?;

    let (novelty, buckets) = if cfg.paths.impressions.exists() {
        let imps: ImpressionArtifact = persist::read_json(&cfg.paths.impressions)?;
        if imps.tree_version != tree.version() {
            return Err(stale("impressions", imps.tree_version, tree.version(), "simulate"));
        }
        let buckets = bucket_analysis(&catalog, &imps.impressions, "serendip", "exploit", cfg.sim.n_buckets)?;
        (Some(novelty_report(&imps.impressions)), Some(buckets))
    } else {
        log::info!("no impressions at {}; skipping simulation metrics", cfg.paths.impressions.display());
        (None, None)
    };
    if buckets_csv {
        if let Some(b) = &buckets {
            ensure_parent(&cfg.paths.bucket_csv)?;
            write_bucket_csv(b, &cfg.paths.bucket_csv)?;
        }
    }
    let artifact = EvalArtifact {
        tree_version: tree.version(),
        backend: cfg.planner.backend.clone(),
        offline,
        novelty,
        buckets,
    };
    ensure_parent(&cfg.paths.eval_report)?;
    persist::write_json_atomic(&cfg.paths.eval_report, &artifact)?;
    let gains: Option<BTreeMap<usize, Option<f64>>> = artifact
        .buckets
        .as_ref()
        .map(|b| b.iter().map(|g| (g.bucket, g.gain)).collect());
    Ok(json!({
        "command": "eval",
        "status": "ok",
        "n_examples": artifact.offline.n_examples,
        "match_rate": artifact.offline.match_rate,
        "recall": artifact.offline.recall,
        "novel_ratio": artifact.novelty.as_ref().map(|n| n.models.iter().map(|(k, m)| (k.clone(), m.novel_ratio)).collect::<BTreeMap<_, _>>()),
        "bucket_gains": gains,
        "path": cfg.paths.eval_report,
    }))
}
