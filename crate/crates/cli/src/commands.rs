use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::Args;
use coldselect::baselines::{manual_verbalizers, parse_manual_verbalizers};
use coldselect::clustering::{cluster_space, ClusterDump, Clustering};
use coldselect::embed_io::{load_embedding_set, load_gold_labels, load_instance_texts, EmbeddingSet};
use coldselect::geometry::{build_shared_space, SharedSpace};
use coldselect::selection::{run_session, GoldProvider, SessionConfig, SessionExport, Strategy, VerbalizerSet};
use coldselect::simulation::{simulate as run_simulation, summarize, SimulationConfig};
use coldselect::synthetic::MixtureSpec;
use coldselect::verbalizer_eval::{evaluate, render_text, Aggregation, EvalReport};
use coldselect_service::{Annotator, AnnotatorConfig, AppState};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{embed_error, CliError, Result};

pub const SHARED_SPACE: &str = "shared_space.json";
pub const PCA_MODEL: &str = "pca_model.json";
pub const CLUSTERING: &str = "clustering.json";
pub const MANIFEST: &str = "manifest.json";
pub const SESSION_EXPORT: &str = "session_export.json";

// ---- file helpers ----

fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    load_embedding_set(path).map_err(|e| embed_error(path, e))
}

fn load_gold(path: &Path) -> Result<BTreeMap<String, String>> {
    Ok(load_gold_labels(path)
        .map_err(|e| embed_error(path, e))?
        .into_iter()
        .map(|g| (g.id, g.label))
        .collect())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(path.display(), e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifacts serialize");
    s.push('\n');
    s
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Sorted distinct labels, used when the config names no label space.
fn label_space_from(config: &PipelineConfig, gold: &BTreeMap<String, String>) -> Vec<String> {
    if config.label_space.is_empty() {
        gold.values().cloned().collect::<BTreeSet<_>>().into_iter().collect()
    } else {
        config.label_space.clone()
    }
}

// ---- prepare ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub tokens: usize,
    pub instances: usize,
    pub reduced_dim: usize,
    pub clusters: usize,
    pub discarded_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: Vec<ArtifactEntry>,
    pub inputs: Vec<InputEntry>,
    pub k: usize,
    pub seed: u64,
    pub refine_iterations: usize,
    pub summary: PrepareSummary,
}

pub fn prepare(config: &PipelineConfig) -> Result<Manifest> {
    let vocab_path = PipelineConfig::require(&config.vocab, "vocab")?;
    let instances_path = PipelineConfig::require(&config.instances, "instances")?;
    let vocab = load_embeddings(vocab_path)?;
    let instances = load_embeddings(instances_path)?;
    let space = build_shared_space(&vocab, &instances, config.reduced_dim)?;
    let clustering = cluster_space(&space, config.k, config.seed, config.refine_iterations)?;

    let mut artifacts = Vec::new();
    for (name, body) in [
        (SHARED_SPACE, to_json(&space)),
        (PCA_MODEL, to_json(space.pca_model())),
        (CLUSTERING, to_json(&clustering.to_dump(&space))),
    ] {
        write_file(&config.artifact(name), body.as_bytes())?;
        artifacts.push(ArtifactEntry {
            name: name.to_string(),
            sha256: sha256_hex(body.as_bytes()),
            bytes: body.len() as u64,
        });
    }
    let mut inputs = Vec::new();
    for path in [vocab_path, instances_path] {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        inputs.push(InputEntry {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        artifacts,
        inputs,
        k: config.k,
        seed: config.seed,
        refine_iterations: config.refine_iterations,
        summary: PrepareSummary {
            tokens: space.token_count(),
            instances: space.instance_count(),
            reduced_dim: space.reduced_dim(),
            clusters: clustering.clusters.len(),
            discarded_tokens: clustering.discarded().count(),
        },
    };
    write_file(&config.artifact(MANIFEST), to_json(&manifest).as_bytes())?;
    Ok(manifest)
}

/// Shared space and clustering written by `prepare`.
pub fn load_prepared(config: &PipelineConfig) -> Result<(Arc<SharedSpace>, Arc<Clustering>)> {
    let space: SharedSpace = read_json(&config.artifact(SHARED_SPACE))?;
    let dump: ClusterDump = read_json(&config.artifact(CLUSTERING))?;
    let clustering = Clustering::from_dump(&dump, &space)?;
    Ok((Arc::new(space), Arc::new(clustering)))
}

// ---- select ----

#[derive(Debug, Clone, Default, Args)]
pub struct SelectArgs {
    /// Gold JSONL answering for the annotator; defaults to the `gold` key.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Export path for a single run; defaults to <output_dir>/session_export.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Runs every listed strategy instead of the configured one.
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<String>>,
    /// Runs every listed budget instead of the configured one.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<usize>>,
    /// With --test-gold, scores every run into a results CSV.
    #[arg(long)]
    pub test_instances: Option<PathBuf>,
    #[arg(long)]
    pub test_gold: Option<PathBuf>,
    /// Verbalizers used to score the random strategy.
    #[arg(long)]
    pub manual_verbalizers: Option<PathBuf>,
    /// Results CSV path; defaults to <output_dir>/results.csv.
    #[arg(long)]
    pub results: Option<PathBuf>,
    #[arg(long, default_value = "max")]
    pub aggregation: String,
    /// Write 0 in the wall_ms column.
    #[arg(long)]
    pub zero_wall_ms: bool,
}

fn parse_aggregation(s: &str) -> Result<Aggregation> {
    match s {
        "max" => Ok(Aggregation::Max),
        "mean" => Ok(Aggregation::Mean),
        other => Err(CliError::Usage(format!("unknown aggregation {other:?}"))),
    }
}

/// Checks that the oracle answers every instance in the space.
fn check_oracle(space: &SharedSpace, oracle: &BTreeMap<String, String>) -> Result<()> {
    let missing: Vec<&str> = space
        .items()
        .iter()
        .skip(space.token_count())
        .map(|i| i.id.as_str())
        .filter(|id| !oracle.contains_key(*id))
        .collect();
    if missing.is_empty() {
        return Ok(());
    }
    let shown: Vec<&str> = missing.iter().take(10).copied().collect();
    let more = if missing.len() > shown.len() {
        format!(" and {} more", missing.len() - shown.len())
    } else {
        String::new()
    };
    Err(CliError::Data(format!(
        "MissingOracleLabel: no oracle label for {}{more}",
        shown.join(", ")
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub strategy: String,
    pub budget: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub n_labeled: usize,
    pub n_verbalizers: usize,
    pub wall_ms: u64,
}

pub struct SelectOutcome {
    /// One export path per (strategy, budget) run.
    pub exports: Vec<PathBuf>,
    pub results: Option<PathBuf>,
}

pub fn select(config: &PipelineConfig, args: &SelectArgs) -> Result<SelectOutcome> {
    let oracle_path = match &args.oracle {
        Some(p) => p,
        None => PipelineConfig::require(&config.gold, "gold")?,
    };
    let oracle = load_gold(oracle_path)?;
    let (space, clustering) = load_prepared(config)?;
    check_oracle(&space, &oracle)?;
    let label_space = label_space_from(config, &oracle);

    let strategies: Vec<Strategy> = match &args.strategies {
        Some(list) => list.iter().map(|s| s.parse().map_err(CliError::Usage)).collect::<Result<_>>()?,
        None => vec![config.strategy],
    };
    let budgets: Vec<usize> = match &args.budgets {
        Some(list) => list.clone(),
        None => vec![*PipelineConfig::require(&config.budget, "budget")?],
    };
    let matrix = strategies.len() * budgets.len() > 1;
    let scoring = match (&args.test_instances, &args.test_gold) {
        (Some(i), Some(g)) => Some((load_embeddings(i)?, load_gold(g)?)),
        (None, None) => None,
        _ => return Err(CliError::Usage("--test-instances and --test-gold go together".into())),
    };
    let aggregation = parse_aggregation(&args.aggregation)?;

    let mut exports = Vec::new();
    let mut rows = Vec::new();
    for &strategy in &strategies {
        for &budget in &budgets {
            let start = Instant::now();
            let cell = PipelineConfig {
                budget: Some(budget),
                strategy,
                ..config.clone()
            };
            let session_config = cell.session_config(label_space.clone())?;
            let session = run_session(
                space.clone(),
                clustering.clone(),
                session_config,
                &mut GoldProvider::new(oracle.clone()),
            )?;
            let export = session.export();
            let path = match (&args.out, matrix) {
                (Some(p), false) => p.clone(),
                (None, false) => config.artifact(SESSION_EXPORT),
                (_, true) => config.artifact(&format!("exports/{strategy}-b{budget}.json")),
            };
            write_file(&path, export.to_json().as_bytes())?;
            exports.push(path);
            if let Some((test, test_gold)) = &scoring {
                let verbalizers = match (strategy, &args.manual_verbalizers) {
                    (Strategy::Random, Some(p)) => load_manual(p, &space, &label_space)?,
                    _ => export.verbalizer_set(),
                };
                let report = evaluate(test, test_gold, &label_space, &verbalizers, &space, aggregation)?;
                rows.push(ResultRow {
                    strategy: strategy.to_string(),
                    budget,
                    seed: config.seed,
                    accuracy: report.accuracy_with_skipped,
                    n_labeled: export.labels.len(),
                    n_verbalizers: verbalizers.len(),
                    wall_ms: if args.zero_wall_ms { 0 } else { start.elapsed().as_millis() as u64 },
                });
            }
        }
    }
    let results = if scoring.is_some() {
        let path = args.results.clone().unwrap_or_else(|| config.artifact("results.csv"));
        write_csv(&path, &rows, &[])?;
        Some(path)
    } else {
        None
    };
    Ok(SelectOutcome { exports, results })
}

fn load_manual(path: &Path, space: &SharedSpace, label_space: &[String]) -> Result<VerbalizerSet> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let entries = parse_manual_verbalizers(&text).map_err(|e| CliError::data(path.display(), e))?;
    manual_verbalizers(&entries, space, label_space).map_err(|e| CliError::data(path.display(), e))
}

/// Result rows, then summary rows whose seed column reads "mean".
fn write_csv(path: &Path, rows: &[ResultRow], summary: &[ResultSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_data = |e: csv::Error| CliError::data(path.display(), e);
    w.write_record(["strategy", "budget", "seed", "accuracy", "n_labeled", "n_verbalizers", "wall_ms"])
        .map_err(to_data)?;
    for r in rows {
        w.write_record([
            r.strategy.clone(),
            r.budget.to_string(),
            r.seed.to_string(),
            r.accuracy.to_string(),
            r.n_labeled.to_string(),
            r.n_verbalizers.to_string(),
            r.wall_ms.to_string(),
        ])
        .map_err(to_data)?;
    }
    for s in summary {
        w.write_record([
            s.strategy.clone(),
            s.budget.to_string(),
            "mean".to_string(),
            s.accuracy.to_string(),
            s.n_labeled.to_string(),
            s.n_verbalizers.to_string(),
            s.wall_ms.to_string(),
        ])
        .map_err(to_data)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::data(path.display(), e))?;
    write_file(path, &bytes)
}

struct ResultSummary {
    strategy: String,
    budget: usize,
    accuracy: f64,
    n_labeled: f64,
    n_verbalizers: f64,
    wall_ms: f64,
}

// ---- eval ----

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    /// Session export whose verbalizers are scored.
    #[arg(long, conflicts_with = "manual_verbalizers", required_unless_present = "manual_verbalizers")]
    pub export: Option<PathBuf>,
    /// JSON list of {token_id, class} used instead of a session export.
    #[arg(long)]
    pub manual_verbalizers: Option<PathBuf>,
    #[arg(long)]
    pub test_instances: PathBuf,
    #[arg(long)]
    pub test_gold: PathBuf,
    #[arg(long, default_value = "max")]
    pub aggregation: String,
    /// Report path without extension; defaults to <output_dir>/eval_report.
    #[arg(long)]
    pub out_prefix: Option<PathBuf>,
}

pub fn eval(config: &PipelineConfig, args: &EvalArgs) -> Result<(EvalReport, PathBuf, PathBuf)> {
    let aggregation = parse_aggregation(&args.aggregation)?;
    let space: SharedSpace = read_json(&config.artifact(SHARED_SPACE))?;
    let test = load_embeddings(&args.test_instances)?;
    let gold = load_gold(&args.test_gold)?;
    let (label_space, verbalizers) = match (&args.export, &args.manual_verbalizers) {
        (Some(p), _) => {
            let export: SessionExport = read_json(p)?;
            (export.config.label_space.clone(), export.verbalizer_set())
        }
        (None, Some(p)) => {
            let label_space = label_space_from(config, &gold);
            let v = load_manual(p, &space, &label_space)?;
            (label_space, v)
        }
        (None, None) => return Err(CliError::Usage("pass --export or --manual-verbalizers".into())),
    };
    let report = evaluate(&test, &gold, &label_space, &verbalizers, &space, aggregation)?;
    let prefix = args.out_prefix.clone().unwrap_or_else(|| config.artifact("eval_report"));
    let json_path = prefix.with_extension("json");
    let text_path = prefix.with_extension("txt");
    write_file(&json_path, to_json(&report).as_bytes())?;
    write_file(&text_path, render_text(&report).as_bytes())?;
    Ok((report, json_path, text_path))
}

// ---- simulate ----

#[derive(Debug, Clone, Default, Args)]
pub struct SimulateArgs {
    /// TOML mixture spec; the flags below override its keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[arg(long)]
    pub instances_per_class: Option<usize>,
    #[arg(long)]
    pub test_instances_per_class: Option<usize>,
    #[arg(long)]
    pub tokens_per_class: Option<usize>,
    #[arg(long)]
    pub token_spread: Option<f64>,
    #[arg(long)]
    pub outlier_tokens: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub class_separation: Option<f64>,
    /// Number of runs; run i uses seed `seed + i`.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [8, 16, 32])]
    pub budgets: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = ["coldselect".to_string(), "random".to_string(), "random-g".to_string()])]
    pub strategies: Vec<String>,
    #[arg(long, default_value = "max")]
    pub aggregation: String,
    /// Write 0 in the wall_ms column so the CSV is byte-stable.
    #[arg(long)]
    pub zero_wall_ms: bool,
    /// CSV path; defaults to <output_dir>/simulation.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn mixture_spec(args: &SimulateArgs) -> Result<MixtureSpec> {
    let mut spec = match &args.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("spec {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("spec {}: {e}", p.display())))?
        }
        None => MixtureSpec::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = args.$field { spec.$field = v; })*};
    }
    set!(
        n_classes,
        instances_per_class,
        test_instances_per_class,
        tokens_per_class,
        token_spread,
        outlier_tokens,
        dim,
        class_separation
    );
    Ok(spec)
}

pub fn simulate(config: &PipelineConfig, args: &SimulateArgs) -> Result<PathBuf> {
    let spec = mixture_spec(args)?;
    let strategies: Vec<Strategy> = args
        .strategies
        .iter()
        .map(|s| s.parse().map_err(CliError::Usage))
        .collect::<Result<_>>()?;
    let mut session = SessionConfig::new(1, vec!["_".into()]);
    session.ablation = config.ablation.clone();
    session.separation_mode = config.separation_mode;
    session.impurity_denominator = config.impurity_denominator;
    session.eq16_literal = config.eq16_literal;
    let sim = SimulationConfig {
        reduced_dim: config.reduced_dim.min(spec.dim),
        spec,
        k: config.k,
        refine_iterations: config.refine_iterations,
        budgets: args.budgets.clone(),
        seeds: (0..args.seeds).map(|i| config.seed + i).collect(),
        strategies,
        session,
        aggregation: parse_aggregation(&args.aggregation)?,
        zero_wall_ms: args.zero_wall_ms,
    };
    let cells = run_simulation(&sim)?;
    let rows: Vec<ResultRow> = cells
        .iter()
        .map(|c| ResultRow {
            strategy: c.strategy.to_string(),
            budget: c.budget,
            seed: c.seed,
            accuracy: c.accuracy,
            n_labeled: c.n_labeled,
            n_verbalizers: c.n_verbalizers,
            wall_ms: c.wall_ms,
        })
        .collect();
    let summary: Vec<ResultSummary> = summarize(&cells)
        .into_iter()
        .map(|s| ResultSummary {
            strategy: s.strategy.to_string(),
            budget: s.budget,
            accuracy: s.mean_accuracy,
            n_labeled: s.mean_labeled,
            n_verbalizers: s.mean_verbalizers,
            wall_ms: s.mean_wall_ms,
        })
        .collect();
    let path = args.out.clone().unwrap_or_else(|| config.artifact("simulation.csv"));
    write_csv(&path, &rows, &summary)?;
    Ok(path)
}

// ---- serve ----

#[derive(Debug, Clone, Default, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = coldselect_service::DEFAULT_PORT)]
    pub port: u16,
    /// Defaults to <output_dir>/events.jsonl.
    #[arg(long)]
    pub event_log: Option<PathBuf>,
}

/// Builds the annotator for `serve`, replaying any earlier event log.
pub fn open_annotator(config: &PipelineConfig, args: &ServeArgs) -> Result<Annotator> {
    let (space, clustering) = load_prepared(config)?;
    let label_space = if config.label_space.is_empty() {
        let gold = PipelineConfig::require(&config.gold, "label_space")?;
        label_space_from(config, &load_gold(gold)?)
    } else {
        config.label_space.clone()
    };
    let texts = match &config.texts {
        Some(p) => load_instance_texts(p)
            .map_err(|e| embed_error(p, e))?
            .into_iter()
            .map(|t| (t.id, t.text))
            .collect(),
        None => BTreeMap::new(),
    };
    let annotator = Annotator::open(AnnotatorConfig {
        space,
        clustering,
        session: config.session_config(label_space)?,
        texts,
        event_log: Some(args.event_log.clone().unwrap_or_else(|| config.artifact("events.jsonl"))),
        export_path: Some(config.artifact(SESSION_EXPORT)),
    })
    .map_err(|e| CliError::data("session service", e))?;
    Ok(annotator)
}

pub fn serve(config: &PipelineConfig, args: &ServeArgs) -> Result<()> {
    let annotator = open_annotator(config, args)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
    runtime.block_on(async {
        let listener = coldselect_service::bind(args.port)
            .await
            .map_err(|e| CliError::Data(format!("port {}: {e}", args.port)))?;
        let addr = listener.local_addr().map_err(|e| CliError::Internal(e.to_string()))?;
        eprintln!("listening on http://{addr}");
        coldselect_service::serve(listener, AppState::with_annotator(annotator))
            .await
            .map_err(|e| CliError::Internal(e.to_string()))
    })
}
