//! Oracle-mode benchmark harness over synthetic corpora.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{manual_verbalizers, ManualVerbalizerError};
use crate::clustering::{cluster_space, ClusteringError};
use crate::geometry::{build_shared_space, GeometryError, SharedSpace};
use crate::selection::{GoldProvider, Session, SessionConfig, SelectionError, Strategy};
use crate::synthetic::{generate, MixtureSpec, SyntheticCorpus, SyntheticError};
use crate::verbalizer_eval::{evaluate, Aggregation, EvalError, EvalReport};
use crate::clustering::Clustering;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Manual(#[from] ManualVerbalizerError),
}

pub type Result<T> = std::result::Result<T, SimulationError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// Corpus template; its seed is replaced per run.
    pub spec: MixtureSpec,
    pub reduced_dim: usize,
    pub k: usize,
    pub refine_iterations: usize,
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    /// Ablation, modes and eq16 switch; budget, labels, seed and strategy
    /// are filled per cell.
    pub session: SessionConfig,
    pub aggregation: Aggregation,
    /// Write 0 instead of measured time so outputs are byte-stable.
    pub zero_wall_ms: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let spec = MixtureSpec::default();
        Self {
            reduced_dim: spec.dim.min(64),
            spec,
            k: crate::clustering::DEFAULT_K,
            refine_iterations: crate::clustering::DEFAULT_REFINE_ITERATIONS,
            budgets: vec![8, 16, 32],
            seeds: (0..20).collect(),
            strategies: Strategy::ALL.to_vec(),
            session: SessionConfig::new(1, vec!["_".into()]),
            aggregation: Aggregation::Max,
            zero_wall_ms: false,
        }
    }
}

/// A generated corpus with its shared space and refined clustering.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub corpus: SyntheticCorpus,
    pub space: Arc<SharedSpace>,
    pub clustering: Arc<Clustering>,
}

pub fn prepare(config: &SimulationConfig, seed: u64) -> Result<Prepared> {
    let spec = MixtureSpec {
        seed,
        ..config.spec.clone()
    };
    let corpus = generate(&spec)?;
    let space = build_shared_space(&corpus.vocab, &corpus.instances, config.reduced_dim)?;
    let k = config.k.min(space.len());
    let clustering = cluster_space(&space, k, seed, config.refine_iterations)?;
    Ok(Prepared {
        seed,
        corpus,
        space: Arc::new(space),
        clustering: Arc::new(clustering),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub strategy: Strategy,
    pub budget: usize,
    pub seed: u64,
    /// Skipped test instances count as wrong.
    pub accuracy: f64,
    pub n_labeled: usize,
    pub n_verbalizers: usize,
    pub wall_ms: u64,
}

fn session_config(config: &SimulationConfig, prepared: &Prepared, strategy: Strategy, budget: usize) -> SessionConfig {
    SessionConfig {
        budget,
        label_space: prepared.corpus.label_space.clone(),
        seed: prepared.seed,
        strategy,
        ..config.session.clone()
    }
}

/// Runs one oracle session and evaluates it on the held-out split.
pub fn run_cell(
    config: &SimulationConfig,
    prepared: &Prepared,
    strategy: Strategy,
    budget: usize,
) -> Result<(CellResult, Session, EvalReport)> {
    let start = Instant::now();
    let mut session = Session::new(
        prepared.space.clone(),
        prepared.clustering.clone(),
        session_config(config, prepared, strategy, budget),
    )?;
    session.run(&mut GoldProvider::new(prepared.corpus.gold_map()))?;
    let verbalizers = match strategy {
        Strategy::Random => manual_verbalizers(
            &prepared.corpus.manual_verbalizers(),
            &prepared.space,
            &prepared.corpus.label_space,
        )?,
        _ => session.state().verbalizers.clone(),
    };
    let report = evaluate(
        &prepared.corpus.test_instances,
        &prepared.corpus.test_gold_map(),
        &prepared.corpus.label_space,
        &verbalizers,
        &prepared.space,
        config.aggregation,
    )?;
    let wall_ms = if config.zero_wall_ms {
        0
    } else {
        start.elapsed().as_millis() as u64
    };
    let cell = CellResult {
        strategy,
        budget,
        seed: prepared.seed,
        accuracy: report.accuracy_with_skipped,
        n_labeled: session.state().labels.len(),
        n_verbalizers: verbalizers.len(),
        wall_ms,
    };
    Ok((cell, session, report))
}

/// Steps until every class owns a verbalizer token; `None` if the instances
/// run out first. Random starts from its manual verbalizers and never
/// acquires tokens, so it reports `Some(0)`.
pub fn steps_to_cover(config: &SimulationConfig, prepared: &Prepared, strategy: Strategy) -> Result<Option<usize>> {
    if strategy == Strategy::Random {
        return Ok(Some(0));
    }
    let n = prepared.space.instance_count();
    let mut session = Session::new(
        prepared.space.clone(),
        prepared.clustering.clone(),
        session_config(config, prepared, strategy, n),
    )?;
    let mut provider = GoldProvider::new(prepared.corpus.gold_map());
    let classes = prepared.corpus.label_space.len();
    while !session.is_finished() {
        session.step(&mut provider)?;
        if session.state().verbalizers.classes().len() == classes {
            return Ok(Some(session.state().timestamp));
        }
    }
    Ok(None)
}

/// Every (strategy, budget, seed) cell, sorted by strategy, budget, seed.
pub fn simulate(config: &SimulationConfig) -> Result<Vec<CellResult>> {
    let per_seed: Vec<Vec<CellResult>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let prepared = prepare(config, seed)?;
            let mut cells = Vec::new();
            for &strategy in &config.strategies {
                for &budget in &config.budgets {
                    cells.push(run_cell(config, &prepared, strategy, budget)?.0);
                }
            }
            Ok(cells)
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<CellResult> = per_seed.into_iter().flatten().collect();
    let order = |s: Strategy| Strategy::ALL.iter().position(|&x| x == s).unwrap();
    rows.sort_by_key(|r| (order(r.strategy), r.budget, r.seed));
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub budget: usize,
    pub mean_accuracy: f64,
    pub mean_labeled: f64,
    pub mean_verbalizers: f64,
    pub mean_wall_ms: f64,
}

/// Mean per (strategy, budget) cell, in the order rows first appear.
pub fn summarize(rows: &[CellResult]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Strategy, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.strategy, r.budget)) {
            keys.push((r.strategy, r.budget));
        }
    }
    keys.into_iter()
        .map(|(strategy, budget)| {
            let cell: Vec<&CellResult> = rows.iter().filter(|r| r.strategy == strategy && r.budget == budget).collect();
            let mean = |f: &dyn Fn(&CellResult) -> f64| cell.iter().map(|r| f(r)).sum::<f64>() / cell.len() as f64;
            SummaryRow {
                strategy,
                budget,
                mean_accuracy: mean(&|r| r.accuracy),
                mean_labeled: mean(&|r| r.n_labeled as f64),
                mean_verbalizers: mean(&|r| r.n_verbalizers as f64),
                mean_wall_ms: mean(&|r| r.wall_ms as f64),
            }
        })
        .collect()
}
