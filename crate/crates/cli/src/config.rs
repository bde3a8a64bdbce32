//! Flat TOML pipeline configuration with command-line overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::Args;
use coldselect::clustering::{DEFAULT_K, DEFAULT_REFINE_ITERATIONS, DEFAULT_SEED};
use coldselect::selection::{ImpurityDenominator, Metric, SeparationMode, SessionConfig, Strategy};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const DEFAULT_REDUCED_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub vocab: Option<PathBuf>,
    pub instances: Option<PathBuf>,
    pub texts: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub reduced_dim: usize,
    pub k: usize,
    pub seed: u64,
    pub refine_iterations: usize,
    pub budget: Option<usize>,
    /// Empty means "take the distinct gold labels, sorted".
    pub label_space: Vec<String>,
    pub strategy: Strategy,
    pub ablation: BTreeSet<Metric>,
    pub separation_mode: SeparationMode,
    pub impurity_denominator: ImpurityDenominator,
    pub eq16_literal: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            vocab: None,
            instances: None,
            texts: None,
            gold: None,
            output_dir: PathBuf::from("out"),
            reduced_dim: DEFAULT_REDUCED_DIM,
            k: DEFAULT_K,
            seed: DEFAULT_SEED,
            refine_iterations: DEFAULT_REFINE_ITERATIONS,
            budget: None,
            label_space: Vec::new(),
            strategy: Strategy::ColdSelect,
            ablation: [Metric::Cohesion, Metric::Separation, Metric::Impurity].into(),
            separation_mode: SeparationMode::Literal,
            impurity_denominator: ImpurityDenominator::AllInstances,
            eq16_literal: false,
        }
    }
}

/// Flags shared by every command; each one overrides the config file. The
/// same struct, minus `config`, is the on-disk document.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigArgs {
    /// Flat TOML file with PipelineConfig keys.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub vocab: Option<PathBuf>,
    #[arg(long, global = true)]
    pub instances: Option<PathBuf>,
    #[arg(long, global = true)]
    pub texts: Option<PathBuf>,
    #[arg(long, global = true)]
    pub gold: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub reduced_dim: Option<usize>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub refine_iterations: Option<usize>,
    #[arg(long, global = true)]
    pub budget: Option<usize>,
    /// Comma-separated class names.
    #[arg(long, global = true, value_delimiter = ',')]
    pub label_space: Option<Vec<String>>,
    /// coldselect, random or random-g.
    #[arg(long, global = true)]
    pub strategy: Option<String>,
    /// Comma-separated subset of cohesion, separation, impurity.
    #[arg(long, global = true, value_delimiter = ',')]
    pub ablation: Option<Vec<String>>,
    /// literal or negated.
    #[arg(long, global = true)]
    pub separation_mode: Option<String>,
    /// all_instances or labeled_only.
    #[arg(long, global = true)]
    pub impurity_denominator: Option<String>,
    #[arg(long, global = true)]
    pub eq16_literal: Option<bool>,
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    s.parse().map_err(CliError::Usage)
}

fn parse_metric(s: &str) -> Result<Metric> {
    match s.trim() {
        "cohesion" => Ok(Metric::Cohesion),
        "separation" => Ok(Metric::Separation),
        "impurity" => Ok(Metric::Impurity),
        other => Err(CliError::Usage(format!("unknown metric {other:?}"))),
    }
}

fn parse_separation(s: &str) -> Result<SeparationMode> {
    match s {
        "literal" => Ok(SeparationMode::Literal),
        "negated" => Ok(SeparationMode::Negated),
        other => Err(CliError::Usage(format!("unknown separation mode {other:?}"))),
    }
}

fn parse_impurity(s: &str) -> Result<ImpurityDenominator> {
    match s {
        "all_instances" => Ok(ImpurityDenominator::AllInstances),
        "labeled_only" => Ok(ImpurityDenominator::LabeledOnly),
        other => Err(CliError::Usage(format!("unknown impurity denominator {other:?}"))),
    }
}

/// Relative paths in a config file are taken from the file's directory.
fn anchor(base: &Path, p: Option<PathBuf>) -> Option<PathBuf> {
    p.map(|p| if p.is_relative() { base.join(p) } else { p })
}

impl ConfigArgs {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<PipelineConfig> {
        let mut config = PipelineConfig::default();
        if let Some(path) = &self.config {
            let usage = |e: &dyn std::fmt::Display| CliError::Usage(format!("config {}: {e}", path.display()));
            let text = std::fs::read_to_string(path).map_err(|e| usage(&e))?;
            let mut file: ConfigArgs = toml::from_str(&text).map_err(|e| usage(&e))?;
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [&mut file.vocab, &mut file.instances, &mut file.texts, &mut file.gold, &mut file.output_dir] {
                *p = anchor(base, p.take());
            }
            file.apply(&mut config)?;
        }
        self.clone().apply(&mut config)?;
        Ok(config)
    }

    fn apply(self, c: &mut PipelineConfig) -> Result<()> {
        macro_rules! set {
            ($($field:ident),*) => {$(if let Some(v) = self.$field { c.$field = v; })*};
        }
        macro_rules! set_some {
            ($($field:ident),*) => {$(if self.$field.is_some() { c.$field = self.$field; })*};
        }
        set_some!(vocab, instances, texts, gold, budget);
        set!(output_dir, reduced_dim, k, seed, refine_iterations, label_space, eq16_literal);
        if let Some(s) = self.strategy {
            c.strategy = parse_strategy(&s)?;
        }
        if let Some(list) = self.ablation {
            c.ablation = list.iter().map(|m| parse_metric(m)).collect::<Result<_>>()?;
        }
        if let Some(s) = self.separation_mode {
            c.separation_mode = parse_separation(&s)?;
        }
        if let Some(s) = self.impurity_denominator {
            c.impurity_denominator = parse_impurity(&s)?;
        }
        Ok(())
    }
}

impl PipelineConfig {
    pub fn require<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T> {
        value
            .as_ref()
            .ok_or_else(|| CliError::Usage(format!("missing required key {key:?} (config file or --{})", key.replace('_', "-"))))
    }

    pub fn session_config(&self, label_space: Vec<String>) -> Result<SessionConfig> {
        let budget = *Self::require(&self.budget, "budget")?;
        Ok(SessionConfig {
            budget,
            label_space,
            ablation: self.ablation.clone(),
            separation_mode: self.separation_mode,
            impurity_denominator: self.impurity_denominator,
            eq16_literal: self.eq16_literal,
            seed: self.seed,
            strategy: self.strategy,
        })
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}
