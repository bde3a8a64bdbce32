//! The budgeted selection loop.
//!
//! A [`Session`] owns the shared space, the refined clustering and the
//! evolving [`SessionState`]. Each step is split in two: [`Session::propose`]
//! picks a cluster and an instance, [`Session::commit`] records the label,
//! assigns a verbalizer token and refreshes the metric cache. Batch runs go
//! through [`Session::step`] with a [`LabelProvider`]; the HTTP service
//! drives the two halves separately.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::clustering::{Cluster, ClusterKind, Clustering};
use crate::geometry::{dot, ItemKind, SharedSpace};
use crate::seeding::{rng_for, Stream};

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),
    #[error("separation needs at least two clusters")]
    SingleCluster,
    #[error("cluster {0} has no unlabeled instance")]
    IneligibleCluster(usize),
    #[error("no cluster has an unlabeled instance")]
    NoEligibleCluster,
    #[error("no unlabeled instance remains")]
    NoUnlabeledInstance,
    #[error("label provider failed: {0}")]
    ProviderFailure(String),
    #[error("class {0:?} is not in the label space")]
    UnknownClass(String),
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("labeling budget is exhausted")]
    BudgetExhausted,
    #[error("proposal for T={proposal} does not match session at T={current}")]
    StaleProposal { proposal: usize, current: usize },
    #[error("clustering is not refined: cluster {0} is not mixed")]
    NotRefined(usize),
}

pub type Result<T> = std::result::Result<T, SelectionError>;

/// NFC-normalized, trimmed class name.
pub fn canonical_label(label: &str) -> String {
    label.nfc().collect::<String>().trim().to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cohesion,
    Separation,
    Impurity,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationMode {
    /// Max similarity to other clusters, as printed.
    #[default]
    Literal,
    /// One minus that similarity.
    Negated,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpurityDenominator {
    #[default]
    AllInstances,
    LabeledOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[default]
    #[serde(rename = "coldselect")]
    ColdSelect,
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "random-g")]
    RandomG,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::ColdSelect, Strategy::Random, Strategy::RandomG];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::ColdSelect => "coldselect",
            Strategy::Random => "random",
            Strategy::RandomG => "random-g",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "coldselect" | "cold-select" => Ok(Strategy::ColdSelect),
            "random" => Ok(Strategy::Random),
            "random-g" | "random_g" | "randomg" => Ok(Strategy::RandomG),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn all_metrics() -> BTreeSet<Metric> {
    [Metric::Cohesion, Metric::Separation, Metric::Impurity].into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub budget: usize,
    pub label_space: Vec<String>,
    #[serde(default = "all_metrics")]
    pub ablation: BTreeSet<Metric>,
    #[serde(default)]
    pub separation_mode: SeparationMode,
    #[serde(default)]
    pub impurity_denominator: ImpurityDenominator,
    #[serde(default)]
    pub eq16_literal: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub strategy: Strategy,
}

impl SessionConfig {
    pub fn new(budget: usize, label_space: Vec<String>) -> Self {
        Self {
            budget,
            label_space,
            ablation: all_metrics(),
            separation_mode: SeparationMode::default(),
            impurity_denominator: ImpurityDenominator::default(),
            eq16_literal: false,
            seed: crate::clustering::DEFAULT_SEED,
            strategy: Strategy::default(),
        }
    }

    /// Canonicalizes the label space and checks the invariants.
    pub fn validated(mut self) -> Result<Self> {
        if self.budget == 0 {
            return Err(SelectionError::InvalidConfig("budget must be at least 1".into()));
        }
        self.label_space = self.label_space.iter().map(|l| canonical_label(l)).collect();
        if self.label_space.is_empty() {
            return Err(SelectionError::InvalidConfig("label space is empty".into()));
        }
        let distinct: BTreeSet<&String> = self.label_space.iter().collect();
        if distinct.len() != self.label_space.len() || self.label_space.iter().any(String::is_empty) {
            return Err(SelectionError::InvalidConfig(
                "label space names must be distinct and non-empty".into(),
            ));
        }
        if !self.ablation.contains(&Metric::Cohesion) {
            return Err(SelectionError::InvalidConfig("ablation must keep cohesion".into()));
        }
        Ok(self)
    }

    pub fn uses(&self, metric: Metric) -> bool {
        self.ablation.contains(&metric)
    }

    /// Canonical form of `label` if it names a class.
    pub fn resolve_label(&self, label: &str) -> Result<String> {
        let canonical = canonical_label(label);
        if self.label_space.contains(&canonical) {
            Ok(canonical)
        } else {
            Err(SelectionError::UnknownClass(label.to_string()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbalizerEntry {
    pub token_id: String,
    pub token_index: usize,
    pub class: String,
    pub acquired_at: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VerbalizerSet {
    pub entries: Vec<VerbalizerEntry>,
}

impl VerbalizerSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains_index(&self, token_index: usize) -> bool {
        self.entries.iter().any(|e| e.token_index == token_index)
    }

    pub fn push(&mut self, entry: VerbalizerEntry) {
        debug_assert!(!self.contains_index(entry.token_index));
        self.entries.push(entry);
    }

    /// Token rows grouped by class, in acquisition order.
    pub fn by_class(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for e in &self.entries {
            map.entry(e.class.as_str()).or_default().push(e.token_index);
        }
        map
    }

    pub fn classes(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.class.as_str()).collect()
    }
}

/// Metric values of one cluster, with the score under the session's ablation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub cohesion: f64,
    pub separation: f64,
    pub impurity: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEvent {
    pub timestamp: usize,
    pub cluster_id: usize,
    pub instance_id: String,
    pub label: String,
    pub token_id: Option<String>,
    /// Metrics of the chosen cluster; absent for the Random baseline.
    pub scores: Option<ClusterMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub timestamp: usize,
    /// Instance id to class.
    pub labels: BTreeMap<String, String>,
    pub verbalizers: VerbalizerSet,
    pub cluster_metrics: Vec<ClusterMetrics>,
    pub remaining_budget: usize,
    pub events: Vec<SelectionEvent>,
}

/// Supplies the class of an instance (a human or a gold file).
pub trait LabelProvider {
    fn label(&mut self, instance_id: &str) -> std::result::Result<String, String>;
}

impl<F: FnMut(&str) -> std::result::Result<String, String>> LabelProvider for F {
    fn label(&mut self, instance_id: &str) -> std::result::Result<String, String> {
        self(instance_id)
    }
}

/// Oracle-mode provider backed by a gold map.
#[derive(Debug, Clone)]
pub struct GoldProvider {
    gold: BTreeMap<String, String>,
}

impl GoldProvider {
    pub fn new(gold: impl IntoIterator<Item = (String, String)>) -> Self {
        Self {
            gold: gold.into_iter().collect(),
        }
    }
}

impl LabelProvider for GoldProvider {
    fn label(&mut self, instance_id: &str) -> std::result::Result<String, String> {
        self.gold
            .get(instance_id)
            .cloned()
            .ok_or_else(|| format!("missing oracle label for instance {instance_id:?}"))
    }
}

// ---- metric functions ----

pub fn cohesion_static(cluster: &Cluster, space: &SharedSpace) -> Result<f64> {
    if cluster.is_empty() {
        return Err(SelectionError::EmptyCluster(cluster.id));
    }
    let total: f64 = cluster
        .member_indices
        .iter()
        .map(|&i| dot(space.vector(i), &cluster.centroid))
        .sum();
    Ok(total / cluster.len() as f64)
}

/// Largest centroid similarity to any other cluster.
fn max_centroid_similarity(cluster: &Cluster, all_clusters: &[Cluster]) -> Result<f64> {
    all_clusters
        .iter()
        .filter(|c| c.id != cluster.id)
        .map(|c| dot(&cluster.centroid, &c.centroid))
        .reduce(f64::max)
        .ok_or(SelectionError::SingleCluster)
}

fn apply_mode(max_similarity: f64, mode: SeparationMode) -> f64 {
    match mode {
        SeparationMode::Literal => max_similarity,
        SeparationMode::Negated => 1.0 - max_similarity,
    }
}

pub fn separation_static(
    cluster: &Cluster,
    all_clusters: &[Cluster],
    mode: SeparationMode,
) -> Result<f64> {
    max_centroid_similarity(cluster, all_clusters).map(|m| apply_mode(m, mode))
}

pub fn impurity(
    cluster: &Cluster,
    space: &SharedSpace,
    labels: &BTreeMap<String, String>,
    denominator: ImpurityDenominator,
) -> Result<f64> {
    if cluster.is_empty() {
        return Err(SelectionError::EmptyCluster(cluster.id));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for i in cluster.instances(space) {
        if let Some(l) = labels.get(&space.item(i).id) {
            *counts.entry(l.as_str()).or_default() += 1;
        }
    }
    let labeled: usize = counts.values().sum();
    if labeled == 0 {
        return Ok(0.0);
    }
    let majority = *counts.values().max().unwrap();
    let total = match denominator {
        ImpurityDenominator::AllInstances => cluster.instance_count,
        ImpurityDenominator::LabeledOnly => labeled,
    };
    Ok(1.0 - majority as f64 / total as f64)
}

pub fn cohesion_dynamic(
    cluster: &Cluster,
    space: &SharedSpace,
    verbalizers: &VerbalizerSet,
) -> Result<f64> {
    let inside: Vec<usize> = verbalizers
        .entries
        .iter()
        .map(|e| e.token_index)
        .filter(|&t| cluster.contains(t))
        .collect();
    if inside.is_empty() {
        return cohesion_static(cluster, space);
    }
    let total: f64 = cluster
        .member_indices
        .iter()
        .map(|&i| {
            inside
                .iter()
                .map(|&t| dot(space.vector(i), space.vector(t)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Ok(total / cluster.len() as f64)
}

pub fn separation_dynamic(
    cluster: &Cluster,
    space: &SharedSpace,
    all_clusters: &[Cluster],
    verbalizers: &VerbalizerSet,
    mode: SeparationMode,
) -> Result<f64> {
    if cluster.is_empty() {
        return Err(SelectionError::EmptyCluster(cluster.id));
    }
    let outside = verbalizers
        .entries
        .iter()
        .map(|e| e.token_index)
        .filter(|&t| !cluster.contains(t))
        .map(|t| dot(&cluster.centroid, space.vector(t)))
        .reduce(f64::max);
    match outside {
        Some(m) => Ok(apply_mode(m, mode)),
        None => separation_static(cluster, all_clusters, mode),
    }
}

pub fn is_eligible(cluster: &Cluster, space: &SharedSpace, labels: &BTreeMap<String, String>) -> bool {
    cluster
        .instances(space)
        .any(|i| !labels.contains_key(&space.item(i).id))
}

fn metrics_of(
    cluster: &Cluster,
    space: &SharedSpace,
    all_clusters: &[Cluster],
    labels: &BTreeMap<String, String>,
    verbalizers: &VerbalizerSet,
    config: &SessionConfig,
) -> Result<ClusterMetrics> {
    let cohesion = cohesion_dynamic(cluster, space, verbalizers)?;
    let separation = if all_clusters.len() > 1 {
        separation_dynamic(cluster, space, all_clusters, verbalizers, config.separation_mode)?
    } else {
        0.0
    };
    let impurity = impurity(cluster, space, labels, config.impurity_denominator)?;
    Ok(ClusterMetrics {
        cohesion,
        separation,
        impurity,
        score: combine(cohesion, separation, impurity, config),
    })
}

fn combine(cohesion: f64, separation: f64, impurity: f64, config: &SessionConfig) -> f64 {
    let mut score = 0.0;
    if config.uses(Metric::Cohesion) {
        score += cohesion;
    }
    if config.uses(Metric::Separation) {
        score += separation;
    }
    if config.uses(Metric::Impurity) {
        score += impurity;
    }
    score
}

/// Sum of the enabled terms for an eligible cluster.
pub fn score_cluster(
    cluster: &Cluster,
    space: &SharedSpace,
    all_clusters: &[Cluster],
    labels: &BTreeMap<String, String>,
    verbalizers: &VerbalizerSet,
    config: &SessionConfig,
) -> Result<f64> {
    if !is_eligible(cluster, space, labels) {
        return Err(SelectionError::IneligibleCluster(cluster.id));
    }
    Ok(metrics_of(cluster, space, all_clusters, labels, verbalizers, config)?.score)
}

/// Eligible cluster with the highest score, lowest id on ties.
pub fn select_cluster(
    clusters: &[Cluster],
    space: &SharedSpace,
    labels: &BTreeMap<String, String>,
    verbalizers: &VerbalizerSet,
    config: &SessionConfig,
) -> Result<usize> {
    let scores = clusters
        .iter()
        .map(|c| {
            if is_eligible(c, space, labels) {
                score_cluster(c, space, clusters, labels, verbalizers, config).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    argmax_eligible(clusters, &scores)
}

fn argmax_eligible(clusters: &[Cluster], scores: &[Option<f64>]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (c, s) in clusters.iter().zip(scores) {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((c.id, s));
            }
        }
    }
    best.map(|(id, _)| id).ok_or(SelectionError::NoEligibleCluster)
}

/// Nearest unlabeled instance to the centroid when the cluster is unlabeled;
/// otherwise the unlabeled instance farthest from the cluster's labeled
/// instances. Lowest row index wins ties.
pub fn select_instance(
    cluster: &Cluster,
    space: &SharedSpace,
    labels: &BTreeMap<String, String>,
    eq16_literal: bool,
) -> Result<usize> {
    let (labeled, unlabeled): (Vec<usize>, Vec<usize>) = cluster
        .instances(space)
        .partition(|&i| labels.contains_key(&space.item(i).id));
    if unlabeled.is_empty() {
        return Err(SelectionError::NoUnlabeledInstance);
    }
    // (candidate, key) where a larger key wins
    let key = |x: usize| -> f64 {
        if labeled.is_empty() {
            return dot(space.vector(x), &cluster.centroid);
        }
        let sims = labeled.iter().map(|&l| dot(space.vector(x), space.vector(l)));
        if eq16_literal {
            sims.fold(f64::INFINITY, f64::min)
        } else {
            -sims.fold(f64::NEG_INFINITY, f64::max)
        }
    };
    let mut best = unlabeled[0];
    let mut best_key = key(best);
    for &x in &unlabeled[1..] {
        let k = key(x);
        if k > best_key {
            best = x;
            best_key = k;
        }
    }
    Ok(best)
}

/// The cluster's unassigned token most similar to the instance.
pub fn select_verbalizer_token(
    cluster: &Cluster,
    space: &SharedSpace,
    instance_index: usize,
    verbalizers: &VerbalizerSet,
) -> Option<usize> {
    let h = space.vector(instance_index);
    let mut best: Option<(usize, f64)> = None;
    for t in cluster.tokens(space) {
        if verbalizers.contains_index(t) {
            continue;
        }
        let s = dot(space.vector(t), h);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((t, s));
        }
    }
    best.map(|(t, _)| t)
}

// ---- session ----

/// A chosen instance waiting for its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub timestamp: usize,
    pub cluster_id: usize,
    pub instance_index: usize,
    pub instance_id: String,
    pub scores: Option<ClusterMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionExport {
    pub config: SessionConfig,
    pub events: Vec<SelectionEvent>,
    pub labels: BTreeMap<String, String>,
    pub verbalizers: Vec<VerbalizerEntry>,
    pub final_cluster_metrics: BTreeMap<usize, ClusterMetrics>,
}

impl SessionExport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("export serializes");
        s.push('\n');
        s
    }

    pub fn verbalizer_set(&self) -> VerbalizerSet {
        VerbalizerSet {
            entries: self.verbalizers.clone(),
        }
    }
}

/// Static metric values, computed once per clustering.
#[derive(Debug, Clone)]
struct StaticMetrics {
    cohesion: Vec<f64>,
    max_centroid_similarity: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct Session {
    space: Arc<SharedSpace>,
    clustering: Arc<Clustering>,
    config: SessionConfig,
    state: SessionState,
    rng: ChaCha8Rng,
    statics: StaticMetrics,
    /// Unlabeled instance count per cluster.
    unlabeled: Vec<usize>,
    /// Largest similarity between a cluster's centroid and a verbalizer
    /// token outside it, once such a token exists.
    outside_max: Vec<Option<f64>>,
}

impl Session {
    pub fn new(
        space: Arc<SharedSpace>,
        clustering: Arc<Clustering>,
        config: SessionConfig,
    ) -> Result<Self> {
        let config = config.validated()?;
        for c in &clustering.clusters {
            if c.kind() != ClusterKind::Mixed {
                return Err(SelectionError::NotRefined(c.id));
            }
        }
        let clusters = &clustering.clusters;
        let statics = StaticMetrics {
            cohesion: clusters
                .iter()
                .map(|c| cohesion_static(c, &space))
                .collect::<Result<_>>()?,
            max_centroid_similarity: clusters
                .iter()
                .map(|c| max_centroid_similarity(c, clusters).ok())
                .collect(),
        };
        let mut session = Self {
            rng: rng_for(config.seed, Stream::Strategy),
            unlabeled: clusters.iter().map(|c| c.instance_count).collect(),
            outside_max: vec![None; clusters.len()],
            state: SessionState {
                timestamp: 0,
                labels: BTreeMap::new(),
                verbalizers: VerbalizerSet::default(),
                cluster_metrics: Vec::new(),
                remaining_budget: config.budget,
                events: Vec::new(),
            },
            space,
            clustering,
            config,
            statics,
        };
        session.state.cluster_metrics = (0..session.clustering.clusters.len())
            .map(|k| session.initial_metrics(k))
            .collect();
        Ok(session)
    }

    fn initial_metrics(&self, k: usize) -> ClusterMetrics {
        let cohesion = self.statics.cohesion[k];
        let separation = self.statics.max_centroid_similarity[k]
            .map_or(0.0, |m| apply_mode(m, self.config.separation_mode));
        ClusterMetrics {
            cohesion,
            separation,
            impurity: 0.0,
            score: combine(cohesion, separation, 0.0, &self.config),
        }
    }

    pub fn space(&self) -> &Arc<SharedSpace> {
        &self.space
    }

    pub fn clustering(&self) -> &Arc<Clustering> {
        &self.clustering
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.remaining_budget == 0 || self.unlabeled.iter().all(|&u| u == 0)
    }

    fn eligible(&self, k: usize) -> bool {
        self.unlabeled[k] > 0
    }

    /// Chooses the next cluster and instance without changing the labels.
    /// Random strategies advance the session's generator.
    pub fn propose(&mut self) -> Result<Proposal> {
        if self.state.remaining_budget == 0 {
            return Err(SelectionError::BudgetExhausted);
        }
        let clusters = &self.clustering.clusters;
        let (cluster_id, instance_index, scores) = match self.config.strategy {
            Strategy::ColdSelect => {
                let scores: Vec<Option<f64>> = (0..clusters.len())
                    .map(|k| self.eligible(k).then(|| self.state.cluster_metrics[k].score))
                    .collect();
                let k = argmax_eligible(clusters, &scores)?;
                let i = select_instance(&clusters[k], &self.space, &self.state.labels, self.config.eq16_literal)?;
                (k, i, Some(self.state.cluster_metrics[k]))
            }
            Strategy::RandomG => {
                let eligible: Vec<usize> = (0..clusters.len()).filter(|&k| self.eligible(k)).collect();
                if eligible.is_empty() {
                    return Err(SelectionError::NoEligibleCluster);
                }
                let k = eligible[self.rng.random_range(0..eligible.len())];
                let i = select_instance(&clusters[k], &self.space, &self.state.labels, self.config.eq16_literal)?;
                (k, i, Some(self.state.cluster_metrics[k]))
            }
            Strategy::Random => {
                let pool: Vec<usize> = (0..self.space.len())
                    .filter(|&i| {
                        self.space.kind(i) == ItemKind::Instance
                            && !self.state.labels.contains_key(&self.space.item(i).id)
                    })
                    .collect();
                if pool.is_empty() {
                    return Err(SelectionError::NoUnlabeledInstance);
                }
                let i = pool[self.rng.random_range(0..pool.len())];
                let k = self
                    .clustering
                    .cluster_of(i)
                    .expect("instances are never discarded");
                (k, i, None)
            }
        };
        Ok(Proposal {
            timestamp: self.state.timestamp,
            cluster_id,
            instance_index,
            instance_id: self.space.item(instance_index).id.clone(),
            scores,
        })
    }

    /// Records `label` for the proposed instance and completes the step.
    pub fn commit(&mut self, proposal: &Proposal, label: &str) -> Result<&SelectionEvent> {
        if proposal.timestamp != self.state.timestamp {
            return Err(SelectionError::StaleProposal {
                proposal: proposal.timestamp,
                current: self.state.timestamp,
            });
        }
        if self.state.remaining_budget == 0 {
            return Err(SelectionError::BudgetExhausted);
        }
        let label = self.config.resolve_label(label)?;
        let k = proposal.cluster_id;
        let cluster = &self.clustering.clusters[k];

        let token = match self.config.strategy {
            Strategy::Random => None,
            _ => select_verbalizer_token(cluster, &self.space, proposal.instance_index, &self.state.verbalizers),
        };
        let t = self.state.timestamp;
        let token_id = token.map(|ti| self.space.item(ti).id.clone());
        if let Some(ti) = token {
            self.state.verbalizers.push(VerbalizerEntry {
                token_id: self.space.item(ti).id.clone(),
                token_index: ti,
                class: label.clone(),
                acquired_at: t,
            });
        }
        self.state.labels.insert(proposal.instance_id.clone(), label.clone());
        self.unlabeled[k] -= 1;
        self.state.remaining_budget -= 1;
        self.state.timestamp += 1;
        self.refresh_metrics(k, token.is_some());
        self.state.events.push(SelectionEvent {
            timestamp: t,
            cluster_id: k,
            instance_id: proposal.instance_id.clone(),
            label,
            token_id,
            scores: proposal.scores,
        });
        Ok(self.state.events.last().unwrap())
    }

    /// Recomputes what a label in `labeled_cluster` (and possibly a new
    /// token there) can change: that cluster's impurity and cohesion, and
    /// every other cluster's separation.
    fn refresh_metrics(&mut self, labeled_cluster: usize, token_added: bool) {
        let clusters = &self.clustering.clusters;
        let space = &self.space;
        let mode = self.config.separation_mode;
        for (k, cluster) in clusters.iter().enumerate() {
            let m = &mut self.state.cluster_metrics[k];
            if k == labeled_cluster {
                m.impurity = impurity(cluster, space, &self.state.labels, self.config.impurity_denominator)
                    .expect("refined clusters are non-empty");
                if token_added {
                    m.cohesion = cohesion_dynamic(cluster, space, &self.state.verbalizers)
                        .expect("refined clusters are non-empty");
                }
            } else if token_added {
                let t = self.state.verbalizers.entries.last().unwrap().token_index;
                let sim = dot(&cluster.centroid, space.vector(t));
                let max_sim = self.outside_max[k].map_or(sim, |p| p.max(sim));
                self.outside_max[k] = Some(max_sim);
                m.separation = apply_mode(max_sim, mode);
            }
            m.score = combine(m.cohesion, m.separation, m.impurity, &self.config);
        }
    }

    /// One full step using `provider` for the label.
    pub fn step(&mut self, provider: &mut dyn LabelProvider) -> Result<&SelectionEvent> {
        let proposal = self.propose()?;
        let label = provider
            .label(&proposal.instance_id)
            .map_err(SelectionError::ProviderFailure)?;
        let label = self
            .config
            .resolve_label(&label)
            .map_err(|e| SelectionError::ProviderFailure(e.to_string()))?;
        self.commit(&proposal, &label)
    }

    /// Steps until the budget is spent or nothing is left to label.
    pub fn run(&mut self, provider: &mut dyn LabelProvider) -> Result<()> {
        while self.state.remaining_budget > 0 {
            match self.step(provider) {
                Ok(_) => {}
                Err(SelectionError::NoEligibleCluster | SelectionError::NoUnlabeledInstance) => break,
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    /// Metrics recomputed from scratch, bypassing the cache.
    pub fn recompute_metrics(&self) -> Vec<ClusterMetrics> {
        let clusters = &self.clustering.clusters;
        clusters
            .iter()
            .map(|c| {
                metrics_of(c, &self.space, clusters, &self.state.labels, &self.state.verbalizers, &self.config)
                    .expect("refined clusters are non-empty")
            })
            .collect()
    }

    pub fn export(&self) -> SessionExport {
        SessionExport {
            config: self.config.clone(),
            events: self.state.events.clone(),
            labels: self.state.labels.clone(),
            verbalizers: self.state.verbalizers.entries.clone(),
            final_cluster_metrics: self.state.cluster_metrics.iter().copied().enumerate().collect(),
        }
    }

    pub fn into_state(self) -> SessionState {
        self.state
    }
}

/// Runs a whole session in oracle mode.
pub fn run_session(
    space: Arc<SharedSpace>,
    clustering: Arc<Clustering>,
    config: SessionConfig,
    provider: &mut dyn LabelProvider,
) -> Result<Session> {
    let mut session = Session::new(space, clustering, config)?;
    session.run(provider)?;
    Ok(session)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::LossHistory;

    fn space(rows: &[[f64; 2]], tokens: usize) -> SharedSpace {
        let ids = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        SharedSpace::from_reduced(&ids("t", tokens), &ids("i", rows.len() - tokens), 2, &flat).unwrap()
    }

    fn cluster(id: usize, members: Vec<usize>, centroid: [f64; 2], space: &SharedSpace) -> Cluster {
        let tokens = members.iter().filter(|&&i| space.kind(i) == ItemKind::Token).count();
        Cluster {
            id,
            instance_count: members.len() - tokens,
            token_count: tokens,
            member_indices: members,
            centroid: centroid.to_vec(),
        }
    }

    fn labels(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn cohesion_of_orthogonal_members_is_zero() {
        let s = space(&[[0.0, 1.0], [0.0, -1.0]], 1);
        let c = cluster(0, vec![0, 1], [1.0, 0.0], &s);
        assert!(cohesion_static(&c, &s).unwrap().abs() < 1e-12);
    }

    #[test]
    fn separation_modes() {
        let s = space(&[[1.0, 0.0], [0.0, 1.0]], 1);
        let a = cluster(0, vec![0], [1.0, 0.0], &s);
        let b = cluster(1, vec![1], [0.0, 1.0], &s);
        let all = [a.clone(), b];
        assert_eq!(separation_static(&a, &all, SeparationMode::Literal).unwrap(), 0.0);
        assert_eq!(separation_static(&a, &all, SeparationMode::Negated).unwrap(), 1.0);
        assert_eq!(
            separation_static(&a, &all[..1], SeparationMode::Literal),
            Err(SelectionError::SingleCluster)
        );
    }

    #[test]
    fn impurity_denominators() {
        // one token then four instances
        let s = space(&[[1.0, 0.0], [1.0, 0.1], [1.0, 0.2], [1.0, 0.3], [1.0, 0.4]], 1);
        let c = cluster(0, vec![0, 1, 2, 3, 4], [1.0, 0.0], &s);
        let l = labels(&[("i0", "a"), ("i1", "b")]);
        assert_eq!(impurity(&c, &s, &l, ImpurityDenominator::AllInstances).unwrap(), 0.75);
        assert_eq!(impurity(&c, &s, &l, ImpurityDenominator::LabeledOnly).unwrap(), 0.5);
        assert_eq!(impurity(&c, &s, &BTreeMap::new(), ImpurityDenominator::AllInstances).unwrap(), 0.0);
        let pure = labels(&[("i0", "p"), ("i1", "p"), ("i2", "p"), ("i3", "p")]);
        assert_eq!(impurity(&c, &s, &pure, ImpurityDenominator::AllInstances).unwrap(), 0.0);
    }

    #[test]
    fn dynamic_metrics_fall_back_without_tokens() {
        let s = space(&[[1.0, 0.0], [0.6, 0.8], [0.0, 1.0], [-0.6, 0.8]], 2);
        let a = cluster(0, vec![0, 1, 2], [0.6, 0.8], &s);
        let b = cluster(1, vec![3], [-0.6, 0.8], &s);
        let all = [a.clone(), b];
        let none = VerbalizerSet::default();
        assert_eq!(cohesion_dynamic(&a, &s, &none).unwrap(), cohesion_static(&a, &s).unwrap());
        assert_eq!(
            separation_dynamic(&a, &s, &all, &none, SeparationMode::Literal).unwrap(),
            separation_static(&a, &all, SeparationMode::Literal).unwrap()
        );
        // the only token lives inside `a`, so separation still falls back
        let inside = VerbalizerSet {
            entries: vec![VerbalizerEntry {
                token_id: "t0".into(),
                token_index: 0,
                class: "x".into(),
                acquired_at: 0,
            }],
        };
        assert_eq!(
            separation_dynamic(&a, &s, &all, &inside, SeparationMode::Literal).unwrap(),
            separation_static(&a, &all, SeparationMode::Literal).unwrap()
        );
    }

    #[test]
    fn select_instance_branches() {
        let angle = |deg: f64| [deg.to_radians().cos(), deg.to_radians().sin()];
        // token, then instances at 0, 30, 60, 90 degrees
        let s = space(&[angle(45.0), angle(0.0), angle(30.0), angle(60.0), angle(90.0)], 1);
        let c = cluster(0, vec![0, 1, 2, 3, 4], angle(50.0), &s);
        // unlabeled: nearest to 50 degrees is 60
        assert_eq!(select_instance(&c, &s, &BTreeMap::new(), false).unwrap(), 3);
        // with i0 (0 deg) labeled, farthest is 90 deg
        let l = labels(&[("i0", "a")]);
        assert_eq!(select_instance(&c, &s, &l, false).unwrap(), 4);
        // printed formula with one labeled point picks the nearest
        assert_eq!(select_instance(&c, &s, &l, true).unwrap(), 2);
        let all = labels(&[("i0", "a"), ("i1", "a"), ("i2", "a"), ("i3", "a")]);
        assert_eq!(select_instance(&c, &s, &all, false), Err(SelectionError::NoUnlabeledInstance));
    }

    #[test]
    fn verbalizer_token_exhaustion() {
        let s = space(&[[1.0, 0.2], [1.0, 0.8], [1.0, 0.9]], 2);
        let c = cluster(0, vec![0, 1, 2], [1.0, 0.0], &s);
        let mut v = VerbalizerSet::default();
        assert_eq!(select_verbalizer_token(&c, &s, 2, &v), Some(1));
        v.push(VerbalizerEntry { token_id: "t1".into(), token_index: 1, class: "a".into(), acquired_at: 0 });
        assert_eq!(select_verbalizer_token(&c, &s, 2, &v), Some(0));
        v.push(VerbalizerEntry { token_id: "t0".into(), token_index: 0, class: "a".into(), acquired_at: 1 });
        assert_eq!(select_verbalizer_token(&c, &s, 2, &v), None);
    }

    #[test]
    fn select_cluster_ties_go_to_lowest_id() {
        let s = space(&[[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]], 2);
        let clusters = vec![
            cluster(0, vec![0, 2], [1.0, 0.0], &s),
            cluster(1, vec![1, 3], [-1.0, 0.0], &s),
        ];
        let config = SessionConfig::new(2, vec!["a".into()]);
        let pick = select_cluster(&clusters, &s, &BTreeMap::new(), &VerbalizerSet::default(), &config);
        assert_eq!(pick.unwrap(), 0);
    }

    #[test]
    fn config_validation() {
        assert!(SessionConfig::new(0, vec!["a".into()]).validated().is_err());
        assert!(SessionConfig::new(1, vec![]).validated().is_err());
        assert!(SessionConfig::new(1, vec!["a".into(), " a".into()]).validated().is_err());
        let mut c = SessionConfig::new(1, vec!["a".into()]);
        c.ablation.remove(&Metric::Cohesion);
        assert!(c.validated().is_err());
    }

    #[test]
    fn labels_are_canonicalized() {
        let c = SessionConfig::new(1, vec!["caf\u{e9}".into()]).validated().unwrap();
        assert_eq!(c.resolve_label(" cafe\u{301} ").unwrap(), "caf\u{e9}");
        assert!(c.resolve_label("cafe").is_err());
    }

    fn two_cluster_session(strategy: Strategy, budget: usize) -> Session {
        let s = space(
            &[[1.0, 0.1], [-1.0, 0.1], [1.0, 0.0], [1.0, 0.2], [-1.0, 0.0], [-1.0, -0.1]],
            2,
        );
        let mk = |id, members: Vec<usize>| {
            let mut c = cluster(id, members.clone(), [0.0, 0.0], &s);
            let mut mean = [0.0; 2];
            for &m in &members {
                mean[0] += s.vector(m)[0];
                mean[1] += s.vector(m)[1];
            }
            let n = (mean[0] * mean[0] + mean[1] * mean[1]).sqrt();
            c.centroid = vec![mean[0] / n, mean[1] / n];
            c
        };
        let clustering = Clustering {
            assignment: vec![Some(0), Some(1), Some(0), Some(0), Some(1), Some(1)],
            clusters: vec![mk(0, vec![0, 2, 3]), mk(1, vec![1, 4, 5])],
            loss_history: LossHistory::default(),
        };
        let mut config = SessionConfig::new(budget, vec!["pos".into(), "neg".into()]);
        config.strategy = strategy;
        Session::new(Arc::new(s), Arc::new(clustering), config).unwrap()
    }

    fn provider() -> GoldProvider {
        GoldProvider::new(
            [("i0", "pos"), ("i1", "pos"), ("i2", "neg"), ("i3", "neg")]
                .map(|(a, b)| (a.to_string(), b.to_string())),
        )
    }

    #[test]
    fn budget_one_gives_one_event() {
        let mut s = two_cluster_session(Strategy::ColdSelect, 1);
        s.run(&mut provider()).unwrap();
        assert_eq!(s.state().events.len(), 1);
        assert_eq!(s.state().remaining_budget, 0);
        assert_eq!(s.propose(), Err(SelectionError::BudgetExhausted));
    }

    #[test]
    fn budget_above_instance_count_labels_everything() {
        for strategy in Strategy::ALL {
            let mut s = two_cluster_session(strategy, 10);
            s.run(&mut provider()).unwrap();
            assert_eq!(s.state().labels.len(), 4);
            assert_eq!(s.state().remaining_budget, 6);
            let tokens: BTreeSet<_> = s.state().verbalizers.entries.iter().map(|e| e.token_index).collect();
            assert_eq!(tokens.len(), s.state().verbalizers.len());
            if strategy == Strategy::Random {
                assert!(s.state().verbalizers.is_empty());
            }
        }
    }

    #[test]
    fn cache_matches_recomputation() {
        for strategy in Strategy::ALL {
            let mut s = two_cluster_session(strategy, 4);
            assert_eq!(s.state().cluster_metrics, s.recompute_metrics());
            while !s.is_finished() {
                s.step(&mut provider()).unwrap();
                assert_eq!(s.state().cluster_metrics, s.recompute_metrics());
            }
        }
    }

    #[test]
    fn stale_and_unknown_labels_are_rejected() {
        let mut s = two_cluster_session(Strategy::ColdSelect, 2);
        let p = s.propose().unwrap();
        assert_eq!(s.commit(&p, "maybe").unwrap_err(), SelectionError::UnknownClass("maybe".into()));
        s.commit(&p, "pos").unwrap();
        assert!(matches!(s.commit(&p, "pos"), Err(SelectionError::StaleProposal { .. })));
    }

    #[test]
    fn provider_failure_surfaces() {
        let mut s = two_cluster_session(Strategy::ColdSelect, 2);
        let mut bad = |_: &str| -> std::result::Result<String, String> { Ok("other".into()) };
        assert!(matches!(s.step(&mut bad), Err(SelectionError::ProviderFailure(_))));
    }

    #[test]
    fn export_is_stable_json() {
        let mut a = two_cluster_session(Strategy::RandomG, 3);
        let mut b = two_cluster_session(Strategy::RandomG, 3);
        a.run(&mut provider()).unwrap();
        b.run(&mut provider()).unwrap();
        let json = a.export().to_json();
        assert_eq!(json, b.export().to_json());
        let back: SessionExport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a.export());
    }
}
