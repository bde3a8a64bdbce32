//! KMeans over the shared space, silhouette refinement, and the
//! token-only / instance-only filtering step.
//!
//! All distances live on the unit sphere. KMeans uses squared Euclidean
//! distance (`2 - 2 cos`), the silhouette uses cosine distance `1 - cos`.
//! Centroids are member means re-normalized to unit length.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{dot, normalize_in_place, ItemKind, SharedSpace};
use crate::seeding::{rng_for, Stream};

pub const DEFAULT_K: usize = 40;
pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_REFINE_ITERATIONS: usize = 5;
pub const MAX_LLOYD_ITERATIONS: usize = 300;
pub const DEFAULT_RESTARTS: usize = 10;
/// Above this many clustered items, `b(i)` is estimated from a seeded sample.
pub const SILHOUETTE_EXACT_LIMIT: usize = 20_000;
const SILHOUETTE_SAMPLE_SEED: u64 = 42;
const ZERO_MEAN: f64 = 1e-12;
/// A refinement move must lower the loss sum by more than this.
const MOVE_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ClusteringError {
    #[error("k = {k} must be in 1..={items}")]
    KTooLarge { k: usize, items: usize },
    #[error("item index {0} is out of range or not clustered")]
    IndexOutOfRange(usize),
    #[error("no cluster contains both tokens and instances; try another k or reduced_dim")]
    NoMixedCluster,
    #[error("clustering does not fit the shared space: {0}")]
    Inconsistent(String),
}

pub type Result<T> = std::result::Result<T, ClusteringError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    pub member_indices: Vec<usize>,
    pub centroid: Vec<f64>,
    pub token_count: usize,
    pub instance_count: usize,
}

/// Population mix of a cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterKind {
    Mixed,
    TokenOnly,
    InstanceOnly,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.member_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_indices.is_empty()
    }

    pub fn kind(&self) -> ClusterKind {
        match (self.token_count > 0, self.instance_count > 0) {
            (true, true) => ClusterKind::Mixed,
            (true, false) => ClusterKind::TokenOnly,
            _ => ClusterKind::InstanceOnly,
        }
    }

    pub fn contains(&self, index: usize) -> bool {
        self.member_indices.binary_search(&index).is_ok()
    }

    pub fn tokens<'a>(&'a self, space: &'a SharedSpace) -> impl Iterator<Item = usize> + 'a {
        self.member_indices
            .iter()
            .copied()
            .filter(move |&i| space.kind(i) == ItemKind::Token)
    }

    pub fn instances<'a>(&'a self, space: &'a SharedSpace) -> impl Iterator<Item = usize> + 'a {
        self.member_indices
            .iter()
            .copied()
            .filter(move |&i| space.kind(i) == ItemKind::Instance)
    }
}

/// Per-iteration objective values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    /// KMeans objective after each Lloyd update.
    pub kmeans: Vec<f64>,
    /// Negative silhouette loss before the first and after every refinement pass.
    pub silhouette: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Cluster id per shared-space row; `None` marks a discarded token.
    pub assignment: Vec<Option<usize>>,
    pub clusters: Vec<Cluster>,
    pub loss_history: LossHistory,
}

/// Normalized mean of `members`; falls back to `fallback` (or the first
/// member) when the mean vanishes.
fn centroid_of(space: &SharedSpace, members: &[usize], fallback: Option<&[f64]>) -> Vec<f64> {
    let mut mean = vec![0.0; space.reduced_dim()];
    for &m in members {
        for (acc, x) in mean.iter_mut().zip(space.vector(m)) {
            *acc += x;
        }
    }
    mean.iter_mut().for_each(|x| *x /= members.len().max(1) as f64);
    if normalize_in_place(&mut mean) < ZERO_MEAN {
        return match fallback {
            Some(c) => c.to_vec(),
            None => space.vector(members[0]).to_vec(),
        };
    }
    mean
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - dot(a, b)
}

impl Clustering {
    /// Builds clusters `0..k` from a dense assignment, recomputing centroids.
    /// `previous` supplies fallback centroids for zero-mean clusters.
    fn from_assignment(
        space: &SharedSpace,
        assignment: Vec<Option<usize>>,
        k: usize,
        previous: Option<&[Vec<f64>]>,
        loss_history: LossHistory,
    ) -> Self {
        let mut members = vec![Vec::new(); k];
        for (i, a) in assignment.iter().enumerate() {
            if let Some(c) = a {
                members[*c].push(i);
            }
        }
        let clusters = members
            .into_iter()
            .enumerate()
            .map(|(id, member_indices)| {
                let fallback = previous.map(|p| p[id].as_slice());
                let centroid = if member_indices.is_empty() {
                    fallback.map(<[f64]>::to_vec).unwrap_or_default()
                } else {
                    centroid_of(space, &member_indices, fallback)
                };
                let token_count = member_indices
                    .iter()
                    .filter(|&&i| space.kind(i) == ItemKind::Token)
                    .count();
                Cluster {
                    id,
                    instance_count: member_indices.len() - token_count,
                    token_count,
                    member_indices,
                    centroid,
                }
            })
            .collect();
        Self {
            assignment,
            clusters,
            loss_history,
        }
    }

    pub fn cluster(&self, id: usize) -> &Cluster {
        &self.clusters[id]
    }

    pub fn cluster_of(&self, index: usize) -> Option<usize> {
        self.assignment.get(index).copied().flatten()
    }

    pub fn discarded(&self) -> impl Iterator<Item = usize> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_none())
            .map(|(i, _)| i)
    }

    pub fn clustered_count(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_some()).count()
    }

    fn centroids(&self) -> Vec<Vec<f64>> {
        self.clusters.iter().map(|c| c.centroid.clone()).collect()
    }

    /// Clusters from explicit member lists, one per group, with centroids
    /// recomputed. Items in no group are discarded.
    pub fn from_groups(space: &SharedSpace, groups: &[Vec<usize>]) -> Result<Self> {
        let mut assignment = vec![None; space.len()];
        for (c, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(ClusteringError::Inconsistent(format!("group {c} is empty")));
            }
            for &i in group {
                let slot = assignment.get_mut(i).ok_or(ClusteringError::IndexOutOfRange(i))?;
                if slot.is_some() {
                    return Err(ClusteringError::Inconsistent(format!("item {i} is in two groups")));
                }
                *slot = Some(c);
            }
        }
        Ok(Self::from_assignment(space, assignment, groups.len(), None, LossHistory::default()))
    }

    /// Debug/interchange form with member ids.
    pub fn to_dump(&self, space: &SharedSpace) -> ClusterDump {
        ClusterDump {
            clusters: self
                .clusters
                .iter()
                .map(|c| ClusterDumpEntry {
                    id: c.id,
                    member_ids: c.member_indices.iter().map(|&i| space.item(i).id.clone()).collect(),
                    member_indices: c.member_indices.clone(),
                    centroid: c.centroid.clone(),
                    token_count: c.token_count,
                    instance_count: c.instance_count,
                })
                .collect(),
            discarded: self.discarded().map(|i| space.item(i).id.clone()).collect(),
            loss_history: self.loss_history.clone(),
        }
    }

    /// Rebuilds a clustering from its dump, checking it against `space`.
    pub fn from_dump(dump: &ClusterDump, space: &SharedSpace) -> Result<Self> {
        let mut assignment = vec![None; space.len()];
        let mut clusters = Vec::with_capacity(dump.clusters.len());
        for (pos, entry) in dump.clusters.iter().enumerate() {
            if entry.id != pos {
                return Err(ClusteringError::Inconsistent(format!(
                    "cluster at position {pos} has id {}",
                    entry.id
                )));
            }
            let mut tokens = 0;
            for (&i, id) in entry.member_indices.iter().zip(&entry.member_ids) {
                if i >= space.len() || &space.item(i).id != id {
                    return Err(ClusteringError::Inconsistent(format!(
                        "member {id:?} does not match row {i}"
                    )));
                }
                if assignment[i].replace(pos).is_some() {
                    return Err(ClusteringError::Inconsistent(format!(
                        "row {i} belongs to two clusters"
                    )));
                }
                tokens += usize::from(space.kind(i) == ItemKind::Token);
            }
            if entry.member_indices.len() != entry.member_ids.len()
                || entry.centroid.len() != space.reduced_dim()
                || !entry.member_indices.windows(2).all(|w| w[0] < w[1])
            {
                return Err(ClusteringError::Inconsistent(format!(
                    "cluster {pos} is malformed"
                )));
            }
            clusters.push(Cluster {
                id: pos,
                member_indices: entry.member_indices.clone(),
                centroid: entry.centroid.clone(),
                token_count: tokens,
                instance_count: entry.member_indices.len() - tokens,
            });
        }
        Ok(Self {
            assignment,
            clusters,
            loss_history: dump.loss_history.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDumpEntry {
    pub id: usize,
    pub member_ids: Vec<String>,
    pub member_indices: Vec<usize>,
    pub centroid: Vec<f64>,
    pub token_count: usize,
    pub instance_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDump {
    pub clusters: Vec<ClusterDumpEntry>,
    pub discarded: Vec<String>,
    pub loss_history: LossHistory,
}

/// `sum_k sum_{x in C_k} |x - mu_k|^2` with the stored (unit) centroids.
pub fn kmeans_loss(space: &SharedSpace, clustering: &Clustering) -> f64 {
    clustering
        .clusters
        .iter()
        .flat_map(|c| {
            c.member_indices
                .iter()
                .map(move |&i| squared_distance(space.vector(i), &c.centroid))
        })
        .sum()
}

fn kmeans_plus_plus(space: &SharedSpace, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = space.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| squared_distance(space.vector(i), space.vector(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, w) in nearest.iter().enumerate() {
                acc += w;
                if *w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target just above the final sum
            pick.unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(squared_distance(space.vector(i), space.vector(next)));
        }
    }
    chosen.into_iter().map(|i| space.vector(i).to_vec()).collect()
}

/// Moves, for each empty cluster, the point farthest from its own centroid
/// (among clusters with more than one member) into it.
fn repair_empty(
    space: &SharedSpace,
    labels: &mut [usize],
    centroids: &mut [Vec<f64>],
    sizes: &mut [usize],
) {
    for empty in 0..centroids.len() {
        if sizes[empty] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, &c) in labels.iter().enumerate() {
            if sizes[c] < 2 {
                continue;
            }
            let d = squared_distance(space.vector(i), &centroids[c]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("k <= n leaves a cluster with two members");
        sizes[labels[i]] -= 1;
        labels[i] = empty;
        sizes[empty] += 1;
        centroids[empty] = space.vector(i).to_vec();
    }
}

/// Lloyd's algorithm with kmeans++ seeding on the unit sphere, restarted
/// [`DEFAULT_RESTARTS`] times from one seeded stream; the lowest final loss
/// wins (earliest run on ties).
///
/// Points change cluster only when another centroid is strictly closer, so
/// the loss never increases between iterations. Each run stops when
/// assignments are stable or after [`MAX_LLOYD_ITERATIONS`].
pub fn kmeans(space: &SharedSpace, k: usize, seed: u64) -> Result<Clustering> {
    kmeans_with_restarts(space, k, seed, DEFAULT_RESTARTS)
}

pub fn kmeans_with_restarts(
    space: &SharedSpace,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<Clustering> {
    let n = space.len();
    if k == 0 || k > n {
        return Err(ClusteringError::KTooLarge { k, items: n });
    }
    let mut rng = rng_for(seed, Stream::Kmeans);
    let mut best: Option<(f64, Clustering)> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(space, k, &mut rng);
        let loss = *run.loss_history.kmeans.last().unwrap();
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, run));
        }
    }
    Ok(best.unwrap().1)
}

fn lloyd(space: &SharedSpace, k: usize, rng: &mut impl Rng) -> Clustering {
    let n = space.len();
    let mut centroids = kmeans_plus_plus(space, k, rng);

    let mut labels: Vec<usize> = (0..n)
        .map(|i| {
            let x = space.vector(i);
            let mut best = 0;
            let mut best_d = squared_distance(x, &centroids[0]);
            for (c, mu) in centroids.iter().enumerate().skip(1) {
                let d = squared_distance(x, mu);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            best
        })
        .collect();
    let mut sizes = vec![0; k];
    labels.iter().for_each(|&c| sizes[c] += 1);
    repair_empty(space, &mut labels, &mut centroids, &mut sizes);

    let mut history = Vec::new();
    let mut clustering;
    let mut iteration = 0;
    loop {
        clustering = Clustering::from_assignment(
            space,
            labels.iter().map(|&c| Some(c)).collect(),
            k,
            Some(&centroids),
            LossHistory::default(),
        );
        centroids = clustering.centroids();
        history.push(kmeans_loss(space, &clustering));
        iteration += 1;
        if iteration >= MAX_LLOYD_ITERATIONS {
            break;
        }

        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let x = space.vector(i);
            let mut best = *label;
            let mut best_d = squared_distance(x, &centroids[best]);
            for (c, mu) in centroids.iter().enumerate() {
                let d = squared_distance(x, mu);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            if best != *label {
                sizes[*label] -= 1;
                sizes[best] += 1;
                *label = best;
                changed = true;
            }
        }
        if sizes.contains(&0) {
            repair_empty(space, &mut labels, &mut centroids, &mut sizes);
            changed = true;
        }
        if !changed {
            break;
        }
    }
    clustering.loss_history.kmeans = history;
    clustering
}

/// Silhouette from the summed distance to the own cluster and the mean
/// distances to each non-empty foreign cluster.
fn silhouette_from_sums(own_sum: f64, own_size: usize, others: impl Iterator<Item = f64>) -> f64 {
    if own_size <= 1 {
        return 0.0;
    }
    let a = own_sum / (own_size - 1) as f64;
    let Some(b) = others.fold(None, |acc: Option<f64>, m| Some(acc.map_or(m, |v| v.min(m)))) else {
        return 0.0;
    };
    let denom = a.max(b);
    if denom <= 0.0 {
        0.0
    } else {
        (b - a) / denom
    }
}

/// Seeded sample used to estimate `b(i)` on large inputs; `None` when exact.
fn silhouette_sample(clustering: &Clustering) -> Option<Vec<bool>> {
    let clustered: Vec<usize> = clustering.discarded_complement();
    if clustered.len() <= SILHOUETTE_EXACT_LIMIT {
        return None;
    }
    let mut rng = rng_for(SILHOUETTE_SAMPLE_SEED, Stream::SilhouetteSample);
    let mut mask = vec![false; clustering.assignment.len()];
    for pos in index::sample(&mut rng, clustered.len(), SILHOUETTE_EXACT_LIMIT) {
        mask[clustered[pos]] = true;
    }
    Some(mask)
}

impl Clustering {
    fn discarded_complement(&self) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.map(|_| i))
            .collect()
    }
}

fn silhouette_with(
    space: &SharedSpace,
    clustering: &Clustering,
    index: usize,
    sample: Option<&[bool]>,
) -> f64 {
    let own = clustering.assignment[index].expect("caller checks clustering");
    let x = space.vector(index);
    let own_cluster = &clustering.clusters[own];
    let own_sum: f64 = own_cluster
        .member_indices
        .iter()
        .filter(|&&j| j != index)
        .map(|&j| cosine_distance(x, space.vector(j)))
        .sum();
    let others = clustering
        .clusters
        .iter()
        .filter(|c| c.id != own && !c.is_empty())
        .filter_map(|c| {
            let (sum, count) = c
                .member_indices
                .iter()
                .filter(|&&j| sample.is_none_or(|s| s[j]))
                .fold((0.0, 0usize), |(s, n), &j| {
                    (s + cosine_distance(x, space.vector(j)), n + 1)
                });
            (count > 0).then(|| sum / count as f64)
        });
    silhouette_from_sums(own_sum, own_cluster.len(), others)
}

/// `S(i) = (b - a) / max(a, b)` with cosine distance; singletons score 0.
pub fn silhouette_score(space: &SharedSpace, clustering: &Clustering, index: usize) -> Result<f64> {
    if clustering.cluster_of(index).is_none() {
        return Err(ClusteringError::IndexOutOfRange(index));
    }
    let sample = silhouette_sample(clustering);
    Ok(silhouette_with(space, clustering, index, sample.as_deref()))
}

/// `-(1/N) sum_i S(i)` over all clustered items.
pub fn negative_silhouette_loss(space: &SharedSpace, clustering: &Clustering) -> f64 {
    let sample = silhouette_sample(clustering);
    let clustered = clustering.discarded_complement();
    if clustered.is_empty() {
        return 0.0;
    }
    let total: f64 = clustered
        .iter()
        .map(|&i| silhouette_with(space, clustering, i, sample.as_deref()))
        .sum();
    -total / clustered.len() as f64
}

/// Incremental silhouette bookkeeping for the refinement passes.
struct SilhouetteState<'a> {
    space: &'a SharedSpace,
    /// Shared-space row for each local point.
    rows: Vec<usize>,
    labels: Vec<usize>,
    sizes: Vec<usize>,
    k: usize,
    /// `sums[i * k + c]`: total cosine distance from point i to cluster c.
    sums: Vec<f64>,
    /// Up to three smallest `(mean distance, cluster)` over foreign clusters.
    nearest: Vec<[(f64, usize); 3]>,
}

impl<'a> SilhouetteState<'a> {
    fn new(space: &'a SharedSpace, clustering: &Clustering) -> Self {
        let rows = clustering.discarded_complement();
        let k = clustering.clusters.len();
        let labels: Vec<usize> = rows.iter().map(|&r| clustering.assignment[r].unwrap()).collect();
        let mut sizes = vec![0; k];
        labels.iter().for_each(|&c| sizes[c] += 1);
        let n = rows.len();
        let mut sums = vec![0.0; n * k];
        for i in 0..n {
            let xi = space.vector(rows[i]);
            for j in 0..n {
                if i != j {
                    sums[i * k + labels[j]] += cosine_distance(xi, space.vector(rows[j]));
                }
            }
        }
        let mut state = Self {
            space,
            rows,
            labels,
            sizes,
            k,
            sums,
            nearest: Vec::new(),
        };
        state.refresh_nearest();
        state
    }

    fn refresh_nearest(&mut self) {
        let none = (f64::INFINITY, usize::MAX);
        self.nearest = (0..self.rows.len())
            .map(|i| {
                let mut top = [none; 3];
                for c in 0..self.k {
                    if c == self.labels[i] || self.sizes[c] == 0 {
                        continue;
                    }
                    let m = (self.sums[i * self.k + c] / self.sizes[c] as f64, c);
                    // lexicographic on (mean, cluster id)
                    for slot in 0..3 {
                        if m.0 < top[slot].0 || (m.0 == top[slot].0 && m.1 < top[slot].1) {
                            top[slot..].rotate_right(1);
                            top[slot] = m;
                            break;
                        }
                    }
                }
                top
            })
            .collect();
    }

    fn score(&self, i: usize) -> f64 {
        let own = self.labels[i];
        let others = (0..self.k)
            .filter(|&c| c != own && self.sizes[c] > 0)
            .map(|c| self.sums[i * self.k + c] / self.sizes[c] as f64);
        silhouette_from_sums(self.sums[i * self.k + own], self.sizes[own], others)
    }

    fn total(&self) -> f64 {
        (0..self.rows.len()).map(|i| self.score(i)).sum()
    }

    /// Sum of silhouettes if point `p` moved to each cluster, indexed by
    /// target; the entry for its own cluster is unused.
    fn totals_after_moves(&self, p: usize, dist_to_p: &[f64]) -> Vec<f64> {
        let from = self.labels[p];
        let k = self.k;
        let sizes = &self.sizes;
        let mut totals = vec![0.0; k];
        let mut adjust = vec![0.0; k];
        let mut base = 0.0;
        let silhouette = |a: f64, b: f64| {
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        };
        for i in 0..self.rows.len() {
            let row = &self.sums[i * k..(i + 1) * k];
            if i == p {
                // b for p: smallest foreign mean with p counted out of `from`
                let mean = |c: usize| {
                    let size = if c == from { sizes[c] - 1 } else { sizes[c] };
                    (size > 0).then(|| row[c] / size as f64)
                };
                let mut best = [(f64::INFINITY, usize::MAX); 2];
                for c in 0..k {
                    if let Some(m) = mean(c) {
                        if m < best[0].0 {
                            best[1] = best[0];
                            best[0] = (m, c);
                        } else if m < best[1].0 {
                            best[1] = (m, c);
                        }
                    }
                }
                for to in 0..k {
                    if to == from || sizes[to] == 0 {
                        continue;
                    }
                    let b = if best[0].1 == to { best[1] } else { best[0] };
                    if b.1 != usize::MAX {
                        totals[to] += silhouette(row[to] / sizes[to] as f64, b.0);
                    }
                }
                continue;
            }
            let d = dist_to_p[i];
            let own = self.labels[i];
            let mut candidates = [(f64::INFINITY, usize::MAX); 3];
            let mut n_candidates = 0;
            for &(m, c) in &self.nearest[i] {
                if c != usize::MAX && c != from {
                    candidates[n_candidates] = (m, c);
                    n_candidates += 1;
                }
            }
            let candidates = &candidates[..n_candidates];
            let from_mean = (from != own && sizes[from] > 1).then(|| (row[from] - d) / (sizes[from] - 1) as f64);
            let exact = |to: usize| -> f64 {
                let mut b = candidates.iter().find(|&&(_, c)| c != to).map_or(f64::INFINITY, |x| x.0);
                let mut any = b.is_finite();
                if let Some(m) = from_mean {
                    b = b.min(m);
                    any = true;
                }
                if to != own {
                    b = b.min((row[to] + d) / (sizes[to] + 1) as f64);
                    any = true;
                }
                let (own_sum, own_size) = if own == from {
                    (row[own] - d, sizes[own] - 1)
                } else if own == to {
                    (row[own] + d, sizes[own] + 1)
                } else {
                    (row[own], sizes[own])
                };
                if own_size <= 1 || !any {
                    0.0
                } else {
                    silhouette(own_sum / (own_size - 1) as f64, b)
                }
            };
            // Most targets leave this point's silhouette at a shared value:
            // its own cluster is unchanged and the target's new mean does not
            // undercut its nearest foreign mean.
            let (own_sum, own_size) = if own == from {
                (row[own] - d, sizes[own] - 1)
            } else {
                (row[own], sizes[own])
            };
            let nearest_other = candidates.first().map_or(f64::INFINITY, |x| x.0);
            let floor = from_mean.map_or(nearest_other, |m| m.min(nearest_other));
            let shared = if own_size > 1 && floor.is_finite() {
                silhouette(own_sum / (own_size - 1) as f64, floor)
            } else {
                0.0
            };
            base += shared;
            let first = candidates.first().map_or(usize::MAX, |x| x.1);
            for to in 0..k {
                if to == from {
                    continue;
                }
                if to == own || to == first || !floor.is_finite() || (row[to] + d) / ((sizes[to] + 1) as f64) < floor {
                    adjust[to] += exact(to) - shared;
                }
            }
        }
        for (t, a) in totals.iter_mut().zip(adjust) {
            *t += base + a;
        }
        totals
    }

    fn apply_move(&mut self, p: usize, to: usize, dist_to_p: &[f64]) {
        let from = self.labels[p];
        for (i, d) in dist_to_p.iter().enumerate() {
            if i != p {
                self.sums[i * self.k + from] -= d;
                self.sums[i * self.k + to] += d;
            }
        }
        self.sizes[from] -= 1;
        self.sizes[to] += 1;
        self.labels[p] = to;
        self.refresh_nearest();
    }
}

/// Greedy single-point reassignment against the negative silhouette loss.
///
/// Each pass visits clustered items in index order and moves an item to the
/// cluster giving the lowest global loss, provided it strictly improves and
/// does not empty its current cluster. Centroids are recomputed after each
/// pass. The loss before the first pass and after each pass is appended to
/// `loss_history.silhouette`.
pub fn refine_by_silhouette(
    space: &SharedSpace,
    clustering: &Clustering,
    iterations: usize,
) -> Clustering {
    if iterations == 0 {
        return clustering.clone();
    }
    let k = clustering.clusters.len();
    let mut state = SilhouetteState::new(space, clustering);
    let mut current = clustering.clone();
    let mut history = current.loss_history.clone();
    history.silhouette.push(exact_loss(&state));

    for _ in 0..iterations {
        let mut current_total = state.total();
        for p in 0..state.rows.len() {
            let from = state.labels[p];
            if state.sizes[from] < 2 {
                continue;
            }
            let xp = space.vector(state.rows[p]);
            let dist: Vec<f64> = state
                .rows
                .iter()
                .map(|&r| cosine_distance(space.vector(r), xp))
                .collect();
            let totals = state.totals_after_moves(p, &dist);
            let mut best: Option<(usize, f64)> = None;
            for (to, &t) in totals.iter().enumerate() {
                if to == from {
                    continue;
                }
                if best.is_none_or(|(_, bt)| t > bt) {
                    best = Some((to, t));
                }
            }
            if let Some((to, t)) = best {
                if t > current_total + MOVE_EPSILON {
                    state.apply_move(p, to, &dist);
                    current_total = state.total();
                }
            }
        }
        let assignment = {
            let mut a = clustering.assignment.clone();
            for (local, &row) in state.rows.iter().enumerate() {
                a[row] = Some(state.labels[local]);
            }
            a
        };
        let previous = current.centroids();
        current = Clustering::from_assignment(
            space,
            assignment,
            k,
            Some(&previous),
            LossHistory::default(),
        );
        history.silhouette.push(exact_loss(&state));
    }
    current.loss_history = history;
    current
}

/// Loss recomputed from scratch for the state's current labels.
fn exact_loss(state: &SilhouetteState<'_>) -> f64 {
    let n = state.rows.len();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = (0..n)
        .map(|i| {
            let xi = state.space.vector(state.rows[i]);
            let mut sums = vec![0.0; state.k];
            for j in 0..n {
                if j != i {
                    sums[state.labels[j]] += cosine_distance(xi, state.space.vector(state.rows[j]));
                }
            }
            let own = state.labels[i];
            let others = (0..state.k)
                .filter(|&c| c != own && state.sizes[c] > 0)
                .map(|c| sums[c] / state.sizes[c] as f64);
            silhouette_from_sums(sums[own], state.sizes[own], others)
        })
        .sum();
    -total / n as f64
}

/// Drops token-only clusters (their tokens become discarded) and moves every
/// instance of an instance-only cluster to the mixed cluster whose centroid
/// is most cosine-similar. Surviving clusters are renumbered `0..m` in their
/// original order.
pub fn refine_clusters(space: &SharedSpace, clustering: &Clustering) -> Result<Clustering> {
    let mixed: Vec<&Cluster> = clustering
        .clusters
        .iter()
        .filter(|c| c.kind() == ClusterKind::Mixed)
        .collect();
    if mixed.is_empty() {
        return Err(ClusteringError::NoMixedCluster);
    }
    let new_id = |old: usize| mixed.iter().position(|c| c.id == old);

    let mut assignment = vec![None; clustering.assignment.len()];
    let mut receiving = BTreeSet::new();
    for cluster in &clustering.clusters {
        match cluster.kind() {
            ClusterKind::Mixed => {
                let id = new_id(cluster.id).unwrap();
                cluster.member_indices.iter().for_each(|&i| assignment[i] = Some(id));
            }
            ClusterKind::TokenOnly => {}
            ClusterKind::InstanceOnly => {
                for &i in &cluster.member_indices {
                    let h = space.vector(i);
                    let mut best = 0;
                    let mut best_sim = dot(&mixed[0].centroid, h);
                    for (pos, m) in mixed.iter().enumerate().skip(1) {
                        let s = dot(&m.centroid, h);
                        if s > best_sim {
                            best = pos;
                            best_sim = s;
                        }
                    }
                    assignment[i] = Some(best);
                    receiving.insert(best);
                }
            }
        }
    }

    let mut refined = Clustering::from_assignment(
        space,
        assignment,
        mixed.len(),
        None,
        clustering.loss_history.clone(),
    );
    // untouched clusters keep their centroid verbatim
    for (pos, c) in mixed.iter().enumerate() {
        if !receiving.contains(&pos) {
            refined.clusters[pos].centroid = c.centroid.clone();
        }
    }
    Ok(refined)
}

/// KMeans, `iterations` silhouette passes, then filtering.
pub fn cluster_space(
    space: &SharedSpace,
    k: usize,
    seed: u64,
    iterations: usize,
) -> Result<Clustering> {
    let initial = kmeans(space, k, seed)?;
    let optimized = refine_by_silhouette(space, &initial, iterations);
    refine_clusters(space, &optimized)
}
