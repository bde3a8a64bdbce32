//! Brute-force reference implementations shared by the integration and
//! acceptance tests. Nothing here calls into the crate's numeric code.

#![allow(dead_code)]

use coldselect::geometry::SharedSpace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Space with `tokens` token rows followed by instance rows, all given.
pub fn space_of(rows: &[Vec<f64>], tokens: usize) -> SharedSpace {
    let dim = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    SharedSpace::from_reduced(&ids("t", tokens), &ids("i", rows.len() - tokens), dim, &flat)
        .unwrap()
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, kept local so the oracle side owns its sampling
    let u: f64 = 1.0 - rng.random::<f64>();
    let v: f64 = rng.random();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

/// `n` points around `blobs` random centers in `dim` dimensions.
pub fn blob_rows(rng: &mut ChaCha8Rng, n: usize, blobs: usize, dim: usize, spread: f64) -> Vec<Vec<f64>> {
    let centers: Vec<Vec<f64>> = (0..blobs)
        .map(|_| unit(&(0..dim).map(|_| gaussian(rng)).collect::<Vec<_>>()))
        .collect();
    (0..n)
        .map(|i| {
            let c = &centers[i % blobs];
            unit(&c.iter().map(|x| x + spread * gaussian(rng)).collect::<Vec<_>>())
        })
        .collect()
}

pub fn space_rows(space: &SharedSpace) -> Vec<Vec<f64>> {
    (0..space.len()).map(|i| space.vector(i).to_vec()).collect()
}

/// Unit mean of the given rows.
pub fn centroid(rows: &[&Vec<f64>]) -> Vec<f64> {
    let dim = rows[0].len();
    let mut m = vec![0.0; dim];
    for r in rows {
        for d in 0..dim {
            m[d] += r[d];
        }
    }
    unit(&m)
}

/// Spherical KMeans objective of a labeling (every label in 0..k non-empty).
pub fn partition_loss(rows: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<&Vec<f64>> = rows.iter().zip(labels).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
        let mu = centroid(&members);
        for m in members {
            total += m.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
    }
    total
}

/// Minimum objective over every partition into exactly `k` non-empty groups.
pub fn exhaustive_kmeans_optimum(rows: &[Vec<f64>], k: usize) -> f64 {
    let n = rows.len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    let total = k.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % k;
            c /= k;
        }
        if (0..k).all(|g| labels.contains(&g)) {
            best = best.min(partition_loss(rows, &labels, k));
        }
    }
    best
}

/// Direct silhouette of point `i` under `labels` (None = not clustered).
pub fn silhouette(rows: &[Vec<f64>], labels: &[Option<usize>], i: usize) -> f64 {
    let own = labels[i].unwrap();
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (j, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            groups.entry(*l).or_default().push(j);
        }
    }
    let mates = &groups[&own];
    if mates.len() == 1 {
        return 0.0;
    }
    let dist = |a: usize, b: usize| 1.0 - dot(&rows[a], &rows[b]);
    let a = mates.iter().filter(|&&j| j != i).map(|&j| dist(i, j)).sum::<f64>() / (mates.len() - 1) as f64;
    let mut b = f64::INFINITY;
    for (g, members) in &groups {
        if *g != own {
            b = b.min(members.iter().map(|&j| dist(i, j)).sum::<f64>() / members.len() as f64);
        }
    }
    if b.is_infinite() || a.max(b) == 0.0 {
        return 0.0;
    }
    (b - a) / a.max(b)
}

pub fn silhouette_loss(rows: &[Vec<f64>], labels: &[Option<usize>]) -> f64 {
    let clustered: Vec<usize> = (0..rows.len()).filter(|&i| labels[i].is_some()).collect();
    -clustered.iter().map(|&i| silhouette(rows, labels, i)).sum::<f64>() / clustered.len() as f64
}

/// Flat description of a clustered space for the session oracle.
pub struct OracleWorld {
    pub rows: Vec<Vec<f64>>,
    pub is_token: Vec<bool>,
    pub ids: Vec<String>,
    /// (members, centroid) per cluster.
    pub clusters: Vec<(Vec<usize>, Vec<f64>)>,
}

pub struct OracleConfig {
    pub budget: usize,
    pub negated: bool,
    pub labeled_only: bool,
    pub eq16_literal: bool,
    pub use_separation: bool,
    pub use_impurity: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleEvent {
    pub cluster: usize,
    pub instance: String,
    pub label: String,
    pub token: Option<String>,
    pub cohesion: f64,
    pub separation: f64,
    pub impurity: f64,
}

/// Oracle view of a clustered space. Centroids are recomputed here from the
/// member rows rather than read from the clustering.
pub fn oracle_world(space: &SharedSpace, clustering: &coldselect::clustering::Clustering) -> OracleWorld {
    let rows = space_rows(space);
    let clusters = clustering
        .clusters
        .iter()
        .map(|c| {
            let members = c.member_indices.clone();
            let mu = centroid(&members.iter().map(|&m| &rows[m]).collect::<Vec<_>>());
            (members, mu)
        })
        .collect();
    OracleWorld {
        is_token: (0..space.len()).map(|i| i < space.token_count()).collect(),
        ids: space.items().iter().map(|it| it.id.clone()).collect(),
        rows,
        clusters,
    }
}

/// (cohesion, separation, impurity) of cluster `k` given labels keyed by row
/// and verbalizer token rows, computed directly from the definitions.
pub fn oracle_metrics(
    w: &OracleWorld,
    k: usize,
    labels: &std::collections::BTreeMap<usize, String>,
    verbalizers: &[usize],
    negated: bool,
    labeled_only: bool,
) -> (f64, f64, f64) {
    let (members, mu) = &w.clusters[k];
    let inside: Vec<usize> = verbalizers.iter().copied().filter(|v| members.contains(v)).collect();
    let cohesion = if inside.is_empty() {
        members.iter().map(|&m| dot(&w.rows[m], mu)).sum::<f64>() / members.len() as f64
    } else {
        members
            .iter()
            .map(|&m| inside.iter().map(|&v| dot(&w.rows[m], &w.rows[v])).fold(f64::MIN, f64::max))
            .sum::<f64>()
            / members.len() as f64
    };
    let outside: Vec<usize> = verbalizers.iter().copied().filter(|v| !members.contains(v)).collect();
    let raw_sep = if outside.is_empty() {
        let mut m = f64::MIN;
        for (k2, (_, mu2)) in w.clusters.iter().enumerate() {
            if k2 != k {
                m = m.max(dot(mu, mu2));
            }
        }
        m
    } else {
        outside.iter().map(|&v| dot(&w.rows[v], mu)).fold(f64::MIN, f64::max)
    };
    let separation = if negated { 1.0 - raw_sep } else { raw_sep };
    let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
    let mut n_inst = 0;
    for &m in members {
        if !w.is_token[m] {
            n_inst += 1;
            if let Some(l) = labels.get(&m) {
                *counts.entry(l).or_default() += 1;
            }
        }
    }
    let n_lab: usize = counts.values().sum();
    let impurity = if n_lab == 0 {
        0.0
    } else {
        let denom = if labeled_only { n_lab } else { n_inst };
        1.0 - *counts.values().max().unwrap() as f64 / denom as f64
    };
    (cohesion, separation, impurity)
}

/// Step-by-step ColdSelect loop recomputing every metric from scratch.
pub fn oracle_session(
    w: &OracleWorld,
    cfg: &OracleConfig,
    gold: &std::collections::BTreeMap<String, String>,
) -> Vec<OracleEvent> {
    let mut labels: std::collections::BTreeMap<usize, String> = Default::default();
    let mut verbalizers: Vec<usize> = Vec::new();
    let mut events = Vec::new();
    let cos = |a: usize, b: &[f64]| dot(&w.rows[a], b);
    for _ in 0..cfg.budget {
        let mut best: Option<(usize, f64, f64, f64, f64)> = None;
        for (k, (members, _)) in w.clusters.iter().enumerate() {
            let unlabeled = members.iter().any(|&m| !w.is_token[m] && !labels.contains_key(&m));
            if !unlabeled {
                continue;
            }
            let (cohesion, separation, impurity) =
                oracle_metrics(w, k, &labels, &verbalizers, cfg.negated, cfg.labeled_only);
            let mut score = cohesion;
            if cfg.use_separation {
                score += separation;
            }
            if cfg.use_impurity {
                score += impurity;
            }
            if best.is_none() || score > best.unwrap().1 {
                best = Some((k, score, cohesion, separation, impurity));
            }
        }
        let Some((k, _, cohesion, separation, impurity)) = best else {
            break;
        };
        let (members, mu) = &w.clusters[k];
        let labeled_here: Vec<usize> = members.iter().copied().filter(|m| labels.contains_key(m)).collect();
        let mut pick: Option<(usize, f64)> = None;
        for &m in members {
            if w.is_token[m] || labels.contains_key(&m) {
                continue;
            }
            let key = if labeled_here.is_empty() {
                cos(m, mu)
            } else if cfg.eq16_literal {
                labeled_here.iter().map(|&l| dot(&w.rows[m], &w.rows[l])).fold(f64::MAX, f64::min)
            } else {
                -labeled_here.iter().map(|&l| dot(&w.rows[m], &w.rows[l])).fold(f64::MIN, f64::max)
            };
            if pick.is_none() || key > pick.unwrap().1 {
                pick = Some((m, key));
            }
        }
        let inst = pick.unwrap().0;
        let label = gold[&w.ids[inst]].clone();
        let mut tok: Option<(usize, f64)> = None;
        for &m in members {
            if w.is_token[m] && !verbalizers.contains(&m) {
                let s = dot(&w.rows[m], &w.rows[inst]);
                if tok.is_none() || s > tok.unwrap().1 {
                    tok = Some((m, s));
                }
            }
        }
        if let Some((t, _)) = tok {
            verbalizers.push(t);
        }
        labels.insert(inst, label.clone());
        events.push(OracleEvent {
            cluster: k,
            instance: w.ids[inst].clone(),
            label,
            token: tok.map(|(t, _)| w.ids[t].clone()),
            cohesion,
            separation,
            impurity,
        });
    }
    events
}
