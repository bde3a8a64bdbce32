//! Seeded Gaussian-mixture corpora with planted verbalizer tokens.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::ManualVerbalizer;
use crate::embed_io::{
    write_embedding_set, write_gold_labels, write_instance_texts, EmbedIoError, EmbeddingKind,
    EmbeddingSet, GoldLabel, InstanceText,
};
use crate::seeding::{rng_for, Stream};

/// Per-coordinate std of outlier tokens around their shared center.
const OUTLIER_STD: f64 = 0.3;

#[derive(Debug, Error, PartialEq)]
pub enum SyntheticError {
    #[error("infeasible mixture spec: {0}")]
    InfeasibleSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureSpec {
    pub n_classes: usize,
    pub instances_per_class: usize,
    /// Held-out instances per class for evaluation.
    pub test_instances_per_class: usize,
    pub tokens_per_class: usize,
    /// Per-coordinate std of planted tokens around their class mean, below
    /// the instance std of 1.
    pub token_spread: f64,
    pub outlier_tokens: usize,
    pub dim: usize,
    /// Distance between any two class means, in units of the instance std.
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            instances_per_class: 100,
            test_instances_per_class: 100,
            tokens_per_class: 25,
            token_spread: 0.7,
            outlier_tokens: 10,
            dim: 16,
            class_separation: 6.0,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub label_space: Vec<String>,
    pub vocab: EmbeddingSet,
    pub instances: EmbeddingSet,
    pub gold: Vec<GoldLabel>,
    pub test_instances: EmbeddingSet,
    pub test_gold: Vec<GoldLabel>,
    /// Class name to the ids of the tokens planted at that class's mean.
    pub planted: BTreeMap<String, Vec<String>>,
}

impl SyntheticCorpus {
    pub fn gold_map(&self) -> BTreeMap<String, String> {
        self.gold.iter().map(|g| (g.id.clone(), g.label.clone())).collect()
    }

    pub fn test_gold_map(&self) -> BTreeMap<String, String> {
        self.test_gold.iter().map(|g| (g.id.clone(), g.label.clone())).collect()
    }

    /// The first planted token of each class, standing in for a hand-written
    /// verbalizer file.
    pub fn manual_verbalizers(&self) -> Vec<ManualVerbalizer> {
        self.planted
            .iter()
            .filter_map(|(class, ids)| {
                ids.first().map(|t| ManualVerbalizer {
                    token_id: t.clone(),
                    class: class.clone(),
                })
            })
            .collect()
    }

    /// Writes the corpus as ordinary pipeline inputs under `dir`.
    pub fn write_files(&self, dir: impl AsRef<Path>) -> Result<CorpusFiles, EmbedIoError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| EmbedIoError::IoFailure {
            path: dir.to_path_buf(),
            source,
        })?;
        let files = CorpusFiles::in_dir(dir);
        write_embedding_set(&self.vocab, &files.vocab)?;
        write_embedding_set(&self.instances, &files.instances)?;
        write_embedding_set(&self.test_instances, &files.test_instances)?;
        write_gold_labels(&self.gold, &files.gold)?;
        write_gold_labels(&self.test_gold, &files.test_gold)?;
        let texts: Vec<InstanceText> = self
            .instances
            .ids()
            .iter()
            .map(|id| InstanceText {
                id: id.clone(),
                text: format!("synthetic instance {id}"),
            })
            .collect();
        write_instance_texts(&texts, &files.texts)?;
        let manual = serde_json::to_string_pretty(&self.manual_verbalizers()).expect("serializable") + "\n";
        fs::write(&files.manual_verbalizers, manual).map_err(|source| EmbedIoError::IoFailure {
            path: files.manual_verbalizers.clone(),
            source,
        })?;
        Ok(files)
    }

    /// Planted class of a token id, `None` for outliers.
    pub fn planted_class(&self, token_id: &str) -> Option<&str> {
        self.planted
            .iter()
            .find(|(_, ids)| ids.iter().any(|t| t == token_id))
            .map(|(c, _)| c.as_str())
    }
}

/// Paths written by [`SyntheticCorpus::write_files`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusFiles {
    pub vocab: PathBuf,
    pub instances: PathBuf,
    pub texts: PathBuf,
    pub gold: PathBuf,
    pub test_instances: PathBuf,
    pub test_gold: PathBuf,
    pub manual_verbalizers: PathBuf,
}

impl CorpusFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            vocab: dir.join("vocab.cseb"),
            instances: dir.join("instances.cseb"),
            texts: dir.join("texts.jsonl"),
            gold: dir.join("gold.jsonl"),
            test_instances: dir.join("test_instances.cseb"),
            test_gold: dir.join("test_gold.jsonl"),
            manual_verbalizers: dir.join("manual_verbalizers.json"),
        }
    }
}

pub fn class_name(c: usize) -> String {
    format!("class{c}")
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// `count` orthonormal random directions via Gram-Schmidt.
fn orthonormal(rng: &mut impl Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian_vec(rng, dim);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

fn around(rng: &mut impl Rng, center: &[f64], std: f64) -> Vec<f32> {
    center
        .iter()
        .map(|&m| {
            let z: f64 = StandardNormal.sample(rng);
            (m + std * z) as f32
        })
        .collect()
}

/// Draws a corpus from `spec`.
///
/// Class means are mutually orthogonal with norm `sep / sqrt(2)`, so every
/// pair sits `sep` apart. Instances are `N(mean, I)`. Planted tokens sit
/// within `token_spread` per coordinate of their mean. Outlier tokens share one
/// center orthogonal to all means at a radius well beyond the classes.
pub fn generate(spec: &MixtureSpec) -> Result<SyntheticCorpus, SyntheticError> {
    if spec.dim < 2 {
        return Err(SyntheticError::InfeasibleSpec("dim must be at least 2".into()));
    }
    if !(spec.class_separation >= 0.0 && spec.class_separation.is_finite()) {
        return Err(SyntheticError::InfeasibleSpec("separation must be finite and >= 0".into()));
    }
    if !(0.0..1.0).contains(&spec.token_spread) {
        return Err(SyntheticError::InfeasibleSpec("token spread must be in [0, 1)".into()));
    }
    if spec.n_classes == 0 {
        return Err(SyntheticError::InfeasibleSpec("need at least one class".into()));
    }
    let directions = spec.n_classes + usize::from(spec.outlier_tokens > 0);
    if directions > spec.dim {
        return Err(SyntheticError::InfeasibleSpec(format!(
            "{} classes{} need {directions} orthogonal directions but dim is {}",
            spec.n_classes,
            if spec.outlier_tokens > 0 { " plus outliers" } else { "" },
            spec.dim
        )));
    }

    let mut rng = rng_for(spec.seed, Stream::Synthetic);
    let basis = orthonormal(&mut rng, directions, spec.dim);
    let scale = spec.class_separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = basis[..spec.n_classes]
        .iter()
        .map(|b| b.iter().map(|x| x * scale).collect())
        .collect();
    let label_space: Vec<String> = (0..spec.n_classes).map(class_name).collect();

    let mut token_ids = Vec::new();
    let mut token_rows = Vec::new();
    let mut planted = BTreeMap::new();
    for (c, mean) in means.iter().enumerate() {
        let ids: Vec<String> = (0..spec.tokens_per_class).map(|j| format!("c{c}_tok{j}")).collect();
        for _ in 0..spec.tokens_per_class {
            token_rows.extend(around(&mut rng, mean, spec.token_spread));
        }
        token_ids.extend(ids.iter().cloned());
        planted.insert(class_name(c), ids);
    }
    if spec.outlier_tokens > 0 {
        let radius = 3.0 * (spec.class_separation + (spec.dim as f64).sqrt());
        let center: Vec<f64> = basis[spec.n_classes].iter().map(|x| x * radius).collect();
        for j in 0..spec.outlier_tokens {
            token_rows.extend(around(&mut rng, &center, OUTLIER_STD));
            token_ids.push(format!("outlier{j}"));
        }
    }

    let mut draw = |prefix: &str, per_class: usize| {
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        let mut gold = Vec::new();
        // classes interleaved so ids do not reveal the class
        for n in 0..per_class {
            for (c, mean) in means.iter().enumerate() {
                let id = format!("{prefix}{}", n * spec.n_classes + c);
                rows.extend(around(&mut rng, mean, 1.0));
                gold.push(GoldLabel {
                    id: id.clone(),
                    label: class_name(c),
                });
                ids.push(id);
            }
        }
        (EmbeddingSet::new(EmbeddingKind::Instance, spec.dim, ids, rows).expect("finite draws"), gold)
    };
    let (instances, gold) = draw("inst", spec.instances_per_class);
    let (test_instances, test_gold) = draw("test", spec.test_instances_per_class);
    let vocab = EmbeddingSet::new(EmbeddingKind::Vocab, spec.dim, token_ids, token_rows)
        .expect("finite draws");

    Ok(SyntheticCorpus {
        label_space,
        vocab,
        instances,
        gold,
        test_instances,
        test_gold,
        planted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MixtureSpec {
        MixtureSpec {
            n_classes: 2,
            instances_per_class: 10,
            test_instances_per_class: 3,
            tokens_per_class: 2,
            token_spread: 0.3,
            outlier_tokens: 0,
            dim: 8,
            class_separation: 4.0,
            seed: 1,
        }
    }

    #[test]
    fn counts() {
        let c = generate(&small()).unwrap();
        assert_eq!(c.instances.count(), 20);
        assert_eq!(c.vocab.count(), 4);
        assert_eq!(c.gold.len(), 20);
        assert_eq!(c.test_instances.count(), 6);
        assert_eq!(c.planted["class1"], vec!["c1_tok0", "c1_tok1"]);
        assert_eq!(c.planted_class("c0_tok1"), Some("class0"));
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = MixtureSpec { seed: 2, ..small() };
        assert_ne!(generate(&small()).unwrap().instances, generate(&other).unwrap().instances);
    }

    #[test]
    fn infeasible_specs() {
        let too_many = MixtureSpec { n_classes: 9, ..small() };
        assert!(generate(&too_many).is_err());
        let no_room = MixtureSpec { n_classes: 8, outlier_tokens: 1, ..small() };
        assert!(generate(&no_room).is_err());
        assert!(generate(&MixtureSpec { dim: 1, ..small() }).is_err());
        assert!(generate(&MixtureSpec { class_separation: -1.0, ..small() }).is_err());
    }

    #[test]
    fn means_are_separated() {
        let spec = MixtureSpec { instances_per_class: 2000, ..small() };
        let c = generate(&spec).unwrap();
        let mut sums = vec![vec![0.0f64; 8]; 2];
        for (i, g) in c.gold.iter().enumerate() {
            let k = usize::from(g.label == "class1");
            for (s, x) in sums[k].iter_mut().zip(c.instances.row(i)) {
                *s += *x as f64 / 2000.0;
            }
        }
        let d: f64 = sums[0].iter().zip(&sums[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((d - 4.0).abs() < 0.25, "{d}");
    }
}
