//! Cloze-style classification with the selected verbalizers.
//!
//! The logit of a class is the largest dot product between the instance and
//! that class's tokens (or their mean with [`Aggregation::Mean`]); the class
//! distribution is the softmax over classes. Everything happens in the
//! session's reduced, normalized space. This is a fine-tuning-free proxy for
//! the accuracy a prompt-tuned model would reach.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed_io::EmbeddingSet;
use crate::geometry::{dot, GeometryError, SharedSpace};
use crate::selection::VerbalizerSet;

pub const METHOD: &str = "cloze proxy: softmax over per-class max token dot product (no fine-tuning)";

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("class {0:?} has no verbalizer token")]
    MissingClassToken(String),
    #[error("test embeddings have dim {actual}, the session expects {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("gold label {label:?} for {id:?} is not in the label space")]
    UnknownGoldLabel { id: String, label: String },
    #[error("no gold label for test instance {0:?}")]
    MissingGold(String),
    #[error("verbalizer token {id:?} does not match shared-space row {index}")]
    TokenMismatch { id: String, index: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

/// Token vectors per class, in label-space order; uncovered classes omitted.
#[derive(Debug, Clone)]
pub struct ClassTokens<'a> {
    classes: Vec<(&'a str, Vec<&'a [f64]>)>,
}

impl<'a> ClassTokens<'a> {
    pub fn new(
        label_space: &'a [String],
        verbalizers: &VerbalizerSet,
        space: &'a SharedSpace,
    ) -> Result<Self> {
        let by_class = verbalizers.by_class();
        for e in &verbalizers.entries {
            if e.token_index >= space.len() || space.item(e.token_index).id != e.token_id {
                return Err(EvalError::TokenMismatch {
                    id: e.token_id.clone(),
                    index: e.token_index,
                });
            }
        }
        let classes = label_space
            .iter()
            .filter_map(|c| {
                by_class
                    .get(c.as_str())
                    .map(|rows| (c.as_str(), rows.iter().map(|&r| space.vector(r)).collect()))
            })
            .collect();
        Ok(Self { classes })
    }

    pub fn covers(&self, class: &str) -> bool {
        self.classes.iter().any(|(c, _)| *c == class)
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Softmax over covered classes, in label-space order.
    pub fn probabilities(&self, h: &[f64], aggregation: Aggregation) -> Vec<(&'a str, f64)> {
        let logits: Vec<f64> = self
            .classes
            .iter()
            .map(|(_, tokens)| match aggregation {
                Aggregation::Max => tokens.iter().map(|t| dot(t, h)).fold(f64::NEG_INFINITY, f64::max),
                Aggregation::Mean => tokens.iter().map(|t| dot(t, h)).sum::<f64>() / tokens.len() as f64,
            })
            .collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        self.classes
            .iter()
            .zip(exps)
            .map(|((c, _), e)| (*c, e / z))
            .collect()
    }

    /// Most probable covered class; earliest in label-space order on ties.
    pub fn predict(&self, h: &[f64], aggregation: Aggregation) -> Option<&'a str> {
        let mut best: Option<(&str, f64)> = None;
        for (c, p) in self.probabilities(h, aggregation) {
            if best.is_none_or(|(_, b)| p > b) {
                best = Some((c, p));
            }
        }
        best.map(|(c, _)| c)
    }
}

/// Class distribution for one normalized instance vector. Every class in
/// `label_space` must own at least one token.
pub fn class_probabilities(
    instance_vector: &[f64],
    label_space: &[String],
    verbalizers: &VerbalizerSet,
    space: &SharedSpace,
    aggregation: Aggregation,
) -> Result<Vec<(String, f64)>> {
    let tokens = ClassTokens::new(label_space, verbalizers, space)?;
    if let Some(missing) = label_space.iter().find(|c| !tokens.covers(c)) {
        return Err(EvalError::MissingClassToken(missing.clone()));
    }
    Ok(tokens
        .probabilities(instance_vector, aggregation)
        .into_iter()
        .map(|(c, p)| (c.to_string(), p))
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    pub support: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub label_space: Vec<String>,
    /// Correct over evaluated instances.
    pub accuracy: f64,
    /// Correct over evaluated plus skipped instances.
    pub accuracy_with_skipped: f64,
    pub per_class: BTreeMap<String, ClassStats>,
    /// Rows are gold classes, columns predictions, both in label-space order.
    pub confusion: Vec<Vec<usize>>,
    pub n_evaluated: usize,
    /// Instances whose gold class has no verbalizer token.
    pub n_skipped: usize,
    pub uncovered_classes: Vec<String>,
    /// Set when nothing could be evaluated; accuracy is then 0.
    pub empty: bool,
}

/// Classifies already-reduced unit vectors.
pub fn evaluate_vectors<'v>(
    vectors: impl IntoIterator<Item = (&'v str, &'v [f64])>,
    gold: &BTreeMap<String, String>,
    label_space: &[String],
    verbalizers: &VerbalizerSet,
    space: &SharedSpace,
    aggregation: Aggregation,
) -> Result<EvalReport> {
    let tokens = ClassTokens::new(label_space, verbalizers, space)?;
    let position = |c: &str| label_space.iter().position(|l| l == c);
    let mut confusion = vec![vec![0; label_space.len()]; label_space.len()];
    let mut per_class: BTreeMap<String, ClassStats> = label_space
        .iter()
        .map(|c| (c.clone(), ClassStats::default()))
        .collect();
    let (mut evaluated, mut skipped, mut correct) = (0, 0, 0);
    for (id, h) in vectors {
        let label = gold.get(id).ok_or_else(|| EvalError::MissingGold(id.to_string()))?;
        let Some(g) = position(label) else {
            return Err(EvalError::UnknownGoldLabel {
                id: id.to_string(),
                label: label.clone(),
            });
        };
        if !tokens.covers(label) {
            skipped += 1;
            continue;
        }
        let predicted = tokens.predict(h, aggregation).expect("gold class is covered");
        let p = position(predicted).unwrap();
        confusion[g][p] += 1;
        evaluated += 1;
        let stats = per_class.get_mut(label).unwrap();
        stats.support += 1;
        if g == p {
            stats.correct += 1;
            correct += 1;
        }
    }
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    Ok(EvalReport {
        method: METHOD.to_string(),
        label_space: label_space.to_vec(),
        accuracy: ratio(correct, evaluated),
        accuracy_with_skipped: ratio(correct, evaluated + skipped),
        per_class,
        confusion,
        n_evaluated: evaluated,
        n_skipped: skipped,
        uncovered_classes: label_space.iter().filter(|c| !tokens.covers(c)).cloned().collect(),
        empty: evaluated == 0,
    })
}

/// Projects raw test embeddings with the session's PCA model and classifies them.
pub fn evaluate(
    test_instances: &EmbeddingSet,
    gold: &BTreeMap<String, String>,
    label_space: &[String],
    verbalizers: &VerbalizerSet,
    space: &SharedSpace,
    aggregation: Aggregation,
) -> Result<EvalReport> {
    let expected = space.pca_model().input_dim();
    if test_instances.count() > 0 && test_instances.dim() != expected {
        return Err(EvalError::DimMismatch {
            expected,
            actual: test_instances.dim(),
        });
    }
    let projected = test_instances
        .rows()
        .map(|r| space.embed(r))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    evaluate_vectors(
        test_instances.ids().iter().map(String::as_str).zip(projected.iter().map(Vec::as_slice)),
        gold,
        label_space,
        verbalizers,
        space,
        aggregation,
    )
}

/// Aligned plain-text rendering with percentages to two decimals.
pub fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "method: {}", report.method);
    let _ = writeln!(out, "accuracy: {:.2}%", report.accuracy * 100.0);
    let _ = writeln!(out, "accuracy (skipped as wrong): {:.2}%", report.accuracy_with_skipped * 100.0);
    let _ = writeln!(out, "evaluated: {}  skipped: {}", report.n_evaluated, report.n_skipped);
    if report.empty {
        let _ = writeln!(out, "warning: no instance could be evaluated");
    }
    if !report.uncovered_classes.is_empty() {
        let _ = writeln!(out, "classes without tokens: {}", report.uncovered_classes.join(", "));
    }
    let width = report
        .label_space
        .iter()
        .map(|c| c.chars().count())
        .max()
        .unwrap_or(0)
        .max(5);
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>8}", "class", "support", "correct", "acc");
    for c in &report.label_space {
        let s = &report.per_class[c];
        let acc = if s.support == 0 {
            "-".to_string()
        } else {
            format!("{:.2}%", 100.0 * s.correct as f64 / s.support as f64)
        };
        let _ = writeln!(out, "{c:<width$}  {:>8}  {:>8}  {acc:>8}", s.support, s.correct);
    }
    let _ = writeln!(out);
    let _ = write!(out, "{:<width$}", "gold\\pred");
    for c in &report.label_space {
        let _ = write!(out, "  {c:>width$}");
    }
    let _ = writeln!(out);
    for (c, row) in report.label_space.iter().zip(&report.confusion) {
        let _ = write!(out, "{c:<width$}");
        for n in row {
            let _ = write!(out, "  {n:>width$}");
        }
        let _ = writeln!(out);
    }
    out
}
