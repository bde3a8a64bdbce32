//! Shared-space construction: cosine similarity, PCA and row normalization
//! over the combined token + instance embeddings.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed_io::{EmbeddingKind, EmbeddingSet};

/// Covariance dimensionality up to which PCA uses a dense eigendecomposition.
pub const EXACT_PCA_MAX_DIM: usize = 1024;
const POWER_MAX_ITERATIONS: usize = 1000;
const POWER_TOLERANCE: f64 = 1e-10;
/// Rows whose reduced norm falls below this are rejected.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("vector has zero norm")]
    ZeroNormVector,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("reduced dimension {requested} not in 1..={max}")]
    DimensionTooLarge { requested: usize, max: usize },
    #[error("row {id:?} collapses to a near-zero vector after reduction")]
    DegenerateRow { id: String },
    #[error("expected a {expected} embedding set, got {actual}")]
    WrongKind {
        expected: EmbeddingKind,
        actual: EmbeddingKind,
    },
    #[error("duplicate id: {0}")]
    DuplicateId(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales `v` to unit length in place; returns the original norm.
pub(crate) fn normalize_in_place(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// `(a . b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(GeometryError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(GeometryError::ZeroNormVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero width
        let width = self.cols.max(1);
        self.data.chunks_exact(width).take(self.rows)
    }
}

/// Which eigen solver [`fit_pca_with`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PcaSolver {
    /// Dense eigendecomposition up to [`EXACT_PCA_MAX_DIM`], power iteration above.
    #[default]
    Auto,
    Exact,
    PowerIteration,
}

/// A fitted linear projection `z = (x - mean) W^T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    mean: Vec<f64>,
    /// `reduced_dim x dim`, rows orthonormal.
    components: Matrix,
    explained_variance: Vec<f64>,
    total_variance: f64,
    rank_deficient: bool,
}

impl PcaModel {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &Matrix {
        &self.components
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// Sum of all eigenvalues of the sample covariance, kept or not.
    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn reduced_dim(&self) -> usize {
        self.components.nrows()
    }

    /// True when fewer than `reduced_dim` directions carry nonzero variance.
    /// The model is still usable; the trailing components are arbitrary
    /// orthonormal completions.
    pub fn rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    pub fn transform_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.mean.len() {
            return Err(GeometryError::DimensionMismatch {
                expected: self.mean.len(),
                actual: row.len(),
            });
        }
        let centered: Vec<f64> = row.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok(self
            .components
            .iter_rows()
            .map(|w| dot(&centered, w))
            .collect())
    }

    pub fn transform(&self, rows: &Matrix) -> Result<Matrix> {
        if rows.ncols() != self.mean.len() {
            return Err(GeometryError::DimensionMismatch {
                expected: self.mean.len(),
                actual: rows.ncols(),
            });
        }
        let mut data = Vec::with_capacity(rows.nrows() * self.reduced_dim());
        for row in rows.iter_rows() {
            data.extend(self.transform_row(row)?);
        }
        Ok(Matrix::new(rows.nrows(), self.reduced_dim(), data))
    }

    /// Maps reduced coordinates back to the input space: `z W + mean`.
    pub fn inverse_transform_row(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (coef, w) in z.iter().zip(self.components.iter_rows()) {
            for (o, wi) in out.iter_mut().zip(w) {
                *o += coef * wi;
            }
        }
        out
    }
}

pub fn fit_pca(stacked: &Matrix, reduced_dim: usize) -> Result<PcaModel> {
    fit_pca_with(stacked, reduced_dim, PcaSolver::Auto)
}

pub fn fit_pca_with(stacked: &Matrix, reduced_dim: usize, solver: PcaSolver) -> Result<PcaModel> {
    let (n, dim) = (stacked.nrows(), stacked.ncols());
    let max = dim.min(n);
    if reduced_dim == 0 || reduced_dim > max {
        return Err(GeometryError::DimensionTooLarge {
            requested: reduced_dim,
            max,
        });
    }

    let mut mean = vec![0.0; dim];
    for row in stacked.iter_rows() {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let cov = covariance(stacked, &mean);
    let total_variance: f64 = (0..dim).map(|i| cov[(i, i)]).sum();

    let use_exact = match solver {
        PcaSolver::Exact => true,
        PcaSolver::PowerIteration => false,
        PcaSolver::Auto => dim <= EXACT_PCA_MAX_DIM,
    };
    let (mut eigenvalues, mut vectors) = if use_exact {
        exact_eigen(cov, reduced_dim)
    } else {
        power_eigen(cov, reduced_dim)
    };

    for v in &mut vectors {
        apply_sign_convention(v);
    }
    eigenvalues.iter_mut().for_each(|e| *e = e.max(0.0));

    let tolerance = 1e-12 * total_variance.max(f64::MIN_POSITIVE);
    let rank_deficient = eigenvalues.iter().any(|&e| e <= tolerance);

    Ok(PcaModel {
        mean,
        components: Matrix::from_rows(&vectors),
        explained_variance: eigenvalues,
        total_variance,
        rank_deficient,
    })
}

/// Sample covariance with the `n - 1` denominator.
fn covariance(data: &Matrix, mean: &[f64]) -> DMatrix<f64> {
    let (n, dim) = (data.nrows(), data.ncols());
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut centered = vec![0.0; dim];
    for row in data.iter_rows() {
        for ((c, x), m) in centered.iter_mut().zip(row).zip(mean) {
            *c = x - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..dim {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}

fn exact_eigen(cov: DMatrix<f64>, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    // stable sort keeps index order among equal eigenvalues
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    order
        .into_iter()
        .take(k)
        .map(|i| {
            (
                eig.eigenvalues[i],
                eig.eigenvectors.column(i).iter().copied().collect(),
            )
        })
        .unzip()
}

/// Power iteration with deflation, re-orthogonalizing against the
/// components already found.
fn power_eigen(mut cov: DMatrix<f64>, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dim = cov.nrows();
    let mut values = Vec::with_capacity(k);
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    for c in 0..k {
        let mut v: Vec<f64> = (0..dim)
            .map(|i| 1.0 / ((i + 1 + c) as f64) + if i == c % dim { 1.0 } else { 0.0 })
            .collect();
        orthogonalize(&mut v, &vectors);
        if normalize_in_place(&mut v) == 0.0 {
            v = unit_completion(dim, &vectors);
        }
        for _ in 0..POWER_MAX_ITERATIONS {
            let mut next = mat_vec(&cov, &v);
            orthogonalize(&mut next, &vectors);
            if normalize_in_place(&mut next) < 1e-300 {
                // no variance left in the complement; keep an orthonormal direction
                break;
            }
            let diff = next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            v = next;
            if diff < POWER_TOLERANCE {
                break;
            }
        }
        let cv = mat_vec(&cov, &v);
        let lambda = dot(&v, &cv);
        for i in 0..dim {
            for j in 0..dim {
                cov[(i, j)] -= lambda * v[i] * v[j];
            }
        }
        values.push(lambda);
        vectors.push(v);
    }
    (values, vectors)
}

fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (m * DVector::from_column_slice(v)).iter().copied().collect()
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, bi)| *x -= p * bi);
    }
}

fn unit_completion(dim: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    for axis in 0..dim {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        orthogonalize(&mut v, basis);
        if normalize_in_place(&mut v) > 1e-6 {
            return v;
        }
    }
    unreachable!("basis cannot span the whole space when k <= dim")
}

/// Flips `v` so its first non-negligible coordinate is positive.
fn apply_sign_convention(v: &mut [f64]) {
    if let Some(&first) = v.iter().find(|x| x.abs() > 1e-10) {
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Whether a shared-space row came from the vocabulary or the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Token,
    Instance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRef {
    pub index: usize,
    pub kind: ItemKind,
    pub id: String,
}

#[derive(Serialize, Deserialize)]
struct SharedSpaceRepr {
    items: Vec<ItemRef>,
    reduced_dim: usize,
    vectors: Vec<f64>,
    pca_model: PcaModel,
}

/// Tokens and instances projected into one reduced, unit-normalized space.
/// Tokens occupy the first rows, instances follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "SharedSpaceRepr", try_from = "SharedSpaceRepr")]
pub struct SharedSpace {
    items: Vec<ItemRef>,
    reduced_dim: usize,
    vectors: Vec<f64>,
    pca_model: PcaModel,
    tokens_by_id: HashMap<String, usize>,
    instances_by_id: HashMap<String, usize>,
}

impl From<SharedSpace> for SharedSpaceRepr {
    fn from(s: SharedSpace) -> Self {
        SharedSpaceRepr {
            items: s.items,
            reduced_dim: s.reduced_dim,
            vectors: s.vectors,
            pca_model: s.pca_model,
        }
    }
}

impl TryFrom<SharedSpaceRepr> for SharedSpace {
    type Error = String;

    fn try_from(r: SharedSpaceRepr) -> std::result::Result<Self, String> {
        if r.vectors.len() != r.items.len() * r.reduced_dim {
            return Err("vector payload does not match item count".into());
        }
        if r.pca_model.reduced_dim() != r.reduced_dim {
            return Err("pca model and space disagree on reduced_dim".into());
        }
        SharedSpace::assemble(r.items, r.reduced_dim, r.vectors, r.pca_model)
    }
}

impl SharedSpace {
    /// Builds a space directly from already reduced rows, normalizing each.
    /// The attached PCA model is the identity with a zero mean.
    pub fn from_reduced(
        token_ids: &[String],
        instance_ids: &[String],
        dim: usize,
        rows: &[f64],
    ) -> Result<Self> {
        let n = token_ids.len() + instance_ids.len();
        if rows.len() != n * dim {
            return Err(GeometryError::DimensionMismatch {
                expected: n * dim,
                actual: rows.len(),
            });
        }
        let mut vectors = rows.to_vec();
        let mut items = Vec::with_capacity(n);
        let ids = token_ids
            .iter()
            .map(|id| (ItemKind::Token, id))
            .chain(instance_ids.iter().map(|id| (ItemKind::Instance, id)));
        for (index, (kind, id)) in ids.enumerate() {
            if normalize_in_place(&mut vectors[index * dim..(index + 1) * dim]) < DEGENERATE_NORM {
                return Err(GeometryError::DegenerateRow { id: id.clone() });
            }
            items.push(ItemRef {
                index,
                kind,
                id: id.clone(),
            });
        }
        let mut identity = vec![0.0; dim * dim];
        (0..dim).for_each(|i| identity[i * dim + i] = 1.0);
        let pca_model = PcaModel {
            mean: vec![0.0; dim],
            components: Matrix::new(dim, dim, identity),
            explained_variance: vec![0.0; dim],
            total_variance: 0.0,
            rank_deficient: false,
        };
        Self::assemble(items, dim, vectors, pca_model).map_err(GeometryError::DuplicateId)
    }

    fn assemble(
        items: Vec<ItemRef>,
        reduced_dim: usize,
        vectors: Vec<f64>,
        pca_model: PcaModel,
    ) -> std::result::Result<Self, String> {
        let mut tokens_by_id = HashMap::new();
        let mut instances_by_id = HashMap::new();
        for (i, item) in items.iter().enumerate() {
            if item.index != i {
                return Err(format!("item {i} carries index {}", item.index));
            }
            let map = match item.kind {
                ItemKind::Token => &mut tokens_by_id,
                ItemKind::Instance => &mut instances_by_id,
            };
            if map.insert(item.id.clone(), i).is_some() {
                return Err(format!("duplicate {:?} id {:?}", item.kind, item.id));
            }
        }
        Ok(Self {
            items,
            reduced_dim,
            vectors,
            pca_model,
            tokens_by_id,
            instances_by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn reduced_dim(&self) -> usize {
        self.reduced_dim
    }

    pub fn items(&self) -> &[ItemRef] {
        &self.items
    }

    pub fn item(&self, index: usize) -> &ItemRef {
        &self.items[index]
    }

    pub fn kind(&self, index: usize) -> ItemKind {
        self.items[index].kind
    }

    pub fn vector(&self, index: usize) -> &[f64] {
        &self.vectors[index * self.reduced_dim..(index + 1) * self.reduced_dim]
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn pca_model(&self) -> &PcaModel {
        &self.pca_model
    }

    pub fn token_index(&self, id: &str) -> Option<usize> {
        self.tokens_by_id.get(id).copied()
    }

    pub fn instance_index(&self, id: &str) -> Option<usize> {
        self.instances_by_id.get(id).copied()
    }

    pub fn instance_count(&self) -> usize {
        self.instances_by_id.len()
    }

    pub fn token_count(&self) -> usize {
        self.tokens_by_id.len()
    }

    /// Projects and normalizes a raw embedding with this space's PCA model.
    pub fn embed(&self, raw: &[f32]) -> Result<Vec<f64>> {
        let row: Vec<f64> = raw.iter().map(|&x| x as f64).collect();
        let mut z = self.pca_model.transform_row(&row)?;
        if normalize_in_place(&mut z) < DEGENERATE_NORM {
            return Err(GeometryError::ZeroNormVector);
        }
        Ok(z)
    }
}

/// Fits PCA on the stacked (tokens, then instances) matrix, projects every
/// row and normalizes it to unit length.
pub fn build_shared_space(
    vocab: &EmbeddingSet,
    instances: &EmbeddingSet,
    reduced_dim: usize,
) -> Result<SharedSpace> {
    build_shared_space_with(vocab, instances, reduced_dim, PcaSolver::Auto)
}

pub fn build_shared_space_with(
    vocab: &EmbeddingSet,
    instances: &EmbeddingSet,
    reduced_dim: usize,
    solver: PcaSolver,
) -> Result<SharedSpace> {
    for (set, expected) in [(vocab, EmbeddingKind::Vocab), (instances, EmbeddingKind::Instance)] {
        if set.kind() != expected {
            return Err(GeometryError::WrongKind {
                expected,
                actual: set.kind(),
            });
        }
    }
    if vocab.dim() != instances.dim() {
        return Err(GeometryError::DimensionMismatch {
            expected: vocab.dim(),
            actual: instances.dim(),
        });
    }
    let dim = vocab.dim();
    let count = vocab.count() + instances.count();
    let stacked = Matrix::new(
        count,
        dim,
        vocab
            .matrix()
            .iter()
            .chain(instances.matrix())
            .map(|&x| x as f64)
            .collect(),
    );
    let pca_model = fit_pca_with(&stacked, reduced_dim, solver)?;
    let reduced = pca_model.transform(&stacked)?;

    let mut items = Vec::with_capacity(count);
    let mut vectors = Vec::with_capacity(count * reduced_dim);
    let sources = vocab
        .ids()
        .iter()
        .map(|id| (ItemKind::Token, id))
        .chain(instances.ids().iter().map(|id| (ItemKind::Instance, id)));
    for (index, ((kind, id), row)) in sources.zip(reduced.iter_rows()).enumerate() {
        let mut v = row.to_vec();
        if normalize_in_place(&mut v) < DEGENERATE_NORM {
            return Err(GeometryError::DegenerateRow { id: id.clone() });
        }
        vectors.extend_from_slice(&v);
        items.push(ItemRef {
            index,
            kind,
            id: id.clone(),
        });
    }
    // ids are unique within each set, so (kind, id) is unique here
    Ok(SharedSpace::assemble(items, reduced_dim, vectors, pca_model).expect("unique item ids"))
}
