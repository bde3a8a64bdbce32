//! Embedding interchange format (`.cseb`) and the JSONL sidecars.
//!
//! Layout of a `.cseb` file:
//!
//! | bytes            | content                                         |
//! |------------------|-------------------------------------------------|
//! | `0..4`           | ASCII `CSEB`                                    |
//! | `4..8`           | format version, `u32` little-endian (`1`)       |
//! | `8..16`          | header byte length `H`, `u64` little-endian     |
//! | `16..16+H`       | UTF-8 JSON `{"kind","count","dim","ids"}`       |
//! | `16+H..`         | `count * dim` row-major `f32` little-endian     |
//!
//! Instance texts and gold labels live in newline-delimited JSON sidecars
//! keyed by id so the numeric payload stays fixed-stride.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"CSEB";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum EmbedIoError {
    #[error("{path}: not a .cseb file (bad magic bytes)")]
    MagicMismatch { path: PathBuf },
    #[error("{path}: unsupported format version {version}")]
    VersionUnsupported { path: PathBuf, version: u32 },
    #[error("malformed header: {0}")]
    HeaderMalformed(String),
    #[error("payload is {actual} bytes, expected {expected} (count x dim x 4)")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("non-finite value in row {row}")]
    NonFiniteValue { row: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EmbedIoError>;

/// Which population a set of embeddings belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    /// Pre-softmax vocabulary token embeddings.
    Vocab,
    /// Hidden states at the `[MASK]` position of template-wrapped instances.
    Instance,
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbeddingKind::Vocab => f.write_str("vocab"),
            EmbeddingKind::Instance => f.write_str("instance"),
        }
    }
}

/// A validated matrix of embeddings with one string id per row.
///
/// Construction goes through [`EmbeddingSet::new`], which enforces the
/// invariants: ids are pairwise distinct, the matrix holds exactly
/// `count * dim` values and every value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    kind: EmbeddingKind,
    dim: usize,
    ids: Vec<String>,
    matrix: Vec<f32>,
}

impl EmbeddingSet {
    pub fn new(
        kind: EmbeddingKind,
        dim: usize,
        ids: Vec<String>,
        matrix: Vec<f32>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(EmbedIoError::HeaderMalformed("dim must be positive".into()));
        }
        let expected = ids.len() as u64 * dim as u64;
        if matrix.len() as u64 != expected {
            return Err(EmbedIoError::SizeMismatch {
                expected: expected * 4,
                actual: matrix.len() as u64 * 4,
            });
        }
        check_unique(ids.iter().map(String::as_str))?;
        if let Some(pos) = matrix.iter().position(|v| !v.is_finite()) {
            return Err(EmbedIoError::NonFiniteValue { row: pos / dim });
        }
        Ok(Self {
            kind,
            dim,
            ids,
            matrix,
        })
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.matrix[index * self.dim..(index + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.matrix.chunks_exact(self.dim)
    }

    /// Returns a copy with every value multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> Result<Self> {
        Self::new(
            self.kind,
            self.dim,
            self.ids.clone(),
            self.matrix.iter().map(|v| v * factor).collect(),
        )
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: EmbeddingKind,
    count: u64,
    dim: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ids: Option<Vec<String>>,
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(EmbedIoError::DuplicateId(id.to_string()));
        }
    }
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmbedIoError + '_ {
    move |source| EmbedIoError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

/// Encodes a set into the `.cseb` byte layout.
pub fn encode_embedding_set(set: &EmbeddingSet) -> Vec<u8> {
    let header = Header {
        kind: set.kind,
        count: set.count() as u64,
        dim: set.dim as u64,
        ids: Some(set.ids.clone()),
    };
    let header = serde_json::to_vec(&header).expect("header serialization is infallible");
    let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + set.matrix.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in &set.matrix {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes `.cseb` bytes. `path` is only used for error messages.
///
/// A header without `ids` gets the row indices `"0"`, `"1"`, ... as ids.
pub fn decode_embedding_set(bytes: &[u8], path: &Path) -> Result<EmbeddingSet> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(EmbedIoError::MagicMismatch {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(EmbedIoError::HeaderMalformed(
            "file truncated before header length".into(),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(EmbedIoError::VersionUnsupported {
            path: path.to_path_buf(),
            version,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let available = (bytes.len() - PREAMBLE_LEN) as u64;
    if header_len > available {
        return Err(EmbedIoError::HeaderMalformed(format!(
            "header length {header_len} exceeds remaining {available} bytes"
        )));
    }
    let header_end = PREAMBLE_LEN + header_len as usize;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end])
        .map_err(|e| EmbedIoError::HeaderMalformed(e.to_string()))?;
    if header.dim == 0 {
        return Err(EmbedIoError::HeaderMalformed("dim must be positive".into()));
    }
    let ids = match header.ids {
        Some(ids) => {
            if ids.len() as u64 != header.count {
                return Err(EmbedIoError::HeaderMalformed(format!(
                    "count is {} but {} ids are listed",
                    header.count,
                    ids.len()
                )));
            }
            ids
        }
        None => (0..header.count).map(|i| i.to_string()).collect(),
    };
    let payload = &bytes[header_end..];
    let expected = header
        .count
        .checked_mul(header.dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| EmbedIoError::HeaderMalformed("count x dim overflows".into()))?;
    if payload.len() as u64 != expected {
        return Err(EmbedIoError::SizeMismatch {
            expected,
            actual: payload.len() as u64,
        });
    }
    let matrix = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingSet::new(header.kind, header.dim as usize, ids, matrix)
}

pub fn load_embedding_set(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_embedding_set(&bytes, path)
}

pub fn write_embedding_set(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_embedding_set(set)).map_err(io_err(path))
}

/// Raw text of one unlabeled instance, before the template is applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceText {
    pub id: String,
    pub text: String,
}

/// A gold (or oracle) label for one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub id: String,
    pub label: String,
}

fn load_jsonl<T, F>(path: &Path, id_of: F) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    F: Fn(&T) -> &str,
{
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|e| EmbedIoError::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        let id = id_of(&item);
        if id.is_empty() {
            return Err(EmbedIoError::MalformedLine {
                line: line_no,
                message: "empty id".into(),
            });
        }
        if !seen.insert(id.to_string()) {
            return Err(EmbedIoError::DuplicateId(id.to_string()));
        }
        out.push(item);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut buf = String::new();
    for item in items {
        buf.push_str(&serde_json::to_string(item).expect("jsonl serialization is infallible"));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn load_instance_texts(path: impl AsRef<Path>) -> Result<Vec<InstanceText>> {
    load_jsonl(path.as_ref(), |t: &InstanceText| &t.id)
}

pub fn write_instance_texts(texts: &[InstanceText], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(texts, path.as_ref())
}

pub fn load_gold_labels(path: impl AsRef<Path>) -> Result<Vec<GoldLabel>> {
    load_jsonl(path.as_ref(), |g: &GoldLabel| &g.id)
}

pub fn write_gold_labels(labels: &[GoldLabel], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(labels, path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw_file(header: &str, payload_len: usize) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend(std::iter::repeat_n(0u8, payload_len));
        out
    }

    #[test]
    fn smallest_well_formed_file() {
        let bytes = raw_file(r#"{"kind":"vocab","count":2,"dim":3}"#, 24);
        let set = decode_embedding_set(&bytes, Path::new("t.cseb")).unwrap();
        assert_eq!(set.count(), 2);
        assert_eq!(set.dim(), 3);
        assert_eq!(set.ids(), ["0", "1"]);
    }

    #[test]
    fn short_payload_is_size_mismatch() {
        let bytes = raw_file(r#"{"kind":"vocab","count":2,"dim":3}"#, 20);
        let err = decode_embedding_set(&bytes, Path::new("t.cseb")).unwrap_err();
        assert!(matches!(
            err,
            EmbedIoError::SizeMismatch {
                expected: 24,
                actual: 20
            }
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = raw_file(r#"{"kind":"vocab","count":0,"dim":3}"#, 0);
        bytes[4] = 2;
        assert!(matches!(
            decode_embedding_set(&bytes, Path::new("t")),
            Err(EmbedIoError::VersionUnsupported { version: 2, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            decode_embedding_set(&bytes, Path::new("t")),
            Err(EmbedIoError::MagicMismatch { .. })
        ));
    }

    #[test]
    fn malformed_headers() {
        for header in [
            r#"{"kind":"vocab","count":2"#,
            r#"{"kind":"vocab","dim":3}"#,
            r#"{"kind":"tokens","count":0,"dim":3}"#,
            r#"{"kind":"vocab","count":0,"dim":0}"#,
            r#"{"kind":"vocab","count":2,"dim":1,"ids":["a"]}"#,
        ] {
            let bytes = raw_file(header, 0);
            assert!(
                matches!(
                    decode_embedding_set(&bytes, Path::new("t")),
                    Err(EmbedIoError::HeaderMalformed(_))
                ),
                "{header}"
            );
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let bytes = raw_file(r#"{"kind":"vocab","count":2,"dim":1,"ids":["a","a"]}"#, 8);
        assert!(matches!(
            decode_embedding_set(&bytes, Path::new("t")),
            Err(EmbedIoError::DuplicateId(id)) if id == "a"
        ));
    }

    #[test]
    fn non_finite_reports_first_row() {
        let err = EmbeddingSet::new(
            EmbeddingKind::Instance,
            2,
            vec!["a".into(), "b".into(), "c".into()],
            vec![0.0, 1.0, 2.0, 3.0, f32::NAN, f32::INFINITY],
        )
        .unwrap_err();
        assert!(matches!(err, EmbedIoError::NonFiniteValue { row: 2 }));

        // A payload decoded from disk goes through the same check.
        let mut bytes = raw_file(r#"{"kind":"vocab","count":2,"dim":1}"#, 0);
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&f32::NEG_INFINITY.to_le_bytes());
        assert!(matches!(
            decode_embedding_set(&bytes, Path::new("t")),
            Err(EmbedIoError::NonFiniteValue { row: 1 })
        ));
    }

    #[test]
    fn empty_set_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.cseb");
        let set = EmbeddingSet::new(EmbeddingKind::Vocab, 4, vec![], vec![]).unwrap();
        write_embedding_set(&set, &path).unwrap();
        let back = load_embedding_set(&path).unwrap();
        assert_eq!(back.count(), 0);
        assert_eq!(back.dim(), 4);
    }

    #[test]
    fn missing_file_is_io_failure() {
        assert!(matches!(
            load_embedding_set("/nonexistent/x.cseb"),
            Err(EmbedIoError::IoFailure { .. })
        ));
    }

    #[test]
    fn instance_texts_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        fs::write(
            &path,
            "{\"id\":\"i0\",\"text\":\"great movie\"}\n{\"id\":\"i1\",\"text\":\"\"}\n",
        )
        .unwrap();
        let texts = load_instance_texts(&path).unwrap();
        assert_eq!(texts.len(), 2);
        assert_eq!(texts[0].id, "i0");
        assert_eq!(texts[1].text, "");
    }

    #[test]
    fn instance_texts_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        fs::write(
            &path,
            "{\"id\":\"i1\",\"text\":\"a\"}\n{\"id\":\"i1\",\"text\":\"b\"}\n",
        )
        .unwrap();
        assert!(matches!(
            load_instance_texts(&path),
            Err(EmbedIoError::DuplicateId(id)) if id == "i1"
        ));

        fs::write(&path, "{\"id\":\"i1\",\"text\":\"a\"}\nnot json\n").unwrap();
        assert!(matches!(
            load_instance_texts(&path),
            Err(EmbedIoError::MalformedLine { line: 2, .. })
        ));

        fs::write(&path, "").unwrap();
        assert!(load_instance_texts(&path).unwrap().is_empty());
    }

    fn arb_set() -> impl Strategy<Value = EmbeddingSet> {
        (1usize..6, 0usize..8, any::<bool>()).prop_flat_map(|(dim, count, vocab)| {
            prop::collection::vec(
                prop::num::f32::NORMAL | prop::num::f32::SUBNORMAL | prop::num::f32::ZERO,
                dim * count,
            )
            .prop_map(move |matrix| {
                let kind = if vocab {
                    EmbeddingKind::Vocab
                } else {
                    EmbeddingKind::Instance
                };
                let ids = (0..count).map(|i| format!("tok-{i}\u{e9}")).collect();
                EmbeddingSet::new(kind, dim, ids, matrix).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_identical(set in arb_set()) {
            let bytes = encode_embedding_set(&set);
            let back = decode_embedding_set(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back.ids(), set.ids());
            prop_assert_eq!(back.kind(), set.kind());
            let a: Vec<u32> = set.matrix().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.matrix().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(encode_embedding_set(&back), bytes);
        }

        #[test]
        fn wrong_payload_length_always_rejected(set in arb_set(), cut in 1usize..4) {
            let mut bytes = encode_embedding_set(&set);
            if set.count() > 0 {
                bytes.truncate(bytes.len() - cut);
            } else {
                bytes.extend(std::iter::repeat_n(0u8, cut));
            }
            let is_size_mismatch = matches!(
                decode_embedding_set(&bytes, Path::new("mem")),
                Err(EmbedIoError::SizeMismatch { .. })
            );
            prop_assert!(is_size_mismatch);
        }
    }
}
