//! Comparison strategies sharing the session harness.
//!
//! [`Strategy::Random`] samples an unlabeled instance uniformly and assigns
//! no verbalizer token; it is evaluated with a fixed manual verbalizer list
//! instead. [`Strategy::RandomG`] picks an eligible cluster uniformly and then
//! follows the same instance and token policy as ColdSelect. Both draw from
//! the session's strategy stream, so a fixed seed reproduces the trace. The
//! selection logic itself lives in
//! [`Session::propose`](crate::selection::Session::propose).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::SharedSpace;
use crate::selection::{canonical_label, VerbalizerEntry, VerbalizerSet};

pub use crate::selection::Strategy;

#[derive(Debug, Error, PartialEq)]
pub enum ManualVerbalizerError {
    #[error("manual verbalizer token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("manual verbalizer class {0:?} is not in the label space")]
    UnknownClass(String),
    #[error("manual verbalizer token {0:?} listed twice")]
    DuplicateToken(String),
    #[error("malformed manual verbalizer file: {0}")]
    Malformed(String),
}

/// One line of a hand-written verbalizer file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManualVerbalizer {
    pub token_id: String,
    pub class: String,
}

/// Parses a JSON array of `{"token_id", "class"}` objects.
pub fn parse_manual_verbalizers(json: &str) -> Result<Vec<ManualVerbalizer>, ManualVerbalizerError> {
    serde_json::from_str(json).map_err(|e| ManualVerbalizerError::Malformed(e.to_string()))
}

/// Resolves manual entries against the shared space. Entries carry
/// `acquired_at = 0` since no session step produced them.
pub fn manual_verbalizers(
    entries: &[ManualVerbalizer],
    space: &SharedSpace,
    label_space: &[String],
) -> Result<VerbalizerSet, ManualVerbalizerError> {
    let mut set = VerbalizerSet::default();
    for entry in entries {
        let token_index = space
            .token_index(&entry.token_id)
            .ok_or_else(|| ManualVerbalizerError::UnknownToken(entry.token_id.clone()))?;
        let class = canonical_label(&entry.class);
        if !label_space.iter().any(|l| canonical_label(l) == class) {
            return Err(ManualVerbalizerError::UnknownClass(entry.class.clone()));
        }
        if set.contains_index(token_index) {
            return Err(ManualVerbalizerError::DuplicateToken(entry.token_id.clone()));
        }
        set.push(VerbalizerEntry {
            token_id: entry.token_id.clone(),
            token_index,
            class,
            acquired_at: 0,
        });
    }
    Ok(set)
}
