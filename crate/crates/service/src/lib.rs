//! JSON-over-HTTP facade around one live annotation session.
//!
//! `POST /api/next` proposes an instance and marks it pending, `POST /api/label`
//! answers it. Both are appended to a JSONL event log before the response is
//! sent, and the log is replayed when the service restarts.

pub mod annotator;
pub mod http;

pub use annotator::{
    Annotator, AnnotatorConfig, ClusterSummary, NextItem, PendingItem, ServiceError, WireState, WireVerbalizer,
};
pub use http::{bind, router, serve, AppState, LabelRequest, DEFAULT_PORT};
