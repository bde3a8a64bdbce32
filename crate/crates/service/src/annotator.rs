//! Single-session state machine behind the HTTP layer, with a durable event log.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use coldselect::clustering::Clustering;
use coldselect::geometry::SharedSpace;
use coldselect::selection::{
    ClusterMetrics, Proposal, SelectionError, Session, SessionConfig, SessionExport,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("session is not ready")]
    NotReady,
    #[error("instance {0:?} is already pending")]
    PendingExists(String),
    #[error("labeling budget is exhausted")]
    BudgetExhausted,
    #[error("no unlabeled instance is left to select")]
    NothingLeft,
    #[error("instance {0:?} is not pending")]
    NotPending(String),
    #[error("class {0:?} is not in the label space")]
    UnknownClass(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("event log {path}: {source}")]
    Log {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("event log {path} line {line}: {message}")]
    Replay { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Selection(#[from] SelectionError),
}

impl ServiceError {
    /// Stable machine-readable name for error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotReady => "SessionNotReady",
            ServiceError::PendingExists(_) => "PendingExists",
            ServiceError::BudgetExhausted => "BudgetExhausted",
            ServiceError::NothingLeft => "NothingLeft",
            ServiceError::NotPending(_) => "NotPending",
            ServiceError::UnknownClass(_) => "UnknownClass",
            ServiceError::BadRequest(_) => "BadRequest",
            ServiceError::Log { .. } => "EventLogFailure",
            ServiceError::Replay { .. } => "ReplayFailure",
            ServiceError::Selection(_) => "Internal",
        }
    }
}

pub type Result<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingItem {
    pub instance_id: String,
    pub text: String,
    pub cluster_id: usize,
    /// Metrics of the chosen cluster; absent for the Random baseline.
    pub cluster_scores: Option<ClusterMetrics>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireVerbalizer {
    pub token_id: String,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_id: usize,
    pub size: usize,
    pub token_count: usize,
    pub labeled_count: usize,
    pub last_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireState {
    pub timestamp: usize,
    pub remaining_budget: usize,
    pub pending: Option<PendingItem>,
    pub labeled_count: usize,
    pub verbalizers: Vec<WireVerbalizer>,
    pub cluster_summary: Vec<ClusterSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextItem {
    pub instance_id: String,
    pub text: String,
    pub cluster_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum LogRecord {
    Open { config: SessionConfig },
    Next { instance_id: String },
    Label { instance_id: String, class: String },
}

struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    fn append(&mut self, record: &LogRecord) -> Result<()> {
        let mut line = serde_json::to_string(record).expect("log records serialize");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|source| ServiceError::Log {
                path: self.path.clone(),
                source,
            })
    }
}

/// Inputs for [`Annotator::open`].
#[derive(Clone)]
pub struct AnnotatorConfig {
    pub space: Arc<SharedSpace>,
    pub clustering: Arc<Clustering>,
    pub session: SessionConfig,
    /// Instance id to raw text; missing ids are shown with an empty text.
    pub texts: BTreeMap<String, String>,
    /// Append-only JSONL log, replayed on open when it already exists.
    pub event_log: Option<PathBuf>,
    /// Rewritten after every label.
    pub export_path: Option<PathBuf>,
}

pub struct Annotator {
    session: Session,
    pending: Option<Proposal>,
    texts: BTreeMap<String, String>,
    labeled_per_cluster: Vec<usize>,
    log: Option<EventLog>,
    export_path: Option<PathBuf>,
    version: u64,
}

impl Annotator {
    /// Starts a session, replaying `event_log` if it holds earlier steps.
    pub fn open(config: AnnotatorConfig) -> Result<Self> {
        let session = Session::new(config.space, config.clustering, config.session.clone())?;
        let clusters = session.clustering().clusters.len();
        let mut annotator = Self {
            session,
            pending: None,
            texts: config.texts,
            labeled_per_cluster: vec![0; clusters],
            log: None,
            export_path: config.export_path,
            version: 0,
        };
        if let Some(path) = config.event_log {
            let records = read_log(&path)?;
            let fresh = records.is_empty();
            for (line, record) in records.iter().enumerate() {
                annotator
                    .replay(line, record, &config.session)
                    .map_err(|message| ServiceError::Replay {
                        path: path.clone(),
                        line: line + 1,
                        message,
                    })?;
            }
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|source| ServiceError::Log {
                    path: path.clone(),
                    source,
                })?;
            let mut log = EventLog { path, file };
            if fresh {
                log.append(&LogRecord::Open {
                    config: config.session,
                })?;
            }
            annotator.log = Some(log);
        }
        Ok(annotator)
    }

    fn replay(&mut self, line: usize, record: &LogRecord, config: &SessionConfig) -> std::result::Result<(), String> {
        match record {
            LogRecord::Open { config: logged } if line == 0 => {
                if logged != config {
                    return Err("log was written for a different session config".into());
                }
                Ok(())
            }
            _ if line == 0 => Err("log does not start with an open record".into()),
            LogRecord::Open { .. } => Err("unexpected open record".into()),
            LogRecord::Next { instance_id } => {
                let item = self.next_item().map_err(|e| e.to_string())?;
                if &item.instance_id != instance_id {
                    return Err(format!("replay proposed {:?}, log has {instance_id:?}", item.instance_id));
                }
                Ok(())
            }
            LogRecord::Label { instance_id, class } => {
                self.label(instance_id, class).map(|_| ()).map_err(|e| e.to_string())
            }
        }
    }

    /// Bumped by every successful next or label, including replayed ones.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn next_item(&mut self) -> Result<NextItem> {
        if let Some(p) = &self.pending {
            return Err(ServiceError::PendingExists(p.instance_id.clone()));
        }
        if self.session.state().remaining_budget == 0 {
            return Err(ServiceError::BudgetExhausted);
        }
        let proposal = match self.session.propose() {
            Ok(p) => p,
            Err(SelectionError::NoEligibleCluster | SelectionError::NoUnlabeledInstance) => {
                return Err(ServiceError::NothingLeft)
            }
            Err(e) => return Err(e.into()),
        };
        if let Some(log) = &mut self.log {
            log.append(&LogRecord::Next {
                instance_id: proposal.instance_id.clone(),
            })?;
        }
        let item = NextItem {
            instance_id: proposal.instance_id.clone(),
            text: self.text_of(&proposal.instance_id),
            cluster_id: proposal.cluster_id,
        };
        self.pending = Some(proposal);
        self.version += 1;
        Ok(item)
    }

    pub fn label(&mut self, instance_id: &str, class: &str) -> Result<WireState> {
        let proposal = match &self.pending {
            Some(p) if p.instance_id == instance_id => p.clone(),
            _ => return Err(ServiceError::NotPending(instance_id.to_string())),
        };
        let class = self
            .session
            .config()
            .resolve_label(class)
            .map_err(|_| ServiceError::UnknownClass(class.to_string()))?;
        if let Some(log) = &mut self.log {
            log.append(&LogRecord::Label {
                instance_id: instance_id.to_string(),
                class: class.clone(),
            })?;
        }
        self.session.commit(&proposal, &class)?;
        self.labeled_per_cluster[proposal.cluster_id] += 1;
        self.pending = None;
        self.version += 1;
        if let Some(path) = &self.export_path {
            write_atomic(path, self.export().to_json().as_bytes()).map_err(|source| ServiceError::Log {
                path: path.clone(),
                source,
            })?;
        }
        Ok(self.wire_state())
    }

    pub fn wire_state(&self) -> WireState {
        let state = self.session.state();
        let clusters = &self.session.clustering().clusters;
        WireState {
            timestamp: state.timestamp,
            remaining_budget: state.remaining_budget,
            pending: self.pending.as_ref().map(|p| PendingItem {
                instance_id: p.instance_id.clone(),
                text: self.text_of(&p.instance_id),
                cluster_id: p.cluster_id,
                cluster_scores: p.scores,
            }),
            labeled_count: state.labels.len(),
            verbalizers: state
                .verbalizers
                .entries
                .iter()
                .map(|e| WireVerbalizer {
                    token_id: e.token_id.clone(),
                    class: e.class.clone(),
                })
                .collect(),
            cluster_summary: clusters
                .iter()
                .map(|c| ClusterSummary {
                    cluster_id: c.id,
                    size: c.len(),
                    token_count: c.token_count,
                    labeled_count: self.labeled_per_cluster[c.id],
                    last_score: state.cluster_metrics[c.id].score,
                })
                .collect(),
        }
    }

    pub fn export(&self) -> SessionExport {
        self.session.export()
    }

    fn text_of(&self, id: &str) -> String {
        self.texts.get(id).cloned().unwrap_or_default()
    }
}

/// Parses the log, dropping a torn final line left by a crash mid-write.
fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let log_err = |source| ServiceError::Log {
        path: path.to_path_buf(),
        source,
    };
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(log_err(e)),
    };
    let mut records = Vec::new();
    let mut kept_bytes = 0u64;
    let mut torn = false;
    for (n, line) in BufReader::new(file).split(b'\n').enumerate() {
        let line = line.map_err(log_err)?;
        match serde_json::from_slice::<LogRecord>(&line) {
            Ok(r) => {
                records.push(r);
                kept_bytes += line.len() as u64 + 1;
            }
            Err(e) => {
                let len = fs::metadata(path).map_err(log_err)?.len();
                if kept_bytes + line.len() as u64 == len {
                    torn = true;
                    break;
                }
                return Err(ServiceError::Replay {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: e.to_string(),
                });
            }
        }
    }
    if torn {
        OpenOptions::new()
            .write(true)
            .open(path)
            .and_then(|f| f.set_len(kept_bytes))
            .map_err(log_err)?;
    }
    Ok(records)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}
