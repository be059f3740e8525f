//! Sessions and their append-only on-disk logs.
//!
//! Each session lives in `<root>/<session id>/`. Its `log.jsonl` holds one
//! event per line and is replayed on startup, so a restarted service sees
//! the same chat history and traces.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use tracing::warn;

use super::engine::WorkflowTrace;
use super::ServiceError;
use crate::controller::{ChatSession, Role};
use crate::taskgraph::ArgKind;

const LOG_FILE: &str = "log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum LogEvent {
    Turn { role: Role, text: String },
    Resource { name: String, kind: ArgKind },
    Trace { trace: Box<WorkflowTrace> },
}

#[derive(Debug)]
pub struct SessionRecord {
    pub chat: ChatSession,
    pub traces: Vec<WorkflowTrace>,
    pub dir: PathBuf,
}

impl SessionRecord {
    fn apply(&mut self, event: LogEvent) {
        match event {
            LogEvent::Turn { role, text } => self.chat.push(role, text),
            LogEvent::Resource { name, kind } => self.chat.register_resource(name, kind),
            LogEvent::Trace { trace } => self.traces.push(*trace),
        }
    }

    /// Applies `event` in memory and appends it to the session log.
    pub fn record(&mut self, event: LogEvent) -> Result<(), ServiceError> {
        let line = serde_json::to_string(&event).map_err(|e| ServiceError::Internal(e.to_string()))?;
        let path = self.dir.join(LOG_FILE);
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| ServiceError::Storage(format!("{}: {e}", path.display())))?;
        writeln!(f, "{line}").map_err(|e| ServiceError::Storage(format!("{}: {e}", path.display())))?;
        self.apply(event);
        Ok(())
    }
}

pub type SessionHandle = Arc<Mutex<SessionRecord>>;

/// Index of all sessions under one artifacts root. Each session is behind
/// its own async mutex, which serializes requests within that session.
#[derive(Debug)]
pub struct SessionStore {
    root: PathBuf,
    sessions: RwLock<BTreeMap<String, SessionHandle>>,
    next_id: AtomicU64,
}

fn parse_id(name: &str) -> Option<u64> {
    name.strip_prefix('s')
        .filter(|d| d.len() >= 6)
        .and_then(|d| d.parse().ok())
}

impl SessionStore {
    /// Opens `root`, replaying any sessions already stored there.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| ServiceError::Storage(format!("{}: {e}", root.display())))?;
        let mut sessions = BTreeMap::new();
        let mut max_id = 0;
        let entries = std::fs::read_dir(&root).map_err(|e| ServiceError::Storage(e.to_string()))?;
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(n) = parse_id(&name) else { continue };
            if !entry.path().is_dir() {
                continue;
            }
            max_id = max_id.max(n);
            let record = Self::replay(&name, &entry.path())?;
            sessions.insert(name, Arc::new(Mutex::new(record)));
        }
        Ok(Self {
            root,
            sessions: RwLock::new(sessions),
            next_id: AtomicU64::new(max_id + 1),
        })
    }

    fn replay(id: &str, dir: &Path) -> Result<SessionRecord, ServiceError> {
        let mut record = SessionRecord {
            chat: ChatSession::new(id),
            traces: Vec::new(),
            dir: dir.to_path_buf(),
        };
        let path = dir.join(LOG_FILE);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(record),
            Err(e) => return Err(ServiceError::Storage(format!("{}: {e}", path.display()))),
        };
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<LogEvent>(line) {
                Ok(ev) => record.apply(ev),
                // A torn final line from a crash is dropped, anything else is fatal.
                Err(e) if i + 1 == text.lines().count() => {
                    warn!(session = id, error = %e, "ignoring truncated last log line")
                }
                Err(e) => return Err(ServiceError::Storage(format!("{}:{}: {e}", path.display(), i + 1))),
            }
        }
        Ok(record)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn create(&self) -> Result<String, ServiceError> {
        let id = format!("s{:06}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let dir = self.root.join(&id);
        std::fs::create_dir_all(&dir).map_err(|e| ServiceError::Storage(format!("{}: {e}", dir.display())))?;
        let record = SessionRecord {
            chat: ChatSession::new(&id),
            traces: Vec::new(),
            dir,
        };
        self.sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id.clone(), Arc::new(Mutex::new(record)));
        Ok(id)
    }

    pub fn list(&self) -> Vec<String> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .keys()
            .cloned()
            .collect()
    }

    pub fn get(&self, id: &str) -> Result<SessionHandle, ServiceError> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }
}
