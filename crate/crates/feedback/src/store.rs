//! Session state behind an append-only journal.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rime_core::reward::Label;
use serde::{Deserialize, Serialize};

/// File name of the journal inside the data directory.
pub const JOURNAL: &str = "labels.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("no session is open")]
    NoSession,
    #[error("query {0} is not part of the open session")]
    UnknownQuery(u64),
    #[error("query {0} already has a label")]
    Duplicate(u64),
    #[error("label must be one of left, right, equal; got {0:?}")]
    BadLabel(String),
    #[error("session {open} is still open, cannot open session {requested}")]
    SessionBusy { open: u64, requested: u64 },
    #[error("journal line {line}: {source}")]
    Corrupt { line: usize, source: serde_json::Error },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvInfo {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
}

/// What an annotator sees of one segment: no rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// Planar positions for drawing.
    pub positions: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryItem {
    pub id: u64,
    pub seg0: Trajectory,
    pub seg1: Trajectory,
}

/// Pending queries of the open session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBatch {
    pub open: bool,
    pub session: Option<u64>,
    pub quota: usize,
    pub labeled: usize,
    pub created_at: Option<u64>,
    pub env: Option<EnvInfo>,
    pub queries: Vec<QueryItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub query_id: u64,
    pub label: String,
    #[serde(default)]
    pub annotator: String,
    #[serde(default)]
    pub submitted_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAck {
    pub query_id: u64,
    pub label: Label,
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub session: Option<u64>,
    pub quota: usize,
    pub labeled: usize,
    pub remaining: usize,
    pub pending_queries: usize,
    pub sessions_completed: u64,
    pub total_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub label: Label,
    pub annotator: String,
    pub submitted_at: u64,
}

/// One journal line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Open {
        session: u64,
        quota: usize,
        created_at: u64,
        env: EnvInfo,
        queries: Vec<QueryItem>,
    },
    Label {
        session: u64,
        query_id: u64,
        #[serde(flatten)]
        record: LabelRecord,
    },
    Close {
        session: u64,
    },
}

#[derive(Debug, Clone)]
struct OpenSession {
    session: u64,
    quota: usize,
    created_at: u64,
    env: EnvInfo,
    queries: Vec<QueryItem>,
    labels: BTreeMap<u64, LabelRecord>,
}

impl OpenSession {
    fn complete(&self) -> bool {
        self.labels.len() >= self.quota
    }
}

#[derive(Debug, Clone, Default)]
struct State {
    open: Option<OpenSession>,
    sessions_completed: u64,
    total_labels: usize,
}

impl State {
    fn apply(&mut self, event: &Event) {
        match event {
            Event::Open {
                session,
                quota,
                created_at,
                env,
                queries,
            } => {
                self.open = Some(OpenSession {
                    session: *session,
                    quota: *quota,
                    created_at: *created_at,
                    env: env.clone(),
                    queries: queries.clone(),
                    labels: BTreeMap::new(),
                });
            }
            Event::Label {
                session,
                query_id,
                record,
            } => {
                if let Some(open) = self.open.as_mut().filter(|o| o.session == *session) {
                    if open.labels.insert(*query_id, record.clone()).is_none() {
                        self.total_labels += 1;
                    }
                }
            }
            Event::Close { session } => {
                if self.open.as_ref().is_some_and(|o| o.session == *session) {
                    self.open = None;
                    self.sessions_completed += 1;
                }
            }
        }
    }
}

struct Inner {
    state: State,
    journal: File,
}

impl Inner {
    fn append(&mut self, event: Event) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(&event)?;
        line.push('\n');
        self.journal.write_all(line.as_bytes())?;
        self.journal.sync_data()?;
        self.state.apply(&event);
        Ok(())
    }
}

struct Shared {
    inner: Mutex<Inner>,
    changed: Condvar,
    dir: PathBuf,
}

/// Cloneable handle shared by the HTTP handlers and the trainer bridge.
#[derive(Clone)]
pub struct Store {
    shared: Arc<Shared>,
}

pub fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Reads a journal, ignoring a torn final line left by a crash mid-write.
pub fn read_journal(path: &Path) -> Result<Vec<Event>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
    let mut events = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(e) => events.push(e),
            Err(e) if i + 1 == lines.len() => {
                log::warn!("dropping torn final journal line: {e}");
            }
            Err(source) => return Err(StoreError::Corrupt { line: i + 1, source }),
        }
    }
    Ok(events)
}

impl Store {
    /// Opens (creating if needed) `dir` and replays its journal.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(JOURNAL);
        let mut state = State::default();
        let events = read_journal(&path)?;
        for e in &events {
            state.apply(e);
        }
        // Rewrite without a torn tail so later appends start on a fresh line.
        let mut clean = String::new();
        for e in &events {
            clean.push_str(&serde_json::to_string(e)?);
            clean.push('\n');
        }
        let tmp = dir.join(format!("{JOURNAL}.tmp"));
        std::fs::write(&tmp, clean)?;
        std::fs::rename(&tmp, &path)?;
        let journal = OpenOptions::new().append(true).open(&path)?;
        Ok(Self {
            shared: Arc::new(Shared {
                inner: Mutex::new(Inner { state, journal }),
                changed: Condvar::new(),
                dir,
            }),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.shared.dir
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.shared.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Opens `session`, or resumes it when the journal already has it open.
    pub fn open_session(
        &self,
        session: u64,
        quota: usize,
        env: EnvInfo,
        queries: Vec<QueryItem>,
    ) -> Result<(), StoreError> {
        let mut inner = self.lock();
        if let Some(open) = &inner.state.open {
            if open.session == session {
                log::info!("resuming session {session} with {} labels", open.labels.len());
                return Ok(());
            }
            return Err(StoreError::SessionBusy {
                open: open.session,
                requested: session,
            });
        }
        inner.append(Event::Open {
            session,
            quota: quota.min(queries.len()),
            created_at: now_millis(),
            env,
            queries,
        })?;
        drop(inner);
        self.shared.changed.notify_all();
        Ok(())
    }

    /// Unlabeled queries of the open session in random order.
    pub fn current(&self) -> QueryBatch {
        let inner = self.lock();
        match &inner.state.open {
            None => QueryBatch {
                open: false,
                session: None,
                quota: 0,
                labeled: 0,
                created_at: None,
                env: None,
                queries: Vec::new(),
            },
            Some(o) => {
                let mut queries: Vec<QueryItem> = o
                    .queries
                    .iter()
                    .filter(|q| !o.labels.contains_key(&q.id))
                    .cloned()
                    .collect();
                queries.shuffle(&mut rand::rng());
                QueryBatch {
                    open: true,
                    session: Some(o.session),
                    quota: o.quota,
                    labeled: o.labels.len(),
                    created_at: Some(o.created_at),
                    env: Some(o.env.clone()),
                    queries,
                }
            }
        }
    }

    pub fn submit(&self, sub: &LabelSubmission) -> Result<LabelAck, StoreError> {
        let label = Label::parse(&sub.label).ok_or_else(|| StoreError::BadLabel(sub.label.clone()))?;
        let mut inner = self.lock();
        let open = inner.state.open.as_ref().ok_or(StoreError::NoSession)?;
        if !open.queries.iter().any(|q| q.id == sub.query_id) {
            return Err(StoreError::UnknownQuery(sub.query_id));
        }
        if open.labels.contains_key(&sub.query_id) {
            return Err(StoreError::Duplicate(sub.query_id));
        }
        let session = open.session;
        inner.append(Event::Label {
            session,
            query_id: sub.query_id,
            record: LabelRecord {
                label,
                annotator: sub.annotator.clone(),
                submitted_at: sub.submitted_at.unwrap_or_else(now_millis),
            },
        })?;
        let open = inner.state.open.as_ref().expect("still open");
        let remaining = open.quota.saturating_sub(open.labels.len());
        drop(inner);
        self.shared.changed.notify_all();
        Ok(LabelAck {
            query_id: sub.query_id,
            label,
            remaining,
        })
    }

    pub fn progress(&self) -> Progress {
        let inner = self.lock();
        let s = &inner.state;
        let (session, quota, labeled, pending) = match &s.open {
            Some(o) => (
                Some(o.session),
                o.quota,
                o.labels.len(),
                o.queries.len() - o.labels.len(),
            ),
            None => (None, 0, 0, 0),
        };
        Progress {
            session,
            quota,
            labeled,
            remaining: quota.saturating_sub(labeled),
            pending_queries: pending,
            sessions_completed: s.sessions_completed,
            total_labels: s.total_labels,
        }
    }

    /// Blocks until `session` has its quota of labels, closes it and returns
    /// the labels in query order. `None` if `timeout` passes first.
    pub fn wait_complete(
        &self,
        session: u64,
        timeout: Option<Duration>,
    ) -> Result<Option<Vec<(u64, Label)>>, StoreError> {
        let deadline = timeout.map(|t| std::time::Instant::now() + t);
        let mut inner = self.lock();
        loop {
            match &inner.state.open {
                Some(o) if o.session == session => {
                    if o.complete() {
                        let labels: Vec<(u64, Label)> = o
                            .queries
                            .iter()
                            .filter_map(|q| o.labels.get(&q.id).map(|r| (q.id, r.label)))
                            .collect();
                        inner.append(Event::Close { session })?;
                        drop(inner);
                        self.shared.changed.notify_all();
                        return Ok(Some(labels));
                    }
                }
                _ => return Err(StoreError::NoSession),
            }
            inner = match deadline {
                None => self.shared.changed.wait(inner).unwrap_or_else(|p| p.into_inner()),
                Some(d) => {
                    let left = d.saturating_duration_since(std::time::Instant::now());
                    if left.is_zero() {
                        return Ok(None);
                    }
                    self.shared
                        .changed
                        .wait_timeout(inner, left)
                        .unwrap_or_else(|p| p.into_inner())
                        .0
                }
            };
        }
    }
}
