//! Session records, event logs, and exports.
//!
//! A store lives in memory and optionally mirrors itself to a directory:
//! `sessions/<id>/{config.json,events.jsonl,summary.json}` plus
//! `master/events.jsonl`. Reopening the directory replays every log.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};

use crate::events::{replay, Event, ObservedSession, ReplayError, SessionStatus};
use crate::ids::SessionId;
use crate::master::MasterEvent;
use crate::orchestrator::SessionSnapshot;
use crate::space::{parse_config, ChoptConfig, ConfigError, Value};
use crate::tuners::TerminationReason;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("session {0} not found")]
    NotFound(SessionId),
    #[error("session {0} already exists")]
    Exists(SessionId),
    #[error("session {0} is terminated")]
    Terminated(SessionId),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt record {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unknown export format `{0}`")]
    UnknownFormat(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

impl FromStr for ExportFormat {
    type Err = StoreError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "jsonl" => Ok(ExportFormat::Jsonl),
            other => Err(StoreError::UnknownFormat(other.to_string())),
        }
    }
}

/// Compact description of a session for listings and `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: SessionId,
    pub status: SessionStatus,
    pub reason: Option<TerminationReason>,
    pub tuner: String,
    pub measure: String,
    pub created_at: u64,
    pub started_at: Option<u64>,
    pub terminated_at: Option<u64>,
    pub trials_created: u64,
    pub grant: u32,
    pub best_metric: Option<f64>,
    pub base_session: Option<SessionId>,
    /// Sequence numbers of the first and last logged events.
    pub events: Option<(u64, u64)>,
}

#[derive(Debug, Clone)]
pub struct SessionRecord {
    pub id: SessionId,
    pub config: ChoptConfig,
    pub created_at: u64,
    pub base_session: Option<SessionId>,
    pub events: Vec<Event>,
    pub state: ObservedSession,
}

impl SessionRecord {
    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot::from_observed(&self.state, &self.config.measure, self.config.order)
    }

    pub fn summary(&self) -> SessionSummary {
        let snap = self.snapshot();
        SessionSummary {
            id: self.id,
            status: self.state.status,
            reason: self.state.reason,
            tuner: self.config.tune.name().to_string(),
            measure: self.config.measure.clone(),
            created_at: self.created_at,
            started_at: self.state.started_at,
            terminated_at: self.state.terminated_at,
            trials_created: self.state.trials_created,
            grant: self.state.grant,
            best_metric: snap.best.and_then(|b| b.last_metric),
            base_session: self.base_session,
            events: self
                .events
                .first()
                .map(|f| (f.seq, self.events.last().expect("non-empty").seq)),
        }
    }

    /// The log as JSON lines, exactly as persisted.
    pub fn events_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_json_line());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Default)]
pub struct Store {
    root: Option<PathBuf>,
    sessions: BTreeMap<SessionId, SessionRecord>,
    master: Vec<MasterEvent>,
}

impl Store {
    pub fn in_memory() -> Self {
        Store::default()
    }

    /// Open (or create) a store directory, replaying any existing logs.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let sessions_dir = root.join("sessions");
        fs::create_dir_all(&sessions_dir).map_err(io_err(&sessions_dir))?;
        let master_dir = root.join("master");
        fs::create_dir_all(&master_dir).map_err(io_err(&master_dir))?;
        let mut store = Store {
            root: Some(root.clone()),
            ..Store::default()
        };
        let mut dirs: Vec<PathBuf> = fs::read_dir(&sessions_dir)
            .map_err(io_err(&sessions_dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for dir in dirs {
            let record = load_record(&dir)?;
            store.sessions.insert(record.id, record);
        }
        let master_log = master_dir.join("events.jsonl");
        if master_log.exists() {
            store.master = read_jsonl(&master_log)?;
        }
        Ok(store)
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    fn session_dir(&self, id: SessionId) -> Option<PathBuf> {
        self.root
            .as_ref()
            .map(|r| r.join("sessions").join(id.to_string()))
    }

    pub fn next_session_id(&self) -> SessionId {
        SessionId(self.sessions.keys().next_back().map_or(1, |id| id.0 + 1))
    }

    pub fn create_session(
        &mut self,
        id: SessionId,
        config: ChoptConfig,
        created_at: u64,
        base_session: Option<SessionId>,
    ) -> Result<(), StoreError> {
        if self.sessions.contains_key(&id) {
            return Err(StoreError::Exists(id));
        }
        let record = SessionRecord {
            id,
            config,
            created_at,
            base_session,
            events: Vec::new(),
            state: ObservedSession::new(id),
        };
        if let Some(dir) = self.session_dir(id) {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let path = dir.join("config.json");
            fs::write(&path, record.config.to_pretty_string()).map_err(io_err(&path))?;
            let path = dir.join("events.jsonl");
            File::create(&path).map_err(io_err(&path))?;
            write_summary(&dir, &record)?;
        }
        self.sessions.insert(id, record);
        Ok(())
    }

    /// Append one event; returns its sequence number.
    pub fn append_event(&mut self, e: Event) -> Result<u64, StoreError> {
        self.append_events(e.session, vec![e]).map(|seqs| seqs[0])
    }

    /// Append a batch of events of one session, validating each against
    /// the replayed state.
    pub fn append_events(&mut self, id: SessionId, events: Vec<Event>) -> Result<Vec<u64>, StoreError> {
        let dir = self.session_dir(id);
        let record = self.sessions.get_mut(&id).ok_or(StoreError::NotFound(id))?;
        let mut lines = String::new();
        let mut seqs = Vec::with_capacity(events.len());
        for e in events {
            if record.state.status == SessionStatus::Terminated {
                return Err(StoreError::Terminated(id));
            }
            record.state.apply(&e)?;
            lines.push_str(&e.to_json_line());
            lines.push('\n');
            seqs.push(e.seq);
            record.events.push(e);
        }
        if let Some(dir) = dir {
            let path = dir.join("events.jsonl");
            let mut f = OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(io_err(&path))?;
            f.write_all(lines.as_bytes()).map_err(io_err(&path))?;
            write_summary(&dir, record)?;
        }
        Ok(seqs)
    }

    pub fn append_master(&mut self, e: MasterEvent) -> Result<(), StoreError> {
        if let Some(root) = &self.root {
            let path = root.join("master").join("events.jsonl");
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io_err(&path))?;
            let line = serde_json::to_string(&e).expect("master events serialize");
            writeln!(f, "{line}").map_err(io_err(&path))?;
        }
        self.master.push(e);
        Ok(())
    }

    pub fn master_events(&self) -> &[MasterEvent] {
        &self.master
    }

    pub fn load_session(&self, id: SessionId) -> Result<&SessionRecord, StoreError> {
        self.sessions.get(&id).ok_or(StoreError::NotFound(id))
    }

    /// Sessions in creation order.
    pub fn sessions(&self) -> impl Iterator<Item = &SessionRecord> {
        self.sessions.values()
    }

    pub fn list(&self, status: Option<SessionStatus>) -> Vec<SessionSummary> {
        self.sessions
            .values()
            .filter(|r| status.is_none_or(|s| r.state.status == s))
            .map(SessionRecord::summary)
            .collect()
    }

    /// One row per trial of the given sessions. Parameter columns are the
    /// union over all sessions; a parameter a session does not tune shows
    /// that session's constant, and an inactive one is left empty.
    pub fn export_trials(&self, ids: &[SessionId], format: ExportFormat) -> Result<Vec<u8>, StoreError> {
        let records: Vec<&SessionRecord> = ids
            .iter()
            .map(|id| self.load_session(*id))
            .collect::<Result<_, _>>()?;
        let mut columns = BTreeSet::new();
        for r in &records {
            columns.extend(r.config.space.params().iter().map(|p| p.name.clone()));
            columns.extend(r.config.space.constants().keys().cloned());
        }
        let columns = &columns;
        let rows = records.iter().flat_map(|r| {
            r.state.trials.values().map(move |t| {
                let values: Vec<Option<Value>> = columns
                    .iter()
                    .map(|c| match t.assignment.get(c) {
                        Some(v) => Some(v.clone()),
                        None if r.config.space.param(c).is_some() => None,
                        None => r.config.space.constants().get(c).cloned(),
                    })
                    .collect();
                (r.id, t, values)
            })
        });
        match format {
            ExportFormat::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                let mut header = vec!["session".to_string(), "trial".to_string()];
                header.extend(columns.iter().cloned());
                header.extend(["final_metric", "epochs_done", "state"].map(String::from));
                w.write_record(&header).map_err(csv_err)?;
                for (sid, t, values) in rows {
                    let mut rec = vec![sid.to_string(), t.id.0.to_string()];
                    rec.extend(values.iter().map(|v| v.as_ref().map_or(String::new(), Value::to_string)));
                    rec.push(t.last_metric.map_or(String::new(), |m| m.to_string()));
                    rec.push(t.epochs_done.to_string());
                    rec.push(t.state.as_str().to_string());
                    w.write_record(&rec).map_err(csv_err)?;
                }
                w.into_inner().map_err(|e| csv_err(e.into_error().into()))
            }
            ExportFormat::Jsonl => {
                let mut out = Vec::new();
                for (sid, t, values) in rows {
                    let mut row = Map::new();
                    row.insert("session".into(), Json::String(sid.to_string()));
                    row.insert("trial".into(), Json::from(t.id.0));
                    for (c, v) in columns.iter().zip(values) {
                        row.insert(c.clone(), v.map_or(Json::Null, |v| serde_json::to_value(v).expect("values serialize")));
                    }
                    row.insert("final_metric".into(), t.last_metric.map_or(Json::Null, Json::from));
                    row.insert("epochs_done".into(), Json::from(t.epochs_done));
                    row.insert("state".into(), Json::String(t.state.as_str().into()));
                    serde_json::to_writer(&mut out, &Json::Object(row)).expect("rows serialize");
                    out.push(b'\n');
                }
                Ok(out)
            }
        }
    }
}

fn csv_err(e: csv::Error) -> StoreError {
    StoreError::Io {
        path: PathBuf::from("<export>"),
        source: std::io::Error::other(e),
    }
}

fn write_summary(dir: &Path, record: &SessionRecord) -> Result<(), StoreError> {
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&record.summary()).expect("summaries serialize");
    fs::write(&path, text).map_err(io_err(&path))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

fn load_record(dir: &Path) -> Result<SessionRecord, StoreError> {
    let path = dir.join("config.json");
    let text = fs::read(&path).map_err(io_err(&path))?;
    let config = parse_config(&text)?;
    let path = dir.join("summary.json");
    let text = fs::read(&path).map_err(io_err(&path))?;
    let summary: SessionSummary = serde_json::from_slice(&text).map_err(|e| StoreError::Corrupt {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let events: Vec<Event> = read_jsonl(&dir.join("events.jsonl"))?;
    let state = replay(summary.id, &events)?;
    Ok(SessionRecord {
        id: summary.id,
        config,
        created_at: summary.created_at,
        base_session: summary.base_session,
        events,
        state,
    })
}
