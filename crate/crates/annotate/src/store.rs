//! Service state: sessions, the append-only vote log and series marks.
//!
//! Every mutation happens under one lock, and the log line is written before
//! the in-memory state changes, so any reader sees a state that equals a
//! replay of some prefix of the log. On disk the directory holds:
//!
//! - `votes.jsonl`: one [`VoteEntry`] per line, never rewritten
//! - `marks.jsonl`: one [`Mark`] per line; the latest per annotator wins
//! - `sessions.json`: snapshot of session queues, rewritten atomically

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use chrono::{DateTime, SecondsFormat, Utc};
use mitodiff::data::{VoteRecord, VoteValue};
use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::error::{Result, ServiceError};
use crate::session::{build_queue, Session, SessionStatus, DEFAULT_REPEATS};

const VOTES_FILE: &str = "votes.jsonl";
const MARKS_FILE: &str = "marks.jsonl";
const SESSIONS_FILE: &str = "sessions.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteEntry {
    pub seq: u64,
    pub session_id: String,
    /// Queue position this vote answers; the idempotency key within a session.
    pub cursor: usize,
    pub patch_id: String,
    pub annotator_id: String,
    pub round: u32,
    pub value: VoteValue,
    pub timestamp: DateTime<Utc>,
}

impl VoteEntry {
    pub fn record(&self) -> VoteRecord {
        VoteRecord {
            annotator_id: self.annotator_id.clone(),
            round: self.round,
            value: self.value,
            timestamp: Some(self.timestamp),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
pub struct VoteRequest {
    pub patch_id: String,
    pub value: f64,
    #[serde(default)]
    pub cursor: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteAck {
    pub session_id: String,
    pub patch_id: String,
    pub cursor: usize,
    pub round: u32,
    pub value: VoteValue,
    pub next_cursor: usize,
    pub total: usize,
    pub complete: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

/// What an annotator sees next. Deliberately carries no vote history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextItem {
    Open {
        session_id: String,
        cursor: usize,
        round: u32,
        patch_id: String,
        image_png_base64: String,
        progress: Progress,
    },
    Complete {
        session_id: String,
        progress: Progress,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    #[serde(rename = "0")]
    pub no: u64,
    #[serde(rename = "0.5")]
    pub unsure: u64,
    #[serde(rename = "1")]
    pub yes: u64,
}

impl Histogram {
    fn add(&mut self, v: VoteValue) {
        match v {
            VoteValue::No => self.no += 1,
            VoteValue::Unsure => self.unsure += 1,
            VoteValue::Yes => self.yes += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.no + self.unsure + self.yes
    }

    /// Same arithmetic as `mitodiff::data::vote_mean`: half-unit sum over
    /// twice the count, a single correctly rounded division.
    pub fn mean(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| (self.unsure + 2 * self.yes) as f64 / (2 * n) as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub patch_id: String,
    pub label: f64,
    pub votes: u64,
    pub histogram: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mark {
    pub series_id: String,
    pub annotator_id: String,
    pub earliest: Option<usize>,
    pub convincing: Option<usize>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct MarkRequest {
    #[serde(default)]
    pub earliest: Option<usize>,
    #[serde(default)]
    pub convincing: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesView {
    pub series_id: String,
    pub stops: Vec<usize>,
    pub frames_png_base64: Vec<String>,
    pub marks: Vec<Mark>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub annotator_id: String,
    pub repeats: u32,
    pub seed: u64,
    pub status: SessionStatus,
    pub progress: Progress,
}

impl From<&Session> for SessionSummary {
    fn from(s: &Session) -> Self {
        SessionSummary {
            session_id: s.session_id.clone(),
            annotator_id: s.annotator_id.clone(),
            repeats: s.repeats,
            seed: s.seed,
            status: s.status(),
            progress: Progress { done: s.cursor, total: s.queue.len() },
        }
    }
}

#[derive(Default, Serialize, Deserialize)]
struct Snapshot {
    next_session: u64,
    sessions: Vec<Session>,
}

struct Files {
    dir: PathBuf,
    votes: File,
    marks: File,
}

#[derive(Default)]
struct State {
    votes: Vec<VoteEntry>,
    by_position: HashMap<(String, usize), usize>,
    tallies: BTreeMap<String, Histogram>,
    sessions: BTreeMap<String, Session>,
    next_session: u64,
    marks: BTreeMap<(String, String), Mark>,
    files: Option<Files>,
}

impl State {
    /// Applies a vote that has already been checked against its session.
    fn apply_vote(&mut self, entry: VoteEntry) {
        let session = self.sessions.get_mut(&entry.session_id).expect("checked session");
        session.cursor = entry.cursor + 1;
        self.tallies.entry(entry.patch_id.clone()).or_default().add(entry.value);
        self.by_position.insert((entry.session_id.clone(), entry.cursor), self.votes.len());
        self.votes.push(entry);
    }

    fn check_replayed_vote(&self, entry: &VoteEntry) -> std::result::Result<(), String> {
        let session = self
            .sessions
            .get(&entry.session_id)
            .ok_or_else(|| format!("unknown session {}", entry.session_id))?;
        if entry.cursor != session.cursor {
            return Err(format!(
                "session {} expects position {}, log has {}",
                entry.session_id, session.cursor, entry.cursor
            ));
        }
        if session.queue.get(entry.cursor) != Some(&entry.patch_id) {
            return Err(format!("patch {} not queued at that position", entry.patch_id));
        }
        if entry.seq != self.votes.len() as u64 {
            return Err(format!("sequence gap at {}", entry.seq));
        }
        Ok(())
    }

    fn write_snapshot(&self) -> Result<()> {
        let Some(files) = &self.files else {
            return Ok(());
        };
        let snap = Snapshot {
            next_session: self.next_session,
            sessions: self.sessions.values().cloned().collect(),
        };
        let text = serde_json::to_string_pretty(&snap).map_err(ServiceError::storage)?;
        let tmp = files.dir.join(format!("{SESSIONS_FILE}.tmp"));
        fs::write(&tmp, text).map_err(ServiceError::storage)?;
        fs::rename(&tmp, files.dir.join(SESSIONS_FILE)).map_err(ServiceError::storage)?;
        Ok(())
    }
}

fn append_line<T: Serialize>(file: &mut File, value: &T) -> Result<()> {
    let mut line = serde_json::to_vec(value).map_err(ServiceError::storage)?;
    line.push(b'\n');
    file.write_all(&line).map_err(ServiceError::storage)
}

/// Reads a JSON-lines log, dropping an unterminated trailing line left by an
/// interrupted write.
fn read_log<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(ServiceError::storage(format!("{}: {e}", path.display()))),
    };
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if complete < bytes.len() {
        let f = OpenOptions::new().write(true).open(path).map_err(ServiceError::storage)?;
        f.set_len(complete as u64).map_err(ServiceError::storage)?;
    }
    let text = std::str::from_utf8(&bytes[..complete]).map_err(ServiceError::storage)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                ServiceError::storage(format!("{} line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

fn open_append(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| ServiceError::storage(format!("{}: {e}", path.display())))
}

pub struct Store {
    catalog: Catalog,
    state: Mutex<State>,
}

impl Store {
    pub fn in_memory(catalog: Catalog) -> Self {
        Store { catalog, state: Mutex::new(State::default()) }
    }

    /// Opens (or creates) a persistent store, replaying the vote and mark logs.
    pub fn open(catalog: Catalog, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)
            .map_err(|e| ServiceError::storage(format!("{}: {e}", dir.display())))?;
        let mut state = State::default();

        let snap_path = dir.join(SESSIONS_FILE);
        if snap_path.exists() {
            let text = fs::read_to_string(&snap_path).map_err(ServiceError::storage)?;
            let snap: Snapshot = serde_json::from_str(&text)
                .map_err(|e| ServiceError::storage(format!("{}: {e}", snap_path.display())))?;
            state.next_session = snap.next_session;
            for mut s in snap.sessions {
                // The log is authoritative for progress.
                s.cursor = 0;
                state.sessions.insert(s.session_id.clone(), s);
            }
        }

        let votes_path = dir.join(VOTES_FILE);
        for entry in read_log::<VoteEntry>(&votes_path)? {
            state.check_replayed_vote(&entry).map_err(|m| {
                ServiceError::storage(format!("{}: {m}", votes_path.display()))
            })?;
            state.apply_vote(entry);
        }
        let marks_path = dir.join(MARKS_FILE);
        for mark in read_log::<Mark>(&marks_path)? {
            state.marks.insert((mark.series_id.clone(), mark.annotator_id.clone()), mark);
        }

        state.files = Some(Files {
            votes: open_append(&votes_path)?,
            marks: open_append(&marks_path)?,
            dir,
        });
        state.write_snapshot()?;
        Ok(Store { catalog, state: Mutex::new(state) })
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    /// Builds a session over `patch_ids`, or over the whole catalog if `None`.
    pub fn create_session(
        &self,
        annotator_id: &str,
        patch_ids: Option<Vec<String>>,
        repeats: Option<u32>,
        seed: u64,
    ) -> Result<Session> {
        if annotator_id.trim().is_empty() {
            return Err(ServiceError::validation("annotator id is empty"));
        }
        let ids = patch_ids.unwrap_or_else(|| self.catalog.patch_ids().map(String::from).collect());
        if let Some(unknown) = ids.iter().find(|id| self.catalog.patch(id).is_none()) {
            return Err(ServiceError::validation(format!("unknown patch {unknown}")));
        }
        let repeats = repeats.unwrap_or(DEFAULT_REPEATS);
        let queue = build_queue(&ids, repeats, seed)?;

        let mut state = self.lock();
        let session = Session {
            session_id: format!("s{:06}", state.next_session),
            annotator_id: annotator_id.to_string(),
            seed,
            repeats,
            round_len: ids.len(),
            queue,
            cursor: 0,
            created: Utc::now(),
        };
        state.next_session += 1;
        state.sessions.insert(session.session_id.clone(), session.clone());
        if let Err(e) = state.write_snapshot() {
            state.sessions.remove(&session.session_id);
            state.next_session -= 1;
            return Err(e);
        }
        Ok(session)
    }

    pub fn session(&self, session_id: &str) -> Result<Session> {
        self.lock()
            .sessions
            .get(session_id)
            .cloned()
            .ok_or_else(|| ServiceError::not_found(format!("no session {session_id}")))
    }

    pub fn next_item(&self, session_id: &str) -> Result<NextItem> {
        let session = self.session(session_id)?;
        let progress = Progress { done: session.cursor, total: session.queue.len() };
        let Some(patch_id) = session.current() else {
            return Ok(NextItem::Complete { session_id: session.session_id, progress });
        };
        let png = self
            .catalog
            .patch(patch_id)
            .ok_or_else(|| ServiceError::not_found(format!("patch {patch_id} has no image")))?;
        Ok(NextItem::Open {
            cursor: session.cursor,
            round: session.round_at(session.cursor),
            patch_id: patch_id.to_string(),
            image_png_base64: BASE64.encode(png),
            session_id: session.session_id,
            progress,
        })
    }

    /// Records a vote for the session's current item. A replay of an already
    /// recorded position with the same patch and value returns the original
    /// acknowledgment without storing anything.
    pub fn submit_vote(
        &self,
        session_id: &str,
        annotator_id: Option<&str>,
        req: &VoteRequest,
    ) -> Result<VoteAck> {
        let value = VoteValue::try_from(req.value)?;
        let mut state = self.lock();
        let session = state
            .sessions
            .get(session_id)
            .ok_or_else(|| ServiceError::not_found(format!("no session {session_id}")))?;
        if let Some(a) = annotator_id {
            if a != session.annotator_id {
                return Err(ServiceError::Forbidden(format!(
                    "session {session_id} belongs to another annotator"
                )));
            }
        }
        let total = session.queue.len();
        let position = req.cursor.unwrap_or(session.cursor);
        let ack = |e: &VoteEntry| VoteAck {
            session_id: e.session_id.clone(),
            patch_id: e.patch_id.clone(),
            cursor: e.cursor,
            round: e.round,
            value: e.value,
            next_cursor: e.cursor + 1,
            total,
            complete: e.cursor + 1 == total,
        };

        if position < session.cursor {
            let idx = state.by_position[&(session_id.to_string(), position)];
            let prior = &state.votes[idx];
            if prior.patch_id == req.patch_id && prior.value == value {
                return Ok(ack(prior));
            }
            return Err(ServiceError::conflict(format!(
                "position {position} of session {session_id} is already scored"
            )));
        }
        if position >= total {
            return Err(ServiceError::conflict(format!("session {session_id} is complete")));
        }
        if position > session.cursor {
            return Err(ServiceError::conflict(format!(
                "position {position} is ahead of the session cursor {}",
                session.cursor
            )));
        }
        if session.queue[position] != req.patch_id {
            return Err(ServiceError::conflict(format!(
                "patch {} is not the current item (expected {})",
                req.patch_id, session.queue[position]
            )));
        }

        let entry = VoteEntry {
            seq: state.votes.len() as u64,
            session_id: session_id.to_string(),
            cursor: position,
            patch_id: req.patch_id.clone(),
            annotator_id: session.annotator_id.clone(),
            round: session.round_at(position),
            value,
            timestamp: Utc::now(),
        };
        if let Some(files) = state.files.as_mut() {
            append_line(&mut files.votes, &entry)?;
        }
        let out = ack(&entry);
        state.apply_vote(entry);
        Ok(out)
    }

    pub fn label(&self, patch_id: &str) -> Result<Label> {
        let state = self.lock();
        let hist = state.tallies.get(patch_id).copied().unwrap_or_default();
        let label = hist
            .mean()
            .ok_or_else(|| ServiceError::not_found(format!("no votes for patch {patch_id}")))?;
        Ok(Label { patch_id: patch_id.to_string(), label, votes: hist.total(), histogram: hist })
    }

    /// Copy of the full vote log, in append order.
    pub fn votes(&self) -> Vec<VoteEntry> {
        self.lock().votes.clone()
    }

    pub fn mark_series(&self, series_id: &str, annotator_id: &str, req: &MarkRequest) -> Result<Mark> {
        if annotator_id.trim().is_empty() {
            return Err(ServiceError::validation("annotator id is empty"));
        }
        let series = self
            .catalog
            .series(series_id)
            .ok_or_else(|| ServiceError::not_found(format!("no series {series_id}")))?;
        let n = series.frames.len();
        for (name, idx) in [("earliest", req.earliest), ("convincing", req.convincing)] {
            if let Some(i) = idx {
                if i >= n {
                    return Err(ServiceError::validation(format!(
                        "{name} index {i} outside a {n}-frame series"
                    )));
                }
            }
        }
        match (req.earliest, req.convincing) {
            (None, None) => return Err(ServiceError::validation("no mark given")),
            (Some(e), Some(c)) if e > c => {
                return Err(ServiceError::validation(format!(
                    "earliest index {e} is after convincing index {c}"
                )))
            }
            _ => {}
        }
        let mark = Mark {
            series_id: series_id.to_string(),
            annotator_id: annotator_id.to_string(),
            earliest: req.earliest,
            convincing: req.convincing,
            timestamp: Utc::now(),
        };
        let mut state = self.lock();
        if let Some(files) = state.files.as_mut() {
            append_line(&mut files.marks, &mark)?;
        }
        state.marks.insert((series_id.to_string(), annotator_id.to_string()), mark.clone());
        Ok(mark)
    }

    pub fn series_view(&self, series_id: &str) -> Result<SeriesView> {
        let series = self
            .catalog
            .series(series_id)
            .ok_or_else(|| ServiceError::not_found(format!("no series {series_id}")))?;
        let marks = self
            .lock()
            .marks
            .range((series_id.to_string(), String::new())..)
            .take_while(|((s, _), _)| s == series_id)
            .map(|(_, m)| m.clone())
            .collect();
        Ok(SeriesView {
            series_id: series_id.to_string(),
            stops: series.stops.clone(),
            frames_png_base64: series.frames.iter().map(|f| BASE64.encode(f)).collect(),
            marks,
        })
    }

    pub fn export_votes_csv(&self) -> Result<String> {
        let votes = self.votes();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["patch_id", "annotator_id", "round", "value", "timestamp"])
            .map_err(ServiceError::storage)?;
        for v in &votes {
            w.write_record([
                v.patch_id.as_str(),
                v.annotator_id.as_str(),
                &v.round.to_string(),
                &v.value.as_f64().to_string(),
                &v.timestamp.to_rfc3339_opts(SecondsFormat::Micros, true),
            ])
            .map_err(ServiceError::storage)?;
        }
        let bytes = w.into_inner().map_err(ServiceError::storage)?;
        String::from_utf8(bytes).map_err(ServiceError::storage)
    }

    /// Forces logs to disk and rewrites the session snapshot.
    pub fn flush(&self) -> Result<()> {
        let mut state = self.lock();
        if let Some(files) = state.files.as_mut() {
            files.votes.sync_all().map_err(ServiceError::storage)?;
            files.marks.sync_all().map_err(ServiceError::storage)?;
        }
        state.write_snapshot()
    }
}
