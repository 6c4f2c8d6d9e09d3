//! Append-only label store with session reservations.
//!
//! Every accepted submission is one JSON line in the record log, flushed to
//! disk before it is acknowledged. Opening a store replays the log; a
//! trailing line without a newline is an interrupted write and is dropped.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sessionseg::corpus::{AnnotatedSession, Catalog, Session};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("{0}")]
    Validation(String),
    #[error("annotator `{annotator}` already labeled session `{session}`")]
    Conflict { session: String, annotator: String },
    #[error("no label records yet")]
    Empty,
    #[error("record log line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// Millisecond clock, injectable for tests.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// Clock that only moves when told to.
#[derive(Clone, Default)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(Arc::new(AtomicU64::new(start_ms)))
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub record_id: u64,
    pub session_id: String,
    pub annotator_id: String,
    pub gap_labels: Vec<u8>,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub item_id: String,
    pub title: String,
    pub brand: String,
    pub price: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPayload {
    pub session_id: String,
    pub items: Vec<ItemView>,
    pub gap_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportPolicy {
    /// The earliest record of each session.
    #[default]
    First,
    /// Per-gap majority over all records of a session; ties give 0.
    Majority,
}

impl std::str::FromStr for ExportPolicy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "first" => Ok(ExportPolicy::First),
            "majority" => Ok(ExportPolicy::Majority),
            other => Err(format!("unknown export policy `{other}` (expected first or majority)")),
        }
    }
}

/// Sessions with at least this many items count as long.
pub const LONG_SESSION_ITEMS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorProgress {
    pub annotator_id: String,
    pub sessions: usize,
    /// Fractions of this annotator's sessions with 0, 1, 2 and 3+ points.
    pub fractions: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressReport {
    pub total_sessions: usize,
    pub labeled_sessions: usize,
    pub records: usize,
    pub annotators: Vec<AnnotatorProgress>,
    /// Record counts by number of points (0, 1, 2, 3+) for short sessions.
    pub short: [usize; 4],
    pub long: [usize; 4],
}

struct Reservation {
    annotator: String,
    expires_ms: u64,
}

pub struct AnnotationStore {
    sessions: Vec<Session>,
    index: HashMap<String, usize>,
    catalog: Catalog,
    order: Vec<usize>,
    records: Vec<LabelRecord>,
    labeled: HashSet<(usize, String)>,
    count_by_session: Vec<usize>,
    reservations: HashMap<usize, Reservation>,
    timeout_ms: u64,
    log: File,
    log_path: PathBuf,
    clock: Box<dyn Clock>,
}

fn replay(path: &Path) -> Result<(Vec<LabelRecord>, u64)> {
    let mut records = Vec::new();
    let mut good_len = 0u64;
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((records, 0)),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut buf = String::new();
    let mut line = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf)?;
        if n == 0 {
            break;
        }
        line += 1;
        if !buf.ends_with('\n') {
            // interrupted append: never acknowledged
            break;
        }
        if !buf.trim().is_empty() {
            let r: LabelRecord = serde_json::from_str(buf.trim_end())
                .map_err(|e| StoreError::Corrupt { line, message: e.to_string() })?;
            records.push(r);
        }
        good_len += n as u64;
    }
    Ok((records, good_len))
}

impl AnnotationStore {
    /// Opens (or creates) the record log at `log_path` and replays it.
    pub fn open(
        sessions: Vec<Session>,
        catalog: Catalog,
        log_path: &Path,
        seed: u64,
        timeout_ms: u64,
        clock: Box<dyn Clock>,
    ) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, s) in sessions.iter().enumerate() {
            if s.len() < 2 {
                return Err(StoreError::Validation(format!("session `{}` has fewer than two items", s.session_id)));
            }
            if index.insert(s.session_id.clone(), i).is_some() {
                return Err(StoreError::Validation(format!("duplicate session `{}`", s.session_id)));
            }
        }
        let mut order: Vec<usize> = (0..sessions.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

        let (replayed, good_len) = replay(log_path)?;
        let log = OpenOptions::new().create(true).truncate(false).read(true).write(true).open(log_path)?;
        if log.metadata()?.len() != good_len {
            log.set_len(good_len)?;
            log.sync_all()?;
        }
        let mut store = Self {
            count_by_session: vec![0; sessions.len()],
            sessions,
            index,
            catalog,
            order,
            records: Vec::new(),
            labeled: HashSet::new(),
            reservations: HashMap::new(),
            timeout_ms,
            log,
            log_path: log_path.to_path_buf(),
            clock,
        };
        store.log.seek(SeekFrom::End(0))?;
        for (line, r) in replayed.into_iter().enumerate() {
            store.check_record(&r.session_id, &r.annotator_id, &r.gap_labels).map_err(|e| StoreError::Corrupt {
                line: line + 1,
                message: e.to_string(),
            })?;
            store.accept(r);
        }
        Ok(store)
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn records(&self) -> &[LabelRecord] {
        &self.records
    }

    fn check_record(&self, session_id: &str, annotator: &str, labels: &[u8]) -> Result<usize> {
        let &i = self.index.get(session_id).ok_or_else(|| StoreError::UnknownSession(session_id.to_string()))?;
        let gaps = self.sessions[i].gap_count();
        if labels.len() != gaps {
            return Err(StoreError::Validation(format!("{} labels for {gaps} gaps", labels.len())));
        }
        if let Some(b) = labels.iter().find(|&&l| l > 1) {
            return Err(StoreError::Validation(format!("label {b} is not 0 or 1")));
        }
        if self.labeled.contains(&(i, annotator.to_string())) {
            return Err(StoreError::Conflict { session: session_id.to_string(), annotator: annotator.to_string() });
        }
        Ok(i)
    }

    fn accept(&mut self, r: LabelRecord) {
        let i = self.index[&r.session_id];
        self.labeled.insert((i, r.annotator_id.clone()));
        self.count_by_session[i] += 1;
        if self.reservations.get(&i).is_some_and(|res| res.annotator == r.annotator_id) {
            self.reservations.remove(&i);
        }
        self.records.push(r);
    }

    fn payload(&self, i: usize) -> SessionPayload {
        let s = &self.sessions[i];
        let items = s
            .items
            .iter()
            .map(|id| match self.catalog.get(id) {
                Some(it) => ItemView { item_id: id.clone(), title: it.title.clone(), brand: it.brand.clone(), price: it.price },
                None => ItemView { item_id: id.clone(), title: String::new(), brand: String::new(), price: None },
            })
            .collect();
        SessionPayload { session_id: s.session_id.clone(), items, gap_count: s.gap_count() }
    }

    /// A session this annotator has not labeled, reserved for them until the
    /// timeout. An annotator's live reservation is returned again; sessions
    /// with fewer records come first, then the seeded order.
    pub fn next_unlabeled(&mut self, annotator: &str) -> Option<SessionPayload> {
        let now = self.clock.now_ms();
        self.reservations.retain(|_, r| r.expires_ms > now);
        if let Some((&i, _)) = self.reservations.iter().filter(|(_, r)| r.annotator == annotator).min_by_key(|(&i, _)| i) {
            return Some(self.payload(i));
        }
        let pick = self
            .order
            .iter()
            .copied()
            .filter(|&i| !self.labeled.contains(&(i, annotator.to_string())) && !self.reservations.contains_key(&i))
            .enumerate()
            .min_by_key(|&(rank, i)| (self.count_by_session[i], rank))
            .map(|(_, i)| i)?;
        self.reservations.insert(pick, Reservation { annotator: annotator.to_string(), expires_ms: now + self.timeout_ms });
        Some(self.payload(pick))
    }

    /// Validates, appends and syncs a record; returns it once durable.
    pub fn submit(&mut self, session_id: &str, annotator: &str, gap_labels: Vec<u8>) -> Result<LabelRecord> {
        self.check_record(session_id, annotator, &gap_labels)?;
        let record = LabelRecord {
            record_id: self.records.len() as u64 + 1,
            session_id: session_id.to_string(),
            annotator_id: annotator.to_string(),
            gap_labels,
            timestamp_ms: self.clock.now_ms(),
        };
        let mut line = serde_json::to_vec(&record).expect("record serializes");
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.log.sync_data()?;
        self.accept(record.clone());
        Ok(record)
    }

    pub fn export(&self, policy: ExportPolicy) -> Result<Vec<AnnotatedSession>> {
        if self.records.is_empty() {
            return Err(StoreError::Empty);
        }
        let mut by_session: Vec<(usize, Vec<&LabelRecord>)> = Vec::new();
        let mut slot: HashMap<usize, usize> = HashMap::new();
        for r in &self.records {
            let i = self.index[&r.session_id];
            let k = *slot.entry(i).or_insert_with(|| {
                by_session.push((i, Vec::new()));
                by_session.len() - 1
            });
            by_session[k].1.push(r);
        }
        let out = by_session
            .into_iter()
            .map(|(i, recs)| {
                let session = self.sessions[i].clone();
                let (labels, annotator) = match policy {
                    ExportPolicy::First => (recs[0].gap_labels.clone(), recs[0].annotator_id.clone()),
                    ExportPolicy::Majority => {
                        let gaps = session.gap_count();
                        let labels = (0..gaps)
                            .map(|g| {
                                let ones = recs.iter().filter(|r| r.gap_labels[g] == 1).count();
                                (2 * ones > recs.len()) as u8
                            })
                            .collect();
                        let names: Vec<&str> = recs.iter().map(|r| r.annotator_id.as_str()).collect();
                        (labels, names.join("+"))
                    }
                };
                AnnotatedSession { session, gap_labels: labels, annotator_id: annotator }
            })
            .collect();
        Ok(out)
    }

    pub fn progress(&self) -> ProgressReport {
        let bucket = |r: &LabelRecord| r.gap_labels.iter().filter(|&&l| l == 1).count().min(3);
        let mut per: Vec<(String, [usize; 4])> = Vec::new();
        let mut short = [0; 4];
        let mut long = [0; 4];
        for r in &self.records {
            let b = bucket(r);
            match per.iter_mut().find(|(a, _)| *a == r.annotator_id) {
                Some((_, c)) => c[b] += 1,
                None => {
                    let mut c = [0; 4];
                    c[b] = 1;
                    per.push((r.annotator_id.clone(), c));
                }
            }
            if self.sessions[self.index[&r.session_id]].len() >= LONG_SESSION_ITEMS {
                long[b] += 1;
            } else {
                short[b] += 1;
            }
        }
        per.sort_by(|a, b| a.0.cmp(&b.0));
        let annotators = per
            .into_iter()
            .map(|(annotator_id, c)| {
                let n: usize = c.iter().sum();
                AnnotatorProgress { annotator_id, sessions: n, fractions: c.map(|v| v as f64 / n as f64) }
            })
            .collect();
        ProgressReport {
            total_sessions: self.sessions.len(),
            labeled_sessions: self.count_by_session.iter().filter(|&&c| c > 0).count(),
            records: self.records.len(),
            annotators,
            short,
            long,
        }
    }
}
