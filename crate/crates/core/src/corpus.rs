//! Session logs, item catalogs and annotated sessions.
//!
//! A session log row carries a `prev_items` list (the items browsed) and a
//! `next_item` (the item purchased). Both are merged into one ordered session.
//! List cells accept JSON syntax (`["A","B"]`) as well as the space separated
//! `['A' 'B']` form found in the public M2 dump.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("duplicate session id `{0}`")]
    DuplicateSession(String),
    #[error("duplicate item id `{0}`")]
    DuplicateItem(String),
    #[error("missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub title: String,
    /// Empty when the catalog has no brand.
    pub brand: String,
    pub price: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub items: Vec<String>,
}

impl Session {
    pub fn new(session_id: impl Into<String>, items: Vec<String>) -> Self {
        Self { session_id: session_id.into(), items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Number of candidate gaps between consecutive items.
    pub fn gap_count(&self) -> usize {
        self.items.len().saturating_sub(1)
    }
}

/// A session with one 0/1 label per gap (1 = segmentation point).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSession {
    pub session: Session,
    pub gap_labels: Vec<u8>,
    pub annotator_id: String,
}

impl AnnotatedSession {
    pub fn new(session: Session, gap_labels: Vec<u8>, annotator_id: impl Into<String>) -> Result<Self> {
        let a = Self { session, gap_labels, annotator_id: annotator_id.into() };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.session.items.is_empty() {
            return Err(CorpusError::Invalid(format!("session `{}` has no items", self.session.session_id)));
        }
        if self.gap_labels.len() != self.session.gap_count() {
            return Err(CorpusError::Invalid(format!(
                "session `{}`: {} gap labels for {} items",
                self.session.session_id,
                self.gap_labels.len(),
                self.session.items.len()
            )));
        }
        if let Some(bad) = self.gap_labels.iter().find(|&&l| l > 1) {
            return Err(CorpusError::Invalid(format!(
                "session `{}`: label {bad} is not 0 or 1",
                self.session.session_id
            )));
        }
        Ok(())
    }

    pub fn positives(&self) -> usize {
        self.gap_labels.iter().filter(|&&l| l == 1).count()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Catalog {
    items: HashMap<String, Item>,
}

impl Catalog {
    pub fn get(&self, id: &str) -> Option<&Item> {
        self.items.get(id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn insert(&mut self, item: Item) -> Result<()> {
        if item.id.is_empty() {
            return Err(CorpusError::Invalid("item id is empty".into()));
        }
        if self.items.contains_key(&item.id) {
            return Err(CorpusError::DuplicateItem(item.id));
        }
        self.items.insert(item.id.clone(), item);
        Ok(())
    }

    /// Items sorted by id.
    pub fn sorted_items(&self) -> Vec<&Item> {
        let mut v: Vec<_> = self.items.values().collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }
}

/// Prices that were blank, unparsable or negative during catalog loading.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CatalogReport {
    pub rows: usize,
    pub blank_brand: usize,
    pub missing_price: Vec<String>,
    pub invalid_price: Vec<(String, String)>,
}

/// One raw session-log record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionRow {
    pub session_id: Option<String>,
    pub prev_items: String,
    pub next_item: String,
}

/// One raw catalog record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogRow {
    pub id: String,
    pub title: String,
    pub brand: String,
    pub price: String,
}

/// Parses a list cell. Accepts `["a","b"]`, `['a' 'b']`, `['a', 'b']` and `[]`.
pub fn parse_item_list(cell: &str) -> std::result::Result<Vec<String>, String> {
    let s = cell.trim();
    let inner = s
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| format!("list `{s}` is not enclosed in brackets"))?;
    let mut out = Vec::new();
    let mut chars = inner.chars().peekable();
    loop {
        while matches!(chars.peek(), Some(c) if c.is_whitespace() || *c == ',') {
            chars.next();
        }
        let Some(q) = chars.next() else { break };
        if q != '"' && q != '\'' {
            return Err(format!("expected quoted item, found `{q}`"));
        }
        let mut item = String::new();
        let mut closed = false;
        while let Some(c) = chars.next() {
            if c == '\\' {
                match chars.next() {
                    Some(e) => item.push(e),
                    None => return Err("dangling escape".into()),
                }
            } else if c == q {
                closed = true;
                break;
            } else {
                item.push(c);
            }
        }
        if !closed {
            return Err("unterminated quoted item".into());
        }
        if item.is_empty() {
            return Err("empty item id".into());
        }
        match chars.peek() {
            None => {}
            Some(c) if c.is_whitespace() || *c == ',' => {}
            Some(c) => return Err(format!("unexpected `{c}` after item")),
        }
        out.push(item);
    }
    Ok(out)
}

fn format_item_list(items: &[String]) -> String {
    serde_json::to_string(items).expect("string list serializes")
}

/// Merges `prev_items` and `next_item` of each row into a session, preserving
/// item order and row order. Rows without a session id get `row-<index>`.
pub fn parse_session_log(rows: &[SessionRow]) -> Result<Vec<Session>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for (row, r) in rows.iter().enumerate() {
        let mut items = parse_item_list(&r.prev_items).map_err(|message| CorpusError::Row { row, message })?;
        let next = r.next_item.trim();
        if next.is_empty() {
            return Err(CorpusError::Row { row, message: "empty next_item".into() });
        }
        items.push(next.to_string());
        let id = match &r.session_id {
            Some(id) if !id.trim().is_empty() => id.trim().to_string(),
            _ => format!("row-{row}"),
        };
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateSession(id));
        }
        out.push(Session { session_id: id, items });
    }
    Ok(out)
}

fn column(headers: &csv::StringRecord, name: &'static str) -> Option<usize> {
    headers.iter().position(|h| h.trim() == name)
}

/// Reads a CSV session log with columns `prev_items`, `next_item` and an
/// optional `session_id`. Other columns (e.g. `locale`) are ignored.
pub fn read_session_log(path: &Path) -> Result<Vec<Session>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let prev = column(&headers, "prev_items").ok_or(CorpusError::MissingColumn("prev_items"))?;
    let next = column(&headers, "next_item").ok_or(CorpusError::MissingColumn("next_item"))?;
    let sid = column(&headers, "session_id");
    let mut rows = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CorpusError::Row { row, message: e.to_string() })?;
        rows.push(SessionRow {
            session_id: sid.map(|i| rec[i].to_string()),
            prev_items: rec[prev].to_string(),
            next_item: rec[next].to_string(),
        });
    }
    parse_session_log(&rows)
}

/// Writes sessions in the format read by [`read_session_log`]. Sessions must
/// be non-empty; the last item becomes `next_item`.
pub fn write_session_log(path: &Path, sessions: &[Session]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["session_id", "prev_items", "next_item"])?;
    for s in sessions {
        let (last, prev) = s
            .items
            .split_last()
            .ok_or_else(|| CorpusError::Invalid(format!("session `{}` has no items", s.session_id)))?;
        w.write_record([s.session_id.as_str(), &format_item_list(prev), last.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// Builds a catalog. Blank brands become empty text; blank, unparsable or
/// negative prices become absent and are listed in the report.
pub fn load_catalog(rows: &[CatalogRow]) -> Result<(Catalog, CatalogReport)> {
    let mut catalog = Catalog::default();
    let mut report = CatalogReport { rows: rows.len(), ..Default::default() };
    for (row, r) in rows.iter().enumerate() {
        let id = r.id.trim();
        if id.is_empty() {
            return Err(CorpusError::Row { row, message: "missing item id".into() });
        }
        if catalog.items.contains_key(id) {
            return Err(CorpusError::DuplicateItem(id.to_string()));
        }
        let brand = r.brand.trim().to_string();
        if brand.is_empty() {
            report.blank_brand += 1;
        }
        let raw = r.price.trim();
        let price = if raw.is_empty() {
            report.missing_price.push(id.to_string());
            None
        } else {
            match raw.parse::<f64>() {
                Ok(p) if p.is_finite() && p >= 0.0 => Some(p),
                _ => {
                    report.invalid_price.push((id.to_string(), raw.to_string()));
                    None
                }
            }
        };
        catalog.items.insert(
            id.to_string(),
            Item { id: id.to_string(), title: r.title.trim().to_string(), brand, price },
        );
    }
    Ok((catalog, report))
}

/// Reads a CSV catalog with columns `id`, `title`, `brand`, `price`.
pub fn read_catalog(path: &Path) -> Result<(Catalog, CatalogReport)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let id = column(&headers, "id").ok_or(CorpusError::MissingColumn("id"))?;
    let title = column(&headers, "title").ok_or(CorpusError::MissingColumn("title"))?;
    let brand = column(&headers, "brand").ok_or(CorpusError::MissingColumn("brand"))?;
    let price = column(&headers, "price").ok_or(CorpusError::MissingColumn("price"))?;
    let mut rows = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CorpusError::Row { row, message: e.to_string() })?;
        rows.push(CatalogRow {
            id: rec[id].to_string(),
            title: rec[title].to_string(),
            brand: rec[brand].to_string(),
            price: rec[price].to_string(),
        });
    }
    load_catalog(&rows)
}

pub fn write_catalog(path: &Path, catalog: &Catalog) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "title", "brand", "price"])?;
    for item in catalog.sorted_items() {
        let price = item.price.map(|p| p.to_string()).unwrap_or_default();
        w.write_record([item.id.as_str(), &item.title, &item.brand, &price])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads annotated sessions from a JSON-lines file.
pub fn read_annotations(path: &Path) -> Result<Vec<AnnotatedSession>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (row, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a: AnnotatedSession =
            serde_json::from_str(&line).map_err(|e| CorpusError::Row { row, message: e.to_string() })?;
        a.validate().map_err(|e| CorpusError::Row { row, message: e.to_string() })?;
        if !seen.insert(a.session.session_id.clone()) {
            return Err(CorpusError::DuplicateSession(a.session.session_id));
        }
        out.push(a);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, annotated: &[AnnotatedSession]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_annotations_to(&mut w, annotated)?;
    w.flush()?;
    Ok(())
}

pub fn write_annotations_to<W: Write>(w: &mut W, annotated: &[AnnotatedSession]) -> Result<()> {
    for a in annotated {
        a.validate()?;
        serde_json::to_writer(&mut *w, a).map_err(|e| CorpusError::Invalid(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Session length summary. `std` is the population standard deviation;
/// `median` takes the lower middle element for even counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total_sessions: usize,
    pub total_items: usize,
    pub mean: f64,
    pub std: f64,
    pub min: usize,
    pub median: usize,
    pub max: usize,
}

pub fn corpus_stats(sessions: &[Session]) -> Result<CorpusStats> {
    if sessions.is_empty() {
        return Err(CorpusError::Invalid("no sessions".into()));
    }
    let mut lens: Vec<usize> = sessions.iter().map(Session::len).collect();
    lens.sort_unstable();
    let n = lens.len();
    let total: usize = lens.iter().sum();
    let mean = total as f64 / n as f64;
    let var = lens.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(CorpusStats {
        total_sessions: n,
        total_items: total,
        mean,
        std: var.sqrt(),
        min: lens[0],
        median: lens[(n - 1) / 2],
        max: lens[n - 1],
    })
}

/// Whole-session train/test split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub version: u32,
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

pub const SPLIT_MANIFEST_VERSION: u32 = 1;

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(f, self).map_err(|e| CorpusError::Invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_reader(BufReader::new(File::open(path)?))
            .map_err(|e| CorpusError::Invalid(format!("split manifest: {e}")))?;
        if m.version != SPLIT_MANIFEST_VERSION {
            return Err(CorpusError::Invalid(format!("split manifest version {} unsupported", m.version)));
        }
        Ok(m)
    }
}

/// Splits whole sessions into train and test sides with `ratio = (train, test)`.
/// The test side gets `round(N * test / (train + test))` sessions, clamped so
/// that both sides are non-empty. Each side keeps the input order.
pub fn split_annotated(
    annotated: &[AnnotatedSession],
    ratio: (u32, u32),
    seed: u64,
) -> Result<(Vec<AnnotatedSession>, Vec<AnnotatedSession>, SplitManifest)> {
    let n = annotated.len();
    if n < 2 {
        return Err(CorpusError::Invalid(format!("need at least 2 sessions to split, got {n}")));
    }
    if ratio.0 == 0 || ratio.1 == 0 {
        return Err(CorpusError::Invalid("split ratio parts must be positive".into()));
    }
    let n_test = ((n as f64 * ratio.1 as f64 / (ratio.0 + ratio.1) as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (a, t) in annotated.iter().zip(&is_test) {
        if *t {
            test.push(a.clone());
        } else {
            train.push(a.clone());
        }
    }
    let manifest = SplitManifest {
        version: SPLIT_MANIFEST_VERSION,
        seed,
        train: train.iter().map(|a| a.session.session_id.clone()).collect(),
        test: test.iter().map(|a| a.session.session_id.clone()).collect(),
    };
    Ok((train, test, manifest))
}
