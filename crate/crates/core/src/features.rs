//! Window similarity features for candidate segmentation points.
//!
//! For a gap between positions `g` and `g + 1` the window holds `2w` items,
//! indexed `[L_w, …, L_1, R_1, …, R_w]`. Slots that fall outside the session
//! repeat the nearest in-session item on that side. Every unordered pair of
//! window positions `(a, b)`, `a < b`, in lexicographic order contributes four
//! values in the order `[behavior, brand, title, price]`, giving
//! `4 · C(2w, 2)` features per gap.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior_embed::EmbeddingTable;
use crate::corpus::{AnnotatedSession, Catalog, Item, Session};
use crate::text_embed::{Field, TextEmbeddingProvider};

/// Version of the pair/similarity layout. Bumped whenever feature indexing
/// changes; model and dataset files carry it.
pub const LAYOUT_VERSION: u32 = 1;
pub const DATASET_MAGIC: &str = "sessionseg-features";
pub const SIMILARITIES_PER_PAIR: usize = 4;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("session `{0}` has fewer than 2 items")]
    NoGaps(String),
    #[error("gap {gap} out of range for session `{session}` with {len} items")]
    GapOutOfRange { session: String, gap: usize, len: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("negative price {0}")]
    NegativePrice(f64),
    #[error("item `{0}` is not in the catalog")]
    UnknownItem(String),
    #[error("window radius must be at least 1")]
    BadWindow,
    #[error("session `{session}` gap {gap}: {source}")]
    At { session: String, gap: usize, source: Box<FeatureError> },
    #[error("dataset file: {0}")]
    File(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Behavior,
    Brand,
    Title,
    Price,
}

impl SimilarityKind {
    pub const ORDER: [SimilarityKind; 4] =
        [SimilarityKind::Behavior, SimilarityKind::Brand, SimilarityKind::Title, SimilarityKind::Price];

    pub fn as_str(self) -> &'static str {
        match self {
            SimilarityKind::Behavior => "behavior",
            SimilarityKind::Brand => "brand",
            SimilarityKind::Title => "title",
            SimilarityKind::Price => "price",
        }
    }
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the price similarity denominator is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriceRule {
    /// `exp(-|p_i - p_j| / (min(p_i, p_j) + 1))`.
    #[default]
    MinPlusOne,
    /// `exp(-|p_i - p_j| / min(p_next(i), p_next(j)))`, where `next` is the
    /// following window position (clamped to the last slot). Entries whose
    /// denominator is zero or absent are 0.
    NextItemPrices,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub w: usize,
    #[serde(default)]
    pub price_rule: PriceRule,
}

impl WindowConfig {
    pub fn new(w: usize) -> Result<Self, FeatureError> {
        if w == 0 {
            return Err(FeatureError::BadWindow);
        }
        Ok(Self { w, price_rule: PriceRule::MinPlusOne })
    }

    pub fn pair_count(&self) -> usize {
        pair_count(self.w)
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(self.w)
    }
}

/// `C(2w, 2)`.
pub fn pair_count(w: usize) -> usize {
    let n = 2 * w;
    n * (n - 1) / 2
}

/// `4 · C(2w, 2)`.
pub fn feature_dim(w: usize) -> usize {
    SIMILARITIES_PER_PAIR * pair_count(w)
}

/// Window slot label: `L_i` for the i-th item left of the gap, `R_j` for the
/// j-th item right of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Left(usize),
    Right(usize),
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::Left(i) => write!(f, "L_{i}"),
            Slot::Right(j) => write!(f, "R_{j}"),
        }
    }
}

/// Lexicographic list of position pairs `(a, b)`, `0 <= a < b < 2w`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIndex {
    w: usize,
    pairs: Vec<(usize, usize)>,
}

impl PairIndex {
    pub fn new(w: usize) -> Self {
        let n = 2 * w;
        let pairs = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
        Self { w, pairs }
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn slot(&self, position: usize) -> Slot {
        if position < self.w {
            Slot::Left(self.w - position)
        } else {
            Slot::Right(position - self.w + 1)
        }
    }

    /// Pair slots and similarity kind of a flat feature index.
    pub fn describe(&self, feature: usize) -> Option<(Slot, Slot, SimilarityKind)> {
        let (a, b) = *self.pairs.get(feature / SIMILARITIES_PER_PAIR)?;
        Some((self.slot(a), self.slot(b), SimilarityKind::ORDER[feature % SIMILARITIES_PER_PAIR]))
    }

    /// `"(L_i,R_j):<kind>"` label of a flat feature index.
    pub fn label(&self, feature: usize) -> Option<String> {
        self.describe(feature).map(|(a, b, k)| format!("({a},{b}):{k}"))
    }
}

/// The `2w` window item ids around gap `gap` (between `gap` and `gap + 1`),
/// padded by repeating the nearest in-session item on each side.
pub fn window_items(session: &Session, gap: usize, w: usize) -> Result<Vec<&str>, FeatureError> {
    let len = session.items.len();
    if len < 2 {
        return Err(FeatureError::NoGaps(session.session_id.clone()));
    }
    if gap > len - 2 {
        return Err(FeatureError::GapOutOfRange { session: session.session_id.clone(), gap, len });
    }
    if w == 0 {
        return Err(FeatureError::BadWindow);
    }
    let mut out = Vec::with_capacity(2 * w);
    for p in 0..w {
        // slot L_{w-p} sits at session index gap - (w - 1 - p)
        let idx = (gap + p + 1).saturating_sub(w);
        out.push(session.items[idx].as_str());
    }
    for p in 0..w {
        let idx = (gap + 1 + p).min(len - 1);
        out.push(session.items[idx].as_str());
    }
    Ok(out)
}

/// Cosine similarity. Zero when either vector has zero norm.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, FeatureError> {
    if u.len() != v.len() {
        return Err(FeatureError::DimMismatch(u.len(), v.len()));
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

/// `exp(-|p_i - p_j| / (min(p_i, p_j) + 1))`.
pub fn price_similarity(p_i: f64, p_j: f64) -> Result<f64, FeatureError> {
    for p in [p_i, p_j] {
        if p < 0.0 || p.is_nan() {
            return Err(FeatureError::NegativePrice(p));
        }
    }
    Ok((-(p_i - p_j).abs() / (p_i.min(p_j) + 1.0)).exp())
}

/// Read-only inputs needed to compute features.
pub struct FeatureContext<'a> {
    pub window: WindowConfig,
    pub behavior: &'a EmbeddingTable,
    pub title: &'a TextEmbeddingProvider,
    pub brand: &'a TextEmbeddingProvider,
    pub catalog: &'a Catalog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl FeatureContext<'_> {
    fn resolve(&self, id: &str) -> Result<&Item, FeatureError> {
        self.catalog.get(id).ok_or_else(|| FeatureError::UnknownItem(id.to_string()))
    }

    pub fn build_feature_vector(&self, session: &Session, gap: usize) -> Result<FeatureVector, FeatureError> {
        let w = self.window.w;
        let ids = window_items(session, gap, w)?;
        let items: Vec<&Item> = ids.iter().map(|id| self.resolve(id)).collect::<Result<_, _>>()?;
        let behavior: Vec<Option<&[f64]>> = ids.iter().map(|id| self.behavior.lookup(id)).collect();
        let titles: Vec<_> = items.iter().map(|it| self.title.embed_field(it, Field::Title)).collect();
        let brands: Vec<_> = items.iter().map(|it| self.brand.embed_field(it, Field::Brand)).collect();
        let last = 2 * w - 1;

        let pairs = PairIndex::new(w);
        let mut values = Vec::with_capacity(self.window.feature_dim());
        for &(a, b) in pairs.pairs() {
            let s_behavior = match (behavior[a], behavior[b]) {
                (Some(u), Some(v)) => cosine(u, v)?,
                _ => 0.0,
            };
            let s_brand = cosine(&brands[a], &brands[b])?;
            let s_title = cosine(&titles[a], &titles[b])?;
            let s_price = match self.window.price_rule {
                PriceRule::MinPlusOne => match (items[a].price, items[b].price) {
                    (Some(p), Some(q)) => price_similarity(p, q)?,
                    _ => 0.0,
                },
                PriceRule::NextItemPrices => {
                    let next = |i: usize| items[(i + 1).min(last)].price;
                    match (items[a].price, items[b].price, next(a), next(b)) {
                        (Some(p), Some(q), Some(na), Some(nb)) if na.min(nb) > 0.0 => {
                            (-(p - q).abs() / na.min(nb)).exp()
                        }
                        _ => 0.0,
                    }
                }
            };
            values.extend([s_behavior, s_brand, s_title, s_price]);
        }
        Ok(FeatureVector { values })
    }

    /// One row per gap, sessions in input order and gaps in session order.
    /// Sessions with a single item contribute no rows.
    pub fn build_dataset(&self, annotated: &[AnnotatedSession]) -> Result<Dataset, FeatureError> {
        let dim = self.window.feature_dim();
        let n: usize = annotated.iter().map(|a| a.session.gap_count()).sum();
        let mut x = Array2::zeros((n, dim));
        let mut y = Vec::with_capacity(n);
        let mut groups = Vec::with_capacity(n);
        let mut gaps = Vec::with_capacity(n);
        let mut row = 0;
        for a in annotated {
            let s = &a.session;
            if a.gap_labels.len() != s.gap_count() {
                return Err(FeatureError::File(format!(
                    "session `{}` has {} labels for {} gaps",
                    s.session_id,
                    a.gap_labels.len(),
                    s.gap_count()
                )));
            }
            for (gap, &label) in a.gap_labels.iter().enumerate() {
                let fv = self.build_feature_vector(s, gap).map_err(|e| FeatureError::At {
                    session: s.session_id.clone(),
                    gap,
                    source: Box::new(e),
                })?;
                x.row_mut(row).iter_mut().zip(&fv.values).for_each(|(d, v)| *d = *v);
                y.push(label);
                groups.push(s.session_id.clone());
                gaps.push(gap);
                row += 1;
            }
        }
        Ok(Dataset { w: self.window.w, x, y, groups, gaps })
    }
}

/// Feature matrix with labels and the session id (group) of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub w: usize,
    pub x: Array2<f64>,
    pub y: Vec<u8>,
    pub groups: Vec<String>,
    pub gaps: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn positive_rate(&self) -> f64 {
        if self.y.is_empty() {
            return 0.0;
        }
        self.y.iter().filter(|&&l| l == 1).count() as f64 / self.y.len() as f64
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            w: self.w,
            x: self.x.select(ndarray::Axis(0), idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            groups: idx.iter().map(|&i| self.groups[i].clone()).collect(),
            gaps: idx.iter().map(|&i| self.gaps[i]).collect(),
        }
    }

    /// Writes `#sessionseg-features v1 w=<w> d=<pairs> layout=<v> rows=<n>`,
    /// then tab-separated `session_id gap label f_0 … f_{4d-1}` rows.
    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(
            out,
            "#{DATASET_MAGIC} v1 w={} d={} layout={LAYOUT_VERSION} rows={}",
            self.w,
            pair_count(self.w),
            self.len()
        )?;
        for (i, row) in self.x.rows().into_iter().enumerate() {
            if self.groups[i].contains(['\t', '\n']) {
                return Err(FeatureError::File(format!("session id {:?} contains a tab or newline", self.groups[i])));
            }
            write!(out, "{}\t{}\t{}", self.groups[i], self.gaps[i], self.y[i])?;
            for v in row {
                write!(out, "\t{v}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset, FeatureError> {
        let bad = |m: String| FeatureError::File(m);
        let mut lines = BufReader::new(File::open(path)?).lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))??;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(&format!("#{DATASET_MAGIC}")) || parts.next() != Some("v1") {
            return Err(bad("not a v1 feature dataset".into()));
        }
        let (mut w, mut d, mut layout, mut rows) = (None, None, None, None);
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| bad(format!("bad header token `{p}`")))?;
            let v: usize = v.parse().map_err(|_| bad(format!("bad header value `{p}`")))?;
            match k {
                "w" => w = Some(v),
                "d" => d = Some(v),
                "layout" => layout = Some(v),
                "rows" => rows = Some(v),
                _ => {}
            }
        }
        let w = w.filter(|&w| w >= 1).ok_or_else(|| bad("missing w".into()))?;
        let rows = rows.ok_or_else(|| bad("missing rows".into()))?;
        if layout != Some(LAYOUT_VERSION as usize) {
            return Err(bad(format!("layout version {layout:?} is not {LAYOUT_VERSION}")));
        }
        if d != Some(pair_count(w)) {
            return Err(bad(format!("d={d:?} inconsistent with w={w}")));
        }
        let dim = feature_dim(w);
        let mut x = Array2::zeros((rows, dim));
        let (mut y, mut groups, mut gaps) = (Vec::new(), Vec::new(), Vec::new());
        let mut n = 0;
        for (i, line) in lines.enumerate() {
            let line = line?;
            if n == rows {
                return Err(bad(format!("more rows than header declares at line {}", i + 2)));
            }
            let mut cols = line.split('\t');
            let mut next = || cols.next().ok_or_else(|| bad(format!("line {}: too few columns", i + 2)));
            groups.push(next()?.to_string());
            gaps.push(next()?.parse().map_err(|_| bad(format!("line {}: bad gap index", i + 2)))?);
            let label: u8 = next()?.parse().map_err(|_| bad(format!("line {}: bad label", i + 2)))?;
            if label > 1 {
                return Err(bad(format!("line {}: label {label}", i + 2)));
            }
            y.push(label);
            for j in 0..dim {
                let v: f64 = next()?.parse().map_err(|_| bad(format!("line {}: bad value", i + 2)))?;
                x[[n, j]] = v;
            }
            if cols.next().is_some() {
                return Err(bad(format!("line {}: too many columns", i + 2)));
            }
            n += 1;
        }
        if n != rows {
            return Err(bad(format!("header declares {rows} rows, found {n}")));
        }
        Ok(Dataset { w, x, y, groups, gaps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn session(items: &[&str]) -> Session {
        Session::new("s", items.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn padding_examples() {
        let s = session(&["u1", "u2", "u3", "u4"]);
        assert_eq!(window_items(&s, 0, 2).unwrap(), ["u1", "u1", "u2", "u3"]);
        assert_eq!(window_items(&s, 2, 2).unwrap(), ["u2", "u3", "u4", "u4"]);
        let s = session(&["u1", "u2"]);
        assert_eq!(window_items(&s, 0, 1).unwrap(), ["u1", "u2"]);
        assert_eq!(window_items(&s, 0, 3).unwrap(), ["u1", "u1", "u1", "u2", "u2", "u2"]);
        assert!(matches!(window_items(&session(&["u1"]), 0, 1), Err(FeatureError::NoGaps(_))));
        assert!(window_items(&s, 1, 1).is_err());
    }

    #[test]
    fn cosine_identities() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn price_similarity_values() {
        assert_eq!(price_similarity(500.0, 500.0).unwrap(), 1.0);
        assert_eq!(price_similarity(0.0, 0.0).unwrap(), 1.0);
        let v = price_similarity(100.0, 200.0).unwrap();
        assert!((v - (-100.0f64 / 101.0).exp()).abs() < 1e-12);
        assert!((v - 0.37154).abs() < 1e-5);
        assert_eq!(price_similarity(200.0, 100.0).unwrap(), v);
        assert!(price_similarity(-1.0, 2.0).is_err());
    }

    #[test]
    fn pair_index_layout() {
        let p = PairIndex::new(2);
        assert_eq!(p.pairs(), &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        assert_eq!(p.label(0).unwrap(), "(L_2,L_1):behavior");
        assert_eq!(p.label(4 * 3 + 2).unwrap(), "(L_1,R_1):title");
        assert_eq!(p.label(23).unwrap(), "(R_1,R_2):price");
        assert!(p.label(24).is_none());
        for (w, d) in [(1, 4), (2, 24), (3, 60), (4, 112)] {
            assert_eq!(feature_dim(w), d);
            assert_eq!(PairIndex::new(w).len() * 4, d);
        }
    }

    fn fixture() -> (Catalog, EmbeddingTable, TextEmbeddingProvider, TextEmbeddingProvider) {
        let mut catalog = Catalog::default();
        for (id, title, brand, price) in [
            ("a", "red pen", "pilot", Some(100.0)),
            ("b", "red pens", "pilot", Some(200.0)),
            ("c", "guitar amp", "", None),
        ] {
            catalog.insert(Item { id: id.into(), title: title.into(), brand: brand.into(), price }).unwrap();
        }
        let mut v = HashMap::new();
        v.insert("a".to_string(), vec![1.0, 0.0]);
        v.insert("b".to_string(), vec![1.0, 1.0]);
        let table = EmbeddingTable::from_vectors(2, v).unwrap();
        let t = TextEmbeddingProvider::hashed("title", 64, 1).unwrap();
        let b = TextEmbeddingProvider::hashed("brand", 64, 2).unwrap();
        (catalog, table, t, b)
    }

    #[test]
    fn feature_vector_rules() {
        let (catalog, table, t, b) = fixture();
        let ctx = FeatureContext { window: WindowConfig::new(1).unwrap(), behavior: &table, title: &t, brand: &b, catalog: &catalog };
        let fv = ctx.build_feature_vector(&session(&["a", "b"]), 0).unwrap();
        assert_eq!(fv.len(), 4);
        assert!((fv.values[0] - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((fv.values[1] - 1.0).abs() < 1e-12);
        assert_eq!(fv.values[3], price_similarity(100.0, 200.0).unwrap());

        // c is out of the behavior vocabulary, has no brand and no price
        let fv = ctx.build_feature_vector(&session(&["a", "c"]), 0).unwrap();
        assert_eq!(fv.values[0], 0.0);
        assert_eq!(fv.values[1], 0.0);
        assert!(fv.values[2] != 0.0);
        assert_eq!(fv.values[3], 0.0);

        let err = ctx.build_feature_vector(&session(&["a", "zz"]), 0).unwrap_err();
        assert!(err.to_string().contains("zz"));
    }

    #[test]
    fn padded_self_pairs() {
        let (catalog, table, t, b) = fixture();
        let ctx = FeatureContext { window: WindowConfig::new(2).unwrap(), behavior: &table, title: &t, brand: &b, catalog: &catalog };
        let fv = ctx.build_feature_vector(&session(&["a", "b", "c"]), 0).unwrap();
        assert_eq!(fv.len(), 24);
        // pair (L_2, L_1) is (a, a)
        assert!((fv.values[0] - 1.0).abs() < 1e-12);
        assert!((fv.values[2] - 1.0).abs() < 1e-12);
        assert_eq!(fv.values[3], 1.0);
    }

    #[test]
    fn dataset_rows_and_file_roundtrip() {
        let (catalog, table, t, b) = fixture();
        let ctx = FeatureContext { window: WindowConfig::new(2).unwrap(), behavior: &table, title: &t, brand: &b, catalog: &catalog };
        let a1 = AnnotatedSession::new(Session::new("s1", vec!["a".into(), "b".into(), "c".into(), "a".into()]), vec![0, 1, 0], "x").unwrap();
        let a2 = AnnotatedSession::new(Session::new("s2", vec!["c".into(), "b".into(), "a".into()]), vec![1, 0], "x").unwrap();
        let single = AnnotatedSession::new(Session::new("s3", vec!["a".into()]), vec![], "x").unwrap();
        let ds = ctx.build_dataset(&[a1, a2, single]).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.y, [0, 1, 0, 1, 0]);
        assert_eq!(ds.groups, ["s1", "s1", "s1", "s2", "s2"]);
        assert_eq!(ds.gaps, [0, 1, 2, 0, 1]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.tsv");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("layout=1", "layout=9")).unwrap();
        assert!(Dataset::load(&path).is_err());
        let truncated: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        std::fs::write(&path, truncated).unwrap();
        assert!(Dataset::load(&path).is_err());
    }
}
