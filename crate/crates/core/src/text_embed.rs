//! Title and brand vectors.
//!
//! A provider either serves vectors exported from an external text model
//! (the precomputed file) or computes them locally from hashed character
//! n-grams. Precomputed providers fall back to the hashed embedder for keys
//! the file does not contain, so every item always gets a vector.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Item;
use crate::vecfile::{self, VecFileError};

pub const TEXT_MAGIC: &str = "sessionseg-text-vectors";
pub const TEXT_VERSION: u32 = 1;
pub const DEFAULT_FALLBACK_DIM: usize = 256;

#[derive(Debug, Error)]
pub enum TextEmbedError {
    #[error("invalid provider config: {0}")]
    Config(String),
    #[error(transparent)]
    File(#[from] VecFileError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Title,
    Brand,
}

impl Field {
    pub fn as_str(self) -> &'static str {
        match self {
            Field::Title => "title",
            Field::Brand => "brand",
        }
    }

    pub fn of(self, item: &Item) -> &str {
        match self {
            Field::Title => &item.title,
            Field::Brand => &item.brand,
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Field {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "title" => Ok(Field::Title),
            "brand" => Ok(Field::Brand),
            other => Err(format!("unknown field `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderSource {
    PrecomputedFile,
    HashedNgram,
}

// FNV-1a followed by a splitmix64 finalizer; stable across platforms and
// toolchain versions, unlike std's DefaultHasher.
fn hash64(bytes: &[u8], seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Hashes lowercase character 2- and 3-grams of `<text>` (with boundary
/// markers) into `dim` signed buckets and L2-normalizes. Empty text maps to
/// the zero vector.
pub fn hashed_ngram_embed(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    assert!(dim >= 1, "dim must be at least 1");
    let mut acc = vec![0.0f64; dim];
    let text = text.trim();
    if text.is_empty() {
        return vec![0.0; dim];
    }
    let chars: Vec<char> = std::iter::once('<').chain(text.to_lowercase().chars()).chain(std::iter::once('>')).collect();
    let mut buf = String::new();
    let mut first = None;
    for n in [2usize, 3] {
        for win in chars.windows(n) {
            buf.clear();
            buf.extend(win);
            let h = hash64(buf.as_bytes(), seed);
            let bucket = (h % dim as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            first.get_or_insert((bucket, sign));
            acc[bucket] += sign;
        }
    }
    let mut norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // every n-gram cancelled out; keep the first one so non-empty text
        // never maps to the zero vector
        let (bucket, sign) = first.expect("text has at least one bigram");
        acc[bucket] = sign;
        norm = 1.0;
    }
    acc.iter().map(|x| x / norm).collect()
}

type CacheKey = (String, Field);

/// Text embedding provider with a per-(item, field) cache.
#[derive(Debug)]
pub struct TextEmbeddingProvider {
    name: String,
    dim: usize,
    source: ProviderSource,
    seed: u64,
    store: HashMap<CacheKey, Vec<f64>>,
    cache: RwLock<HashMap<CacheKey, Arc<[f64]>>>,
}

impl TextEmbeddingProvider {
    pub fn hashed(name: impl Into<String>, dim: usize, seed: u64) -> Result<Self, TextEmbedError> {
        if dim == 0 {
            return Err(TextEmbedError::Config("dim must be at least 1".into()));
        }
        Ok(Self {
            name: name.into(),
            dim,
            source: ProviderSource::HashedNgram,
            seed,
            store: HashMap::new(),
            cache: RwLock::default(),
        })
    }

    /// Loads a precomputed vector file. Keys have the form `<field>:<item-id>`.
    /// Unknown keys fall back to the hashed embedder at the file's dim.
    pub fn load_precomputed(path: &Path, fallback_seed: u64) -> Result<Self, TextEmbedError> {
        let mut store = HashMap::new();
        let header = vecfile::read(path, TEXT_MAGIC, TEXT_VERSION, |key, v| {
            let (field, id) = key.split_once(':').ok_or_else(|| format!("key `{key}` is not <field>:<item-id>"))?;
            let field: Field = field.parse()?;
            if store.insert((id.to_string(), field), v).is_some() {
                return Err(format!("duplicate key `{key}`"));
            }
            Ok(())
        })?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Self {
            name,
            dim: header.dim,
            source: ProviderSource::PrecomputedFile,
            seed: fallback_seed,
            store,
            cache: RwLock::default(),
        })
    }

    /// Writes a precomputed vector file in the format read by
    /// [`TextEmbeddingProvider::load_precomputed`].
    pub fn write_precomputed(path: &Path, dim: usize, vectors: &[(Field, String, Vec<f64>)]) -> Result<(), TextEmbedError> {
        let rows = vectors.iter().map(|(f, id, v)| (format!("{f}:{id}"), v.as_slice()));
        vecfile::write(path, TEXT_MAGIC, TEXT_VERSION, dim, rows)?;
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> ProviderSource {
        self.source
    }

    /// Vector for a raw text, bypassing the precomputed store and cache.
    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        hashed_ngram_embed(text, self.dim, self.seed)
    }

    /// Vector for `item`'s `field`. Precomputed vectors win; otherwise the
    /// hashed embedder is used. Results are cached by (item id, field).
    pub fn embed_field(&self, item: &Item, field: Field) -> Arc<[f64]> {
        let key = (item.id.clone(), field);
        if let Some(v) = self.cache.read().expect("cache lock").get(&key) {
            return v.clone();
        }
        let v: Arc<[f64]> = match self.store.get(&key) {
            Some(v) => v.as_slice().into(),
            None => self.embed_text(field.of(item)).into(),
        };
        let mut cache = self.cache.write().expect("cache lock");
        cache.entry(key).or_insert(v).clone()
    }

    pub fn cached(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            d / (na * nb)
        }
    }

    fn item(id: &str, title: &str, brand: &str) -> Item {
        Item { id: id.into(), title: title.into(), brand: brand.into(), price: None }
    }

    #[test]
    fn hashed_is_deterministic_and_normalized() {
        let a = hashed_ngram_embed("red pen", 256, 7);
        assert_eq!(a, hashed_ngram_embed("red pen", 256, 7));
        assert_ne!(a, hashed_ngram_embed("red pen", 256, 8));
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert!(hashed_ngram_embed("", 16, 7).iter().all(|&x| x == 0.0));
        assert!(hashed_ngram_embed("   ", 16, 7).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn one_char_text_is_not_zero() {
        for dim in [1, 2, 3, 256] {
            let v = hashed_ngram_embed("a", dim, 0);
            assert!(v.iter().any(|&x| x != 0.0), "dim {dim}");
        }
    }

    #[test]
    fn overlapping_text_is_closer() {
        let a = hashed_ngram_embed("red pen", 256, 0);
        let b = hashed_ngram_embed("red pens", 256, 0);
        let c = hashed_ngram_embed("guitar amp", 256, 0);
        assert!(cosine(&a, &b) > cosine(&a, &c));
    }

    #[test]
    fn embed_field_caches_and_handles_empty_brand() {
        let p = TextEmbeddingProvider::hashed("t", 32, 1).unwrap();
        let it = item("A", "blue ink", "");
        let v1 = p.embed_field(&it, Field::Title);
        let v2 = p.embed_field(&it, Field::Title);
        assert!(Arc::ptr_eq(&v1, &v2));
        assert!(p.embed_field(&it, Field::Brand).iter().all(|&x| x == 0.0));
        assert_eq!(p.cached(), 2);
    }

    #[test]
    fn precomputed_with_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        let vecs = vec![
            (Field::Title, "A".to_string(), vec![1.0f64; 8]),
            (Field::Brand, "A".to_string(), vec![0.5f64; 8]),
            (Field::Title, "B".to_string(), vec![-1.0f64; 8]),
        ];
        TextEmbeddingProvider::write_precomputed(&path, 8, &vecs).unwrap();
        let p = TextEmbeddingProvider::load_precomputed(&path, 3).unwrap();
        assert_eq!(p.dim(), 8);
        assert_eq!(p.source(), ProviderSource::PrecomputedFile);
        assert_eq!(&*p.embed_field(&item("A", "x", "y"), Field::Title), &[1.0f64; 8]);
        let unknown = item("Z", "green tea", "");
        let f1 = p.embed_field(&unknown, Field::Title).to_vec();
        assert_eq!(f1, hashed_ngram_embed("green tea", 8, 3));
    }

    #[test]
    fn precomputed_mixed_dims_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        let ones8 = ["1"; 8].join(" ");
        let ones16 = ["1"; 16].join(" ");
        std::fs::write(&path, format!("#{TEXT_MAGIC} v1 dim=8 count=2\ntitle:A\t{ones8}\ntitle:B\t{ones16}\n#end\n"))
            .unwrap();
        assert!(TextEmbeddingProvider::load_precomputed(&path, 0).is_err());
    }
}
