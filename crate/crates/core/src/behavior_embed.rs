//! Item co-occurrence embeddings trained with skip-gram negative sampling.
//!
//! Sessions play the role of sentences and item ids the role of words. The
//! trainer follows the usual word2vec conventions: frequent-item subsampling,
//! a randomly shrunk context window per position, a unigram^0.75 noise
//! distribution, and a learning rate that decays linearly over all epochs.
//! Training runs on one worker and is fully determined by the seed.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Session;
use crate::vecfile::{self, VecFileError};

pub const TABLE_MAGIC: &str = "sessionseg-embeddings";
pub const TABLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training corpus is empty after exclusion")]
    EmptyCorpus,
    #[error(transparent)]
    File(#[from] VecFileError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgnsConfig {
    pub vector_size: usize,
    /// Maximum context radius.
    pub window: usize,
    /// Noise samples per positive pair.
    pub negative: usize,
    /// Subsampling threshold; 0 disables subsampling.
    pub sample: f64,
    pub min_count: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub min_alpha: f64,
    /// Exponent applied to unigram counts for the noise distribution.
    pub ns_exponent: f64,
    pub seed: u64,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        Self {
            vector_size: 200,
            window: 6,
            negative: 1,
            sample: 1e-3,
            min_count: 1,
            epochs: 100,
            alpha: 0.025,
            min_alpha: 1e-4,
            ns_exponent: 0.75,
            seed: 1,
        }
    }
}

impl SgnsConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        let bad = |m: &str| Err(EmbedError::Config(m.to_string()));
        if self.vector_size == 0 {
            return bad("vector_size must be at least 1");
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.alpha > 0.0) || !(self.min_alpha >= 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.sample >= 0.0) {
            return bad("sample must be non-negative");
        }
        Ok(())
    }
}

/// Item id to dense vector map. All vectors have length `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, vectors: HashMap::new() }
    }

    pub fn from_vectors(dim: usize, vectors: HashMap<String, Vec<f64>>) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::Config("dim must be at least 1".into()));
        }
        if let Some((k, v)) = vectors.iter().find(|(_, v)| v.len() != dim || v.iter().any(|x| !x.is_finite())) {
            return Err(EmbedError::Config(format!("vector for `{k}` has length {} or non-finite values", v.len())));
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// The vector for `item_id`, or `None` when the item is out of vocabulary.
    pub fn lookup(&self, item_id: &str) -> Option<&[f64]> {
        self.vectors.get(item_id).map(Vec::as_slice)
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.vectors.contains_key(item_id)
    }

    fn sorted_keys(&self) -> Vec<&String> {
        let mut keys: Vec<_> = self.vectors.keys().collect();
        keys.sort();
        keys
    }

    /// Writes the table with keys in sorted order so output is reproducible.
    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let keys = self.sorted_keys();
        let rows = keys.into_iter().map(|k| (k.clone(), self.vectors[k].as_slice()));
        vecfile::write(path, TABLE_MAGIC, TABLE_VERSION, self.dim, rows)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let mut vectors = HashMap::new();
        let header = vecfile::read(path, TABLE_MAGIC, TABLE_VERSION, |k, v| {
            if vectors.insert(k.to_string(), v).is_some() {
                return Err(format!("duplicate key `{k}`"));
            }
            Ok(())
        })?;
        Ok(Self { dim: header.dim, vectors })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub sessions_total: usize,
    pub sessions_excluded: usize,
    pub sessions_used: usize,
    pub vocab_size: usize,
    pub dropped_below_min_count: usize,
    /// Mean negative-sampling loss per trained pair, one entry per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Loss and gradients of the negative-sampling objective for one example:
/// `-log σ(in·pos) - Σ log σ(-in·neg_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgnsGradient {
    pub loss: f64,
    pub d_input: Vec<f64>,
    pub d_positive: Vec<f64>,
    pub d_negatives: Vec<Vec<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log σ(x)` without overflow.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sgns_loss_and_grad(input: &[f64], positive: &[f64], negatives: &[&[f64]]) -> SgnsGradient {
    let dim = input.len();
    let mut d_input = vec![0.0; dim];
    let s = dot(input, positive);
    let mut loss = neg_log_sigmoid(s);
    // d/ds -log σ(s) = σ(s) - 1
    let gp = sigmoid(s) - 1.0;
    for k in 0..dim {
        d_input[k] += gp * positive[k];
    }
    let d_positive = input.iter().map(|x| gp * x).collect();
    let mut d_negatives = Vec::with_capacity(negatives.len());
    for neg in negatives {
        let s = dot(input, neg);
        loss += neg_log_sigmoid(-s);
        // d/ds -log σ(-s) = σ(s)
        let gn = sigmoid(s);
        for k in 0..dim {
            d_input[k] += gn * neg[k];
        }
        d_negatives.push(input.iter().map(|x| gn * x).collect());
    }
    SgnsGradient { loss, d_input, d_positive, d_negatives }
}

struct Vocab {
    ids: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
}

fn build_vocab<'a>(sessions: impl Iterator<Item = &'a Session>, min_count: usize) -> (Vocab, usize) {
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for s in sessions {
        for it in &s.items {
            *freq.entry(it.as_str()).or_default() += 1;
        }
    }
    let total = freq.len();
    let mut entries: Vec<(&str, u64)> = freq.into_iter().filter(|&(_, c)| c as usize >= min_count).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let dropped = total - entries.len();
    let ids: Vec<String> = entries.iter().map(|(k, _)| k.to_string()).collect();
    let counts = entries.iter().map(|&(_, c)| c).collect();
    let index = ids.iter().enumerate().map(|(i, k)| (k.clone(), i as u32)).collect();
    (Vocab { ids, counts, index }, dropped)
}

/// Cumulative unigram^exponent distribution for drawing noise items.
struct NoiseTable {
    cumulative: Vec<f64>,
}

impl NoiseTable {
    fn new(counts: &[u64], exponent: f64) -> Self {
        let mut acc = 0.0;
        let cumulative = counts
            .iter()
            .map(|&c| {
                acc += (c as f64).powf(exponent);
                acc
            })
            .collect();
        Self { cumulative }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> u32 {
        let total = *self.cumulative.last().expect("vocabulary is non-empty");
        let u = rng.gen::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= u);
        i.min(self.cumulative.len() - 1) as u32
    }
}

/// Applies one SGD step for the example (input `ctx`, target `center`) and
/// returns its loss. `syn0` holds input vectors, `syn1` output vectors.
#[allow(clippy::too_many_arguments)]
fn train_pair<R: Rng>(
    syn0: &mut [f32],
    syn1: &mut [f32],
    dim: usize,
    ctx: usize,
    center: usize,
    negative: usize,
    noise: &NoiseTable,
    lr: f32,
    rng: &mut R,
    work: &mut [f32],
) -> f64 {
    work.fill(0.0);
    let mut loss = 0.0;
    let l1 = ctx * dim;
    for d in 0..=negative {
        let (target, label) = if d == 0 {
            (center, 1.0f32)
        } else {
            let t = noise.draw(rng) as usize;
            if t == center {
                continue;
            }
            (t, 0.0f32)
        };
        let l2 = target * dim;
        let f: f32 = (0..dim).map(|k| syn0[l1 + k] * syn1[l2 + k]).sum();
        let f64v = f as f64;
        loss += if label > 0.0 { neg_log_sigmoid(f64v) } else { neg_log_sigmoid(-f64v) };
        let g = (label - sigmoid(f64v) as f32) * lr;
        for k in 0..dim {
            work[k] += g * syn1[l2 + k];
            syn1[l2 + k] += g * syn0[l1 + k];
        }
    }
    for k in 0..dim {
        syn0[l1 + k] += work[k];
    }
    loss
}

/// Trains item embeddings on `sessions` minus those whose id is in `exclude`.
pub fn train_behavior_embeddings(
    sessions: &[Session],
    config: &SgnsConfig,
    exclude: &HashSet<String>,
) -> Result<(EmbeddingTable, TrainingReport), EmbedError> {
    config.validate()?;
    let used: Vec<&Session> = sessions.iter().filter(|s| !exclude.contains(&s.session_id)).collect();
    let (vocab, dropped) = build_vocab(used.iter().copied(), config.min_count);
    if vocab.ids.is_empty() {
        return Err(EmbedError::EmptyCorpus);
    }
    let corpus: Vec<Vec<u32>> = used
        .iter()
        .map(|s| s.items.iter().filter_map(|it| vocab.index.get(it).copied()).collect::<Vec<_>>())
        .filter(|s: &Vec<u32>| !s.is_empty())
        .collect();
    let total_words: u64 = vocab.counts.iter().sum();

    let keep_prob: Vec<f64> = if config.sample > 0.0 {
        let threshold = config.sample * total_words as f64;
        vocab
            .counts
            .iter()
            .map(|&c| {
                let c = c as f64;
                (((c / threshold).sqrt() + 1.0) * threshold / c).min(1.0)
            })
            .collect()
    } else {
        vec![1.0; vocab.ids.len()]
    };

    let dim = config.vector_size;
    let n = vocab.ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut syn0: Vec<f32> = (0..n * dim).map(|_| (rng.gen::<f32>() - 0.5) / dim as f32).collect();
    let mut syn1 = vec![0.0f32; n * dim];
    let noise = NoiseTable::new(&vocab.counts, config.ns_exponent);
    let mut work = vec![0.0f32; dim];

    let total_steps = (config.epochs as u64 * total_words).max(1) as f64;
    let mut processed = 0u64;
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut kept = Vec::new();
    for _ in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut pairs = 0u64;
        for sentence in &corpus {
            let progress = processed as f64 / total_steps;
            let lr = (config.alpha - (config.alpha - config.min_alpha) * progress).max(config.min_alpha) as f32;
            processed += sentence.len() as u64;
            kept.clear();
            kept.extend(sentence.iter().copied().filter(|&w| {
                let p = keep_prob[w as usize];
                p >= 1.0 || rng.gen::<f64>() < p
            }));
            for pos in 0..kept.len() {
                let reduced = rng.gen_range(0..config.window);
                let radius = config.window - reduced;
                let lo = pos.saturating_sub(radius);
                let hi = (pos + radius).min(kept.len() - 1);
                for c in lo..=hi {
                    if c == pos {
                        continue;
                    }
                    loss_sum += train_pair(
                        &mut syn0,
                        &mut syn1,
                        dim,
                        kept[c] as usize,
                        kept[pos] as usize,
                        config.negative,
                        &noise,
                        lr,
                        &mut rng,
                        &mut work,
                    );
                    pairs += 1;
                }
            }
        }
        epoch_loss.push(if pairs > 0 { loss_sum / pairs as f64 } else { 0.0 });
    }

    let vectors = vocab
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), syn0[i * dim..(i + 1) * dim].iter().map(|&x| x as f64).collect()))
        .collect();
    let report = TrainingReport {
        sessions_total: sessions.len(),
        sessions_excluded: sessions.len() - used.len(),
        sessions_used: used.len(),
        vocab_size: n,
        dropped_below_min_count: dropped,
        epoch_loss,
    };
    Ok((EmbeddingTable { dim, vectors }, report))
}
