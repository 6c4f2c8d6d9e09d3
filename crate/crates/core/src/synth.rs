//! Synthetic corpus with planted topic boundaries.
//!
//! Each latent topic owns an item pool, a title vocabulary, a brand pool and
//! a price band. A session is a run of topic segments; the gap between two
//! segments is labeled 1. Within a segment an item is occasionally replaced
//! by a stray item from another topic, which is not a boundary. Unlabeled
//! sessions drawn from the same process feed the behavior embeddings.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedSession, Catalog, Item, Session};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator parameter: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub annotated_sessions: usize,
    pub unlabeled_sessions: usize,
    pub topics: usize,
    pub items_per_topic: usize,
    pub topic_words: usize,
    /// Topics per family. Sibling topics share half of their title
    /// vocabulary, their brand pool and roughly their price band.
    pub family_size: usize,
    /// Probability that a topic switch moves to a sibling topic.
    pub sibling_switch_prob: f64,
    pub generic_words: usize,
    pub brands_per_topic: usize,
    /// Fraction of items without a brand.
    pub blank_brand_rate: f64,
    /// Fraction of items without a price.
    pub missing_price_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Mean of the geometric number of items beyond `min_len`.
    pub mean_extra_len: f64,
    /// Probability of starting a new topic at a gap once the current segment
    /// has `min_segment_len` items.
    pub switch_prob: f64,
    pub min_segment_len: usize,
    /// Probability that an item inside a segment is a stray from another
    /// topic. A stray is never adjacent to another stray or a boundary.
    pub stray_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            annotated_sessions: 2000,
            unlabeled_sessions: 8000,
            topics: 40,
            items_per_topic: 50,
            topic_words: 12,
            family_size: 2,
            sibling_switch_prob: 0.3,
            generic_words: 40,
            brands_per_topic: 3,
            blank_brand_rate: 0.1,
            missing_price_rate: 0.05,
            min_len: 3,
            max_len: 40,
            mean_extra_len: 2.5,
            switch_prob: 0.23,
            min_segment_len: 2,
            stray_prob: 0.05,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.into()));
        if self.annotated_sessions < 2 {
            return bad("need at least 2 annotated sessions");
        }
        if self.topics < 2 || self.items_per_topic < 2 {
            return bad("need at least 2 topics with 2 items each");
        }
        if self.topic_words == 0 || self.brands_per_topic == 0 {
            return bad("topic_words and brands_per_topic must be positive");
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return bad("need 2 <= min_len <= max_len");
        }
        if self.family_size == 0 {
            return bad("family_size must be positive");
        }
        if self.min_segment_len == 0 {
            return bad("min_segment_len must be positive");
        }
        for (name, p) in [
            ("blank_brand_rate", self.blank_brand_rate),
            ("missing_price_rate", self.missing_price_rate),
            ("switch_prob", self.switch_prob),
            ("sibling_switch_prob", self.sibling_switch_prob),
            ("stray_prob", self.stray_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.mean_extra_len >= 0.0) || !self.mean_extra_len.is_finite() {
            return bad("mean_extra_len must be a non-negative number");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    /// Annotated sessions first, then unlabeled ones.
    pub sessions: Vec<Session>,
    pub annotated: Vec<AnnotatedSession>,
    /// Segment topic at each position of each annotated session. A stray
    /// item carries the topic of the segment it interrupts.
    pub segment_topics: Vec<Vec<usize>>,
    pub catalog: Catalog,
}

impl SynthCorpus {
    pub fn positive_rate(&self) -> f64 {
        let gaps: usize = self.annotated.iter().map(|a| a.gap_labels.len()).sum();
        let pos: usize = self.annotated.iter().map(|a| a.positives()).sum();
        pos as f64 / gaps.max(1) as f64
    }
}

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ra", "tu", "ven", "so", "pli", "dar", "quo", "ne", "fi", "zu", "gal", "bre", "tor", "en",
    "shi", "mo", "lux", "ta", "pe", "cor", "vi",
];

fn word<R: Rng>(rng: &mut R) -> String {
    let n = rng.gen_range(2..=3);
    (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect()
}

fn words<R: Rng>(rng: &mut R, n: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(n);
    while out.len() < n {
        let w = word(rng);
        if !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

struct Topic {
    items: Vec<String>,
    siblings: Vec<usize>,
}

/// Standard normal draw (Box-Muller).
fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn build_catalog<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> (Catalog, Vec<Topic>) {
    let total = cfg.topics * cfg.items_per_topic;
    // opaque ids, assigned in random order
    let mut ids: Vec<usize> = (0..total).collect();
    ids.shuffle(rng);
    let generic = words(rng, cfg.generic_words.max(1));
    let mut catalog = Catalog::default();
    let mut topics = Vec::with_capacity(cfg.topics);
    let n_families = cfg.topics.div_ceil(cfg.family_size);
    let shared = cfg.topic_words / 2;
    let families: Vec<(Vec<String>, Vec<String>, f64)> = (0..n_families)
        .map(|_| {
            let vocab = words(rng, shared);
            let brands: Vec<String> = (0..cfg.brands_per_topic)
                .map(|_| {
                    let mut b = word(rng);
                    b[..1].make_ascii_uppercase();
                    b
                })
                .collect();
            (vocab, brands, rng.gen_range(2.0f64.ln()..800.0f64.ln()))
        })
        .collect();
    for t in 0..cfg.topics {
        let f = t / cfg.family_size;
        let (family_vocab, brands, family_center) = &families[f];
        let mut vocab = family_vocab.clone();
        vocab.extend(words(rng, cfg.topic_words - shared));
        let log_center = family_center + rng.gen_range(-0.3..0.3);
        let siblings = (f * cfg.family_size..((f + 1) * cfg.family_size).min(cfg.topics)).filter(|&u| u != t).collect();
        let mut items = Vec::with_capacity(cfg.items_per_topic);
        for k in 0..cfg.items_per_topic {
            let id = format!("item-{:05}", ids[t * cfg.items_per_topic + k]);
            let n_topic = rng.gen_range(2..=3);
            let mut title: Vec<String> = (0..n_topic).map(|_| vocab.choose(rng).expect("vocab").clone()).collect();
            if cfg.generic_words > 0 {
                title.insert(rng.gen_range(0..=title.len()), generic.choose(rng).expect("generic").clone());
            }
            title.push(format!("{}{}", rng.gen_range(1..100), ["", "x", "s", "pro"].choose(rng).expect("suffix")));
            let brand = if rng.gen_bool(cfg.blank_brand_rate) { String::new() } else { brands.choose(rng).expect("brand").clone() };
            let price = if rng.gen_bool(cfg.missing_price_rate) {
                None
            } else {
                Some(((log_center + 0.3 * normal(rng)).exp() * 100.0).round() / 100.0)
            };
            catalog.insert(Item { id: id.clone(), title: title.join(" "), brand, price }).expect("unique ids");
            items.push(id);
        }
        topics.push(Topic { items, siblings });
    }
    (catalog, topics)
}

fn session_length<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> usize {
    let mut len = cfg.min_len;
    if cfg.mean_extra_len > 0.0 {
        let p_stop = 1.0 / (1.0 + cfg.mean_extra_len);
        while len < cfg.max_len && !rng.gen_bool(p_stop) {
            len += 1;
        }
    }
    len
}

/// One session and its gap labels.
fn generate_session<R: Rng>(cfg: &SynthConfig, topics: &[Topic], rng: &mut R) -> (Vec<String>, Vec<u8>, Vec<usize>) {
    let len = session_length(cfg, rng);
    let mut topic = rng.gen_range(0..topics.len());
    let mut items = Vec::with_capacity(len);
    let mut labels = Vec::with_capacity(len - 1);
    let mut seg_topics = Vec::with_capacity(len);
    let mut seg_len = 0;
    let mut prev_stray = false;
    for pos in 0..len {
        if pos > 0 {
            let remaining = len - pos;
            // a stray is always followed by its own segment again
            let switch = !prev_stray
                && seg_len >= cfg.min_segment_len
                && remaining >= cfg.min_segment_len
                && rng.gen_bool(cfg.switch_prob);
            if switch {
                let siblings = &topics[topic].siblings;
                topic = if !siblings.is_empty() && rng.gen_bool(cfg.sibling_switch_prob) {
                    *siblings.choose(rng).expect("non-empty")
                } else {
                    let next = rng.gen_range(0..topics.len() - 1);
                    if next >= topic { next + 1 } else { next }
                };
                seg_len = 0;
            }
            labels.push(switch as u8);
        }
        // strays only strictly inside a segment so they never sit on a boundary
        let stray = seg_len > 0 && !prev_stray && pos + 1 < len && rng.gen_bool(cfg.stray_prob);
        prev_stray = stray;
        let source = if stray {
            let other = rng.gen_range(0..topics.len() - 1);
            if other >= topic { other + 1 } else { other }
        } else {
            topic
        };
        let pool = &topics[source].items;
        // avoid immediate repeats of the same item
        let mut item = pool.choose(rng).expect("pool").clone();
        while items.last() == Some(&item) {
            item = pool.choose(rng).expect("pool").clone();
        }
        items.push(item);
        seg_topics.push(topic);
        seg_len += 1;
    }
    (items, labels, seg_topics)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (catalog, topics) = build_catalog(cfg, &mut rng);
    let mut sessions = Vec::with_capacity(cfg.annotated_sessions + cfg.unlabeled_sessions);
    let mut annotated = Vec::with_capacity(cfg.annotated_sessions);
    let mut segment_topics = Vec::with_capacity(cfg.annotated_sessions);
    for i in 0..cfg.annotated_sessions {
        let (items, labels, seg) = generate_session(cfg, &topics, &mut rng);
        segment_topics.push(seg);
        let s = Session::new(format!("s-{i:05}"), items);
        sessions.push(s.clone());
        annotated.push(AnnotatedSession::new(s, labels, "synth").expect("labels match gaps"));
    }
    for i in 0..cfg.unlabeled_sessions {
        let (items, _, _) = generate_session(cfg, &topics, &mut rng);
        sessions.push(Session::new(format!("u-{i:06}"), items));
    }
    Ok(SynthCorpus { sessions, annotated, segment_topics, catalog })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { annotated_sessions: 300, unlabeled_sessions: 100, topics: 6, items_per_topic: 10, ..Default::default() }
    }

    #[test]
    fn deterministic_and_valid() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.sessions, b.sessions);
        assert_eq!(a.annotated, b.annotated);
        assert_eq!(a.sessions.len(), 400);
        for s in &a.sessions {
            assert!(s.len() >= 3 && s.len() <= 40);
            assert!(s.items.iter().all(|i| a.catalog.get(i).is_some()));
        }
    }

    #[test]
    fn labels_mark_exactly_the_topic_changes() {
        let c = generate(&small()).unwrap();
        for (a, topics) in c.annotated.iter().zip(&c.segment_topics) {
            for (g, &l) in a.gap_labels.iter().enumerate() {
                assert_eq!(l == 1, topics[g] != topics[g + 1]);
            }
        }
    }

    #[test]
    fn default_positive_rate_is_near_eleven_percent() {
        let c = generate(&SynthConfig { unlabeled_sessions: 0, ..Default::default() }).unwrap();
        let r = c.positive_rate();
        assert!((0.09..=0.13).contains(&r), "{r}");
    }

    #[test]
    fn bad_params_rejected() {
        assert!(generate(&SynthConfig { switch_prob: 1.5, ..small() }).is_err());
        assert!(generate(&SynthConfig { min_len: 1, ..small() }).is_err());
        assert!(generate(&SynthConfig { topics: 1, ..small() }).is_err());
    }
}
