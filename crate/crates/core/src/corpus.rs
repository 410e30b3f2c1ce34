//! Synthetic catalog + user sequences, and the on-disk formats for both.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::ItemRecord;

const TOPIC_NAMES: [&str; 8] = ["sports", "finance", "travel", "health", "music", "science", "food", "politics"];
const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

/// One user's interaction history and the held-out next item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    pub history: Vec<String>,
    pub target: String,
}

impl UserSequence {
    /// Keeps only the most recent `max_history` items.
    pub fn truncated(&self, max_history: usize) -> UserSequence {
        let start = self.history.len().saturating_sub(max_history);
        UserSequence { user_id: self.user_id.clone(), history: self.history[start..].to_vec(), target: self.target.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_items: usize,
    pub n_topics: usize,
    /// Words private to each topic.
    pub topic_pool: usize,
    /// Filler words shared by every topic.
    pub shared_pool: usize,
    /// Probability that a text word is filler rather than topical.
    pub filler_rate: f64,
    pub title_len: usize,
    pub abstract_len: usize,
    pub n_users: usize,
    pub min_history: usize,
    pub max_history: usize,
    /// Probability that the next item comes from the user's dominant topic.
    pub coherence: f64,
    /// Zipf exponent of item popularity inside a topic (0 = uniform).
    pub popularity_skew: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_items: 200,
            n_topics: 4,
            topic_pool: 40,
            shared_pool: 20,
            filler_rate: 0.2,
            title_len: 4,
            abstract_len: 10,
            n_users: 600,
            min_history: 3,
            max_history: 10,
            coherence: 0.9,
            popularity_skew: 1.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.n_topics < 2 {
            return bad(format!("need at least 2 topics, got {}", self.n_topics));
        }
        if !(self.coherence > 0.5 && self.coherence <= 1.0) {
            return bad(format!("coherence {} outside (0.5, 1]", self.coherence));
        }
        if self.topic_pool < self.title_len || self.topic_pool == 0 {
            return bad(format!("topic pool of {} words is smaller than a title of {}", self.topic_pool, self.title_len));
        }
        if self.title_len == 0 || self.abstract_len == 0 {
            return bad("titles and abstracts need at least one word".into());
        }
        if self.n_items == 0 || self.n_users == 0 {
            return bad("need at least one item and one user".into());
        }
        if self.min_history == 0 || self.min_history > self.max_history {
            return bad(format!("history length range {}..={} is invalid", self.min_history, self.max_history));
        }
        if !(0.0..=1.0).contains(&self.filler_rate) || self.popularity_skew < 0.0 {
            return bad("filler_rate must lie in [0, 1] and popularity_skew must be non-negative".into());
        }
        Ok(())
    }
}

pub fn topic_name(t: usize) -> String {
    match TOPIC_NAMES.get(t) {
        Some(n) => n.to_string(),
        None => format!("topic{t}"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub items: Vec<ItemRecord>,
    /// Topic index of every item, aligned with `items`.
    pub topics: Vec<usize>,
    pub users: Vec<UserSequence>,
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..=3);
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS[rng.random_range(0..ONSETS.len())], NUCLEI[rng.random_range(0..NUCLEI.len())]))
        .collect()
}

fn word_pools(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (Vec<Vec<String>>, Vec<String>) {
    let mut used: HashSet<String> = (0..spec.n_topics).map(topic_name).collect();
    let mut fresh = |rng: &mut ChaCha8Rng| loop {
        let w = pseudo_word(rng);
        if used.insert(w.clone()) {
            return w;
        }
    };
    let topics = (0..spec.n_topics).map(|_| (0..spec.topic_pool).map(|_| fresh(rng)).collect()).collect();
    let shared = (0..spec.shared_pool).map(|_| fresh(rng)).collect();
    (topics, shared)
}

fn text(rng: &mut ChaCha8Rng, len: usize, pool: &[String], shared: &[String], filler_rate: f64) -> String {
    (0..len)
        .map(|_| {
            if !shared.is_empty() && rng.random_bool(filler_rate) {
                shared[rng.random_range(0..shared.len())].as_str()
            } else {
                pool[rng.random_range(0..pool.len())].as_str()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Catalog of `(title, abstract, category)` items and topic-coherent users.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (pools, shared) = word_pools(spec, &mut rng);
    let mut items = Vec::with_capacity(spec.n_items);
    let mut topics = Vec::with_capacity(spec.n_items);
    for j in 0..spec.n_items {
        let t = rng.random_range(0..spec.n_topics);
        // Titles are mostly topical so reconstruction is learnable from a few words.
        let title = text(&mut rng, spec.title_len, &pools[t], &shared, spec.filler_rate / 2.0);
        let abs = text(&mut rng, spec.abstract_len, &pools[t], &shared, spec.filler_rate);
        let attrs = vec![
            ("title".to_string(), title),
            ("abstract".to_string(), abs),
            ("category".to_string(), topic_name(t)),
        ];
        items.push(ItemRecord::new(format!("item{j:04}"), attrs, 2)?);
        topics.push(t);
    }

    let members: Vec<Vec<usize>> = (0..spec.n_topics).map(|t| (0..spec.n_items).filter(|&j| topics[j] == t).collect()).collect();
    let popularity: Vec<Option<WeightedIndex<f64>>> = members
        .iter()
        .map(|m| {
            if m.is_empty() {
                None
            } else {
                let w: Vec<f64> = (1..=m.len()).map(|r| 1.0 / (r as f64).powf(spec.popularity_skew)).collect();
                Some(WeightedIndex::new(w).expect("positive weights"))
            }
        })
        .collect();

    let mut users = Vec::with_capacity(spec.n_users);
    for u in 0..spec.n_users {
        let dominant = rng.random_range(0..spec.n_topics);
        let len = rng.random_range(spec.min_history..=spec.max_history);
        let mut seq: Vec<usize> = Vec::with_capacity(len + 1);
        while seq.len() < len + 1 {
            let pick = match &popularity[dominant] {
                Some(dist) if rng.random_bool(spec.coherence) => members[dominant][dist.sample(&mut rng)],
                _ => rng.random_range(0..spec.n_items),
            };
            // No immediate repeats unless the catalog leaves no choice.
            if seq.last() == Some(&pick) && spec.n_items > 1 && members[dominant].len() > 1 {
                continue;
            }
            seq.push(pick);
        }
        let target = seq.pop().expect("len + 1 draws");
        users.push(UserSequence {
            user_id: format!("user{u:04}"),
            history: seq.iter().map(|&j| items[j].item_id.clone()).collect(),
            target: items[target].item_id.clone(),
        });
    }
    Ok(SyntheticCorpus { items, topics, users })
}

#[derive(Serialize, Deserialize)]
struct CatalogLine {
    item_id: String,
    attributes: Vec<(String, String)>,
}

pub fn write_items_jsonl(path: &Path, items: &[ItemRecord]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        let line = CatalogLine { item_id: item.item_id.clone(), attributes: item.attributes.clone() };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    write_file(path, &out)
}

/// Reads a JSON-lines catalog; the first `content_attrs` attributes of every
/// item form its content block.
pub fn read_items_jsonl(path: &Path, content_attrs: usize) -> Result<Vec<ItemRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CatalogLine = serde_json::from_str(line)
            .map_err(|e| Error::Artifact { path: path.to_path_buf(), detail: format!("line {}: {e}", no + 1) })?;
        if !seen.insert(parsed.item_id.clone()) {
            return Err(Error::Artifact { path: path.to_path_buf(), detail: format!("duplicate item id {}", parsed.item_id) });
        }
        let r = content_attrs.min(parsed.attributes.len().max(1));
        items.push(ItemRecord::new(parsed.item_id, parsed.attributes, r)?);
    }
    if items.is_empty() {
        return Err(Error::Artifact { path: path.to_path_buf(), detail: "catalog is empty".into() });
    }
    Ok(items)
}

pub fn write_sequences_tsv(path: &Path, users: &[UserSequence]) -> Result<()> {
    let mut out = Vec::new();
    for u in users {
        writeln!(out, "{}\t{}\t{}", u.user_id, u.history.join(","), u.target).expect("writing to a Vec");
    }
    write_file(path, &out)
}

pub fn read_sequences_tsv(path: &Path) -> Result<Vec<UserSequence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut users = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |d: &str| Error::Artifact { path: path.to_path_buf(), detail: format!("line {}: {d}", no + 1) };
        let fields: Vec<&str> = line.split('\t').collect();
        let [user, history, target] = fields[..] else { return Err(bad("expected 3 tab-separated fields")) };
        let history: Vec<String> = history.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect();
        if history.is_empty() {
            return Err(bad("empty history"));
        }
        users.push(UserSequence { user_id: user.to_string(), history, target: target.to_string() });
    }
    Ok(users)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
