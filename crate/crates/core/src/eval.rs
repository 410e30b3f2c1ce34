//! Retrieval and scoring metrics plus report emission.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Ranked output for one query with its single ground-truth item.
/// `None` slots are generated tuples that map to no item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ranked: Vec<Option<String>>,
    pub target: String,
}

impl RetrievalResult {
    pub fn new(ranked: Vec<Option<String>>, target: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for item in ranked.iter().flatten() {
            if !seen.insert(item.as_str()) {
                return Err(Error::Invalid(format!("ranked list repeats {item}")));
            }
        }
        Ok(RetrievalResult { ranked, target: target.into() })
    }

    /// 1-based rank of the target, if present.
    pub fn rank(&self) -> Option<usize> {
        self.ranked.iter().position(|i| i.as_deref() == Some(self.target.as_str())).map(|p| p + 1)
    }
}

fn check_results(results: &[RetrievalResult], k: usize) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Invalid("empty result set".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("K must be at least 1".into()));
    }
    Ok(())
}

pub fn recall_at_k(results: &[RetrievalResult], k: usize) -> Result<f64> {
    check_results(results, k)?;
    let hits = results.iter().filter(|r| r.rank().is_some_and(|p| p <= k)).count();
    Ok(hits as f64 / results.len() as f64)
}

pub fn ndcg_at_k(results: &[RetrievalResult], k: usize) -> Result<f64> {
    check_results(results, k)?;
    let gain: f64 = results
        .iter()
        .filter_map(|r| r.rank().filter(|&p| p <= k))
        .map(|p| 1.0 / ((p + 1) as f64).log2())
        .sum();
    Ok(gain / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub item: String,
    pub score: f64,
    pub clicked: bool,
}

/// Candidates shown to one user, each with a model score and click label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringImpression {
    pub user_id: String,
    pub candidates: Vec<Candidate>,
}

impl ScoringImpression {
    fn has_both_classes(&self) -> bool {
        self.candidates.iter().any(|c| c.clicked) && self.candidates.iter().any(|c| !c.clicked)
    }

    /// Click labels by descending score; equal scores fall back to item id
    /// so the order never depends on the labels.
    fn ranked_labels(&self) -> Vec<bool> {
        let mut order: Vec<&Candidate> = self.candidates.iter().collect();
        order.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.item.cmp(&b.item)));
        order.iter().map(|c| c.clicked).collect()
    }
}

/// Pairwise AUC with ties worth one half; `None` for single-class impressions.
pub fn auc(imp: &ScoringImpression) -> Option<f64> {
    if !imp.has_both_classes() {
        return None;
    }
    let (mut wins, mut pairs) = (0.0, 0usize);
    for p in imp.candidates.iter().filter(|c| c.clicked) {
        for n in imp.candidates.iter().filter(|c| !c.clicked) {
            pairs += 1;
            wins += match p.score.total_cmp(&n.score) {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Equal => 0.5,
                std::cmp::Ordering::Less => 0.0,
            };
        }
    }
    Some(wins / pairs as f64)
}

/// Reciprocal rank of the first positive.
pub fn reciprocal_rank(imp: &ScoringImpression) -> Option<f64> {
    if !imp.has_both_classes() {
        return None;
    }
    imp.ranked_labels().iter().position(|&c| c).map(|p| 1.0 / (p + 1) as f64)
}

/// Binary-relevance NDCG@K of one impression.
pub fn impression_ndcg(imp: &ScoringImpression, k: usize) -> Option<f64> {
    if !imp.has_both_classes() || k == 0 {
        return None;
    }
    let dcg = |labels: &[bool]| -> f64 {
        labels.iter().take(k).enumerate().filter(|(_, &c)| c).map(|(p, _)| 1.0 / ((p + 2) as f64).log2()).sum()
    };
    let ranked = imp.ranked_labels();
    let mut ideal = ranked.clone();
    ideal.sort_by(|a, b| b.cmp(a));
    Some(dcg(&ranked) / dcg(&ideal))
}

fn mean_over(imps: &[ScoringImpression], f: impl Fn(&ScoringImpression) -> Option<f64>) -> f64 {
    let vals: Vec<f64> = imps.iter().filter_map(f).collect();
    if vals.is_empty() { f64::NAN } else { vals.iter().sum::<f64>() / vals.len() as f64 }
}

pub fn mean_auc(imps: &[ScoringImpression]) -> f64 {
    mean_over(imps, auc)
}

pub fn mrr(imps: &[ScoringImpression]) -> f64 {
    mean_over(imps, reciprocal_rank)
}

/// Flat `{"metric": value}` report, key-sorted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report(pub BTreeMap<String, Value>);

impl Report {
    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<Value>) {
        self.0.insert(key.into(), value.into());
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.0.get(key).and_then(Value::as_f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.0)? + "\n")
    }

    pub fn to_table(&self) -> String {
        let width = self.0.keys().map(String::len).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  value\n", "metric");
        for (k, v) in &self.0 {
            let shown = match v.as_f64() {
                Some(x) if !v.is_u64() => format!("{x:.4}"),
                _ => v.to_string(),
            };
            let _ = writeln!(out, "{k:<width$}  {shown}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::corpus::write_file(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Report(serde_json::from_str(&text)?))
    }
}

/// Recall@K and NDCG@K for each K, plus query and invalid-output counts.
pub fn retrieval_report(results: &[RetrievalResult], ks: &[usize]) -> Result<Report> {
    let mut report = Report::default();
    for &k in ks {
        report.insert(format!("recall@{k}"), recall_at_k(results, k)?);
        report.insert(format!("ndcg@{k}"), ndcg_at_k(results, k)?);
    }
    report.insert("queries", results.len() as u64);
    let invalid: usize = results.iter().map(|r| r.ranked.iter().filter(|i| i.is_none()).count()).sum();
    report.insert("invalid_outputs", invalid as u64);
    Ok(report)
}

/// AUC, MRR and NDCG@1/5 over impressions with both classes; the rest are
/// counted under `skipped_impressions`.
pub fn scoring_report(imps: &[ScoringImpression]) -> Result<Report> {
    if imps.is_empty() {
        return Err(Error::Invalid("no impressions to score".into()));
    }
    let skipped = imps.iter().filter(|i| !i.has_both_classes()).count();
    if skipped > 0 {
        log::warn!("skipping {skipped} single-class impressions");
    }
    if skipped == imps.len() {
        return Err(Error::Invalid("every impression has a single class".into()));
    }
    let mut report = Report::default();
    report.insert("auc", mean_auc(imps));
    report.insert("mrr", mrr(imps));
    report.insert("ndcg@1", mean_over(imps, |i| impression_ndcg(i, 1)));
    report.insert("ndcg@5", mean_over(imps, |i| impression_ndcg(i, 5)));
    report.insert("impressions", (imps.len() - skipped) as u64);
    report.insert("skipped_impressions", skipped as u64);
    Ok(report)
}
