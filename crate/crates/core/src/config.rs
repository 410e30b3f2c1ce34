//! Flat `key = value` pipeline configuration with `desk` and `paper` presets.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, FreezePolicy, LoraTargets};
use crate::cluster::ClusterConfig;
use crate::codetree::{BeamConfig, Constraint};
use crate::corpus::SyntheticSpec;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::recommender::{RecTrainConfig, ScoringTrainConfig};
use crate::tokenizer::{DualForwardOptions, MaskDirection, TokenizerTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Invalid(format!("unknown preset {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub seed: u64,
    pub work_dir: String,

    // Catalog. Empty paths mean "generate the synthetic corpus".
    pub items_path: String,
    pub sequences_path: String,
    pub content_attrs: usize,
    pub n_items: usize,
    pub n_topics: usize,
    pub topic_pool: usize,
    pub shared_pool: usize,
    pub filler_rate: f64,
    pub title_len: usize,
    pub abstract_len: usize,
    pub n_users: usize,
    pub min_history_len: usize,
    pub max_history_len: usize,
    pub coherence: f64,
    pub popularity_skew: f64,

    // Backbone and tokenizer.
    pub v: usize,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub tokenizer_lora_rank: usize,
    pub tokenizer_lr: f64,
    pub tokenizer_epochs: usize,
    pub tokenizer_batch: usize,
    pub mask_direction: MaskDirection,

    // Clusterer.
    pub d: usize,
    pub k: usize,
    pub global_pca: bool,

    // Recommender.
    pub rec_lora_rank: usize,
    pub rec_lr: f64,
    pub rec_max_epochs: usize,
    pub rec_batch: usize,
    pub convergence_patience: usize,
    pub patience: usize,
    pub max_history: usize,
    pub alignment: bool,
    pub validation_users: usize,
    pub beam_width: usize,
    pub beam_constraint: Constraint,

    // Scoring.
    pub scoring_epochs: usize,
    pub scoring_negatives: usize,
    pub scoring_batch: usize,
    pub scoring_lr: f64,

    pub eval_ks: Vec<usize>,
}

impl PipelineConfig {
    pub fn desk() -> Self {
        PipelineConfig {
            preset: Preset::Desk,
            seed: 7,
            work_dir: "runs/desk".into(),
            items_path: String::new(),
            sequences_path: String::new(),
            content_attrs: 2,
            n_items: 200,
            n_topics: 4,
            topic_pool: 40,
            shared_pool: 20,
            filler_rate: 0.2,
            title_len: 4,
            abstract_len: 10,
            n_users: 600,
            min_history_len: 3,
            max_history_len: 10,
            coherence: 0.9,
            popularity_skew: 1.0,
            v: 2,
            layers: 2,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            max_seq_len: 256,
            dropout: 0.0,
            tokenizer_lora_rank: 8,
            tokenizer_lr: 1e-3,
            tokenizer_epochs: 20,
            tokenizer_batch: 4,
            mask_direction: MaskDirection::Compressive,
            d: 8,
            k: 16,
            global_pca: false,
            rec_lora_rank: 8,
            rec_lr: 1e-3,
            rec_max_epochs: 30,
            rec_batch: 8,
            convergence_patience: 2,
            patience: 5,
            max_history: 10,
            alignment: true,
            validation_users: 0,
            beam_width: 10,
            beam_constraint: Constraint::Conditional,
            scoring_epochs: 3,
            scoring_negatives: 3,
            scoring_batch: 8,
            scoring_lr: 1e-3,
            eval_ks: vec![1, 5, 10, 20],
        }
    }

    pub fn paper() -> Self {
        PipelineConfig {
            preset: Preset::Paper,
            work_dir: "runs/paper".into(),
            v: 4,
            k: 256,
            d: 32,
            layers: 12,
            model_dim: 768,
            heads: 12,
            ffn_dim: 3072,
            max_seq_len: 512,
            tokenizer_lora_rank: 32,
            rec_lora_rank: 128,
            max_history: 20,
            tokenizer_lr: 1e-4,
            rec_lr: 5e-4,
            beam_width: 20,
            ..PipelineConfig::desk()
        }
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => PipelineConfig::desk(),
            Preset::Paper => PipelineConfig::paper(),
        }
    }

    /// Every key, sorted.
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(PipelineConfig::desk()) {
            Ok(Value::Object(map)) => map.keys().cloned().collect(),
            _ => unreachable!("the config serializes to an object"),
        }
    }

    /// Sets one key from its text form; the value type follows the field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Value::Object(mut map) = serde_json::to_value(&*self)? else {
            unreachable!("the config serializes to an object")
        };
        let bad = |why: &str| Error::Invalid(format!("config key {key} = {value:?}: {why}"));
        let slot = map.get_mut(key).ok_or_else(|| bad("unknown key"))?;
        let value = value.trim();
        *slot = match slot {
            Value::Bool(_) => Value::Bool(value.parse().map_err(|_| bad("expected true or false"))?),
            Value::Number(n) if n.is_u64() => Value::from(value.parse::<u64>().map_err(|_| bad("expected an unsigned integer"))?),
            Value::Number(_) => {
                let x: f64 = value.parse().map_err(|_| bad("expected a number"))?;
                serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(|| bad("not finite"))?
            }
            Value::Array(_) => Value::Array(
                value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse::<u64>().map(Value::from).map_err(|_| bad("expected a comma-separated list of integers")))
                    .collect::<Result<_>>()?,
            ),
            _ => Value::String(value.to_string()),
        };
        *self = serde_json::from_value(Value::Object(map)).map_err(|e| bad(&e.to_string()))?;
        Ok(())
    }

    /// Preset defaults, then the file's entries, then `overrides` in order.
    /// A `preset` entry in the file selects the base unless `preset` is given.
    pub fn resolve(preset: Option<Preset>, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let entries = match file {
            Some(path) => parse_kv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?,
            None => Vec::new(),
        };
        let from_file = entries.iter().find(|(k, _)| k == "preset").map(|(_, v)| v.parse()).transpose()?;
        let mut config = PipelineConfig::preset(preset.or(from_file).unwrap_or(Preset::Desk));
        for (k, v) in entries.iter().filter(|(k, _)| k != "preset") {
            config.set(k, v)?;
        }
        for (k, v) in overrides {
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("v", self.v),
            ("k", self.k),
            ("d", self.d),
            ("tokenizer_epochs", self.tokenizer_epochs),
            ("tokenizer_batch", self.tokenizer_batch),
            ("rec_max_epochs", self.rec_max_epochs),
            ("rec_batch", self.rec_batch),
            ("max_history", self.max_history),
            ("beam_width", self.beam_width),
            ("scoring_batch", self.scoring_batch),
            ("scoring_negatives", self.scoring_negatives),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, x)| *x == 0) {
            return Err(Error::Invalid(format!("{name} must be positive")));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::Invalid("eval_ks must list positive cutoffs".into()));
        }
        if self.items_path.is_empty() != self.sequences_path.is_empty() {
            return Err(Error::Invalid("items_path and sequences_path go together".into()));
        }
        if self.items_path.is_empty() {
            self.synthetic_spec().validate()?;
        }
        self.backbone(1).validate()
    }

    pub fn work_dir(&self) -> PathBuf {
        PathBuf::from(&self.work_dir)
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_items: self.n_items,
            n_topics: self.n_topics,
            topic_pool: self.topic_pool,
            shared_pool: self.shared_pool,
            filler_rate: self.filler_rate,
            title_len: self.title_len,
            abstract_len: self.abstract_len,
            n_users: self.n_users,
            min_history: self.min_history_len,
            max_history: self.max_history_len,
            coherence: self.coherence,
            popularity_skew: self.popularity_skew,
            seed: self.seed,
        }
    }

    pub fn backbone(&self, vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            layers: self.layers,
            model_dim: self.model_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            max_seq_len: self.max_seq_len,
            vocab_size,
            lora_rank: self.tokenizer_lora_rank,
            lora_targets: LoraTargets::QueryValue,
            dropout: self.dropout as f32,
        }
    }

    pub fn tokenizer_train(&self) -> TokenizerTrainConfig {
        TokenizerTrainConfig {
            epochs: self.tokenizer_epochs,
            batch_size: self.tokenizer_batch,
            adam: AdamConfig { lr: self.tokenizer_lr as f32, ..AdamConfig::default() },
            seed: self.seed,
            forward: DualForwardOptions { mask_direction: self.mask_direction, ..DualForwardOptions::default() },
            freeze: FreezePolicy::Tokenizer,
        }
    }

    pub fn cluster(&self) -> ClusterConfig {
        ClusterConfig { d: self.d, k: self.k, seed: self.seed, global_pca: self.global_pca }
    }

    pub fn beam(&self) -> BeamConfig {
        BeamConfig { width: self.beam_width, constraint: self.beam_constraint }
    }

    pub fn rec_train(&self) -> RecTrainConfig {
        RecTrainConfig {
            max_epochs: self.rec_max_epochs,
            convergence_patience: self.convergence_patience,
            patience: self.patience,
            batch_size: self.rec_batch,
            lr: self.rec_lr as f32,
            seed: self.seed,
            alignment: self.alignment,
            lora_rank: self.rec_lora_rank,
            max_history: self.max_history,
            beam: BeamConfig { width: self.beam_width, constraint: Constraint::Conditional },
            validation_users: self.validation_users,
        }
    }

    pub fn scoring_train(&self) -> ScoringTrainConfig {
        ScoringTrainConfig {
            epochs: self.scoring_epochs,
            negatives: self.scoring_negatives,
            batch_size: self.scoring_batch,
            lr: self.scoring_lr as f32,
            seed: self.seed,
            max_history: self.max_history,
        }
    }

    /// `key = value` lines for `keys`, in the given order.
    pub fn render(&self, keys: &[&str]) -> Result<String> {
        let Value::Object(map) = serde_json::to_value(self)? else { unreachable!("object") };
        let mut out = String::new();
        for key in keys {
            let value = map.get(*key).ok_or_else(|| Error::Invalid(format!("unknown config key {key}")))?;
            out.push_str(&format!("{key} = {}\n", render_value(value)));
        }
        Ok(out)
    }

    /// The whole config as a loadable file.
    pub fn to_kv(&self) -> Result<String> {
        let keys = PipelineConfig::keys();
        self.render(&keys.iter().map(String::as_str).collect::<Vec<_>>())
    }

    /// Hex SHA-256 of the rendered `keys` followed by `upstream`.
    pub fn hash(&self, keys: &[&str], upstream: &str) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.render(keys)?.as_bytes());
        h.update(upstream.as_bytes());
        Ok(format!("{:x}", h.finalize()))
    }
}

fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(xs) => xs.iter().map(render_value).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Invalid(format!("config line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_pins_its_values() {
        let p = PipelineConfig::paper();
        assert_eq!((p.v, p.k, p.d), (4, 256, 32));
        assert_eq!((p.tokenizer_lora_rank, p.rec_lora_rank), (32, 128));
        assert_eq!(p.max_history, 20);
        assert_eq!((p.tokenizer_lr, p.rec_lr), (1e-4, 5e-4));
        let d = PipelineConfig::desk();
        assert_eq!((d.v, d.k, d.d, d.layers, d.model_dim), (2, 16, 8, 2, 64));
    }

    #[test]
    fn kv_round_trip() {
        let mut c = PipelineConfig::desk();
        c.set("alignment", "false").unwrap();
        c.set("coherence", "0.75").unwrap();
        c.set("eval_ks", "1, 5").unwrap();
        c.set("beam_constraint", "soft").unwrap();
        let text = c.to_kv().unwrap();
        let mut back = PipelineConfig::desk();
        for (k, v) in parse_kv(&text).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, c);
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut c = PipelineConfig::desk();
        assert!(c.set("v", "-1").is_err());
        assert!(c.set("alignment", "maybe").is_err());
        assert!(c.set("beam_constraint", "loose").is_err());
        assert!(c.set("nope", "1").is_err());
        assert!(parse_kv("just words").is_err());
        assert_eq!(c, PipelineConfig::desk());
    }

    #[test]
    fn hashes_track_only_their_keys() {
        let a = PipelineConfig::desk();
        let mut b = a.clone();
        b.set("beam_width", "3").unwrap();
        assert_eq!(a.hash(&["v", "k"], "").unwrap(), b.hash(&["v", "k"], "").unwrap());
        assert_ne!(a.hash(&["beam_width"], "").unwrap(), b.hash(&["beam_width"], "").unwrap());
        assert_ne!(a.hash(&["v"], "x").unwrap(), a.hash(&["v"], "y").unwrap());
    }
}
