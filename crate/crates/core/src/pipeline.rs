//! Stage-by-stage pipeline with persisted, hash-stamped artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::cluster::{assign_codes, resolve_collisions, save_models, CodeMatrix};
use crate::codetree::CodeTree;
use crate::config::PipelineConfig;
use crate::corpus::{generate_synthetic, read_items_jsonl, read_sequences_tsv, write_file, write_items_jsonl, write_sequences_tsv, UserSequence};
use crate::error::{Error, Result};
use crate::eval::{retrieval_report, scoring_report, Report, RetrievalResult};
use crate::recommender::{
    build_vocabulary, leave_one_out, read_predictions_jsonl, recommend, score_impressions, train_recommender, train_scoring,
    write_predictions_jsonl,
};
use crate::tokenizer::{extract_dense_embeddings, train_tokenizer, DenseEmbeddingMatrix, ItemRecord};
use crate::vocab::Vocabulary;

pub const ARTIFACT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    TokenizerTrain,
    Embed,
    Cluster,
    RecTrain,
    EvalRetrieval,
    EvalScoring,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Synth, Stage::TokenizerTrain, Stage::Embed, Stage::Cluster, Stage::RecTrain, Stage::EvalRetrieval, Stage::EvalScoring];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::TokenizerTrain => "tokenizer-train",
            Stage::Embed => "embed",
            Stage::Cluster => "cluster",
            Stage::RecTrain => "rec-train",
            Stage::EvalRetrieval => "eval-retrieval",
            Stage::EvalScoring => "eval-scoring",
        }
    }

    pub fn upstream(self) -> Option<Stage> {
        match self {
            Stage::Synth => None,
            Stage::TokenizerTrain => Some(Stage::Synth),
            Stage::Embed => Some(Stage::TokenizerTrain),
            Stage::Cluster => Some(Stage::Embed),
            Stage::RecTrain => Some(Stage::Cluster),
            Stage::EvalRetrieval | Stage::EvalScoring => Some(Stage::RecTrain),
        }
    }

    /// Config keys whose values this stage's output depends on directly.
    pub fn keys(self) -> &'static [&'static str] {
        match self {
            Stage::Synth => &[
                "seed",
                "items_path",
                "sequences_path",
                "content_attrs",
                "n_items",
                "n_topics",
                "topic_pool",
                "shared_pool",
                "filler_rate",
                "title_len",
                "abstract_len",
                "n_users",
                "min_history_len",
                "max_history_len",
                "coherence",
                "popularity_skew",
            ],
            Stage::TokenizerTrain => &[
                "seed",
                "v",
                "k",
                "layers",
                "model_dim",
                "heads",
                "ffn_dim",
                "max_seq_len",
                "dropout",
                "tokenizer_lora_rank",
                "tokenizer_lr",
                "tokenizer_epochs",
                "tokenizer_batch",
                "mask_direction",
            ],
            Stage::Embed => &["mask_direction"],
            Stage::Cluster => &["seed", "d", "k", "global_pca"],
            Stage::RecTrain => &[
                "seed",
                "rec_lora_rank",
                "rec_lr",
                "rec_max_epochs",
                "rec_batch",
                "convergence_patience",
                "patience",
                "max_history",
                "alignment",
                "validation_users",
                "beam_width",
            ],
            Stage::EvalRetrieval => &["beam_width", "beam_constraint", "max_history", "eval_ks"],
            Stage::EvalScoring => &["seed", "scoring_epochs", "scoring_negatives", "scoring_batch", "scoring_lr", "max_history"],
        }
    }

    pub fn files(self) -> &'static [&'static str] {
        match self {
            Stage::Synth => &["items.jsonl", "sequences.tsv"],
            Stage::TokenizerTrain => &["vocab.json", "model", "report.json"],
            Stage::Embed => &["embeddings"],
            Stage::Cluster => &["codes.tsv", "models", "report.json"],
            Stage::RecTrain => &["model", "report.json"],
            Stage::EvalRetrieval => &["predictions.jsonl", "report.json"],
            Stage::EvalScoring => &["scorer", "impressions.jsonl", "report.json"],
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| Error::Invalid(format!("unknown stage {s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: u32,
    pub config_hash: String,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageStatus {
    Missing,
    /// Artifacts exist but were produced by a different config or version.
    Stale { found: String },
    Fresh,
}

/// Outcome of one stage invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRun {
    pub stage: Stage,
    pub skipped: bool,
    pub report: Option<Report>,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    root: PathBuf,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let root = config.work_dir();
        Ok(Pipeline { config, root })
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    pub fn hash(&self, stage: Stage) -> Result<String> {
        let upstream = match stage.upstream() {
            Some(up) => self.hash(up)?,
            None => String::new(),
        };
        self.config.hash(stage.keys(), &upstream)
    }

    pub fn status(&self, stage: Stage) -> Result<StageStatus> {
        let dir = self.stage_dir(stage);
        let path = dir.join(MANIFEST);
        let Ok(text) = fs::read_to_string(&path) else { return Ok(StageStatus::Missing) };
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Artifact { path: path.clone(), detail: format!("unreadable manifest: {e}") })?;
        if stage.files().iter().any(|f| !dir.join(f).exists()) {
            return Ok(StageStatus::Missing);
        }
        if manifest.version != ARTIFACT_VERSION {
            return Ok(StageStatus::Stale { found: format!("version {}", manifest.version) });
        }
        if manifest.config_hash != self.hash(stage)? {
            return Ok(StageStatus::Stale { found: manifest.config_hash });
        }
        Ok(StageStatus::Fresh)
    }

    fn check_upstream(&self, stage: Stage, force: bool) -> Result<()> {
        let Some(up) = stage.upstream() else { return Ok(()) };
        match self.status(up)? {
            StageStatus::Fresh => Ok(()),
            StageStatus::Missing => Err(Error::Invalid(format!("stage {} has no artifacts; run it first", up.name()))),
            StageStatus::Stale { found } if !force => Err(Error::Invalid(format!(
                "stage {} artifacts were built with a different config ({found}); rerun it or pass --force",
                up.name()
            ))),
            StageStatus::Stale { .. } => Ok(()),
        }
    }

    /// Runs one stage. Fresh artifacts are kept unless `force`; stale ones
    /// are an error unless `force`.
    pub fn run_stage(&self, stage: Stage, force: bool) -> Result<StageRun> {
        let wrap = |e: Error| Error::Stage { stage: stage.name(), source: Box::new(e) };
        self.check_upstream(stage, force).map_err(wrap)?;
        match self.status(stage).map_err(wrap)? {
            StageStatus::Fresh if !force => {
                log::info!("{}: up to date", stage.name());
                return Ok(StageRun { stage, skipped: true, report: self.saved_report(stage).map_err(wrap)? });
            }
            StageStatus::Stale { found } if !force => {
                return Err(wrap(Error::Invalid(format!(
                    "existing artifacts were built with a different config ({found}); pass --force to overwrite"
                ))));
            }
            _ => {}
        }
        self.execute(stage).map_err(wrap)
    }

    /// Every stage in order, resuming after the last fresh one. Once a stage
    /// reruns, everything downstream reruns too.
    pub fn run_all(&self, force: bool) -> Result<Vec<StageRun>> {
        let mut dirty = false;
        let mut runs = Vec::new();
        for stage in Stage::ALL {
            let wrap = |e: Error| Error::Stage { stage: stage.name(), source: Box::new(e) };
            let status = self.status(stage).map_err(wrap)?;
            let run = match status {
                StageStatus::Fresh if !dirty => {
                    log::info!("{}: up to date", stage.name());
                    StageRun { stage, skipped: true, report: self.saved_report(stage).map_err(wrap)? }
                }
                StageStatus::Stale { found } if !dirty && !force => {
                    return Err(wrap(Error::Invalid(format!(
                        "existing artifacts were built with a different config ({found}); pass --force to overwrite"
                    ))));
                }
                _ => {
                    dirty = true;
                    self.execute(stage).map_err(wrap)?
                }
            };
            runs.push(run);
        }
        Ok(runs)
    }

    fn saved_report(&self, stage: Stage) -> Result<Option<Report>> {
        match stage {
            Stage::EvalRetrieval | Stage::EvalScoring => Ok(Some(Report::load(&self.stage_dir(stage).join("report.json"))?)),
            _ => Ok(None),
        }
    }

    fn execute(&self, stage: Stage) -> Result<StageRun> {
        let dir = self.stage_dir(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        log::info!("{}: running", stage.name());
        let report = match stage {
            Stage::Synth => self.synth(&dir).map(|_| None),
            Stage::TokenizerTrain => self.tokenizer_train(&dir).map(|_| None),
            Stage::Embed => self.embed(&dir).map(|_| None),
            Stage::Cluster => self.cluster(&dir).map(|_| None),
            Stage::RecTrain => self.rec_train(&dir).map(|_| None),
            Stage::EvalRetrieval => self.eval_retrieval(&dir).map(Some),
            Stage::EvalScoring => self.eval_scoring(&dir).map(Some),
        }?;
        let manifest = Manifest {
            stage: stage.name().to_string(),
            version: ARTIFACT_VERSION,
            config_hash: self.hash(stage)?,
            files: stage.files().iter().map(|f| f.to_string()).collect(),
        };
        write_json(&dir.join(MANIFEST), &manifest)?;
        Ok(StageRun { stage, skipped: false, report })
    }

    fn items(&self) -> Result<Vec<ItemRecord>> {
        read_items_jsonl(&self.stage_dir(Stage::Synth).join("items.jsonl"), self.config.content_attrs)
    }

    fn users(&self) -> Result<Vec<UserSequence>> {
        read_sequences_tsv(&self.stage_dir(Stage::Synth).join("sequences.tsv"))
    }

    fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.stage_dir(Stage::TokenizerTrain).join("vocab.json"))
    }

    fn codes(&self) -> Result<CodeMatrix> {
        CodeMatrix::load(&self.stage_dir(Stage::Cluster).join("codes.tsv"), self.config.k)
    }

    fn synth(&self, dir: &Path) -> Result<()> {
        let (items, users) = if self.config.items_path.is_empty() {
            let corpus = generate_synthetic(&self.config.synthetic_spec())?;
            (corpus.items, corpus.users)
        } else {
            let items = read_items_jsonl(Path::new(&self.config.items_path), self.config.content_attrs)?;
            let users = read_sequences_tsv(Path::new(&self.config.sequences_path))?;
            let known: std::collections::HashSet<&str> = items.iter().map(|i| i.item_id.as_str()).collect();
            for u in &users {
                if u.history.is_empty() {
                    return Err(Error::Invalid(format!("user {} has an empty history", u.user_id)));
                }
                if let Some(missing) = u.history.iter().chain([&u.target]).find(|i| !known.contains(i.as_str())) {
                    return Err(Error::UnknownItem(missing.clone()));
                }
            }
            (items, users)
        };
        write_items_jsonl(&dir.join("items.jsonl"), &items)?;
        write_sequences_tsv(&dir.join("sequences.tsv"), &users)
    }

    fn tokenizer_train(&self, dir: &Path) -> Result<()> {
        let items = self.items()?;
        let vocab = build_vocabulary(&items, self.config.v, self.config.k)?;
        let mut model = Backbone::new(self.config.backbone(vocab.len()), &vocab, self.config.seed)?;
        let report = train_tokenizer(&items, &mut model, &vocab, &self.config.tokenizer_train())?;
        vocab.save(&dir.join("vocab.json"))?;
        model.save(&dir.join("model"))?;
        write_json(&dir.join("report.json"), &report)
    }

    fn embed(&self, dir: &Path) -> Result<()> {
        let model = Backbone::load(&self.stage_dir(Stage::TokenizerTrain).join("model"))?;
        let e = extract_dense_embeddings(&self.items()?, &model, &self.vocab()?, self.config.mask_direction)?;
        e.save(&dir.join("embeddings"))
    }

    fn cluster(&self, dir: &Path) -> Result<()> {
        let e = DenseEmbeddingMatrix::load(&self.stage_dir(Stage::Embed).join("embeddings"))?;
        let assignment = assign_codes(&e, &self.config.cluster())?;
        let resolution = resolve_collisions(&assignment)?;
        resolution.codes.save(&dir.join("codes.tsv"))?;
        save_models(&dir.join("models"), &assignment)?;
        let report = serde_json::json!({
            "items": resolution.codes.n(),
            "modified": resolution.modified.len(),
            "deep_moves": resolution.deep_moves,
            "explained_ratio": assignment.pcas.iter().map(|p| p.explained_ratio.clone()).collect::<Vec<_>>(),
            "cluster_sizes": assignment.kmeans.iter().map(|k| k.counts.clone()).collect::<Vec<_>>(),
        });
        write_json(&dir.join("report.json"), &report)
    }

    fn rec_train(&self, dir: &Path) -> Result<()> {
        let mut model = Backbone::load(&self.stage_dir(Stage::TokenizerTrain).join("model"))?;
        let split = leave_one_out(&self.users()?);
        let report = train_recommender(&mut model, &self.vocab()?, &self.items()?, &self.codes()?, &split, &self.config.rec_train())?;
        model.save(&dir.join("model"))?;
        write_json(&dir.join("report.json"), &report)
    }

    fn eval_retrieval(&self, dir: &Path) -> Result<Report> {
        let model = Backbone::load(&self.stage_dir(Stage::RecTrain).join("model"))?;
        let (vocab, codes) = (self.vocab()?, self.codes()?);
        let tree = CodeTree::build(&codes)?;
        let split = leave_one_out(&self.users()?);
        let preds = recommend(&model, &vocab, &tree, &codes, &split.test, self.config.max_history, &self.config.beam())?;
        write_predictions_jsonl(&dir.join("predictions.jsonl"), &preds)?;
        let results: Vec<RetrievalResult> = preds.iter().map(|p| p.to_result()).collect::<Result<_>>()?;
        let report = retrieval_report(&results, &self.config.eval_ks)?;
        report.save(&dir.join("report.json"))?;
        Ok(report)
    }

    fn eval_scoring(&self, dir: &Path) -> Result<Report> {
        let base = Backbone::load(&self.stage_dir(Stage::RecTrain).join("model"))?;
        let (vocab, codes) = (self.vocab()?, self.codes()?);
        let split = leave_one_out(&self.users()?);
        let c = &self.config;
        let impression_seed = c.seed.wrapping_add(1);
        let zero_shot = score_impressions(&base, &vocab, &codes, &split.test, c.scoring_negatives, c.max_history, impression_seed)?;
        let mut scorer = base;
        let losses = train_scoring(&mut scorer, &vocab, &codes, &split.train, &c.scoring_train())?;
        scorer.save(&dir.join("scorer"))?;
        let imps = score_impressions(&scorer, &vocab, &codes, &split.test, c.scoring_negatives, c.max_history, impression_seed)?;
        let mut lines = String::new();
        for imp in &imps {
            lines.push_str(&serde_json::to_string(imp)?);
            lines.push('\n');
        }
        write_file(&dir.join("impressions.jsonl"), lines.as_bytes())?;
        let mut report = scoring_report(&imps)?;
        report.insert("zero_shot_auc", scoring_report(&zero_shot)?.get_f64("auc").unwrap_or(f64::NAN));
        report.insert("final_train_loss", losses.last().copied().map(f64::from).unwrap_or(f64::NAN));
        report.save(&dir.join("report.json"))?;
        Ok(report)
    }

    pub fn predictions(&self) -> Result<Vec<crate::recommender::Prediction>> {
        read_predictions_jsonl(&self.stage_dir(Stage::EvalRetrieval).join("predictions.jsonl"))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
}
