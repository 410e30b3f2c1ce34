//! Generative recommendation over semantic codes: instruction samples,
//! phased training, retrieval and yes/no scoring.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mask, Tape};
use crate::backbone::{plain_sequence, Backbone, FreezePolicy};
use crate::cluster::{CodeMatrix, SemanticId};
use crate::codetree::{code_tokens, conditional_beam_search, score_prompt, BeamConfig, CodeTree};
use crate::corpus::UserSequence;
use crate::error::{Error, Result};
use crate::eval::{Candidate, RetrievalResult, ScoringImpression};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tokenizer::{task_names, ItemRecord};
use crate::vocab::{TokenId, Vocabulary};

pub const REC_TASK: &str = "rec";
pub const ALIGN_TASK: &str = "align";
pub const SCORE_TASK: &str = "score";
pub const RECOMMENDER_TASKS: [&str; 3] = [REC_TASK, ALIGN_TASK, SCORE_TASK];

/// Word vocabulary over every attribute text, with dense, placeholder,
/// tokenizer-task, recommender-task and code tokens registered.
pub fn build_vocabulary(items: &[ItemRecord], v: usize, k: usize) -> Result<Vocabulary> {
    let texts = items.iter().flat_map(|i| i.attributes.iter().map(|(_, t)| t.as_str()));
    let mut vocab = Vocabulary::build(texts, 1, usize::MAX)?;
    let mut names = task_names(items);
    names.extend(RECOMMENDER_TASKS.iter().map(|s| s.to_string()));
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    vocab.register_specials(v, &names, k)?;
    Ok(vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleKind {
    Retrieval,
    Alignment,
    Scoring,
}

/// A prompt followed by its answer span; the loss covers the answer only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecSample {
    pub kind: SampleKind,
    pub ids: Vec<TokenId>,
    pub answer_start: usize,
}

impl RecSample {
    pub fn prompt(&self) -> &[TokenId] {
        &self.ids[..self.answer_start]
    }

    pub fn label(&self) -> &[TokenId] {
        &self.ids[self.answer_start..]
    }

    /// Next-token targets and loss flags; position `p` predicts `ids[p+1]`.
    pub fn loss_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let n = self.ids.len();
        let targets = (0..n).map(|p| if p + 1 < n { self.ids[p + 1] as usize } else { 0 }).collect();
        let flags = (0..n).map(|p| p + 1 < n && p + 1 >= self.answer_start).collect();
        (targets, flags)
    }
}

fn item_codes(codes: &CodeMatrix, index: &HashMap<&str, usize>, item: &str) -> Result<SemanticId> {
    index.get(item).map(|&j| codes.column(j)).ok_or_else(|| Error::UnknownItem(item.to_string()))
}

/// Lookup table from item id to code column.
pub struct CodeIndex<'a> {
    codes: &'a CodeMatrix,
    index: HashMap<&'a str, usize>,
}

impl<'a> CodeIndex<'a> {
    pub fn new(codes: &'a CodeMatrix) -> Self {
        let index = codes.item_ids.iter().enumerate().map(|(j, id)| (id.as_str(), j)).collect();
        CodeIndex { codes, index }
    }

    pub fn codes(&self, item: &str) -> Result<SemanticId> {
        item_codes(self.codes, &self.index, item)
    }

    pub fn tokens(&self, vocab: &Vocabulary, item: &str) -> Result<Vec<TokenId>> {
        code_tokens(vocab, &self.codes(item)?)
    }

    /// Flattened code tokens of the most recent `max_history` items.
    pub fn history_tokens(&self, vocab: &Vocabulary, history: &[String], max_history: usize) -> Result<Vec<TokenId>> {
        if history.is_empty() {
            return Err(Error::Invalid("a user history needs at least one item".into()));
        }
        let start = history.len().saturating_sub(max_history);
        let mut out = Vec::new();
        for item in &history[start..] {
            out.extend(self.tokens(vocab, item)?);
        }
        Ok(out)
    }
}

pub fn retrieval_prompt(seq: &UserSequence, codes: &CodeIndex, vocab: &Vocabulary, max_history: usize) -> Result<Vec<TokenId>> {
    let mut ids = vec![vocab.task_id(REC_TASK)?];
    ids.extend(codes.history_tokens(vocab, &seq.history, max_history)?);
    Ok(ids)
}

pub fn build_retrieval_sample(seq: &UserSequence, codes: &CodeIndex, vocab: &Vocabulary, max_history: usize) -> Result<RecSample> {
    let mut ids = retrieval_prompt(seq, codes, vocab, max_history)?;
    let answer_start = ids.len();
    ids.extend(codes.tokens(vocab, &seq.target)?);
    Ok(RecSample { kind: SampleKind::Retrieval, ids, answer_start })
}

fn title_tokens(item: &ItemRecord, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    let text = item.attr("title").or_else(|| item.attributes.first().map(|(_, t)| t.as_str())).unwrap_or("");
    let ids = vocab.encode_ids(text)?;
    if ids.is_empty() {
        return Err(Error::Invalid(format!("item {} has no title text", item.item_id)));
    }
    Ok(ids)
}

/// Even catalog index: codes to title. Odd: title to codes.
pub fn build_alignment_sample(item: &ItemRecord, index: usize, codes: &CodeIndex, vocab: &Vocabulary) -> Result<RecSample> {
    let code_ids = codes.tokens(vocab, &item.item_id)?;
    let title = title_tokens(item, vocab)?;
    let mut ids = vec![vocab.task_id(ALIGN_TASK)?];
    if index.is_multiple_of(2) {
        ids.extend(&code_ids);
        ids.push(vocab.sep());
        let answer_start = ids.len();
        ids.extend(title);
        ids.push(vocab.eos());
        Ok(RecSample { kind: SampleKind::Alignment, ids, answer_start })
    } else {
        ids.extend(title);
        ids.push(vocab.sep());
        let answer_start = ids.len();
        ids.extend(code_ids);
        Ok(RecSample { kind: SampleKind::Alignment, ids, answer_start })
    }
}

pub fn scoring_prompt(
    history: &[String],
    candidate: &str,
    codes: &CodeIndex,
    vocab: &Vocabulary,
    max_history: usize,
) -> Result<Vec<TokenId>> {
    let mut ids = vec![vocab.task_id(SCORE_TASK)?];
    ids.extend(codes.history_tokens(vocab, history, max_history)?);
    ids.push(vocab.sep());
    ids.extend(codes.tokens(vocab, candidate)?);
    Ok(ids)
}

pub fn build_scoring_sample(
    history: &[String],
    candidate: &str,
    clicked: bool,
    codes: &CodeIndex,
    vocab: &Vocabulary,
    max_history: usize,
) -> Result<RecSample> {
    let mut ids = scoring_prompt(history, candidate, codes, vocab, max_history)?;
    let answer_start = ids.len();
    ids.push(if clicked { vocab.yes() } else { vocab.no() });
    Ok(RecSample { kind: SampleKind::Scoring, ids, answer_start })
}

/// Leave-one-out split of each user: the last history item is the
/// validation target, the sequence target is the test target, and every
/// earlier prefix predicts its successor for training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SequenceSplit {
    pub train: Vec<UserSequence>,
    pub validation: Vec<UserSequence>,
    pub test: Vec<UserSequence>,
}

pub fn leave_one_out(users: &[UserSequence]) -> SequenceSplit {
    let mut split = SequenceSplit::default();
    for u in users {
        let h = &u.history;
        if h.is_empty() {
            continue;
        }
        split.test.push(u.clone());
        if h.len() >= 2 {
            split.validation.push(UserSequence {
                user_id: u.user_id.clone(),
                history: h[..h.len() - 1].to_vec(),
                target: h[h.len() - 1].clone(),
            });
        }
        for end in 1..h.len().saturating_sub(1) {
            split.train.push(UserSequence { user_id: u.user_id.clone(), history: h[..end].to_vec(), target: h[end].clone() });
        }
    }
    split
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecTrainConfig {
    pub max_epochs: usize,
    /// Epochs without validation improvement that end the joint phase.
    pub convergence_patience: usize,
    /// Epochs without improvement that stop the retrieval-only phase.
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    pub alignment: bool,
    pub lora_rank: usize,
    pub max_history: usize,
    pub beam: BeamConfig,
    /// Validation queries scored per epoch; 0 means all.
    pub validation_users: usize,
}

impl Default for RecTrainConfig {
    fn default() -> Self {
        RecTrainConfig {
            max_epochs: 30,
            convergence_patience: 2,
            patience: 5,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            alignment: true,
            lora_rank: 8,
            max_history: 10,
            beam: BeamConfig::default(),
            validation_users: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: u8,
    pub samples: usize,
    pub loss: f32,
    pub val_recall5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecTrainReport {
    pub epochs: Vec<EpochLog>,
    /// First epoch trained retrieval-only.
    pub phase_transition_epoch: Option<usize>,
    pub best_epoch: usize,
    pub best_val_recall5: f64,
}

/// One pass over `samples` in shuffled order; returns the mean loss.
fn train_epoch(
    model: &mut Backbone,
    samples: &[&RecSample],
    batch_size: usize,
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
) -> Result<f32> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0f64;
    for batch in order.chunks(batch_size) {
        for &s in batch {
            let sample = samples[s];
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let out = model.forward_tokens(&mut tape, &bound, &plain_sequence(&sample.ids), &Mask::causal(sample.ids.len()))?;
            let (targets, flags) = sample.loss_targets();
            let loss = tape.cross_entropy(out.logits, &targets, &flags)?;
            total += tape.value(loss).item() as f64;
            let scaled = tape.scale(loss, 1.0 / batch.len() as f32)?;
            tape.backward(scaled)?;
            tape.accumulate_into(&mut model.params)?;
        }
        adam_step(&mut model.params, adam)?;
    }
    Ok((total / samples.len() as f64) as f32)
}

fn check_divergence(stage: &str, epoch: usize, loss: f32, reference: f32) -> Result<()> {
    if !loss.is_finite() || loss > 2.0 * reference {
        return Err(Error::Divergence(format!("{stage} epoch {epoch} mean loss {loss} vs first epoch {reference}")));
    }
    Ok(())
}

/// Fraction of `queries` whose target is among the top five beam hits.
pub fn recall_at_5(
    model: &Backbone,
    vocab: &Vocabulary,
    tree: &CodeTree,
    codes: &CodeIndex,
    queries: &[UserSequence],
    max_history: usize,
    beam: &BeamConfig,
) -> Result<f64> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let beam = BeamConfig { width: beam.width.max(5), ..*beam };
    let mut hits = 0usize;
    for q in queries {
        let prompt = retrieval_prompt(q, codes, vocab, max_history)?;
        let ranked = conditional_beam_search(model, vocab, tree, &prompt, &beam)?;
        if ranked.iter().take(5).any(|h| h.item.as_deref() == Some(q.target.as_str())) {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// Joint retrieval + alignment training, then retrieval only once
/// validation Recall@5 stops improving; early stopping restores the best
/// parameters.
pub fn train_recommender(
    model: &mut Backbone,
    vocab: &Vocabulary,
    items: &[ItemRecord],
    codes: &CodeMatrix,
    split: &SequenceSplit,
    config: &RecTrainConfig,
) -> Result<RecTrainReport> {
    if config.batch_size == 0 || config.max_epochs == 0 {
        return Err(Error::Invalid("recommender training needs a positive batch size and epoch count".into()));
    }
    if split.train.is_empty() {
        return Err(Error::Invalid("no training sequences".into()));
    }
    model.merge_and_reset_lora(config.lora_rank, config.seed)?;
    model.set_freeze_policy(FreezePolicy::Recommender)?;
    let index = CodeIndex::new(codes);
    let tree = CodeTree::build(codes)?;
    let retrieval: Vec<RecSample> = split
        .train
        .iter()
        .map(|s| build_retrieval_sample(s, &index, vocab, config.max_history))
        .collect::<Result<_>>()?;
    let alignment: Vec<RecSample> = if config.alignment {
        items.iter().enumerate().map(|(j, item)| build_alignment_sample(item, j, &index, vocab)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let longest = retrieval.iter().chain(&alignment).map(|s| s.ids.len()).max().unwrap_or(0);
    if longest > model.config.max_seq_len {
        return Err(Error::Invalid(format!("sample length {longest} exceeds max_seq_len {}", model.config.max_seq_len)));
    }
    let validation = match config.validation_users {
        0 => &split.validation[..],
        n => &split.validation[..n.min(split.validation.len())],
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let mut phase = 1u8;
    let mut transition = None;
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut stale = 0usize;
    let mut reference = None;
    let mut epochs = Vec::new();
    for epoch in 1..=config.max_epochs {
        let mut batch: Vec<&RecSample> = retrieval.iter().collect();
        if phase == 1 {
            batch.extend(alignment.iter());
        }
        let loss = train_epoch(model, &batch, config.batch_size, &mut adam, &mut rng)?;
        check_divergence("recommender", epoch, loss, *reference.get_or_insert(loss))?;
        let recall = recall_at_5(model, vocab, &tree, &index, validation, config.max_history, &config.beam)?;
        log::info!("recommender epoch {epoch} phase {phase} loss {loss:.4} val R@5 {recall:.4}");
        epochs.push(EpochLog { epoch, phase, samples: batch.len(), loss, val_recall5: recall });
        if best.as_ref().is_none_or(|b| recall > b.1) {
            best = Some((epoch, recall, model.params.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        if phase == 1 && stale >= config.convergence_patience {
            phase = 2;
            transition = Some(epoch + 1);
            stale = 0;
        } else if phase == 2 && stale >= config.patience {
            break;
        }
    }
    let (best_epoch, best_val_recall5, params) = best.expect("at least one epoch");
    model.params.load_values(&params)?;
    Ok(RecTrainReport { epochs, phase_transition_epoch: transition, best_epoch, best_val_recall5 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringTrainConfig {
    pub epochs: usize,
    pub negatives: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    pub max_history: usize,
}

impl Default for ScoringTrainConfig {
    fn default() -> Self {
        ScoringTrainConfig { epochs: 3, negatives: 3, batch_size: 8, lr: 1e-3, seed: 0, max_history: 10 }
    }
}

/// The target plus `negatives` distinct uniform draws from the rest of the
/// catalog, as `(item, clicked)` in that order.
pub fn sample_candidates(target: &str, catalog: &[String], negatives: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(String, bool)>> {
    let pool: Vec<&String> = catalog.iter().filter(|i| i.as_str() != target).collect();
    if pool.len() < negatives {
        return Err(Error::Invalid(format!("catalog too small for {negatives} negatives")));
    }
    let mut out = vec![(target.to_string(), true)];
    let mut chosen = std::collections::BTreeSet::new();
    while chosen.len() < negatives {
        chosen.insert(rng.random_range(0..pool.len()));
    }
    // Draw order, not index order, so the negatives stay uniform.
    let mut picks: Vec<usize> = chosen.into_iter().collect();
    picks.shuffle(rng);
    out.extend(picks.into_iter().map(|p| (pool[p].clone(), false)));
    Ok(out)
}

/// Fine-tunes `model` on yes/no samples drawn from `train` sequences.
pub fn train_scoring(
    model: &mut Backbone,
    vocab: &Vocabulary,
    codes: &CodeMatrix,
    train: &[UserSequence],
    config: &ScoringTrainConfig,
) -> Result<Vec<f32>> {
    if train.is_empty() || config.batch_size == 0 {
        return Err(Error::Invalid("scoring training needs sequences and a positive batch size".into()));
    }
    model.set_freeze_policy(FreezePolicy::Recommender)?;
    let index = CodeIndex::new(codes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samples = Vec::new();
    for seq in train {
        for (cand, clicked) in sample_candidates(&seq.target, &codes.item_ids, config.negatives, &mut rng)? {
            samples.push(build_scoring_sample(&seq.history, &cand, clicked, &index, vocab, config.max_history)?);
        }
    }
    let refs: Vec<&RecSample> = samples.iter().collect();
    let mut adam = AdamState::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let mut losses = Vec::new();
    for epoch in 1..=config.epochs {
        let loss = train_epoch(model, &refs, config.batch_size, &mut adam, &mut rng)?;
        log::info!("scoring epoch {epoch} loss {loss:.4}");
        check_divergence("scoring", epoch, loss, *losses.first().unwrap_or(&loss))?;
        losses.push(loss);
    }
    Ok(losses)
}

/// One ranked retrieval result; `None` entries are code tuples that are
/// not catalog items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub user_id: String,
    pub target: String,
    pub ranked_items: Vec<Option<String>>,
    pub log_probs: Vec<f64>,
}

impl Prediction {
    pub fn to_result(&self) -> Result<RetrievalResult> {
        RetrievalResult::new(self.ranked_items.clone(), self.target.clone())
    }
}

pub fn recommend(
    model: &Backbone,
    vocab: &Vocabulary,
    tree: &CodeTree,
    codes: &CodeMatrix,
    queries: &[UserSequence],
    max_history: usize,
    beam: &BeamConfig,
) -> Result<Vec<Prediction>> {
    let index = CodeIndex::new(codes);
    queries
        .iter()
        .map(|q| {
            let prompt = retrieval_prompt(q, &index, vocab, max_history)?;
            let hits = conditional_beam_search(model, vocab, tree, &prompt, beam)?;
            Ok(Prediction {
                user_id: q.user_id.clone(),
                target: q.target.clone(),
                log_probs: hits.iter().map(|h| h.log_prob).collect(),
                ranked_items: hits.into_iter().map(|h| h.item).collect(),
            })
        })
        .collect()
}

pub fn write_predictions_jsonl(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut out = String::new();
    for p in predictions {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    crate::corpus::write_file(path, out.as_bytes())
}

pub fn read_predictions_jsonl(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Scores each test user's target against `negatives` random items.
pub fn score_impressions(
    model: &Backbone,
    vocab: &Vocabulary,
    codes: &CodeMatrix,
    queries: &[UserSequence],
    negatives: usize,
    max_history: usize,
    seed: u64,
) -> Result<Vec<ScoringImpression>> {
    let index = CodeIndex::new(codes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let mut candidates = Vec::new();
        for (cand, clicked) in sample_candidates(&q.target, &codes.item_ids, negatives, &mut rng)? {
            let prompt = scoring_prompt(&q.history, &cand, &index, vocab, max_history)?;
            candidates.push(Candidate { item: cand, score: score_prompt(model, vocab, &prompt)?.yes, clicked });
        }
        out.push(ScoringImpression { user_id: q.user_id.clone(), candidates });
    }
    Ok(out)
}
