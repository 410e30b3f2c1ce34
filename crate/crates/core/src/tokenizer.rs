//! Dense tokenizer: four-block training sequences, the cascaded attention
//! mask, dual forward propagation and dense-embedding extraction.
//!
//! A sample is `content ++ <DT1..DTv> ++ <PH1..PHv> ++ [task; answer; <eos>]`.
//! The first pass runs content and token blocks only and captures the final
//! hidden states at the dense-token positions; the second pass runs the whole
//! sequence with those vectors written into the placeholder slots, so the
//! answer can only see the item through the placeholders.

use std::collections::HashSet;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mask, Tape, Var};
use crate::backbone::{Backbone, Bound, FreezePolicy};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;
use crate::vocab::{BlockTag, TokenId, TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    /// Ordered `(name, text)` pairs; the order defines the task indices.
    pub attributes: Vec<(String, String)>,
    /// Leading attributes that form the content block.
    pub content_attrs: usize,
}

impl ItemRecord {
    pub fn new(item_id: impl Into<String>, attributes: Vec<(String, String)>, content_attrs: usize) -> Result<Self> {
        let item = ItemRecord { item_id: item_id.into(), attributes, content_attrs };
        item.validate()?;
        Ok(item)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.attributes.len();
        if m == 0 {
            return Err(Error::Invalid(format!("item {} has no attributes", self.item_id)));
        }
        if self.content_attrs == 0 || self.content_attrs > m {
            return Err(Error::Invalid(format!(
                "item {}: content attribute count {} outside 1..={m}",
                self.item_id, self.content_attrs
            )));
        }
        let mut seen = HashSet::new();
        for (name, _) in &self.attributes {
            if !seen.insert(name) {
                return Err(Error::Invalid(format!("item {}: duplicate attribute {name}", self.item_id)));
            }
        }
        Ok(())
    }

    pub fn attr_count(&self) -> usize {
        self.attributes.len()
    }

    pub fn attr(&self, name: &str) -> Option<&str> {
        self.attributes.iter().find(|(n, _)| n == name).map(|(_, t)| t.as_str())
    }

    /// Task name for attribute `i` (1-based).
    pub fn task_name(&self, i: usize) -> String {
        let name = &self.attributes[i - 1].0;
        if i <= self.content_attrs {
            format!("reconstruct_{name}")
        } else {
            format!("generate_{name}")
        }
    }
}

/// Distinct tokenizer task names over a catalog, in first-seen order.
pub fn task_names(items: &[ItemRecord]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for item in items {
        for i in 1..=item.attr_count() {
            let t = item.task_name(i);
            if seen.insert(t.clone()) {
                out.push(t);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub content: Range<usize>,
    pub token: Range<usize>,
    pub placeholder: Range<usize>,
    pub task: Range<usize>,
}

impl BlockLayout {
    /// Contiguous layout from block lengths.
    pub fn from_lengths(content: usize, v: usize, task: usize) -> Self {
        let c = 0..content;
        let t = content..content + v;
        let p = t.end..t.end + v;
        let k = p.end..p.end + task;
        BlockLayout { content: c, token: t, placeholder: p, task: k }
    }

    pub fn v(&self) -> usize {
        self.token.len()
    }

    pub fn len(&self) -> usize {
        self.task.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block_of(&self, pos: usize) -> BlockTag {
        if self.content.contains(&pos) {
            BlockTag::Content
        } else if self.token.contains(&pos) {
            BlockTag::Token
        } else if self.placeholder.contains(&pos) {
            BlockTag::Placeholder
        } else {
            BlockTag::Task
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.content.start == 0
            && !self.content.is_empty()
            && self.token.start == self.content.end
            && self.placeholder.start == self.token.end
            && self.task.start == self.placeholder.end
            && self.token.len() == self.placeholder.len()
            && !self.token.is_empty()
            && !self.task.is_empty();
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("malformed block layout {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TokenizerSample {
    pub item_id: String,
    pub sequence: TokenSequence,
    pub layout: BlockLayout,
    /// 1-based attribute index the task block answers.
    pub task_index: usize,
    pub target: String,
}

impl TokenizerSample {
    /// `(targets, flags)` for next-token loss over the task answer.
    pub fn loss_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let n = self.sequence.len();
        let mut targets = vec![0usize; n];
        let mut flags = vec![false; n];
        for p in self.layout.task.start..self.layout.task.end - 1 {
            targets[p] = self.sequence.ids[p + 1] as usize;
            flags[p] = true;
        }
        (targets, flags)
    }
}

fn content_ids(item: &ItemRecord, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    let mut ids = Vec::new();
    for (_, text) in &item.attributes[..item.content_attrs] {
        ids.extend(vocab.encode_ids(text)?);
    }
    Ok(ids)
}

/// Content block capped so every one of the item's samples fits.
fn budgeted_content(item: &ItemRecord, vocab: &Vocabulary, v: usize, max_seq_len: usize) -> Result<Vec<TokenId>> {
    item.validate()?;
    let mut longest_task = 0;
    for (_, text) in &item.attributes {
        longest_task = longest_task.max(vocab.encode_ids(text)?.len() + 2);
    }
    let structural = 2 * v + longest_task;
    if structural >= max_seq_len {
        return Err(Error::Invalid(format!(
            "item {}: dense, placeholder and task blocks need {structural} of {max_seq_len} positions",
            item.item_id
        )));
    }
    let mut content = content_ids(item, vocab)?;
    content.truncate(max_seq_len - structural);
    if content.is_empty() {
        return Err(Error::Invalid(format!("item {} has empty content", item.item_id)));
    }
    Ok(content)
}

fn push_dense_and_placeholders(seq: &mut TokenSequence, vocab: &Vocabulary, v: usize) -> Result<()> {
    for j in 1..=v {
        seq.push(vocab.dense_id(j)?, BlockTag::Token);
    }
    for j in 1..=v {
        seq.push(vocab.placeholder_id(j)?, BlockTag::Placeholder);
    }
    Ok(())
}

/// Builds the training sequence for attribute `task_index` (1-based) of `item`.
pub fn build_sample(item: &ItemRecord, task_index: usize, vocab: &Vocabulary, max_seq_len: usize) -> Result<TokenizerSample> {
    let v = vocab.dense_count();
    if v == 0 {
        return Err(Error::Vocab("dense tokens are not registered".into()));
    }
    if task_index == 0 || task_index > item.attr_count() {
        return Err(Error::Invalid(format!(
            "task index {task_index} outside 1..={} for item {}",
            item.attr_count(),
            item.item_id
        )));
    }
    let content = budgeted_content(item, vocab, v, max_seq_len)?;
    let (_, target) = &item.attributes[task_index - 1];
    let answer = vocab.encode_ids(target)?;
    let mut seq = TokenSequence::default();
    seq.extend(&content, BlockTag::Content);
    push_dense_and_placeholders(&mut seq, vocab, v)?;
    seq.push(vocab.task_id(&item.task_name(task_index))?, BlockTag::Task);
    seq.extend(&answer, BlockTag::Task);
    seq.push(vocab.eos(), BlockTag::Task);
    let layout = BlockLayout::from_lengths(content.len(), v, answer.len() + 2);
    Ok(TokenizerSample { item_id: item.item_id.clone(), sequence: seq, layout, task_index, target: target.clone() })
}

/// All `m` samples of an item, one per attribute.
pub fn item_samples(item: &ItemRecord, vocab: &Vocabulary, max_seq_len: usize) -> Result<Vec<TokenizerSample>> {
    (1..=item.attr_count()).map(|i| build_sample(item, i, vocab, max_seq_len)).collect()
}

/// Which way the two full inter-block links point (query block → key block).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskDirection {
    /// Token block reads content; task block reads placeholders.
    #[default]
    Compressive,
    /// Content block reads the token block; placeholder block reads the task block.
    PaperLiteral,
}

impl FromStr for MaskDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compressive" => Ok(MaskDirection::Compressive),
            "paper-literal" => Ok(MaskDirection::PaperLiteral),
            other => Err(Error::Invalid(format!("unknown mask direction {other}"))),
        }
    }
}

/// Causal inside every block plus the two full cross-block links.
pub fn build_cascaded_mask(layout: &BlockLayout, direction: MaskDirection) -> Mask {
    let n = layout.len();
    let mut mask = Mask::new(n, n, vec![false; n * n]).expect("square");
    for block in [&layout.content, &layout.token, &layout.placeholder, &layout.task] {
        for q in block.clone() {
            for k in block.start..=q {
                mask.set(q, k, true);
            }
        }
    }
    let links = match direction {
        MaskDirection::Compressive => [(&layout.token, &layout.content), (&layout.task, &layout.placeholder)],
        MaskDirection::PaperLiteral => [(&layout.content, &layout.token), (&layout.placeholder, &layout.task)],
    };
    for (queries, keys) in links {
        for q in queries.clone() {
            for k in keys.clone() {
                mask.set(q, k, true);
            }
        }
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DualForwardOptions {
    pub mask_direction: MaskDirection,
    /// Cut the gradient path from the placeholder fill back into pass one.
    pub stop_gradient_fill: bool,
}

/// Result of [`dual_forward`], all handles on the caller's tape.
#[derive(Debug, Clone, Copy)]
pub struct DualForward {
    pub loss: Var,
    /// `v × D` dense-token outputs from pass one.
    pub dense: Var,
    /// Logits of pass two.
    pub logits: Var,
}

/// Pass one over content + token blocks only.
pub fn capture_dense(
    model: &Backbone,
    tape: &mut Tape,
    bound: &Bound,
    sample: &TokenizerSample,
    direction: MaskDirection,
) -> Result<Var> {
    let layout = &sample.layout;
    layout.validate()?;
    let prefix_len = layout.token.end;
    let prefix = TokenSequence {
        ids: sample.sequence.ids[..prefix_len].to_vec(),
        tags: sample.sequence.tags[..prefix_len].to_vec(),
    };
    let mask = build_cascaded_mask(layout, direction).prefix(prefix_len);
    let out = model.forward_tokens(tape, bound, &prefix, &mask)?;
    tape.slice_rows(out.hidden, layout.token.start, layout.token.end)
}

/// Pass two with the placeholder block filled by `fill` (`v × D`).
pub fn forward_with_fill(
    model: &Backbone,
    tape: &mut Tape,
    bound: &Bound,
    sample: &TokenizerSample,
    fill: Var,
    direction: MaskDirection,
) -> Result<(Var, Var)> {
    let mask = build_cascaded_mask(&sample.layout, direction);
    let input = model.embed(tape, bound, &sample.sequence, Some(fill))?;
    let out = model.forward(tape, bound, input, &mask, None)?;
    let (targets, flags) = sample.loss_targets();
    let loss = tape.cross_entropy(out.logits, &targets, &flags)?;
    Ok((loss, out.logits))
}

pub fn dual_forward(
    model: &Backbone,
    tape: &mut Tape,
    bound: &Bound,
    sample: &TokenizerSample,
    opts: DualForwardOptions,
) -> Result<DualForward> {
    if sample.sequence.ids.iter().any(|&id| id as usize >= model.config.vocab_size) {
        return Err(Error::Invalid("sample uses token ids outside the model vocabulary".into()));
    }
    let run = |tape: &mut Tape| -> Result<DualForward> {
        let dense = capture_dense(model, tape, bound, sample, opts.mask_direction)?;
        let fill = if opts.stop_gradient_fill { tape.constant(tape.value(dense).clone())? } else { dense };
        let (loss, logits) = forward_with_fill(model, tape, bound, sample, fill, opts.mask_direction)?;
        Ok(DualForward { loss, dense, logits })
    };
    run(tape).map_err(|e| match e {
        Error::NonFinite { op } => Error::Divergence(format!("non-finite value in {op} for item {}", sample.item_id)),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub forward: DualForwardOptions,
    pub freeze: FreezePolicy,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        TokenizerTrainConfig {
            epochs: 5,
            batch_size: 4,
            adam: AdamConfig::default(),
            seed: 0,
            forward: DualForwardOptions::default(),
            freeze: FreezePolicy::Tokenizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerReport {
    /// Mean loss of the first batch, before any update.
    pub initial_loss: f32,
    pub epoch_losses: Vec<f32>,
    pub samples_per_epoch: usize,
}

/// Post-trains `model` on every `(item, task)` pair with the tokenizer
/// freeze policy.
pub fn train_tokenizer(
    items: &[ItemRecord],
    model: &mut Backbone,
    vocab: &Vocabulary,
    config: &TokenizerTrainConfig,
) -> Result<TokenizerReport> {
    if !vocab.is_frozen() {
        return Err(Error::Vocab("tokenizer training needs a frozen vocabulary".into()));
    }
    if items.is_empty() || config.batch_size == 0 {
        return Err(Error::Invalid("need at least one item and a positive batch size".into()));
    }
    model.set_freeze_policy(config.freeze)?;
    let mut samples = Vec::new();
    for item in items {
        samples.extend(item_samples(item, vocab, model.config.max_seq_len)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(config.adam);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut initial_loss = None;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            let mut batch_loss = 0.0f64;
            for &s in batch {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let out = dual_forward(model, &mut tape, &bound, &samples[s], config.forward)?;
                batch_loss += tape.value(out.loss).item() as f64;
                let scaled = tape.scale(out.loss, 1.0 / batch.len() as f32)?;
                tape.backward(scaled)?;
                tape.accumulate_into(&mut model.params)?;
            }
            initial_loss.get_or_insert((batch_loss / batch.len() as f64) as f32);
            total += batch_loss;
            adam_step(&mut model.params, &mut adam)?;
        }
        let mean = (total / samples.len() as f64) as f32;
        log::info!("tokenizer epoch {} mean loss {mean:.4}", epoch + 1);
        let initial = initial_loss.expect("at least one batch");
        if !mean.is_finite() || mean > 2.0 * initial {
            return Err(Error::Divergence(format!(
                "tokenizer epoch {} mean loss {mean} vs initial {initial}",
                epoch + 1
            )));
        }
        epoch_losses.push(mean);
    }
    Ok(TokenizerReport {
        initial_loss: initial_loss.unwrap_or(f32::NAN),
        epoch_losses,
        samples_per_epoch: samples.len(),
    })
}

/// The `v × n × D` tensor of dense-token outputs, one column per item.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseEmbeddingMatrix {
    pub v: usize,
    pub dim: usize,
    pub item_ids: Vec<String>,
    data: Vec<f32>,
}

impl DenseEmbeddingMatrix {
    pub fn new(v: usize, dim: usize, item_ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if data.len() != v * item_ids.len() * dim {
            return Err(Error::dim("dense embeddings", format!("{v}x{}x{dim} from {} values", item_ids.len(), data.len())));
        }
        Ok(DenseEmbeddingMatrix { v, dim, item_ids, data })
    }

    pub fn n(&self) -> usize {
        self.item_ids.len()
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.v, self.n(), self.dim]
    }

    /// Embedding of dense position `pos` (0-based) for item column `j`.
    pub fn get(&self, pos: usize, j: usize) -> &[f32] {
        let off = (pos * self.n() + j) * self.dim;
        &self.data[off..off + self.dim]
    }

    /// Row `pos` of the matrix as `n` vectors.
    pub fn position_rows(&self, pos: usize) -> Vec<Vec<f32>> {
        (0..self.n()).map(|j| self.get(pos, j).to_vec()).collect()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let t = Tensor::new(vec![self.v, self.n(), self.dim], self.data.clone())?;
        checkpoint::save(dir, serde_json::json!({"kind": "dense_embeddings", "item_ids": self.item_ids}), &[("E", &t)])
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, tensors) = checkpoint::load(dir)?;
        let bad = |d: &str| Error::Artifact { path: dir.to_path_buf(), detail: d.into() };
        if meta["kind"] != "dense_embeddings" {
            return Err(bad("not a dense-embedding artifact"));
        }
        let item_ids: Vec<String> = serde_json::from_value(meta["item_ids"].clone())?;
        let (_, t) = tensors.into_iter().next().ok_or_else(|| bad("missing tensor"))?;
        let &[v, _, dim] = t.shape() else { return Err(bad("expected a rank-3 tensor")) };
        DenseEmbeddingMatrix::new(v, dim, item_ids, t.into_data())
    }
}

/// Dense-token outputs (pass one only) for one item.
pub fn item_dense_outputs(model: &Backbone, vocab: &Vocabulary, item: &ItemRecord, direction: MaskDirection) -> Result<Vec<f32>> {
    let sample = build_sample(item, 1, vocab, model.config.max_seq_len)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let dense = capture_dense(model, &mut tape, &bound, &sample, direction)?;
    Ok(tape.value(dense).data().to_vec())
}

pub fn extract_dense_embeddings(
    items: &[ItemRecord],
    model: &Backbone,
    vocab: &Vocabulary,
    direction: MaskDirection,
) -> Result<DenseEmbeddingMatrix> {
    let v = vocab.dense_count();
    let d = model.config.model_dim;
    let n = items.len();
    let mut data = vec![0.0f32; v * n * d];
    for (j, item) in items.iter().enumerate() {
        let out = item_dense_outputs(model, vocab, item, direction)?;
        for pos in 0..v {
            let dst = (pos * n + j) * d;
            data[dst..dst + d].copy_from_slice(&out[pos * d..(pos + 1) * d]);
        }
    }
    DenseEmbeddingMatrix::new(v, d, items.iter().map(|i| i.item_id.clone()).collect(), data)
}
