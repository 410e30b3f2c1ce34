//! Decoder-only transformer shared by the dense tokenizer and the recommender.
//!
//! Pre-norm blocks with GELU feed-forward layers, learned absolute positions
//! and an output head tied to the token embedding table. The attention mask
//! is supplied per call, so the same weights serve causal, cascaded and
//! prefix masks.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mask, Tape, Var};
use crate::checkpoint::{self, NamedTensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{mm_nn, Tensor};
use crate::vocab::{BlockTag, TokenId, TokenKind, TokenSequence, Vocabulary};

/// Which attention projections carry low-rank adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoraTargets {
    QueryValue,
    All,
}

impl LoraTargets {
    pub fn projections(self) -> &'static [&'static str] {
        match self {
            LoraTargets::QueryValue => &["q", "v"],
            LoraTargets::All => &["q", "k", "v", "o"],
        }
    }
}

impl FromStr for LoraTargets {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qv" | "query-value" => Ok(LoraTargets::QueryValue),
            "all" => Ok(LoraTargets::All),
            other => Err(Error::Invalid(format!("unknown lora target set {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    /// 0 disables the adapters.
    pub lora_rank: usize,
    pub lora_targets: LoraTargets,
    pub dropout: f32,
}

impl BackboneConfig {
    pub fn desk(vocab_size: usize) -> Self {
        BackboneConfig {
            layers: 2,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            max_seq_len: 256,
            vocab_size,
            lora_rank: 8,
            lora_targets: LoraTargets::QueryValue,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.layers == 0 || self.model_dim == 0 || self.heads == 0 || self.vocab_size == 0 {
            return bad("backbone dimensions must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!("model_dim {} not divisible by {} heads", self.model_dim, self.heads));
        }
        if self.lora_rank >= self.model_dim {
            return bad(format!("lora rank {} must be below model_dim {}", self.lora_rank, self.model_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Word rows and base attention frozen; dense/task rows trainable.
    Tokenizer,
    /// As `Tokenizer`, with code-token rows trainable as well.
    Recommender,
    None,
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tokenizer" | "TOKENIZER_FREEZE" => Ok(FreezePolicy::Tokenizer),
            "recommender" | "RECOMMENDER_FREEZE" => Ok(FreezePolicy::Recommender),
            "none" | "NONE" => Ok(FreezePolicy::None),
            other => Err(Error::Invalid(format!("unknown freeze policy {other}"))),
        }
    }
}

/// One row of one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RowRef {
    pub param: ParamId,
    pub row: usize,
}

/// Row-granular split of all parameters into frozen and trainable sets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParameterPartition {
    pub frozen: BTreeSet<RowRef>,
    pub trainable: BTreeSet<RowRef>,
}

impl ParameterPartition {
    fn count(set: &BTreeSet<RowRef>, store: &ParamStore) -> usize {
        set.iter().map(|r| store.get(r.param).dims2().1).sum()
    }

    pub fn frozen_elements(&self, store: &ParamStore) -> usize {
        Self::count(&self.frozen, store)
    }

    pub fn trainable_elements(&self, store: &ParamStore) -> usize {
        Self::count(&self.trainable, store)
    }
}

/// Parameter handles bound onto one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<BoundLayer>,
    lnf_g: Var,
    lnf_b: Var,
}

#[derive(Debug, Clone)]
struct BoundLayer {
    ln1: (Var, Var),
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    lora: Vec<(String, Var, Var)>,
    ln2: (Var, Var),
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamStore,
    row_kinds: Vec<TokenKind>,
}

/// Output of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub hidden: Var,
    pub logits: Var,
}

const DENSE_INIT_STD: f32 = 0.02;
const TASK_NOISE_STD: f32 = 0.02;

impl Backbone {
    pub fn new(config: BackboneConfig, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Invalid(format!(
                "config vocab_size {} but vocabulary has {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let row_kinds: Vec<TokenKind> = (0..vocab.len() as TokenId).map(|i| vocab.kind(i).expect("dense ids")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let emb_std = 0.5 / (d as f32).sqrt();
        let mut params = ParamStore::new();

        let mut tok = Tensor::randn(&[config.vocab_size, d], emb_std, &mut rng);
        let word_rows: Vec<usize> = (0..row_kinds.len()).filter(|&r| row_kinds[r] == TokenKind::Word).collect();
        let mut mean = vec![0.0f64; d];
        for &r in &word_rows {
            for (m, v) in mean.iter_mut().zip(tok.row(r)) {
                *m += *v as f64 / word_rows.len().max(1) as f64;
            }
        }
        for (r, kind) in row_kinds.iter().enumerate() {
            let row = &mut tok.data_mut()[r * d..(r + 1) * d];
            match kind {
                TokenKind::Dense => {
                    for x in row.iter_mut() {
                        *x = DENSE_INIT_STD * crate::tensor::standard_normal(&mut rng);
                    }
                }
                TokenKind::Task => {
                    for (x, m) in row.iter_mut().zip(&mean) {
                        *x = *m as f32 + TASK_NOISE_STD * crate::tensor::standard_normal(&mut rng);
                    }
                }
                _ => {}
            }
        }
        params.insert("tok_emb", tok)?;
        params.insert("pos_emb", Tensor::randn(&[config.max_seq_len, d], emb_std, &mut rng))?;

        let proj_std = 1.0 / (d as f32).sqrt();
        let out_std = proj_std / (2.0 * config.layers as f32).sqrt();
        let ffn_in_std = 1.0 / (d as f32).sqrt();
        let ffn_out_std = 1.0 / (config.ffn_dim as f32).sqrt() / (2.0 * config.layers as f32).sqrt();
        for l in 0..config.layers {
            params.insert(format!("l{l}.ln1.g"), Tensor::new(vec![d], vec![1.0; d])?)?;
            params.insert(format!("l{l}.ln1.b"), Tensor::zeros(&[d]))?;
            for w in ["wq", "wk", "wv"] {
                params.insert(format!("l{l}.{w}"), Tensor::randn(&[d, d], proj_std, &mut rng))?;
            }
            params.insert(format!("l{l}.wo"), Tensor::randn(&[d, d], out_std, &mut rng))?;
            params.insert(format!("l{l}.ln2.g"), Tensor::new(vec![d], vec![1.0; d])?)?;
            params.insert(format!("l{l}.ln2.b"), Tensor::zeros(&[d]))?;
            params.insert(format!("l{l}.w1"), Tensor::randn(&[d, config.ffn_dim], ffn_in_std, &mut rng))?;
            params.insert(format!("l{l}.b1"), Tensor::zeros(&[config.ffn_dim]))?;
            params.insert(format!("l{l}.w2"), Tensor::randn(&[config.ffn_dim, d], ffn_out_std, &mut rng))?;
            params.insert(format!("l{l}.b2"), Tensor::zeros(&[d]))?;
        }
        params.insert("ln_f.g", Tensor::new(vec![d], vec![1.0; d])?)?;
        params.insert("ln_f.b", Tensor::zeros(&[d]))?;

        let mut model = Backbone { config, params, row_kinds };
        model.add_lora_params(&mut rng)?;
        model.apply_partition(&model.partition(FreezePolicy::None))?;
        Ok(model)
    }

    fn add_lora_params(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let (d, r) = (self.config.model_dim, self.config.lora_rank);
        if r == 0 {
            return Ok(());
        }
        for l in 0..self.config.layers {
            for p in self.config.lora_targets.projections() {
                self.params.insert(format!("l{l}.lora.{p}.down"), Tensor::randn(&[d, r], 1.0 / (d as f32).sqrt(), rng))?;
                self.params.insert(format!("l{l}.lora.{p}.up"), Tensor::zeros(&[r, d]))?;
            }
        }
        Ok(())
    }

    pub fn lora_scaling(&self) -> f32 {
        if self.config.lora_rank == 0 {
            0.0
        } else {
            1.0 / self.config.lora_rank as f32
        }
    }

    /// Folds every adapter into its base projection and replaces the adapters
    /// with freshly initialized ones of `new_rank` (zero-initialized `up`).
    pub fn merge_and_reset_lora(&mut self, new_rank: usize, seed: u64) -> Result<()> {
        let scaling = self.lora_scaling();
        let d = self.config.model_dim;
        let old_rank = self.config.lora_rank;
        let mut fresh = ParamStore::new();
        for id in self.params.ids() {
            let name = self.params.name(id).to_string();
            if name.contains(".lora.") {
                continue;
            }
            let mut t = self.params.get(id).clone();
            t.grad = None;
            if old_rank > 0 {
                if let Some((layer, proj)) = base_projection(&name) {
                    if self.config.lora_targets.projections().contains(&proj) {
                        let down = self.params.by_name(&format!("{layer}.lora.{proj}.down")).expect("adapter exists");
                        let up = self.params.by_name(&format!("{layer}.lora.{proj}.up")).expect("adapter exists");
                        let delta = mm_nn(down.data(), up.data(), d, old_rank, d);
                        for (w, dv) in t.data_mut().iter_mut().zip(delta) {
                            *w += scaling * dv;
                        }
                    }
                }
            }
            fresh.insert(name, t)?;
        }
        self.params = fresh;
        self.config.lora_rank = new_rank;
        self.config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.add_lora_params(&mut rng)?;
        self.apply_partition(&self.partition(FreezePolicy::None))
    }

    pub fn row_kinds(&self) -> &[TokenKind] {
        &self.row_kinds
    }

    pub fn partition(&self, policy: FreezePolicy) -> ParameterPartition {
        let mut part = ParameterPartition::default();
        for id in self.params.ids() {
            let name = self.params.name(id);
            let rows = self.params.get(id).dims2().0;
            for row in 0..rows {
                let trainable = match policy {
                    FreezePolicy::None => true,
                    FreezePolicy::Tokenizer | FreezePolicy::Recommender => {
                        if name == "tok_emb" {
                            match self.row_kinds[row] {
                                TokenKind::Dense | TokenKind::Task => true,
                                TokenKind::Code => policy == FreezePolicy::Recommender,
                                TokenKind::Word | TokenKind::Control | TokenKind::Placeholder => false,
                            }
                        } else {
                            base_projection(name).is_none()
                        }
                    }
                };
                let r = RowRef { param: id, row };
                if trainable {
                    part.trainable.insert(r);
                } else {
                    part.frozen.insert(r);
                }
            }
        }
        part
    }

    pub fn apply_partition(&mut self, part: &ParameterPartition) -> Result<()> {
        for id in self.params.ids() {
            let rows = self.params.get(id).dims2().0;
            let mut mask = Vec::with_capacity(rows);
            for row in 0..rows {
                let r = RowRef { param: id, row };
                let trainable = part.trainable.contains(&r);
                if trainable == part.frozen.contains(&r) {
                    return Err(Error::Invalid(format!(
                        "partition must place row {row} of {} in exactly one set",
                        self.params.name(id)
                    )));
                }
                mask.push(trainable);
            }
            let any = mask.iter().any(|&m| m);
            let all = mask.iter().all(|&m| m);
            self.params.set_trainable(id, any, if any && !all { Some(mask) } else { None });
        }
        Ok(())
    }

    pub fn set_freeze_policy(&mut self, policy: FreezePolicy) -> Result<ParameterPartition> {
        let part = self.partition(policy);
        self.apply_partition(&part)?;
        Ok(part)
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let p = |tape: &mut Tape, name: &str| tape.param(&self.params, self.params.id(name).expect("param exists"));
        let layers = (0..self.config.layers)
            .map(|l| {
                let lora = if self.config.lora_rank > 0 {
                    self.config
                        .lora_targets
                        .projections()
                        .iter()
                        .map(|proj| {
                            let down = p(tape, &format!("l{l}.lora.{proj}.down"));
                            let up = p(tape, &format!("l{l}.lora.{proj}.up"));
                            (proj.to_string(), down, up)
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                BoundLayer {
                    ln1: (p(tape, &format!("l{l}.ln1.g")), p(tape, &format!("l{l}.ln1.b"))),
                    wq: p(tape, &format!("l{l}.wq")),
                    wk: p(tape, &format!("l{l}.wk")),
                    wv: p(tape, &format!("l{l}.wv")),
                    wo: p(tape, &format!("l{l}.wo")),
                    lora,
                    ln2: (p(tape, &format!("l{l}.ln2.g")), p(tape, &format!("l{l}.ln2.b"))),
                    w1: p(tape, &format!("l{l}.w1")),
                    b1: p(tape, &format!("l{l}.b1")),
                    w2: p(tape, &format!("l{l}.w2")),
                    b2: p(tape, &format!("l{l}.b2")),
                }
            })
            .collect();
        Bound {
            tok_emb: p(tape, "tok_emb"),
            pos_emb: p(tape, "pos_emb"),
            layers,
            lnf_g: p(tape, "ln_f.g"),
            lnf_b: p(tape, "ln_f.b"),
        }
    }

    /// Input embeddings: table lookup, with placeholder positions replaced
    /// by the rows of `fill` (in order), plus learned positions.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, seq: &TokenSequence, fill: Option<Var>) -> Result<Var> {
        let n = seq.len();
        if n == 0 {
            return Err(Error::Invalid("cannot embed an empty sequence".into()));
        }
        if n > self.config.max_seq_len {
            return Err(Error::Invalid(format!("sequence of {n} exceeds max_seq_len {}", self.config.max_seq_len)));
        }
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        let lookup = tape.embedding(bound.tok_emb, &ids)?;
        let holes: Vec<usize> = (0..n).filter(|&i| seq.tags[i] == BlockTag::Placeholder).collect();
        let tokens = match fill {
            None if holes.is_empty() => lookup,
            None => return Err(Error::Invalid(format!("{} placeholder positions but no fill", holes.len()))),
            Some(f) => {
                let (rows, cols) = tape.dims(f);
                if rows != holes.len() || cols != self.config.model_dim {
                    return Err(Error::Invalid(format!(
                        "fill of {rows}x{cols} for {} placeholders of width {}",
                        holes.len(),
                        self.config.model_dim
                    )));
                }
                let mut parts = Vec::new();
                let (mut pos, mut used) = (0, 0);
                while pos < n {
                    let is_hole = seq.tags[pos] == BlockTag::Placeholder;
                    let mut end = pos;
                    while end < n && (seq.tags[end] == BlockTag::Placeholder) == is_hole {
                        end += 1;
                    }
                    if is_hole {
                        parts.push(tape.slice_rows(f, used, used + end - pos)?);
                        used += end - pos;
                    } else {
                        parts.push(tape.slice_rows(lookup, pos, end)?);
                    }
                    pos = end;
                }
                if parts.len() == 1 {
                    parts[0]
                } else {
                    tape.concat_rows(&parts)?
                }
            }
        };
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.embedding(bound.pos_emb, &positions)?;
        tape.add(tokens, pos)
    }

    /// Runs the block stack over `input` (`seq × D`) under `mask`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: Var,
        mask: &Mask,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        let (n, d) = tape.dims(input);
        if d != self.config.model_dim {
            return Err(Error::dim("forward", format!("input width {d}, model_dim {}", self.config.model_dim)));
        }
        if mask.rows() != n || mask.cols() != n {
            return Err(Error::dim("forward", format!("mask {}x{} for {n} positions", mask.rows(), mask.cols())));
        }
        if let Some(row) = mask.first_degenerate_row() {
            return Err(Error::DegenerateRow { row });
        }
        let hd = self.config.head_dim();
        let attn_scale = 1.0 / (hd as f32).sqrt();
        let lora_scale = self.lora_scaling();
        let mut x = input;
        for layer in &bound.layers {
            let h = tape.layer_norm(x, layer.ln1.0, layer.ln1.1)?;
            let proj = |tape: &mut Tape, w: Var, name: &str| -> Result<Var> {
                let base = tape.matmul(h, w)?;
                match layer.lora.iter().find(|(p, _, _)| p == name) {
                    Some((_, down, up)) => {
                        let low = tape.matmul(h, *down)?;
                        let delta = tape.matmul(low, *up)?;
                        let delta = tape.scale(delta, lora_scale)?;
                        tape.add(base, delta)
                    }
                    None => Ok(base),
                }
            };
            let q = proj(tape, layer.wq, "q")?;
            let k = proj(tape, layer.wk, "k")?;
            let v = proj(tape, layer.wv, "v")?;
            let mut heads = Vec::with_capacity(self.config.heads);
            for hi in 0..self.config.heads {
                let (a, b) = (hi * hd, (hi + 1) * hd);
                let qh = tape.slice_cols(q, a, b)?;
                let kh = tape.slice_cols(k, a, b)?;
                let vh = tape.slice_cols(v, a, b)?;
                let scores = tape.matmul_t(qh, kh)?;
                let scores = tape.scale(scores, attn_scale)?;
                let probs = tape.masked_softmax(scores, mask)?;
                heads.push(tape.matmul(probs, vh)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let attn_out = {
                let base = tape.matmul(cat, layer.wo)?;
                match layer.lora.iter().find(|(p, _, _)| p == "o") {
                    Some((_, down, up)) => {
                        let low = tape.matmul(cat, *down)?;
                        let delta = tape.matmul(low, *up)?;
                        let delta = tape.scale(delta, lora_scale)?;
                        tape.add(base, delta)?
                    }
                    None => base,
                }
            };
            let attn_out = self.dropout(tape, attn_out, dropout_rng.as_deref_mut())?;
            x = tape.add(x, attn_out)?;

            let h2 = tape.layer_norm(x, layer.ln2.0, layer.ln2.1)?;
            let f = tape.matmul(h2, layer.w1)?;
            let f = tape.add(f, layer.b1)?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, layer.w2)?;
            let f = tape.add(f, layer.b2)?;
            let f = self.dropout(tape, f, dropout_rng.as_deref_mut())?;
            x = tape.add(x, f)?;
        }
        let hidden = tape.layer_norm(x, bound.lnf_g, bound.lnf_b)?;
        let logits = tape.matmul_t(hidden, bound.tok_emb)?;
        Ok(ForwardOutput { hidden, logits })
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = rng else { return Ok(x) };
        if p <= 0.0 {
            return Ok(x);
        }
        let (m, n) = tape.dims(x);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..m * n).map(|_| if rng.random::<f32>() < p { 0.0 } else { keep }).collect();
        let mask = tape.constant(Tensor::new(vec![m, n], mask)?)?;
        tape.mul(x, mask)
    }

    /// Embed + forward for a sequence without placeholders.
    pub fn forward_tokens(&self, tape: &mut Tape, bound: &Bound, seq: &TokenSequence, mask: &Mask) -> Result<ForwardOutput> {
        let input = self.embed(tape, bound, seq, None)?;
        self.forward(tape, bound, input, mask, None)
    }

    /// Logits of the final position of a causal pass over `ids`.
    pub fn last_logits(&self, ids: &[TokenId]) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let seq = plain_sequence(ids);
        let out = self.forward_tokens(&mut tape, &bound, &seq, &Mask::causal(ids.len()))?;
        let (n, v) = tape.dims(out.logits);
        Ok(tape.value(out.logits).data()[(n - 1) * v..].to_vec())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let tensors: Vec<NamedTensor> = self.params.ids().map(|id| (self.params.name(id), self.params.get(id))).collect();
        let meta = serde_json::json!({
            "kind": "backbone",
            "config": self.config,
            "row_kinds": self.row_kinds,
        });
        checkpoint::save(dir, meta, &tensors)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, tensors) = checkpoint::load(dir)?;
        let bad = |d: &str| Error::Artifact { path: dir.to_path_buf(), detail: d.to_string() };
        if meta.get("kind").and_then(|k| k.as_str()) != Some("backbone") {
            return Err(bad("not a backbone checkpoint"));
        }
        let config: BackboneConfig = serde_json::from_value(meta["config"].clone())?;
        let row_kinds: Vec<TokenKind> = serde_json::from_value(meta["row_kinds"].clone())?;
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, t) in tensors {
            params.insert(name, t)?;
        }
        let mut model = Backbone { config, params, row_kinds };
        model.apply_partition(&model.partition(FreezePolicy::None))?;
        Ok(model)
    }
}

/// `("l0", "q")` for `"l0.wq"`; `None` for anything but base attention weights.
fn base_projection(name: &str) -> Option<(&str, &'static str)> {
    let (layer, rest) = name.split_once('.')?;
    let proj = match rest {
        "wq" => "q",
        "wk" => "k",
        "wv" => "v",
        "wo" => "o",
        _ => return None,
    };
    Some((layer, proj))
}

/// Token sequence with no block structure.
pub fn plain_sequence(ids: &[TokenId]) -> TokenSequence {
    TokenSequence { ids: ids.to_vec(), tags: vec![BlockTag::Content; ids.len()] }
}
