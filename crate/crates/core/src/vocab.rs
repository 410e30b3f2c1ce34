//! Word-level tokenizer and vocabulary with registered special tokens.
//!
//! Id layout: control tokens first, then corpus words, then the specials
//! added by [`Vocabulary::register_specials`] in the order dense,
//! placeholder, task, code. Each kind occupies one contiguous range.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const YES: &str = "<yes>";
pub const NO: &str = "<no>";

/// Reserved tokens present in every vocabulary, in id order.
pub const CONTROL_TOKENS: [&str; 6] = [UNK, PAD, EOS, SEP, YES, NO];

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Control,
    Word,
    Dense,
    Placeholder,
    Task,
    Code,
}

/// Which block of a tokenizer sequence a position belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockTag {
    Content,
    Token,
    Placeholder,
    Task,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub tags: Vec<BlockTag>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: TokenId, tag: BlockTag) {
        self.ids.push(id);
        self.tags.push(tag);
    }

    pub fn extend(&mut self, ids: &[TokenId], tag: BlockTag) {
        for &id in ids {
            self.push(id, tag);
        }
    }
}

/// Lowercases and splits on whitespace; punctuation becomes its own token.
pub fn normalize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace()) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.extend(ch.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Normalized text as a single space-joined string.
pub fn normalized_text(text: &str) -> String {
    normalize(text).join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    kinds: Vec<TokenKind>,
    index: HashMap<String, TokenId>,
    frozen: bool,
    /// Number of code positions and codes per position, once registered.
    code_shape: Option<(usize, usize)>,
    dense_count: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    words: Vec<String>,
    specials: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    frozen: bool,
}

impl Vocabulary {
    /// Frequency-ordered word vocabulary; ties broken lexicographically.
    ///
    /// `max_size` counts the reserved control tokens.
    pub fn build<I, S>(corpus: I, min_count: usize, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut docs = 0usize;
        for doc in corpus {
            docs += 1;
            for w in normalize(doc.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(Error::Vocab("empty corpus".into()));
        }
        if max_size < CONTROL_TOKENS.len() {
            return Err(Error::Vocab(format!("max_size {max_size} cannot hold the control tokens")));
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !CONTROL_TOKENS.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        words.truncate(max_size - CONTROL_TOKENS.len());

        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            kinds: Vec::new(),
            index: HashMap::new(),
            frozen: false,
            code_shape: None,
            dense_count: 0,
        };
        for t in CONTROL_TOKENS {
            vocab.push(t.to_string(), TokenKind::Control)?;
        }
        for (w, _) in words {
            vocab.push(w, TokenKind::Word)?;
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String, kind: TokenKind) -> Result<TokenId> {
        if self.index.contains_key(&token) {
            return Err(Error::Vocab(format!("token {token} already registered")));
        }
        let id = self.tokens.len() as TokenId;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        self.kinds.push(kind);
        Ok(id)
    }

    /// Adds dense, placeholder, task and code tokens, then freezes.
    pub fn register_specials(&mut self, dense_count: usize, task_names: &[&str], code_size: usize) -> Result<()> {
        if self.frozen {
            return Err(Error::Vocab("vocabulary is frozen; specials already registered".into()));
        }
        if dense_count == 0 || code_size == 0 {
            return Err(Error::Vocab("dense-token count and code size must be positive".into()));
        }
        let mut staged = self.clone();
        for i in 1..=dense_count {
            staged.push(format!("<DT{i}>"), TokenKind::Dense)?;
        }
        for i in 1..=dense_count {
            staged.push(format!("<PH{i}>"), TokenKind::Placeholder)?;
        }
        for name in task_names {
            staged.push(task_token(name), TokenKind::Task)?;
        }
        for pos in 1..=dense_count {
            for idx in 1..=code_size {
                staged.push(code_token(pos, idx), TokenKind::Code)?;
            }
        }
        staged.code_shape = Some((dense_count, code_size));
        staged.dense_count = dense_count;
        staged.frozen = true;
        *self = staged;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    fn require(&self, token: &str) -> Result<TokenId> {
        self.id(token).ok_or_else(|| Error::Vocab(format!("token {token} not registered")))
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn kind(&self, id: TokenId) -> Option<TokenKind> {
        self.kinds.get(id as usize).copied()
    }

    pub fn unk(&self) -> TokenId {
        0
    }

    pub fn eos(&self) -> TokenId {
        2
    }

    pub fn sep(&self) -> TokenId {
        3
    }

    pub fn yes(&self) -> TokenId {
        4
    }

    pub fn no(&self) -> TokenId {
        5
    }

    pub fn dense_count(&self) -> usize {
        self.dense_count
    }

    /// `(positions, codes per position)` once code tokens exist.
    pub fn code_shape(&self) -> Option<(usize, usize)> {
        self.code_shape
    }

    /// Dense token `i`, 1-based.
    pub fn dense_id(&self, i: usize) -> Result<TokenId> {
        self.require(&format!("<DT{i}>"))
    }

    pub fn placeholder_id(&self, i: usize) -> Result<TokenId> {
        self.require(&format!("<PH{i}>"))
    }

    pub fn task_id(&self, name: &str) -> Result<TokenId> {
        self.require(&task_token(name))
    }

    /// Code `idx` (1-based, in `1..=k`) at position `pos` (1-based).
    pub fn code_id(&self, pos: usize, idx: usize) -> Result<TokenId> {
        let (v, k) = self.code_shape.ok_or_else(|| Error::Vocab("no code tokens registered".into()))?;
        if pos == 0 || pos > v || idx == 0 || idx > k {
            return Err(Error::Vocab(format!("code ({pos}, {idx}) outside {v} positions x {k} codes")));
        }
        let first = self.require(&code_token(1, 1))?;
        Ok(first + ((pos - 1) * k + (idx - 1)) as TokenId)
    }

    /// Inverse of [`Vocabulary::code_id`].
    pub fn code_of(&self, id: TokenId) -> Option<(usize, usize)> {
        let (_, k) = self.code_shape?;
        if self.kind(id)? != TokenKind::Code {
            return None;
        }
        let first = self.id(&code_token(1, 1))?;
        let off = (id - first) as usize;
        Some((off / k + 1, off % k + 1))
    }

    /// Ids of every code token at position `pos`.
    pub fn code_range(&self, pos: usize) -> Result<Range<TokenId>> {
        let (_, k) = self.code_shape.ok_or_else(|| Error::Vocab("no code tokens registered".into()))?;
        let start = self.code_id(pos, 1)?;
        Ok(start..start + k as TokenId)
    }

    /// Ids in `range` of the given kind.
    pub fn ids_of_kind(&self, kind: TokenKind) -> Vec<TokenId> {
        (0..self.len() as TokenId).filter(|&id| self.kinds[id as usize] == kind).collect()
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        if !self.frozen {
            return Err(Error::Vocab("encode requires a frozen vocabulary".into()));
        }
        let mut seq = TokenSequence::default();
        for w in normalize(text) {
            let id = match self.index.get(&w) {
                Some(&id) if self.kinds[id as usize] == TokenKind::Word => id,
                _ => self.unk(),
            };
            seq.push(id, BlockTag::Content);
        }
        Ok(seq)
    }

    /// Word ids of `text` (no block tags).
    pub fn encode_ids(&self, text: &str) -> Result<Vec<TokenId>> {
        Ok(self.encode(text)?.ids)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or_else(|| Error::Vocab(format!("unknown token id {id}")))?;
            parts.push(tok);
        }
        Ok(parts.join(" "))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut words = Vec::new();
        let mut specials: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (tok, kind) in self.tokens.iter().zip(&self.kinds) {
            let key = match kind {
                TokenKind::Word => {
                    words.push(tok.clone());
                    continue;
                }
                TokenKind::Control => "control",
                TokenKind::Dense => "dense",
                TokenKind::Placeholder => "placeholder",
                TokenKind::Task => "task",
                TokenKind::Code => "code",
            };
            specials.entry(key.to_string()).or_default().push(tok.clone());
        }
        let file = VocabFile { version: FORMAT_VERSION, words, specials, frozen: self.frozen };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.version != FORMAT_VERSION {
            return Err(Error::Vocab(format!("unsupported vocabulary version {}", file.version)));
        }
        let control = file.specials.get("control").cloned().unwrap_or_default();
        if control != CONTROL_TOKENS {
            return Err(Error::Vocab("control tokens missing or reordered".into()));
        }
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            kinds: Vec::new(),
            index: HashMap::new(),
            frozen: false,
            code_shape: None,
            dense_count: 0,
        };
        for t in control {
            vocab.push(t, TokenKind::Control)?;
        }
        for w in file.words {
            vocab.push(w, TokenKind::Word)?;
        }
        let get = |k: &str| file.specials.get(k).cloned().unwrap_or_default();
        let dense = get("dense");
        let codes = get("code");
        let dense_count = dense.len();
        for (key, kind) in [
            ("dense", TokenKind::Dense),
            ("placeholder", TokenKind::Placeholder),
            ("task", TokenKind::Task),
            ("code", TokenKind::Code),
        ] {
            for t in get(key) {
                vocab.push(t, kind)?;
            }
        }
        if dense_count > 0 {
            if codes.len() % dense_count != 0 {
                return Err(Error::Vocab("code token count is not a multiple of the position count".into()));
            }
            vocab.code_shape = Some((dense_count, codes.len() / dense_count));
            vocab.dense_count = dense_count;
        }
        vocab.frozen = file.frozen;
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_json(&text)
    }
}

pub fn task_token(name: &str) -> String {
    format!("<{name}>")
}

pub fn code_token(pos: usize, idx: usize) -> String {
    format!("<C{pos}_{idx}>")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frozen(corpus: &[&str]) -> Vocabulary {
        let mut v = Vocabulary::build(corpus.iter().copied(), 1, 10_000).unwrap();
        v.register_specials(2, &["reconstruct_title"], 16).unwrap();
        v
    }

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = Vocabulary::build(["a b a"], 1, 100).unwrap();
        assert!(v.id("a").unwrap() < v.id("b").unwrap());
        let v = Vocabulary::build(["z y"], 1, 100).unwrap();
        assert!(v.id("y").unwrap() < v.id("z").unwrap());
    }

    #[test]
    fn min_count_maps_rare_words_to_unk() {
        let mut v = Vocabulary::build(["x y x"], 2, 100).unwrap();
        assert!(v.id("y").is_none());
        v.register_specials(1, &[], 2).unwrap();
        assert_eq!(v.encode("y").unwrap().ids, vec![v.unk()]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(Vocabulary::build(Vec::<String>::new(), 1, 10).is_err());
    }

    #[test]
    fn max_size_counts_control_tokens() {
        // 1k docs over 900 distinct words.
        let docs: Vec<String> = (0..1000).map(|i| format!("w{} w{} w{}", i % 900, (i * 7) % 900, i % 13)).collect();
        let distinct: std::collections::HashSet<String> = docs.iter().flat_map(|d| normalize(d)).collect();
        assert!(distinct.len() > 512);
        let v = Vocabulary::build(&docs, 1, 512).unwrap();
        assert_eq!(v.len(), 512);
    }

    #[test]
    fn special_arithmetic_and_code_bijection() {
        let base = Vocabulary::build(["hello world"], 1, 100).unwrap();
        let before = base.len();
        let mut v = base.clone();
        v.register_specials(2, &["t1", "t2", "t3"], 16).unwrap();
        assert_eq!(v.len() - before, 2 + 2 + 32 + 3);
        let id = v.code_id(1, 5).unwrap();
        assert_eq!(v.code_of(id), Some((1, 5)));
        assert_eq!(v.token(id), Some("<C1_5>"));
        assert_eq!(v.code_of(v.code_id(2, 16).unwrap()), Some((2, 16)));
        assert!(v.code_id(3, 1).is_err());
        assert!(v.code_id(1, 17).is_err());
    }

    #[test]
    fn second_registration_fails() {
        let mut v = frozen(&["a"]);
        assert!(v.register_specials(2, &["x"], 4).is_err());
    }

    #[test]
    fn kind_ranges_are_disjoint() {
        let v = frozen(&["alpha beta gamma"]);
        let mut last_kind = None;
        let mut seen = std::collections::HashSet::new();
        for id in 0..v.len() as TokenId {
            let kind = v.kind(id).unwrap();
            if last_kind != Some(kind) {
                assert!(seen.insert(kind), "{kind:?} appears in two ranges");
                last_kind = Some(kind);
            }
        }
    }

    #[test]
    fn encode_edge_cases() {
        let v = frozen(&["hello there"]);
        assert!(v.encode("").unwrap().is_empty());
        let s = v.encode("hello hello").unwrap();
        assert_eq!(s.ids.len(), 2);
        assert_eq!(s.ids[0], s.ids[1]);
        assert!(v.decode(&[v.len() as TokenId]).is_err());
    }

    #[test]
    fn encode_requires_freeze() {
        let v = Vocabulary::build(["a"], 1, 10).unwrap();
        assert!(v.encode("a").is_err());
    }

    #[test]
    fn json_round_trip() {
        let v = frozen(&["one two two, three!"]);
        let back = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
    }

    proptest! {
        #[test]
        fn synthetic_titles_round_trip(words in proptest::collection::vec(0usize..40, 0..12), caps in any::<bool>()) {
            let pool: Vec<String> = (0..40).map(|i| format!("word{i}")).collect();
            let v = frozen(&[pool.join(" ").as_str(), "."]);
            let mut title = words.iter().map(|&i| pool[i].clone()).collect::<Vec<_>>().join("  ");
            if caps { title = title.to_uppercase(); }
            let ids = v.encode_ids(&title).unwrap();
            prop_assert_eq!(v.decode(&ids).unwrap(), normalized_text(&title));
        }
    }
}
