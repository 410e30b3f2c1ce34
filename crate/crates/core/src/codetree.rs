//! Trie over valid semantic identifiers and the searches that run on it.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::log_softmax;
use crate::backbone::Backbone;
use crate::cluster::{CodeMatrix, SemanticId};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct TreeNode {
    children: BTreeMap<u32, usize>,
    item: Option<String>,
}

/// Depth-`v` trie; every root-to-leaf path is one catalog item's codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeTree {
    v: usize,
    nodes: Vec<TreeNode>,
}

pub const ROOT: usize = 0;

impl CodeTree {
    pub fn build(codes: &CodeMatrix) -> Result<Self> {
        let cols: Vec<(String, SemanticId)> = (0..codes.n()).map(|j| (codes.item_ids[j].clone(), codes.column(j))).collect();
        CodeTree::from_columns(codes.v, &cols)
    }

    pub fn from_columns(v: usize, columns: &[(String, SemanticId)]) -> Result<Self> {
        if v == 0 || columns.is_empty() {
            return Err(Error::Invalid("a code tree needs v >= 1 and at least one item".into()));
        }
        let mut tree = CodeTree { v, nodes: vec![TreeNode::default()] };
        for (item, col) in columns {
            if col.len() != v {
                return Err(Error::dim("code tree", format!("item {item} has {} codes, expected {v}", col.len())));
            }
            let mut node = ROOT;
            for &c in col {
                node = match tree.nodes[node].children.get(&c) {
                    Some(&child) => child,
                    None => {
                        tree.nodes.push(TreeNode::default());
                        let child = tree.nodes.len() - 1;
                        tree.nodes[node].children.insert(c, child);
                        child
                    }
                };
            }
            if let Some(prev) = &tree.nodes[node].item {
                return Err(Error::UnresolvedCollision { items: vec![prev.clone(), item.clone()] });
            }
            tree.nodes[node].item = Some(item.clone());
        }
        Ok(tree)
    }

    pub fn depth(&self) -> usize {
        self.v
    }

    pub fn child(&self, node: usize, code: u32) -> Option<usize> {
        self.nodes[node].children.get(&code).copied()
    }

    /// Child codes of `node` in ascending order.
    pub fn child_codes(&self, node: usize) -> Vec<u32> {
        self.nodes[node].children.keys().copied().collect()
    }

    pub fn node_of(&self, path: &[u32]) -> Option<usize> {
        path.iter().try_fold(ROOT, |node, &c| self.child(node, c))
    }

    pub fn lookup(&self, path: &[u32]) -> Option<&str> {
        if path.len() != self.v {
            return None;
        }
        self.node_of(path).and_then(|n| self.nodes[n].item.as_deref())
    }

    pub fn contains(&self, path: &[u32]) -> bool {
        self.lookup(path).is_some()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.item.is_some()).count()
    }

    /// Every `(codes, item)` path in lexicographic code order.
    pub fn paths(&self) -> Vec<(SemanticId, String)> {
        let mut out = Vec::new();
        let mut stack = vec![(ROOT, Vec::new())];
        while let Some((node, prefix)) = stack.pop() {
            if let Some(item) = &self.nodes[node].item {
                out.push((prefix.clone(), item.clone()));
            }
            for (&c, &child) in self.nodes[node].children.iter().rev() {
                let mut p = prefix.clone();
                p.push(c);
                stack.push((child, p));
            }
        }
        out
    }
}

/// How each beam step restricts the code distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Constraint {
    /// Codes that leave the trie get probability zero.
    #[default]
    Conditional,
    /// Any code of the right position; may produce tuples that are not items.
    Soft,
    /// Off-trie codes get logit 0 instead of probability 0.
    LiteralZeroLogit,
}

impl FromStr for Constraint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conditional" => Ok(Constraint::Conditional),
            "soft" => Ok(Constraint::Soft),
            "literal-zero-logit" => Ok(Constraint::LiteralZeroLogit),
            other => Err(Error::Invalid(format!("unknown beam constraint {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub constraint: Constraint,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { width: 10, constraint: Constraint::Conditional }
    }
}

/// A partial identifier under expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamState {
    pub prefix: Vec<u32>,
    pub log_prob: f64,
    /// Trie cursor; `None` once a soft step has left the tree.
    pub node: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamHit {
    pub codes: SemanticId,
    /// `None` when the tuple is not a catalog item.
    pub item: Option<String>,
    pub log_prob: f64,
}

/// Token ids of a code tuple (position-specific code tokens).
pub fn code_tokens(vocab: &Vocabulary, codes: &[u32]) -> Result<Vec<TokenId>> {
    codes.iter().enumerate().map(|(pos, &c)| vocab.code_id(pos + 1, c as usize)).collect()
}

/// Log-probabilities of the candidate codes at step `pos` (0-based) given
/// the next-token logits.
pub fn step_log_probs(
    vocab: &Vocabulary,
    logits: &[f32],
    pos: usize,
    tree: &CodeTree,
    node: Option<usize>,
    constraint: Constraint,
) -> Result<Vec<(u32, f64)>> {
    let range = vocab.code_range(pos + 1)?;
    let k = range.end - range.start;
    let code_logit = |c: u32| logits[(range.start + c - 1) as usize];
    let valid = node.map(|n| tree.child_codes(n));
    let (codes, row): (Vec<u32>, Vec<f32>) = match (constraint, &valid) {
        (Constraint::Conditional, Some(valid)) => valid.iter().map(|&c| (c, code_logit(c))).unzip(),
        (Constraint::Conditional, None) => return Err(Error::Invalid("conditional beam left the code tree".into())),
        (Constraint::Soft, _) | (Constraint::LiteralZeroLogit, None) => (1..=k).map(|c| (c, code_logit(c))).unzip(),
        (Constraint::LiteralZeroLogit, Some(valid)) => {
            (1..=k).map(|c| (c, if valid.binary_search(&c).is_ok() { code_logit(c) } else { 0.0 })).unzip()
        }
    };
    Ok(codes.into_iter().zip(log_softmax(&row)).collect())
}

fn rank_order(a: &BeamState, b: &BeamState) -> std::cmp::Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.prefix.cmp(&b.prefix))
}

/// Beam search over code tuples after `prompt`; hits are ranked by
/// cumulative log-probability, ties by the smaller code tuple.
pub fn conditional_beam_search(
    model: &Backbone,
    vocab: &Vocabulary,
    tree: &CodeTree,
    prompt: &[TokenId],
    config: &BeamConfig,
) -> Result<Vec<BeamHit>> {
    if config.width == 0 {
        return Err(Error::Invalid("beam width must be at least 1".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Invalid("beam search needs a non-empty prompt".into()));
    }
    let mut beams = vec![BeamState { prefix: Vec::new(), log_prob: 0.0, node: Some(super::codetree::ROOT) }];
    for pos in 0..tree.depth() {
        let mut next = Vec::new();
        for beam in &beams {
            let mut input = prompt.to_vec();
            input.extend(code_tokens(vocab, &beam.prefix)?);
            let logits = model.last_logits(&input)?;
            for (code, lp) in step_log_probs(vocab, &logits, pos, tree, beam.node, config.constraint)? {
                let mut prefix = beam.prefix.clone();
                prefix.push(code);
                let node = beam.node.and_then(|n| tree.child(n, code));
                next.push(BeamState { prefix, log_prob: beam.log_prob + lp, node });
            }
        }
        next.sort_by(rank_order);
        next.truncate(config.width);
        beams = next;
    }
    Ok(beams
        .into_iter()
        .map(|b| BeamHit { item: tree.lookup(&b.prefix).map(str::to_string), codes: b.prefix, log_prob: b.log_prob })
        .collect())
}

/// Two-way softmax over the `<yes>`/`<no>` logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YesNo {
    pub yes: f64,
    pub no: f64,
}

pub fn yes_no(logit_yes: f32, logit_no: f32) -> YesNo {
    let yes = 1.0 / (1.0 + (logit_no as f64 - logit_yes as f64).exp());
    YesNo { yes, no: 1.0 - yes }
}

/// Probability of `<yes>` at the end of a scoring prompt.
pub fn score_prompt(model: &Backbone, vocab: &Vocabulary, prompt: &[TokenId]) -> Result<YesNo> {
    let logits = model.last_logits(prompt)?;
    Ok(yes_no(logits[vocab.yes() as usize], logits[vocab.no() as usize]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(cols: &[&[u32]]) -> CodeTree {
        let cols: Vec<(String, SemanticId)> = cols.iter().enumerate().map(|(i, c)| (format!("i{i}"), c.to_vec())).collect();
        CodeTree::from_columns(cols[0].1.len(), &cols).unwrap()
    }

    #[test]
    fn children_follow_construction() {
        let t = tree(&[&[1, 2], &[1, 3], &[2, 1]]);
        assert_eq!(t.child_codes(ROOT), vec![1, 2]);
        assert_eq!(t.child_codes(t.child(ROOT, 1).unwrap()), vec![2, 3]);
        assert_eq!(t.leaf_count(), 3);
        assert_eq!(t.lookup(&[2, 1]), Some("i2"));
        assert!(!t.contains(&[2, 2]));
        assert!(!t.contains(&[1]));
    }

    #[test]
    fn single_item_has_one_path() {
        let t = tree(&[&[4, 4, 4]]);
        assert_eq!(t.paths(), vec![(vec![4, 4, 4], "i0".to_string())]);
    }

    #[test]
    fn duplicate_columns_are_rejected() {
        let cols = vec![("a".to_string(), vec![1, 1]), ("b".to_string(), vec![1, 1])];
        assert!(CodeTree::from_columns(2, &cols).is_err());
    }

    #[test]
    fn paths_are_sorted() {
        let t = tree(&[&[2, 1], &[1, 3], &[1, 2]]);
        let codes: Vec<SemanticId> = t.paths().into_iter().map(|p| p.0).collect();
        assert_eq!(codes, vec![vec![1, 2], vec![1, 3], vec![2, 1]]);
    }

    #[test]
    fn yes_no_is_a_two_way_softmax() {
        let s = yes_no(0.3, 0.3);
        assert_eq!(s.yes, 0.5);
        let s = yes_no(2.0, -1.0);
        assert_eq!(s.yes + s.no, 1.0);
        assert!((s.yes - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn constraint_names_parse() {
        assert_eq!("soft".parse::<Constraint>().unwrap(), Constraint::Soft);
        assert_eq!("literal-zero-logit".parse::<Constraint>().unwrap(), Constraint::LiteralZeroLogit);
        assert!("loose".parse::<Constraint>().is_err());
    }
}
