mod common;

use std::collections::BTreeSet;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use store_core::autograd::{log_softmax, Mask, Tape};
use store_core::backbone::{plain_sequence, Backbone};
use store_core::cluster::{CodeMatrix, SemanticId};
use store_core::codetree::*;
use store_core::corpus::{generate_synthetic, SyntheticSpec, UserSequence};
use store_core::recommender::*;
use store_core::tokenizer::ItemRecord;
use store_core::vocab::{TokenId, Vocabulary};
use store_core::Error;

/// `n` distinct random code columns of length `v` over `1..=k`.
fn random_columns(n: usize, v: usize, k: u32, seed: u64) -> Vec<(String, SemanticId)> {
    let mut all: Vec<SemanticId> = vec![vec![]];
    for _ in 0..v {
        all = all.into_iter().flat_map(|p| (1..=k).map(move |c| [p.clone(), vec![c]].concat())).collect();
    }
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    all.truncate(n);
    all.into_iter().enumerate().map(|(j, c)| (format!("i{j:02}"), c)).collect()
}

fn matrix(v: usize, k: usize, cols: &[(String, SemanticId)]) -> CodeMatrix {
    let mut data = vec![0u32; v * cols.len()];
    for (j, (_, c)) in cols.iter().enumerate() {
        for pos in 0..v {
            data[pos * cols.len() + j] = c[pos];
        }
    }
    CodeMatrix::new(v, k, cols.iter().map(|c| c.0.clone()).collect(), data).unwrap()
}

fn tiny_model(vocab: &Vocabulary, seed: u64) -> Backbone {
    let mut model = Backbone::new(tiny_config(vocab, 16, 4), vocab, seed).unwrap();
    randomize_lora(&mut model, seed + 1);
    model
}

/// Scores every valid column with one full forward pass and a softmax over
/// the codes that extend its prefix inside the column set.
fn exhaustive_ranking(
    model: &Backbone,
    vocab: &Vocabulary,
    cols: &[(String, SemanticId)],
    prompt: &[TokenId],
) -> Vec<(SemanticId, String, f64)> {
    let mut scored = Vec::new();
    for (item, col) in cols {
        let mut ids = prompt.to_vec();
        for (pos, &c) in col.iter().enumerate() {
            ids.push(vocab.code_id(pos + 1, c as usize).unwrap());
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = model.forward_tokens(&mut tape, &bound, &plain_sequence(&ids), &Mask::causal(ids.len())).unwrap();
        let logits = tape.value(out.logits).data().to_vec();
        let width = vocab.len();
        let mut total = 0.0;
        for (t, &c) in col.iter().enumerate() {
            let row = &logits[(prompt.len() - 1 + t) * width..][..width];
            let siblings: BTreeSet<u32> = cols.iter().filter(|(_, o)| o[..t] == col[..t]).map(|(_, o)| o[t]).collect();
            let sib: Vec<u32> = siblings.into_iter().collect();
            let sub: Vec<f32> = sib.iter().map(|&s| row[vocab.code_id(t + 1, s as usize).unwrap() as usize]).collect();
            total += log_softmax(&sub)[sib.iter().position(|&s| s == c).unwrap()];
        }
        scored.push((col.clone(), item.clone(), total));
    }
    scored.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
    scored
}

fn prompt_for(vocab: &Vocabulary, cols: &[(String, SemanticId)], history: &[usize]) -> Vec<TokenId> {
    let mut p = vec![vocab.task_id(REC_TASK).unwrap()];
    for &h in history {
        p.extend(code_tokens(vocab, &cols[h].1).unwrap());
    }
    p
}

#[test]
fn beam_matches_exhaustive_enumeration() {
    let vocab = tiny_vocab(2, 8);
    let cols = random_columns(50, 2, 8, 3);
    let tree = CodeTree::from_columns(2, &cols).unwrap();
    for seed in 0..3 {
        let model = tiny_model(&vocab, seed);
        let prompt = prompt_for(&vocab, &cols, &[seed as usize, 7, 11]);
        let oracle = exhaustive_ranking(&model, &vocab, &cols, &prompt);
        let hits = conditional_beam_search(&model, &vocab, &tree, &prompt, &BeamConfig { width: 50, ..Default::default() }).unwrap();
        assert_eq!(hits.len(), 50);
        for (h, o) in hits.iter().zip(&oracle) {
            assert_eq!(h.codes, o.0);
            assert_eq!(h.item.as_deref(), Some(o.1.as_str()));
            assert!((h.log_prob - o.2).abs() < 1e-5, "{} vs {}", h.log_prob, o.2);
        }
    }
}

#[test]
fn ties_fall_back_to_the_smaller_code_tuple() {
    let vocab = tiny_vocab(2, 8);
    let cols = random_columns(20, 2, 8, 9);
    let tree = CodeTree::from_columns(2, &cols).unwrap();
    let mut model = tiny_model(&vocab, 4);
    // Identical code rows make every conditional distribution uniform.
    let emb = model.params.id("tok_emb").unwrap();
    let dim = model.config.model_dim;
    let first = vocab.code_id(1, 1).unwrap() as usize;
    let row: Vec<f32> = model.params.get(emb).data()[first * dim..][..dim].to_vec();
    for pos in 1..=2 {
        for c in 1..=8 {
            let id = vocab.code_id(pos, c).unwrap() as usize;
            model.params.get_mut(emb).data_mut()[id * dim..][..dim].copy_from_slice(&row);
        }
    }
    let prompt = prompt_for(&vocab, &cols, &[0]);
    let oracle = exhaustive_ranking(&model, &vocab, &cols, &prompt);
    let hits = conditional_beam_search(&model, &vocab, &tree, &prompt, &BeamConfig { width: 20, ..Default::default() }).unwrap();
    let got: Vec<SemanticId> = hits.iter().map(|h| h.codes.clone()).collect();
    let want: Vec<SemanticId> = oracle.iter().map(|o| o.0.clone()).collect();
    assert_eq!(got, want);
    let roots = tree.child_codes(ROOT).len() as f64;
    let first_prefix = tree.child(ROOT, hits[0].codes[0]).unwrap();
    let expected = -(roots.ln()) - (tree.child_codes(first_prefix).len() as f64).ln();
    assert!((hits[0].log_prob - expected).abs() < 1e-6);
}

fn figure_fixture() -> (Vocabulary, CodeTree, Vec<(String, SemanticId)>) {
    let vocab = tiny_vocab(2, 2);
    let cols = vec![("a".to_string(), vec![1, 1]), ("b".to_string(), vec![1, 2]), ("c".to_string(), vec![2, 2])];
    let tree = CodeTree::from_columns(2, &cols).unwrap();
    (vocab, tree, cols)
}

#[test]
fn conditional_search_never_leaves_the_tree() {
    let (vocab, tree, cols) = figure_fixture();
    for seed in 0..10 {
        let model = tiny_model(&vocab, seed);
        let prompt = prompt_for(&vocab, &cols, &[2]);
        let hits = conditional_beam_search(&model, &vocab, &tree, &prompt, &BeamConfig { width: 4, ..Default::default() }).unwrap();
        assert_eq!(hits.len(), 3, "all leaves when B exceeds the catalog");
        assert!(hits.iter().all(|h| h.item.is_some() && h.codes != vec![2, 1]));
        assert!(hits.iter().all(|h| h.log_prob <= 0.0));
    }
}

#[test]
fn soft_and_literal_zero_modes_emit_invalid_tuples() {
    let (vocab, tree, cols) = figure_fixture();
    let model = tiny_model(&vocab, 1);
    let prompt = prompt_for(&vocab, &cols, &[0]);
    for constraint in [Constraint::Soft, Constraint::LiteralZeroLogit] {
        let hits = conditional_beam_search(&model, &vocab, &tree, &prompt, &BeamConfig { width: 4, constraint }).unwrap();
        let invalid: Vec<_> = hits.iter().filter(|h| h.item.is_none()).collect();
        assert_eq!(invalid.len(), 1, "{constraint:?}");
        assert_eq!(invalid[0].codes, vec![2, 1]);
    }
}

#[test]
fn single_item_tree_returns_that_item() {
    let vocab = tiny_vocab(2, 4);
    let cols = vec![("only".to_string(), vec![3, 2])];
    let tree = CodeTree::from_columns(2, &cols).unwrap();
    let model = tiny_model(&vocab, 2);
    let hits = conditional_beam_search(&model, &vocab, &tree, &prompt_for(&vocab, &cols, &[0]), &BeamConfig::default()).unwrap();
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].item.as_deref(), Some("only"));
    assert_eq!(hits[0].log_prob, 0.0);
}

#[test]
fn wider_beams_keep_a_surviving_top_hit() {
    let vocab = tiny_vocab(2, 8);
    let cols = random_columns(40, 2, 8, 5);
    let tree = CodeTree::from_columns(2, &cols).unwrap();
    for seed in 0..4 {
        let model = tiny_model(&vocab, 10 + seed);
        let prompt = prompt_for(&vocab, &cols, &[1, 2]);
        let runs: Vec<Vec<BeamHit>> = [1, 2, 4, 8, 40]
            .iter()
            .map(|&w| conditional_beam_search(&model, &vocab, &tree, &prompt, &BeamConfig { width: w, ..Default::default() }).unwrap())
            .collect();
        for a in 0..runs.len() {
            for b in a + 1..runs.len() {
                // The wider search's best path survived the narrow search.
                if runs[a].iter().any(|h| h.codes == runs[b][0].codes) {
                    assert_eq!(runs[a][0].codes, runs[b][0].codes);
                }
                // Two steps: the wider candidate set contains the narrower one.
                assert!(runs[b][0].log_prob >= runs[a][0].log_prob);
            }
        }
    }
}

#[test]
fn zero_beam_width_is_rejected() {
    let (vocab, tree, cols) = figure_fixture();
    let model = tiny_model(&vocab, 0);
    let r = conditional_beam_search(&model, &vocab, &tree, &prompt_for(&vocab, &cols, &[0]), &BeamConfig { width: 0, ..Default::default() });
    assert!(r.is_err());
}

fn seq(history: &[&str], target: &str) -> UserSequence {
    UserSequence { user_id: "u".into(), history: history.iter().map(|s| s.to_string()).collect(), target: target.into() }
}

#[test]
fn retrieval_sample_layout() {
    let (vocab, _, cols) = figure_fixture();
    let codes = matrix(2, 2, &cols);
    let index = CodeIndex::new(&codes);
    let s = build_retrieval_sample(&seq(&["a"], "c"), &index, &vocab, 10).unwrap();
    assert_eq!(s.prompt().len(), 3);
    assert_eq!(s.label(), code_tokens(&vocab, &[2, 2]).unwrap().as_slice());
    assert_eq!(s.prompt()[0], vocab.task_id(REC_TASK).unwrap());
    assert_eq!(s.loss_targets().1.iter().filter(|&&f| f).count(), 2);

    let long = build_retrieval_sample(&seq(&["a", "b", "c", "a"], "b"), &index, &vocab, 2).unwrap();
    let mut expected = vec![vocab.task_id(REC_TASK).unwrap()];
    expected.extend(code_tokens(&vocab, &[2, 2]).unwrap());
    expected.extend(code_tokens(&vocab, &[1, 1]).unwrap());
    assert_eq!(long.prompt(), expected.as_slice(), "earliest items are dropped");

    match build_retrieval_sample(&seq(&["a", "zzz"], "b"), &index, &vocab, 10) {
        Err(Error::UnknownItem(id)) => assert_eq!(id, "zzz"),
        other => panic!("expected an unknown item, got {other:?}"),
    }
}

#[test]
fn alignment_directions_alternate() {
    let items: Vec<ItemRecord> = synthetic_items(10, 4);
    let vocab = store_core::recommender::build_vocabulary(&items, 2, 16).unwrap();
    let cols = random_columns(10, 2, 16, 1)
        .into_iter()
        .zip(&items)
        .map(|((_, c), i)| (i.item_id.clone(), c))
        .collect::<Vec<_>>();
    let codes = matrix(2, 16, &cols);
    let index = CodeIndex::new(&codes);
    let samples: Vec<RecSample> = items.iter().enumerate().map(|(j, it)| build_alignment_sample(it, j, &index, &vocab).unwrap()).collect();
    let is_code = |id: TokenId| vocab.code_of(id).is_some();
    let to_text = samples.iter().filter(|s| s.prompt().iter().any(|&t| is_code(t))).count();
    let to_codes = samples.iter().filter(|s| s.label().iter().all(|&t| is_code(t))).count();
    assert_eq!((to_text, to_codes), (5, 5));

    let title = vocab.encode_ids(items[0].attr("title").unwrap()).unwrap();
    let s = &samples[0];
    assert_eq!(s.prompt()[0], vocab.task_id(ALIGN_TASK).unwrap());
    assert_eq!(&s.prompt()[1..3], code_tokens(&vocab, &cols[0].1).unwrap().as_slice());
    assert_eq!(&s.label()[..title.len()], title.as_slice());
    assert_eq!(samples[1].label(), code_tokens(&vocab, &cols[1].1).unwrap().as_slice());
}

#[test]
fn scoring_probabilities_are_complementary() {
    let (vocab, _, cols) = figure_fixture();
    let codes = matrix(2, 2, &cols);
    let index = CodeIndex::new(&codes);
    let model = tiny_model(&vocab, 6);
    let history = vec!["a".to_string(), "b".to_string()];
    let prompt = scoring_prompt(&history, "c", &index, &vocab, 10).unwrap();
    assert_eq!(prompt.len(), 1 + 4 + 1 + 2);
    assert_eq!(prompt[5], vocab.sep());
    let s = score_prompt(&model, &vocab, &prompt).unwrap();
    assert!(s.yes > 0.0 && s.yes < 1.0);
    assert_eq!(s.yes + s.no, 1.0);
    let logits = model.last_logits(&prompt).unwrap();
    let direct = log_softmax(&[logits[vocab.yes() as usize], logits[vocab.no() as usize]])[0].exp();
    assert!((s.yes - direct).abs() < 1e-12);
    let sample = build_scoring_sample(&history, "c", false, &index, &vocab, 10).unwrap();
    assert_eq!(sample.label(), &[vocab.no()]);
}

fn small_world() -> (Vec<ItemRecord>, Vec<UserSequence>, Vocabulary, CodeMatrix) {
    let corpus = generate_synthetic(&SyntheticSpec { n_items: 24, n_users: 30, max_history: 5, ..Default::default() }).unwrap();
    let vocab = build_vocabulary(&corpus.items, 2, 8).unwrap();
    let cols = random_columns(24, 2, 8, 2)
        .into_iter()
        .zip(&corpus.items)
        .map(|((_, c), i)| (i.item_id.clone(), c))
        .collect::<Vec<_>>();
    let codes = matrix(2, 8, &cols);
    (corpus.items, corpus.users, vocab, codes)
}

fn small_train(alignment: bool) -> (RecTrainReport, Backbone) {
    let (items, users, vocab, codes) = small_world();
    let mut model = tiny_model(&vocab, 3);
    let split = leave_one_out(&users);
    let config = RecTrainConfig { max_epochs: 4, convergence_patience: 1, patience: 2, seed: 5, alignment, lora_rank: 2, max_history: 5, ..Default::default() };
    let report = train_recommender(&mut model, &vocab, &items, &codes, &split, &config).unwrap();
    (report, model)
}

#[test]
fn recommender_training_is_deterministic() {
    let (a, ma) = small_train(true);
    let (b, mb) = small_train(true);
    assert_eq!(a, b);
    assert_eq!(ma.params, mb.params);
    assert!(a.epochs.iter().all(|e| e.loss.is_finite()));
    assert_eq!(a.epochs[0].phase, 1);
    let best = a.epochs.iter().map(|e| e.val_recall5).fold(f64::MIN, f64::max);
    assert_eq!(a.best_val_recall5, best);
}

#[test]
fn alignment_flag_changes_the_phase_one_mix() {
    let (with, _) = small_train(true);
    let (without, _) = small_train(false);
    assert_eq!(with.epochs[0].samples, without.epochs[0].samples + 24);
    assert_ne!(with.epochs[0].loss, without.epochs[0].loss);
}

#[test]
fn predictions_round_trip_and_cover_every_query() {
    let (_, users, vocab, codes) = small_world();
    let model = tiny_model(&vocab, 8);
    let tree = CodeTree::build(&codes).unwrap();
    let split = leave_one_out(&users);
    let preds = recommend(&model, &vocab, &tree, &codes, &split.test, 5, &BeamConfig::default()).unwrap();
    assert_eq!(preds.len(), split.test.len());
    assert!(preds.iter().all(|p| p.ranked_items.iter().all(Option::is_some)));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.jsonl");
    write_predictions_jsonl(&path, &preds).unwrap();
    assert_eq!(read_predictions_jsonl(&path).unwrap(), preds);
    let line = std::fs::read_to_string(&path).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert!(first["ranked_items"].is_array() && first["log_probs"].is_array());
}

#[test]
fn scoring_fine_tune_runs_and_impressions_hold_one_positive() {
    let (_, users, vocab, codes) = small_world();
    let mut model = tiny_model(&vocab, 8);
    let split = leave_one_out(&users);
    let losses = train_scoring(&mut model, &vocab, &codes, &split.train, &ScoringTrainConfig { epochs: 2, ..Default::default() }).unwrap();
    assert_eq!(losses.len(), 2);
    let imps = score_impressions(&model, &vocab, &codes, &split.test, 3, 5, 1).unwrap();
    for imp in &imps {
        assert_eq!(imp.candidates.len(), 4);
        assert_eq!(imp.candidates.iter().filter(|c| c.clicked).count(), 1);
        assert!(imp.candidates.iter().all(|c| c.score > 0.0 && c.score < 1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn tree_membership_matches_the_column_set(seed in 0u64..1000, n in 1usize..30, probe in prop::collection::vec(1u32..=6, 3)) {
        let cols = random_columns(n, 3, 6, seed);
        let tree = CodeTree::from_columns(3, &cols).unwrap();
        prop_assert_eq!(tree.leaf_count(), n);
        for (item, c) in &cols {
            prop_assert_eq!(tree.lookup(c), Some(item.as_str()));
        }
        let member = cols.iter().any(|(_, c)| *c == probe);
        prop_assert_eq!(tree.contains(&probe), member);
        let paths: BTreeSet<SemanticId> = tree.paths().into_iter().map(|p| p.0).collect();
        let want: BTreeSet<SemanticId> = cols.iter().map(|c| c.1.clone()).collect();
        prop_assert_eq!(paths, want);
    }
}
