#![allow(dead_code)]

use store_core::autograd::Tape;
use store_core::backbone::{Backbone, BackboneConfig, LoraTargets};
use store_core::params::{ParamId, ParamStore};
use store_core::vocab::Vocabulary;

pub fn tiny_vocab(v: usize, k: usize) -> Vocabulary {
    let words = "the quick brown fox jumps over lazy dog river stone cloud green blue red tall short";
    let mut vocab = Vocabulary::build([words], 1, 1000).unwrap();
    vocab
        .register_specials(v, &["reconstruct_title", "reconstruct_abstract", "generate_category", "rec", "align", "score"], k)
        .unwrap();
    vocab
}

pub fn tiny_config(vocab: &Vocabulary, dim: usize, lora_rank: usize) -> BackboneConfig {
    BackboneConfig {
        layers: 2,
        model_dim: dim,
        heads: 2,
        ffn_dim: 2 * dim,
        max_seq_len: 64,
        vocab_size: vocab.len(),
        lora_rank,
        lora_targets: LoraTargets::QueryValue,
        dropout: 0.0,
    }
}

/// Gives every LoRA `up` matrix small random values so adapters are live.
pub fn randomize_lora(model: &mut Backbone, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for id in model.params.ids().collect::<Vec<_>>() {
        if model.params.name(id).ends_with(".up") {
            for x in model.params.get_mut(id).data_mut() {
                *x = rng.random_range(-0.3..0.3);
            }
        }
    }
}

/// Relative error whose denominator never drops below the gradient size at
/// which an f32 central difference is pure rounding noise: a loss of
/// magnitude `loss` is only resolved to about `eps * loss`, so differences
/// below `eps * loss / h` carry no signal and the floor is 100x that.
pub fn rel_err(analytic: f64, numeric: f64, loss: f64, h: f64) -> f64 {
    let floor = 100.0 * f32::EPSILON as f64 * loss.abs().max(1.0) / h;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central finite difference of `loss` w.r.t. element `flat` of parameter `id`.
pub fn central_difference(
    store: &mut ParamStore,
    id: ParamId,
    flat: usize,
    h: f32,
    loss: &mut dyn FnMut(&ParamStore) -> f64,
) -> f64 {
    let orig = store.get(id).data()[flat];
    store.get_mut(id).data_mut()[flat] = orig + h;
    let up = loss(store);
    store.get_mut(id).data_mut()[flat] = orig - h;
    let down = loss(store);
    store.get_mut(id).data_mut()[flat] = orig;
    let actual_h = ((orig + h) as f64) - ((orig - h) as f64);
    (up - down) / actual_h
}

pub fn new_tape() -> Tape {
    Tape::new()
}

pub fn catalog_vocab(items: &[store_core::tokenizer::ItemRecord], v: usize, k: usize) -> Vocabulary {
    let texts: Vec<String> = items.iter().flat_map(|i| i.attributes.iter().map(|(_, t)| t.clone())).collect();
    let mut vocab = Vocabulary::build(texts.iter().map(String::as_str), 1, 100_000).unwrap();
    let tasks = store_core::tokenizer::task_names(items);
    let names: Vec<&str> = tasks.iter().map(String::as_str).collect();
    vocab.register_specials(v, &names, k).unwrap();
    vocab
}

pub fn synthetic_items(n: usize, seed: u64) -> Vec<store_core::tokenizer::ItemRecord> {
    let spec = store_core::corpus::SyntheticSpec { n_items: n, n_users: 1, seed, ..Default::default() };
    store_core::corpus::generate_synthetic(&spec).unwrap().items
}
