#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tracformer::model::{Model, ModelConfig, SlotKind};
use tracformer::tensor::Scalar;

pub fn config(len: usize, layers: usize, d_model: usize, heads: usize, n_max: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        max_len: len,
        layers,
        d_model,
        heads,
        n_max,
        vocab_size: vocab,
        mask_token: 1,
        dropout: 0.0,
        allow_shallow: false,
    }
}

/// Every parameter redrawn: weights with `std`, biases with `std / 2`,
/// gains around 1. Gives logits of order one, unlike the training init.
pub fn random_model<F: Scalar>(cfg: ModelConfig, std: f64, seed: u64) -> Model<F> {
    let mut model = Model::<F>::zeros(cfg).unwrap();
    let kinds: Vec<SlotKind> = model.params.named().iter().map(|(_, k, _)| *k).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Normal::new(0.0, std).unwrap();
    let b = Normal::new(0.0, std / 2.0).unwrap();
    for (slot, kind) in model.params.slots_mut().into_iter().zip(kinds) {
        for v in slot.data_mut() {
            *v = F::of(match kind {
                SlotKind::Weight => w.sample(&mut rng),
                SlotKind::Bias => b.sample(&mut rng),
                SlotKind::Gain => 1.0 + b.sample(&mut rng),
            });
        }
    }
    model
}

/// Random non-reserved tokens.
pub fn random_tokens<R: Rng>(len: usize, vocab: usize, rng: &mut R) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(3..vocab as u32)).collect()
}

/// Periodic toy sequences over `symbols` non-reserved ids: a random word of
/// length 3 to 6 repeated, each position replaced by a random symbol with
/// probability `noise`.
pub fn periodic_sequences(count: usize, len: usize, symbols: u32, noise: f64, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let period = rng.random_range(3..=6);
            let word: Vec<u32> = (0..period).map(|_| 3 + rng.random_range(0..symbols)).collect();
            (0..len)
                .map(|t| if rng.random::<f64>() < noise { 3 + rng.random_range(0..symbols) } else { word[t % period] })
                .collect()
        })
        .collect()
}
