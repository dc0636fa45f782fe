//! Greedy CAR decoding with the key/value cache versus recomputing the full
//! forward pass at every step.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracformer::infer::car_generate;
use tracformer::masking::{apply_mask, MaskSample};
use tracformer::model::{Model, ModelConfig};

fn main() -> tracformer::Result<()> {
    let len = 64;
    let model = Model::<f32>::init(ModelConfig::desk(40, 1), 3)?;
    let x = vec![3u32; len];
    let sample = MaskSample::full(len);

    let start = Instant::now();
    let gen = car_generate(&model, &x, &sample, 0.0, &mut ChaCha8Rng::seed_from_u64(0))?;
    let cached = start.elapsed();

    let start = Instant::now();
    let suffix = apply_mask(&x, &sample.blank_ids, 1)?;
    let mut prefix = vec![1u32; len];
    let mut worst = 0.0f32;
    for step in &gen.steps {
        let logits = model.forward(&prefix, &suffix)?;
        for (a, b) in logits.row(step.position - 1).iter().zip(&step.logits) {
            worst = worst.max((a - b).abs());
        }
        prefix[step.position - 1] = step.token;
    }
    let full = start.elapsed();
    println!("cached {cached:?}, recomputed {full:?}, max logit difference {worst:e}");
    Ok(())
}
