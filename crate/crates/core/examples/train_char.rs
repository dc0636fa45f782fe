//! Trains a small character-level Tracformer on the bundled corpus with the
//! CAR objective, reports held-out perplexity at a few context ratios and
//! samples continuations of a prompt.
//!
//! ```text
//! cargo run --release --example train_char -- [steps]
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracformer::cli::corpus_sequences;
use tracformer::data::{BatchIterator, MASK_ID};
use tracformer::eval::conditional_ppl;
use tracformer::infer::car_generate;
use tracformer::masking::{MaskSample, MaskStrategy, SpanDistribution};
use tracformer::model::{Model, ModelConfig};
use tracformer::train::{train_loop, Objective, TrainConfig};

fn main() -> tracformer::Result<()> {
    let steps = std::env::args().nth(1).map_or(Ok(400), |s| s.parse()).expect("steps is a number");
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/tiny_corpus.txt");
    let (seqs, vocab) = corpus_sequences(&corpus, 64, true, None)?;
    let (train, held_out) = seqs.split_at(seqs.len() * 9 / 10);

    let mut model = Model::<f32>::init(ModelConfig::desk(vocab.size(), MASK_ID), 0)?;
    println!("{} parameters, {} training rows", model.parameter_count(), train.len());
    let cfg = TrainConfig {
        objective: Objective::Car,
        mask: MaskStrategy::Span { ratio: 0.5, span: SpanDistribution::Geometric { mean: 4.0 } },
        batch_size: 8,
        steps,
        warmup: 50,
        lr_init: 2e-3,
        lr_final: 2e-4,
        ..TrainConfig::default()
    };
    let mut batches = BatchIterator::new(train.to_vec(), cfg.batch_size, 0)?;
    train_loop(&mut model, &mut batches, &cfg, &mut |r, _| {
        if r.step % 50 == 0 {
            println!("step {:>5}  loss {:.4}  lr {:.2e}", r.step, r.loss, r.lr);
        }
        Ok(())
    })?;

    for context in [0.1, 0.5, 0.9] {
        let strategy = MaskStrategy::Span { ratio: 1.0 - context, span: SpanDistribution::Geometric { mean: 4.0 } };
        let report = conditional_ppl(&model, held_out, Objective::Car, &strategy, 5, 4)?;
        println!("context {context:.1}: perplexity {:.3}", report.perplexity);
    }

    let prompt = vocab.encode("The ")?;
    let mut x = vec![MASK_ID; 48];
    x[..prompt.len()].copy_from_slice(&prompt);
    let blank: Vec<bool> = (0..x.len()).map(|i| i >= prompt.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..3 {
        let gen = car_generate(&model, &x, &MaskSample::from_mask(&blank), 0.8, &mut rng)?;
        println!("{}", vocab.decode(&gen.tokens).replace('\n', " "));
    }
    Ok(())
}
