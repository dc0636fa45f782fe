//! Briefly trains an AC model on the bundled corpus, then fills the blanks
//! of a template with per-position argmax predictions. CAR infilling of the
//! same template fills left to right with the cache.
//!
//! ```text
//! cargo run --release --example infill -- [steps]
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracformer::cli::corpus_sequences;
use tracformer::data::{BatchIterator, MASK_ID};
use tracformer::infer::{ac_infill, car_generate};
use tracformer::masking::{MaskSample, MaskStrategy, SpanDistribution};
use tracformer::model::{Model, ModelConfig};
use tracformer::train::{train_loop, Objective, TrainConfig};

fn main() -> tracformer::Result<()> {
    let steps = std::env::args().nth(1).map_or(Ok(300), |s| s.parse()).expect("steps is a number");
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/tiny_corpus.txt");
    let (seqs, vocab) = corpus_sequences(&corpus, 64, true, None)?;
    let template = "The ___ was ____ by the ______.";

    let mut models = Vec::new();
    for objective in [Objective::Ac, Objective::Car] {
        let mut model = Model::<f32>::init(ModelConfig::desk(vocab.size(), MASK_ID), 1)?;
        let cfg = TrainConfig {
            objective,
            mask: MaskStrategy::Span { ratio: 0.3, span: SpanDistribution::Geometric { mean: 3.0 } },
            batch_size: 8,
            steps,
            warmup: 30,
            lr_init: 2e-3,
            lr_final: 2e-4,
            ..TrainConfig::default()
        };
        let mut batches = BatchIterator::new(seqs.clone(), cfg.batch_size, 0)?;
        let trace = train_loop(&mut model, &mut batches, &cfg, &mut |_, _| Ok(()))?;
        println!("{objective:?}: final loss {:.3}", trace.last().map_or(f64::NAN, |r| r.loss));
        models.push(model);
    }

    let blank: Vec<bool> = template.chars().map(|c| c == '_').collect();
    let x: Vec<u32> = template
        .chars()
        .map(|c| if c == '_' { Ok(MASK_ID) } else { vocab.encode(&c.to_string()).map(|v| v[0]) })
        .collect::<tracformer::Result<_>>()?;
    let sample = MaskSample::from_mask(&blank);
    println!("template {template}");
    println!("AC       {}", vocab.decode(&ac_infill(&models[0], &x, &sample)?));
    let gen = car_generate(&models[1], &x, &sample, 0.0, &mut ChaCha8Rng::seed_from_u64(0))?;
    println!("CAR      {}", vocab.decode(&gen.tokens));
    Ok(())
}
