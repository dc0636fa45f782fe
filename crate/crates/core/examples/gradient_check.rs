//! Compares tape gradients of the CAR loss with central differences on a
//! small double-precision model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracformer::masking::{sample_span_mask, MaskSample, SpanDistribution};
use tracformer::model::{Model, ModelConfig};
use tracformer::tensor::Tape;
use tracformer::train::{batch_loss_on_tape, Objective};

fn loss(model: &Model<f64>, x: &[Vec<u32>], s: &[MaskSample]) -> tracformer::Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let (loss, _) = batch_loss_on_tape(model, &mut tape, &bound, Objective::Car, x, s, None, None)?;
    let grads = tape.backward(loss)?;
    let flat = bound.named().iter().map(|(_, _, &v)| grads.get_or_zeros(v).into_data()).collect();
    Ok((tape.value(loss).item()?, flat))
}

fn main() -> tracformer::Result<()> {
    let cfg = ModelConfig { max_len: 8, layers: 3, d_model: 16, heads: 2, n_max: 2, vocab_size: 9, mask_token: 1, dropout: 0.0, allow_shallow: false };
    let mut model = Model::<f64>::init(cfg, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<Vec<u32>> = (0..2).map(|_| (0..8).map(|_| rng.random_range(3..9)).collect()).collect();
    let s = vec![sample_span_mask(8, 0.5, SpanDistribution::Geometric { mean: 2.0 }, &mut rng)?; 2];
    let (_, analytic) = loss(&model, &x, &s)?;
    let names: Vec<String> = model.params.named().into_iter().map(|(n, _, _)| n).collect();
    let h = 1e-5;
    for _ in 0..12 {
        let slot = rng.random_range(0..names.len());
        let k = rng.random_range(0..analytic[slot].len());
        let orig = model.params.slots_mut()[slot].data()[k];
        model.params.slots_mut()[slot].data_mut()[k] = orig + h;
        let plus = loss(&model, &x, &s)?.0;
        model.params.slots_mut()[slot].data_mut()[k] = orig - h;
        let minus = loss(&model, &x, &s)?.0;
        model.params.slots_mut()[slot].data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        println!("{:<28} {:>+.6e} {:>+.6e}", format!("{}[{k}]", names[slot]), analytic[slot][k], numeric);
    }
    Ok(())
}
