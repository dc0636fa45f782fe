//! Order-consistency gap of an untrained AC model against a true joint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracformer::eval::{order_consistency_gap, AcConditional};
use tracformer::joint::JointTable;
use tracformer::model::{Model, ModelConfig};

fn main() -> tracformer::Result<()> {
    let cfg = ModelConfig { max_len: 5, layers: 3, d_model: 32, heads: 4, n_max: 4, vocab_size: 8, mask_token: 1, dropout: 0.0, allow_shallow: false };
    let model = Model::<f64>::init(cfg, 9)?;
    let x = [3u32, 4, 5, 6, 7];
    let g = order_consistency_gap(&AcConditional { model: &model }, &x, None)?;
    let best = g.log_likelihoods.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let worst = g.log_likelihoods.iter().cloned().fold(f64::INFINITY, f64::min);
    println!("model: {} orders, log-lik in [{worst:.4}, {best:.4}], gap {:.4e}", g.orders.len(), g.gap);

    let joint = JointTable::random(5, 3, &mut ChaCha8Rng::seed_from_u64(1))?;
    let g = order_consistency_gap(&joint, &[0, 1, 2, 1, 0], None)?;
    println!("joint: gap {:.2e}", g.gap);
    Ok(())
}
