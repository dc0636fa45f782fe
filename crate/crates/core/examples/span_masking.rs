//! Draws span masks with a few length distributions and shows them inline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracformer::masking::{sample_mixed_mask, sample_span_mask, SpanDistribution};

fn main() -> tracformer::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let len = 72;
    let dists = [
        ("geometric(3)", SpanDistribution::Geometric { mean: 3.0 }),
        ("geometric(12)", SpanDistribution::Geometric { mean: 12.0 }),
        ("dlogistic(6, 1)", SpanDistribution::DLogistic { mean: 6.0, sigma: 1.0 }),
    ];
    for (name, dist) in dists {
        println!("{name}");
        for _ in 0..3 {
            let s = sample_span_mask(len, 0.4, dist, &mut rng)?;
            let line: String = (1..=len).map(|t| if s.is_blank(t) { '_' } else { 'x' }).collect();
            println!("  {line}  spans={}", s.spans.len());
        }
    }
    println!("mixed");
    for _ in 0..4 {
        let d = sample_mixed_mask(len, &mut rng)?;
        let line: String = (1..=len).map(|t| if d.sample.is_blank(t) { '_' } else { 'x' }).collect();
        println!("  {line}  {:?}", d.branch);
    }
    Ok(())
}
