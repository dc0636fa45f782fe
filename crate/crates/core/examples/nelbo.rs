//! Conditional NELBO of an absorbing diffusion with an exact-conditional
//! denoiser. The bound is tight, so both estimates land on `-log p(x_F | x_S)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracformer::diffusion::{conditional_nelbo_exact_small, conditional_nelbo_mc, LogLinear, TableDenoiser};
use tracformer::joint::JointTable;

fn main() -> tracformer::Result<()> {
    let joint = JointTable::random(5, 3, &mut ChaCha8Rng::seed_from_u64(4))?;
    let x = [0u32, 2, 1, 1, 0];
    let given = [1usize, 4];
    let free: Vec<usize> = (1..=5).filter(|t| !given.contains(t)).collect();
    let target = -joint.log_conditional(&x, &free, &given)?;
    let den = TableDenoiser { joint };
    let mc = conditional_nelbo_mc(&den, &x, &given, &LogLinear, 20_000, 0, 4)?;
    let exact = conditional_nelbo_exact_small(&den, &x, &given, &LogLinear, 201)?;
    println!("-log p     {target:.6}");
    println!("quadrature {exact:.6}");
    println!("monte carlo {:.4} +- {:.4} ({} samples)", mc.nelbo, mc.stderr, mc.n);
    Ok(())
}
